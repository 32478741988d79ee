// Acceptance gate: one PASS/FAIL line per criterion; exit status 1 when any
// criterion fails.

#include "support.hpp"
#include "tcdsr/eval.hpp"
#include "tcdsr/evolution.hpp"
#include "tcdsr/experiments.hpp"
#include "tcdsr/pipeline.hpp"
#include "tcdsr/semantic.hpp"
#include "tcdsr/trainer.hpp"
#include "tcdsr/transfer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace {

using namespace tcdsr;
using ag::Matrix;
using ag::Var;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

// ---------------------------------------------------------------------------
// 1. Gradients

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.max_len = 4;
  c.d_mid = 6;
  c.time_buckets = 8;
  c.gap_buckets = 16;
  c.top_k = 2;
  c.lambda_ode = 0.5;
  c.lambda_sem = 0.5;
  return c;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  constexpr int d = 8;
  const nn::StackedLayout layout{4, {4, 3}};
  const std::vector<double> gaps{0.0, 0.3, 0.8, 0.1, 0.0, 0.6, 0.4, 0.0};
  std::vector<std::pair<std::string, testing::GradReport>> reports;

  {
    ag::ParameterStore store;
    Rng rng(50);
    auto& emb = store.add("emb", random_matrix(8, d, rng, 0.5));
    reports.emplace_back("L_L", testing::grad_check(store, [&](ag::Graph& g) {
      return evolution::long_term_reg(g, g.param(emb), layout, gaps);
    }, "", 40));
    reports.emplace_back("L_S", testing::grad_check(store, [&](ag::Graph& g) {
      Var e = g.param(emb);
      return evolution::short_term_reg(g, ag::tanh(e), e, layout, 0.2);
    }, "", 40));
  }
  {
    ag::ParameterStore store;
    Rng rng(11);
    semantic::Adapter adapter(store, "adapter", 5, d, rng);
    const Matrix raw = random_matrix(6, 5, rng);
    reports.emplace_back("L_cl", testing::grad_check(store, [&](ag::Graph& g) {
      Var z = adapter(g, g.constant(raw.topRows(2)));
      Var zs = adapter(g, g.constant(raw.middleRows(2, 2)));
      Var zb = adapter(g, g.constant(raw.bottomRows(2)));
      return semantic::counterfactual_loss(g, z, zs, zb, 0.2, 1);
    }, "", 20));
  }
  {
    ag::ParameterStore store;
    Rng rng(8);
    transfer::PatternEncoder enc(store, "pattern", d, 2, 8, 4, rng);
    transfer::TransferGate gate(store, "gate", d, rng);
    const transfer::TemporalPattern a{{Domain::kA, 0}, {Domain::kB, 2}, {Domain::kA, 5}, {Domain::kB, 3}};
    const transfer::TemporalPattern m{{Domain::kB, 0}, {Domain::kA, 7}, {Domain::kA, 1}};
    const Matrix r = random_matrix(2, d, rng);
    reports.emplace_back("transfer", testing::grad_check(store, [&](ag::Graph& g) {
      const transfer::TemporalPattern* ptrs[] = {&a, &m};
      Var u = enc.encode_prefixes(g, ptrs, 4);
      Var w = gate.weight(g, Domain::kA, ag::slice(u, 0, 4, 0, d), ag::slice(u, 4, 4, 0, d),
                          g.constant(r.row(0).replicate(4, 1)), g.constant(r.row(1).replicate(4, 1)));
      return ag::sum(ag::mul(w, w));
    }, "", 8));
  }
  {
    const auto log = testing::random_log(2, 6, 6, 17);
    const auto users = ingest::build_user_sequences(log, 4);
    const std::array<int, 2> counts{log.item_count(Domain::kA), log.item_count(Domain::kB)};
    semantic::StubEncoder stub(12);
    const auto c = toy_config();
    train::SemanticSource src(stub, log, c.prompt_style());
    model::Model m(c, model::FeatureSpace::fit(users, counts, c), stub.dim());
    m.set_projection(train::fit_projection(users, src, m.mid_dim()));
    model::BatchInput in;
    for (int b = 0; b < 2; ++b) {
      const auto& u = users[static_cast<std::size_t>(b)];
      in.users.push_back(&u);
      std::array<const Matrix*, 3> sem{};
      for (View v : kViews) sem[index_of(v)] = &src.prefixes(u, v);
      in.semantic.push_back(sem);
      for (auto q : train::causal_queries(u)) {
        q.user = b;
        in.queries.push_back(q);
      }
      for (View v : kViews) {
        if (auto cf = src.counterfactual(u, v, c.alpha_small, c.alpha_big, 5)) {
          cf->user = b;
          in.counterfactuals.push_back(std::move(*cf));
        }
      }
    }
    reports.emplace_back("objective", testing::grad_check(m.store(), [&](ag::Graph& g) {
      return m.forward(g, in).total;
    }, "", 4));
  }

  const double elapsed = seconds_since(t0);
  bool pass = elapsed < 60.0;
  std::string detail;
  for (const auto& [name, r] : reports) {
    pass = pass && r.checked > 0 && r.max_rel < 1e-4;
    detail += fmt::format("{} {:.1e} ({}), ", name, r.max_rel, r.checked);
  }
  return {pass, detail + fmt::format("{:.1f}s", elapsed)};
}

// ---------------------------------------------------------------------------
// 2. Euler step

Outcome ode() {
  constexpr int d = 8;
  Rng rng(4);
  const Matrix a = random_matrix(d, d, rng, 0.3);
  const evolution::Derivative linear = [&a](ag::Graph& g, Var x) {
    return ag::matmul(ag::slice(x, 0, x.rows(), 0, d), g.constant(a));
  };
  const Matrix h0 = random_matrix(3, d, rng);
  Matrix dt(3, 1);
  dt << 0.25, 0.8, 1.5;
  ag::Graph g;
  const Matrix one = evolution::ode_evolve(g, g.constant(h0), g.constant(dt), linear).value();
  const Matrix closed = h0 + dt.asDiagonal() * (h0 * a);
  const bool exact = one == closed;

  auto substeps = [&](const Matrix& h, double step, int n) {
    Matrix x = h;
    for (int k = 0; k < n; ++k) x = x + (step / n) * (x * a);
    return x;
  };
  const Matrix h1 = random_matrix(1, d, rng);
  auto error = [&](double step) {
    ag::Graph gr;
    const Matrix y = evolution::ode_evolve(gr, gr.constant(h1), gr.constant(Matrix::Constant(1, 1, step)), linear)
                         .value();
    return (y - substeps(h1, step, 64)).norm();
  };
  bool ratios_ok = true;
  std::string detail = fmt::format("closed form {}, ratios", exact ? "exact" : "differs");
  for (double step : {0.5, 0.25, 0.125}) {
    const double ratio = error(step) / error(step / 2);
    ratios_ok = ratios_ok && ratio >= 3.5 && ratio <= 4.5;
    detail += fmt::format(" {:.3f}", ratio);
  }
  return {exact && ratios_ok, detail};
}

// ---------------------------------------------------------------------------
// 3. Metric oracle

struct OracleRow {
  double mrr = 0, ndcg5 = 0, ndcg10 = 0, hr1 = 0, hr5 = 0, hr10 = 0;
};

/// Sort-based scorer: descending score, the positive after every tie.
OracleRow brute_force(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return x != 0 && y == 0;
  });
  const auto rank = static_cast<double>(std::find(order.begin(), order.end(), 0) - order.begin() + 1);
  OracleRow r;
  r.mrr = 1.0 / rank;
  const double gain = 1.0 / std::log2(rank + 1.0);
  r.ndcg5 = rank <= 5 ? gain : 0.0;
  r.ndcg10 = rank <= 10 ? gain : 0.0;
  r.hr1 = rank <= 1 ? 1.0 : 0.0;
  r.hr5 = rank <= 5 ? 1.0 : 0.0;
  r.hr10 = rank <= 10 ? 1.0 : 0.0;
  return r;
}

bool same_as_oracle(const std::vector<ingest::EvalInstance>& inst, const std::vector<eval::ScoredInstance>& scored) {
  const auto report = eval::build_report(inst, eval::metrics_of(scored, std::nullopt), "oracle");
  std::map<std::string, std::vector<OracleRow>> groups;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto row = brute_force(scored[i].scores);
    groups[std::string(domain_name(inst[i].target_domain))].push_back(row);
    groups["overall"].push_back(row);
  }
  if (groups.size() != report.domains.size()) return false;
  for (const auto& [name, rows] : groups) {
    OracleRow mean;
    for (const auto& r : rows) {
      mean.mrr += r.mrr;
      mean.ndcg5 += r.ndcg5;
      mean.ndcg10 += r.ndcg10;
      mean.hr1 += r.hr1;
      mean.hr5 += r.hr5;
      mean.hr10 += r.hr10;
    }
    const double n = static_cast<double>(rows.size());
    const auto& got = report.domains.at(name);
    if (got.count != rows.size() || got.mrr != mean.mrr / n || got.ndcg5 != mean.ndcg5 / n ||
        got.ndcg10 != mean.ndcg10 / n || got.hr1 != mean.hr1 / n || got.hr5 != mean.hr5 / n ||
        got.hr10 != mean.hr10 / n) {
      return false;
    }
  }
  return true;
}

Outcome metric_oracle() {
  Rng rng(12);
  int fixtures = 0, agreed = 0, ties = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 20);
    const std::size_t candidates = 2 + uniform_index(rng, 30);
    std::vector<ingest::EvalInstance> inst(n);
    std::vector<eval::ScoredInstance> scored(n);
    for (std::size_t i = 0; i < n; ++i) {
      inst[i].target_domain = uniform01(rng) < 0.5 ? Domain::kA : Domain::kB;
      inst[i].history.user_id = fmt::format("u{}", i);
      for (std::size_t k = 0; k < candidates; ++k) {
        scored[i].scores.push_back(static_cast<double>(uniform_index(rng, 5)));
      }
      const auto& s = scored[i].scores;
      ties += std::count(s.begin() + 1, s.end(), s[0]) > 0 ? 1 : 0;
    }
    ++fixtures;
    agreed += same_as_oracle(inst, scored) ? 1 : 0;
  }

  // Scores produced by a trained model through the evaluation path.
  const auto log = testing::random_log(12, 8, 15, 29);
  const auto users = ingest::build_user_sequences(log, 8);
  const std::array<int, 2> counts{log.item_count(Domain::kA), log.item_count(Domain::kB)};
  auto c = toy_config();
  c.max_len = 8;
  c.epochs = 2;
  c.batch_size = 4;
  c.learning_rate = 0.01;
  semantic::StubEncoder stub(12);
  train::SemanticSource src(stub, log, c.prompt_style());
  model::Model m(c, model::FeatureSpace::fit(users, counts, c), stub.dim());
  train::TrainOptions opts;
  opts.expected_candidates = std::nullopt;
  (void)train::train(m, users, {}, &src, opts);
  auto inst = ingest::build_eval_instances(users, counts, 9, 3);
  if (inst.size() > 20) inst.resize(20);
  const auto scored = eval::score_instances(m, &src, inst, 7);
  ++fixtures;
  agreed += same_as_oracle(inst, scored) ? 1 : 0;

  return {agreed == fixtures && ties > 0,
          fmt::format("{}/{} fixtures agree exactly, {} instances with tied positives", agreed, fixtures, ties)};
}

// ---------------------------------------------------------------------------
// 4. Normalization and convexity

Outcome invariants() {
  constexpr int trials = 10000;
  constexpr int d = 8;
  Rng rng(77);
  ag::ParameterStore store;
  evolution::DualEvolution dual(store, "evo", d, rng);
  transfer::TransferGate gate(store, "gate", d, rng);
  double softmax_err = 0;
  long fusion_bad = 0, weight_bad = 0, gate_bad = 0;
  for (int t = 0; t < trials; ++t) {
    const int items = 2 + static_cast<int>(uniform_index(rng, 50));
    const Matrix o = random_matrix(1, d, rng), r = random_matrix(1, d, rng), head = random_matrix(d, items, rng, 2.0);
    const auto p = model::predict(o, r, uniform01(rng), head);
    softmax_err = std::max(softmax_err, std::abs(p.sum() - 1.0));
    ag::Graph gs;
    const Matrix rows = ag::softmax_rows(gs.constant(random_matrix(3, items, rng, 3.0)), Matrix::Zero(3, items)).value();
    softmax_err = std::max(softmax_err, (rows.rowwise().sum().array() - 1.0).abs().maxCoeff());

    const int len = 1 + static_cast<int>(uniform_index(rng, 6));
    std::vector<double> gaps(static_cast<std::size_t>(len));
    for (auto& x : gaps) x = uniform01(rng);
    ag::Graph g;
    const auto out = evolution::roll_sequence(g, g.constant(random_matrix(len, d, rng, 2.0)),
                                              nn::StackedLayout{len, {len}}, gaps, dual);
    const auto& z = out.z.value();
    const auto& hl = out.h_long.value();
    const auto& hs = out.h_short.value();
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double lo = std::min(hl.data()[i], hs.data()[i]);
      const double hi = std::max(hl.data()[i], hs.data()[i]);
      if (z.data()[i] < lo || z.data()[i] > hi) ++fusion_bad;
    }
    const auto& gv = out.gate.value();
    gate_bad += ((gv.array() <= 0.0) || (gv.array() >= 1.0)).count();

    std::array<Var, 4> in;
    for (auto& v : in) v = g.constant(random_matrix(2, d, rng, 1.5));
    for (Domain dom : kDomains) {
      const auto w = gate.weight(g, dom, in[0], in[1], in[2], in[3]).value();
      weight_bad += ((w.array() <= 0.0) || (w.array() >= 1.0)).count();
    }
  }
  const bool pass = softmax_err <= 1e-6 && fusion_bad == 0 && weight_bad == 0 && gate_bad == 0;
  return {pass, fmt::format("{} trials: max |sum - 1| {:.1e}, fusion outside {}, weights outside {}, gates outside {}",
                            trials, softmax_err, fusion_bad, weight_bad, gate_bad)};
}

// ---------------------------------------------------------------------------
// 5. Counterfactual contract

Outcome counterfactual_contract() {
  const model::ModelConfig defaults;
  Rng rng(8);
  bool pass = true;
  std::string detail;
  for (auto [mode, alpha, name] : {std::tuple{semantic::PerturbMode::kSmall, defaults.alpha_small, "small"},
                                   std::tuple{semantic::PerturbMode::kBig, defaults.alpha_big, "big"}}) {
    std::size_t total = 0, replaced = 0, contract = 0;
    while (total < 10000) {
      std::vector<semantic::PromptItem> items;
      std::vector<std::int64_t> gaps;
      for (int k = 0; k < 50; ++k) {
        items.push_back({k % 3 == 0 ? Domain::kB : Domain::kA, fmt::format("item {}", k)});
        if (k > 0) gaps.push_back(static_cast<std::int64_t>(uniform_index(rng, 3ULL * 365 * 86400)));
      }
      const auto p = semantic::make_prompt(std::move(items), gaps, semantic::GapStyle::kTokens);
      const auto q = semantic::perturb(p, mode, alpha, rng);
      for (std::size_t k = 0; k < p.gaps.size(); ++k) {
        ++total;
        if (q.gaps[k] == p.gaps[k]) continue;
        ++replaced;
        const bool same = temporal::token_group(q.gaps[k]) == temporal::token_group(p.gaps[k]);
        contract += (mode == semantic::PerturbMode::kSmall) == same ? 1 : 0;
      }
    }
    const double rate = static_cast<double>(replaced) / static_cast<double>(total);
    pass = pass && contract == replaced && std::abs(rate - alpha) <= 0.02;
    detail += fmt::format("{}: {} tokens, rate {:.4f} (alpha {}), contract {}/{}; ", name, total, rate, alpha,
                          contract, replaced);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 6-9. Desk-scale runs

/// Synthetic defaults (200 users, 500 items per domain, seasonal_frac 0.2,
/// drift 0.3) with a model sized for a single core.
pipeline::RunConfig desk_config(const std::string& variant, std::uint64_t seed) {
  pipeline::RunConfig c;
  c.eval_negatives = 99;
  c.model.dim = 32;
  c.model.batch_size = 16;
  c.model.epochs = 60;
  c.model.learning_rate = 0.001;
  c.model.d_mid = 32;
  c.model.time_buckets = 64;
  c.model.variant = model::parse_variant(variant);
  c.model.seed = seed;
  return c;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct DeskRunner {
  pipeline::Workspace ws;

  double mrr(const pipeline::RunConfig& cfg) const {
    const auto report = pipeline::run_all(cfg, ws);
    return report.mrr();
  }
};

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += fmt::format("{}{:.4f}", out.empty() ? "" : " ", x);
  return out;
}

Outcome ablation(const DeskRunner& runner) {
  const auto t0 = Clock::now();
  std::map<std::string, std::vector<double>> mrr;
  for (const std::string v : {"V1", "V2", "full"}) {
    for (auto s : kSeeds) mrr[v].push_back(runner.mrr(desk_config(v, s)));
  }
  int ordered = 0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    ordered += mrr["full"][i] >= mrr["V2"][i] && mrr["V2"][i] >= mrr["V1"][i] ? 1 : 0;
  }
  const double gain = mean(mrr["full"]) / mean(mrr["V1"]) - 1.0;
  const double elapsed = seconds_since(t0);
  return {ordered >= 2 && gain >= 0.05 && elapsed <= 1800.0,
          fmt::format("V1 [{}] V2 [{}] full [{}]; ordered in {}/3 seeds, full vs V1 {:+.1f}%, {:.0f}s",
                      join(mrr["V1"]), join(mrr["V2"]), join(mrr["full"]), ordered, 100 * gain, elapsed)};
}

Outcome noise(const DeskRunner& runner) {
  std::vector<double> means;
  std::string detail;
  for (double ratio : pipeline::kNoiseRatios) {
    std::vector<double> runs;
    for (auto s : kSeeds) {
      auto cfg = desk_config("full", s);
      cfg.noise = ratio;
      runs.push_back(runner.mrr(cfg));
    }
    means.push_back(mean(runs));
    detail += fmt::format("{:.0f}%: [{}] mean {:.4f}; ", 100 * ratio, join(runs), means.back());
  }
  return {means[0] > means[1] && means[1] > means[2], detail};
}

Outcome semantic_time(const DeskRunner& runner) {
  std::map<std::string, std::vector<double>> mrr;
  for (const std::string mode : {"title_time", "cf_enhance"}) {
    for (auto s : kSeeds) {
      auto cfg = desk_config("full", s);
      cfg.model.semantic_only = model::parse_semantic_only(mode);
      mrr[mode].push_back(runner.mrr(cfg));
    }
  }
  const double tt = mean(mrr["title_time"]);
  const double cf = mean(mrr["cf_enhance"]);
  return {cf >= tt, fmt::format("title_time [{}] mean {:.4f}; cf_enhance [{}] mean {:.4f}", join(mrr["title_time"]),
                                tt, join(mrr["cf_enhance"]), cf)};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const fs::path& work) {
  const auto cfg = desk_config("full", 1);
  std::vector<std::string> reports;
  for (const char* name : {"determinism-a", "determinism-b"}) {
    const auto dir = work / name;
    fs::remove_all(dir);
    const auto ws = pipeline::Workspace::resolve(dir, false);
    (void)pipeline::run_all(cfg, ws);
    reports.push_back(read_bytes(pipeline::RunPaths::of(ws, cfg).report()));
  }
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  return {same, fmt::format("report.json {} bytes, {}", reports[0].size(), same ? "identical" : "different")};
}

// ---------------------------------------------------------------------------
// 10. Defaults

Outcome defaults() {
  const auto j = pipeline::RunConfig{}.to_json().at("model");
  const bool pass = j.at("dim") == 256 && j.at("batch_size") == 256 && j.at("learning_rate") == 0.0005 &&
                    j.at("epochs").get<int>() <= 100 && j.at("lambda_ode") == 0.01 && j.at("lambda_sem") == 0.001;
  return {pass, fmt::format("dim {} batch {} lr {} epochs {} lambda_ode {} lambda_sem {}", j.at("dim").dump(),
                            j.at("batch_size").dump(), j.at("learning_rate").dump(), j.at("epochs").dump(),
                            j.at("lambda_ode").dump(), j.at("lambda_sem").dump())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for desk-scale runs")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria (1-10)");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  fs::create_directories(work);
  const DeskRunner runner{pipeline::Workspace::resolve(fs::path(work) / "desk", false)};

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},
      {"ODE correctness", ode},
      {"metric oracle", metric_oracle},
      {"normalization and convexity invariants", invariants},
      {"counterfactual contract", counterfactual_contract},
      {"ablation ordering", [&] { return ablation(runner); }},
      {"noise degradation", [&] { return noise(runner); }},
      {"semantic time-sensitivity", [&] { return semantic_time(runner); }},
      {"determinism", [&] { return determinism(work); }},
      {"hyperparameter defaults", defaults},
  };

  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && selected.count(id) == 0) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << fmt::format("{} {:2d} {}: {}", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail)
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
