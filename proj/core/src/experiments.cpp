#include "tcdsr/experiments.hpp"

#include "tcdsr/hashing.hpp"
#include "tcdsr/plot.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <functional>

namespace tcdsr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

json SuiteResult::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json j{{"label", r.label}, {"seed", r.seed}, {"config_hash", r.config_hash}};
    if (r.report) j["report"] = r.report->to_json();
    if (!r.error.empty()) j["error"] = r.error;
    rows_json.push_back(std::move(j));
  }
  return {{"suite", suite}, {"base_config_hash", base_hash}, {"seeds", seeds}, {"rows", rows_json},
          {"summary", summary}};
}

std::optional<double> SuiteResult::mrr(const std::string& label, std::uint64_t seed, const std::string& domain) const {
  for (const auto& r : rows) {
    if (r.label == label && r.seed == seed && r.report && r.report->domains.contains(domain)) {
      return r.report->domains.at(domain).mrr;
    }
  }
  return std::nullopt;
}

double SuiteResult::mean_mrr(const std::string& label, const std::string& domain) const {
  double sum = 0;
  int n = 0;
  for (auto seed : seeds) {
    if (auto m = mrr(label, seed, domain)) {
      sum += *m;
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error(fmt::format("suite {}: no completed run for {}", suite, label));
  return sum / n;
}

std::size_t SuiteResult::failures() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.error.empty() ? 0 : 1;
  return n;
}

namespace {

using Table = std::map<std::string, eval::DomainMetrics>;

/// Field-wise mean of the completed reports' tables, counts summed.
Table mean_table(const std::vector<const Table*>& tables) {
  Table out;
  std::map<std::string, int> n;
  for (const auto* t : tables) {
    for (const auto& [domain, m] : *t) {
      auto& o = out[domain];
      o.mrr += m.mrr;
      o.ndcg5 += m.ndcg5;
      o.ndcg10 += m.ndcg10;
      o.hr1 += m.hr1;
      o.hr5 += m.hr5;
      o.hr10 += m.hr10;
      o.count += m.count;
      ++n[domain];
    }
  }
  for (auto& [domain, o] : out) {
    const double k = n[domain];
    o.mrr /= k;
    o.ndcg5 /= k;
    o.ndcg10 /= k;
    o.hr1 /= k;
    o.hr5 /= k;
    o.hr10 /= k;
  }
  return out;
}

std::vector<const Table*> tables_of(const SuiteResult& r, const std::string& label) {
  std::vector<const Table*> out;
  for (const auto& row : r.rows) {
    if (row.label == label && row.report) out.push_back(&row.report->domains);
  }
  return out;
}

json table_json(const Table& t) {
  json j = json::object();
  for (const auto& [domain, m] : t) j[domain] = m.to_json();
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

using Configure = std::function<void(RunConfig&)>;

struct Arm {
  std::string label;
  Configure configure;
};

/// Runs every arm for every seed; a failing sub-run is recorded and skipped.
void run_arms(SuiteResult& result, const RunConfig& base, const Workspace& ws, const std::vector<Arm>& arms,
              bool bucketed) {
  for (const auto& arm : arms) {
    for (auto seed : result.seeds) {
      SuiteRow row;
      row.label = arm.label;
      row.seed = seed;
      try {
        RunConfig cfg = base;
        cfg.model.seed = seed;
        arm.configure(cfg);
        cfg.validate();
        row.config_hash = cfg.hash();
        spdlog::info("suite {}: {} seed {} ({})", result.suite, arm.label, seed, row.config_hash);
        run_all(cfg, ws);
        row.report = bucketed ? evaluate(cfg, ws, true) : evaluate(cfg, ws);
      } catch (const std::exception& e) {
        row.error = e.what();
        spdlog::error("suite {}: {} seed {} failed: {}", result.suite, arm.label, seed, e.what());
      }
      result.rows.push_back(std::move(row));
    }
  }
}

std::vector<plot::Series> mrr_series(const SuiteResult& r, const std::vector<std::string>& labels) {
  std::vector<plot::Series> series;
  for (const std::string domain : {"A", "B", "overall"}) {
    plot::Series s{domain, {}};
    for (const auto& label : labels) {
      const auto t = mean_table(tables_of(r, label));
      s.values.push_back(t.contains(domain) ? t.at(domain).mrr : 0.0);
    }
    series.push_back(std::move(s));
  }
  return series;
}

void summarize_arms(SuiteResult& r, const std::vector<Arm>& arms, const std::string& key) {
  json rows = json::array();
  for (const auto& arm : arms) {
    const auto t = mean_table(tables_of(r, arm.label));
    for (const auto& [domain, m] : t) {
      json j = m.to_json();
      j[key] = arm.label;
      j["domain"] = domain;
      rows.push_back(std::move(j));
    }
  }
  r.summary = {{"seed_mean", rows}};
}

}  // namespace

SuiteResult run_experiment_suite(std::string_view name, const RunConfig& base, const Workspace& ws,
                                 const SuiteOptions& options) {
  if (options.seeds.empty()) throw std::invalid_argument("suite: at least one seed required");
  SuiteResult r;
  r.suite = std::string(name);
  r.seeds = options.seeds;
  r.base_hash = base.hash();
  const json identity{{"suite", r.suite}, {"base", base.to_json()}, {"seeds", r.seeds}};
  r.dir = ws.out / "suites" / fmt::format("{}-{}", r.suite, sha256_hex(identity.dump()).substr(0, 12));
  fs::create_directories(r.dir);
  write_json(r.dir / "config.json", base.to_json());

  std::vector<Arm> arms;
  std::string svg;
  if (name == "ablation") {
    for (auto v : model::kVariants) {
      arms.push_back({std::string(model::variant_name(v)), [v](RunConfig& c) {
                        c.model.variant = v;
                        c.model.semantic_only = model::SemanticOnly::kOff;
                      }});
    }
    run_arms(r, base, ws, arms, false);
    summarize_arms(r, arms, "variant");
    std::vector<std::string> labels;
    for (const auto& a : arms) labels.push_back(a.label);
    svg = plot::bar_chart_svg("Ablation (seed-mean MRR)", labels, mrr_series(r, labels), "MRR");
  } else if (name == "noise") {
    for (double ratio : kNoiseRatios) {
      arms.push_back({fmt::format("noise={}", ratio), [ratio](RunConfig& c) { c.noise = ratio; }});
    }
    run_arms(r, base, ws, arms, false);
    summarize_arms(r, arms, "noise");
    std::vector<std::string> labels;
    for (double ratio : kNoiseRatios) labels.push_back(fmt::format("{:.0f}%", 100 * ratio));
    std::vector<std::string> arm_labels;
    for (const auto& a : arms) arm_labels.push_back(a.label);
    auto series = mrr_series(r, arm_labels);
    svg = plot::bar_chart_svg("Noise injection (seed-mean MRR)", labels, series, "MRR");
  } else if (name == "semantic") {
    for (auto mode : {model::SemanticOnly::kTitleOnly, model::SemanticOnly::kTitleTime, model::SemanticOnly::kCfEnhance}) {
      arms.push_back({std::string(model::semantic_only_name(mode)), [mode](RunConfig& c) { c.model.semantic_only = mode; }});
    }
    run_arms(r, base, ws, arms, false);
    summarize_arms(r, arms, "mode");
    std::vector<std::string> labels;
    for (const auto& a : arms) labels.push_back(a.label);
    svg = plot::bar_chart_svg("Semantic-only (seed-mean MRR)", labels, mrr_series(r, labels), "MRR");
  } else if (name == "buckets") {
    arms.push_back({std::string(model::variant_name(base.model.variant)), [](RunConfig&) {}});
    run_arms(r, base, ws, arms, true);
    std::map<int, std::vector<const Table*>> per_bucket;
    for (const auto& row : r.rows) {
      if (!row.report || !row.report->buckets) continue;
      for (const auto& [b, t] : *row.report->buckets) per_bucket[b].push_back(&t);
    }
    json buckets = json::object();
    std::vector<std::string> labels;
    std::vector<plot::Series> series{{"A", {}}, {"B", {}}, {"overall", {}}};
    for (const auto& [b, tables] : per_bucket) {
      const auto t = mean_table(tables);
      buckets[std::to_string(b)] = table_json(t);
      labels.push_back(fmt::format("bucket {}", b));
      for (auto& s : series) s.values.push_back(t.contains(s.name) ? t.at(s.name).mrr : 0.0);
    }
    r.summary = {{"seed_mean", buckets}};
    svg = plot::bar_chart_svg("Interval-variance buckets (seed-mean MRR)", labels, series, "MRR");
  } else if (name == "intervals") {
    prepare(base, ws);
    const auto data = load_prepared(base, ws);
    const auto ratios = ingest::analyze_intervals(data.log);
    static const std::array<std::string, 3> kBands{"<= 1 day", "1 day - 1 week", "> 1 week"};
    json out = json::object();
    std::vector<plot::Series> series;
    for (Domain d : kDomains) {
      const auto k = index_of(d);
      plot::Series s{std::string(domain_name(d)), {0, 0, 0}};
      json j{{"gaps", ratios.gap_counts[k]}};
      if (ratios.ratios[k]) {
        for (std::size_t b = 0; b < 3; ++b) {
          s.values[b] = (*ratios.ratios[k])[b];
          j[kBands[b]] = (*ratios.ratios[k])[b];
        }
      } else {
        j["ratios"] = nullptr;
      }
      out[s.name] = j;
      series.push_back(std::move(s));
    }
    r.summary = {{"interval_ratios", out}};
    svg = plot::bar_chart_svg("Same-domain interval ratios", {kBands.begin(), kBands.end()}, series, "proportion");
  } else {
    throw std::invalid_argument(fmt::format("unknown suite \"{}\"; valid: ablation, noise, buckets, semantic, intervals", name));
  }

  write_json(r.dir / "results.json", r.to_json());
  write_text(r.dir / (r.suite + ".svg"), svg);
  if (const auto failed = r.failures(); failed > 0) {
    throw std::runtime_error(fmt::format("suite {}: {} of {} sub-runs failed; partial results in {}", r.suite, failed,
                                         r.rows.size(), r.dir.string()));
  }
  return r;
}

}  // namespace tcdsr::pipeline
