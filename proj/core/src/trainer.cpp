#include "tcdsr/trainer.hpp"

#include "tcdsr/hashing.hpp"
#include "tcdsr/optim.hpp"
#include "tcdsr/random.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tcdsr::train {

std::vector<model::Query> causal_queries(const ingest::UserSequences& user) {
  std::vector<model::Query> out;
  for (int p = 1; p < static_cast<int>(user.seq_m.size()); ++p) {
    const auto& target = user.seq_m[static_cast<std::size_t>(p)];
    if (user.count_through(target.domain, p - 1) < 1) continue;
    out.push_back({0, p, target.domain, target.item});
  }
  return out;
}

semantic::PcaProjection fit_projection(const std::vector<ingest::UserSequences>& train, SemanticSource& semantic,
                                       int mid_dim) {
  Eigen::Index rows = 0;
  for (const auto& u : train) {
    for (View v : kViews) rows += static_cast<Eigen::Index>(u.events(v).size());
  }
  ag::Matrix corpus(rows, semantic.dim());
  Eigen::Index at = 0;
  for (const auto& u : train) {
    for (View v : kViews) {
      const auto& m = semantic.prefixes(u, v);
      corpus.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
  }
  return semantic::PcaProjection::fit(corpus, mid_dim);
}

nlohmann::json TrainHistory::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"improved", e.improved}};
    j["valid_mrr"] = e.valid_mrr ? nlohmann::json(*e.valid_mrr) : nlohmann::json(nullptr);
    epochs_json.push_back(std::move(j));
  }
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) steps_json.push_back({{"epoch", s.epoch}, {"step", s.step}, {"parts", s.parts.to_json()}});
  nlohmann::json j{{"epochs", epochs_json}, {"steps", steps_json}, {"best_epoch", best_epoch},
                   {"stop_reason", stop_reason}};
  j["best_valid_mrr"] = best_valid_mrr ? nlohmann::json(*best_valid_mrr) : nlohmann::json(nullptr);
  if (!divergence.empty()) j["divergence"] = divergence;
  return j;
}

namespace {

struct UserData {
  std::vector<model::Query> queries;
  std::vector<model::CounterfactualInput> counterfactuals;
  std::array<const ag::Matrix*, 3> semantic{};
};

bool parameters_finite(const ag::ParameterStore& store) {
  for (const auto& [name, p] : store) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

}  // namespace

TrainHistory train(model::Model& model, const std::vector<ingest::UserSequences>& train_users,
                   const std::vector<ingest::EvalInstance>& valid, SemanticSource* semantic,
                   const TrainOptions& options) {
  const auto& cfg = model.config();
  if (train_users.empty()) throw std::invalid_argument("train: no training users");
  if (cfg.uses_semantic() && semantic == nullptr) throw std::invalid_argument("train: semantic source required");

  if (cfg.uses_semantic()) {
    model.set_projection(fit_projection(train_users, *semantic, model.mid_dim()));
  }

  std::vector<UserData> data(train_users.size());
  const std::uint64_t cf_seed = derive_seed(cfg.seed, "counterfactual");
  for (std::size_t i = 0; i < train_users.size(); ++i) {
    const auto& u = train_users[i];
    data[i].queries = causal_queries(u);
    if (cfg.uses_semantic()) {
      for (View v : kViews) data[i].semantic[index_of(v)] = &semantic->prefixes(u, v);
    }
    if (cfg.uses_counterfactual()) {
      for (View v : kViews) {
        if (!cfg.behavioral() && v == View::kMixed) continue;
        if (auto c = semantic->counterfactual(u, v, cfg.alpha_small, cfg.alpha_big, cf_seed)) {
          data[i].counterfactuals.push_back(std::move(*c));
        }
      }
    }
  }

  Adam adam({cfg.learning_rate});
  TrainHistory history;
  ParameterSnapshot best = snapshot(model.store());
  int since_best = 0;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  if (valid.empty()) spdlog::warn("train: no validation instances; keeping the last epoch");

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_users.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, fmt::format("epoch/{}", epoch)));
    shuffle_in_place(order, rng);

    double loss_sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size() && history.divergence.empty(); start += batch) {
      model::BatchInput in;
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) {
        const auto& ud = data[order[k]];
        const int b = static_cast<int>(in.users.size());
        in.users.push_back(&train_users[order[k]]);
        if (cfg.uses_semantic()) in.semantic.push_back(ud.semantic);
        for (auto q : ud.queries) {
          q.user = b;
          in.queries.push_back(q);
        }
        for (auto c : ud.counterfactuals) {
          c.user = b;
          in.counterfactuals.push_back(std::move(c));
        }
      }
      if (in.queries.empty()) continue;
      try {
        model.store().zero_grad();
        ag::Graph g;
        const auto res = model.forward(g, in);
        g.backward(res.total);
        adam.step(model.store());
        model.after_update();
        history.steps.push_back({epoch, steps, res.parts});
        loss_sum += res.parts.total;
        ++steps;
      } catch (const std::runtime_error& e) {
        history.divergence = e.what();
      }
      if (history.divergence.empty() && !parameters_finite(model.store())) {
        history.divergence = "non-finite parameter after update";
      }
    }
    if (!history.divergence.empty()) {
      spdlog::error("training diverged in epoch {}: {}; restoring epoch {} parameters", epoch, history.divergence,
                    history.best_epoch);
      history.stop_reason = "diverged";
      restore(model.store(), best);
      return history;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = steps > 0 ? loss_sum / steps : 0.0;
    if (!valid.empty()) {
      eval::EvaluateOptions eo;
      eo.expected_candidates = options.expected_candidates;
      eo.batch_size = options.eval_batch;
      rec.valid_mrr = eval::evaluate(model, semantic, valid, eo).mrr();
      rec.improved = !history.best_valid_mrr || *rec.valid_mrr > *history.best_valid_mrr;
    } else {
      rec.improved = true;
    }
    spdlog::info("epoch {:3d} loss {:.6f} valid MRR {}", epoch, rec.train_loss,
                 rec.valid_mrr ? fmt::format("{:.6f}", *rec.valid_mrr) : std::string("n/a"));
    history.epochs.push_back(rec);
    if (rec.improved) {
      history.best_epoch = epoch;
      history.best_valid_mrr = rec.valid_mrr;
      best = snapshot(model.store());
      since_best = 0;
      if (options.on_improvement) options.on_improvement(model, rec);
    } else if (++since_best >= cfg.patience) {
      history.stop_reason = "early_stop";
      break;
    }
  }
  if (history.stop_reason.empty()) history.stop_reason = "max_epochs";
  restore(model.store(), best);
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'C', 'D', 'S', 'R', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  std::string_view take(std::size_t n) {
    if (n > data_.size() - pos_) throw std::runtime_error("checkpoint: truncated file");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::Model& model, const nlohmann::json& meta) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const nlohmann::json header{{"config", model.config().to_json()},
                              {"features", model.features().to_json()},
                              {"llm_dim", model.llm_dim()},
                              {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  const std::string text = header.dump();
  put<std::uint64_t>(out, text.size());
  out += text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.store().size()));
  for (const auto& [name, p] : model.store()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
    out.append(reinterpret_cast<const char*>(p.value.data()), sizeof(double) * static_cast<std::size_t>(p.value.size()));
  }
  const Digest digest = sha256(out);
  out.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();
  if (data.size() < sizeof(kMagic) + 32 || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  const std::string_view body(data.data(), data.size() - 32);
  const Digest digest = sha256(body);
  if (std::memcmp(digest.data(), data.data() + body.size(), 32) != 0) {
    throw std::runtime_error("checkpoint: checksum mismatch in " + path.string());
  }
  Reader r(body);
  r.take(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error(fmt::format("checkpoint: version {} unsupported (expected {})", version, kCheckpointVersion));
  }
  const auto header_len = r.get<std::uint64_t>();
  const auto header = nlohmann::json::parse(r.take(header_len));
  Checkpoint ck{model::Model(model::ModelConfig::from_json(header.at("config")),
                             model::FeatureSpace::from_json(header.at("features")), header.at("llm_dim").get<int>()),
                header.at("meta")};
  auto& store = ck.model.store();
  const auto count = r.get<std::uint32_t>();
  if (count != store.size()) {
    throw std::runtime_error(fmt::format("checkpoint: {} parameters stored, model expects {}", count, store.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name(r.take(r.get<std::uint32_t>()));
    if (!store.contains(name)) throw std::runtime_error("checkpoint: unexpected parameter " + name);
    auto& p = store.at(name);
    const auto rows = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    if (rows != p.value.rows() || cols != p.value.cols()) {
      throw std::runtime_error(fmt::format("checkpoint: parameter {} is {}x{}, model expects {}x{}", name, rows, cols,
                                           p.value.rows(), p.value.cols()));
    }
    const auto bytes = r.take(sizeof(double) * static_cast<std::size_t>(rows * cols));
    std::memcpy(p.value.data(), bytes.data(), bytes.size());
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

}  // namespace tcdsr::train
