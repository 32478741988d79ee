#include "tcdsr/eval.hpp"

#include "tcdsr/random.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tcdsr::eval {

InstanceMetrics rank_metrics(std::span<const double> scores, std::size_t positive,
                             std::optional<std::size_t> expected_size) {
  if (expected_size && scores.size() != *expected_size) {
    throw std::invalid_argument(
        fmt::format("rank_metrics: expected {} candidate scores, got {}", *expected_size, scores.size()));
  }
  if (positive >= scores.size()) throw std::invalid_argument("rank_metrics: positive index out of range");
  const double p = scores[positive];
  if (std::isnan(p)) throw std::invalid_argument("rank_metrics: positive score is NaN");
  int rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != positive && !(scores[i] < p)) ++rank;
  }
  InstanceMetrics m;
  m.rank = rank;
  m.mrr = 1.0 / rank;
  const double gain = 1.0 / std::log2(rank + 1.0);
  m.hr1 = rank <= 1 ? 1.0 : 0.0;
  m.hr5 = rank <= 5 ? 1.0 : 0.0;
  m.hr10 = rank <= 10 ? 1.0 : 0.0;
  m.ndcg5 = rank <= 5 ? gain : 0.0;
  m.ndcg10 = rank <= 10 ? gain : 0.0;
  return m;
}

DomainMetrics DomainMetrics::mean_of(std::span<const InstanceMetrics> rows) {
  DomainMetrics d;
  d.count = rows.size();
  if (rows.empty()) return d;
  for (const auto& r : rows) {
    d.mrr += r.mrr;
    d.ndcg5 += r.ndcg5;
    d.ndcg10 += r.ndcg10;
    d.hr1 += r.hr1;
    d.hr5 += r.hr5;
    d.hr10 += r.hr10;
  }
  const double n = static_cast<double>(rows.size());
  d.mrr /= n;
  d.ndcg5 /= n;
  d.ndcg10 /= n;
  d.hr1 /= n;
  d.hr5 /= n;
  d.hr10 /= n;
  return d;
}

nlohmann::json DomainMetrics::to_json() const {
  return {{"MRR", mrr}, {"NDCG@5", ndcg5}, {"NDCG@10", ndcg10}, {"HR@1", hr1},
          {"HR@5", hr5}, {"HR@10", hr10},  {"count", count}};
}

DomainMetrics DomainMetrics::from_json(const nlohmann::json& j) {
  DomainMetrics d;
  d.mrr = j.at("MRR").get<double>();
  d.ndcg5 = j.at("NDCG@5").get<double>();
  d.ndcg10 = j.at("NDCG@10").get<double>();
  d.hr1 = j.at("HR@1").get<double>();
  d.hr5 = j.at("HR@5").get<double>();
  d.hr10 = j.at("HR@10").get<double>();
  d.count = j.at("count").get<std::size_t>();
  return d;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j{{"schema_version", kReportSchemaVersion}, {"config_hash", config_hash}};
  j["domains"] = nlohmann::json::object();
  for (const auto& [name, m] : domains) j["domains"][name] = m.to_json();
  if (buckets) {
    j["buckets"] = nlohmann::json::object();
    for (const auto& [b, table] : *buckets) {
      auto& out = j["buckets"][std::to_string(b)];
      out = nlohmann::json::object();
      for (const auto& [name, m] : table) out[name] = m.to_json();
    }
  }
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
    throw std::invalid_argument("metric report: unsupported schema version");
  }
  MetricReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& [name, m] : j.at("domains").items()) r.domains[name] = DomainMetrics::from_json(m);
  if (j.contains("buckets")) {
    r.buckets.emplace();
    for (const auto& [b, table] : j.at("buckets").items()) {
      auto& out = (*r.buckets)[std::stoi(b)];
      for (const auto& [name, m] : table.items()) out[name] = DomainMetrics::from_json(m);
    }
  }
  return r;
}

std::vector<ScoredInstance> score_instances(const model::Model& model, train::SemanticSource* semantic,
                                            const std::vector<ingest::EvalInstance>& instances, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("score_instances: batch_size must be positive");
  const bool needs_semantic = model.config().uses_semantic();
  if (needs_semantic && semantic == nullptr) throw std::invalid_argument("score_instances: semantic source required");
  std::vector<ScoredInstance> out(instances.size());
  for (std::size_t start = 0; start < instances.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(instances.size(), start + static_cast<std::size_t>(batch_size));
    model::BatchInput in;
    in.scoring_only = true;
    for (std::size_t i = start; i < end; ++i) {
      const auto& inst = instances[i];
      const int b = static_cast<int>(in.users.size());
      in.users.push_back(&inst.history);
      if (needs_semantic) {
        std::array<const ag::Matrix*, 3> s{};
        for (View v : kViews) s[index_of(v)] = &semantic->prefixes(inst.history, v);
        in.semantic.push_back(s);
      }
      in.queries.push_back({b, static_cast<int>(inst.history.seq_m.size()), inst.target_domain, inst.target_item});
    }
    ag::Graph g;
    const auto res = model.forward(g, in);
    for (Domain d : kDomains) {
      const auto k = index_of(d);
      for (std::size_t row = 0; row < res.query_ids[k].size(); ++row) {
        const std::size_t i = start + static_cast<std::size_t>(res.query_ids[k][row]);
        const auto& inst = instances[i];
        const auto& logits = res.logits[k].value();
        auto& scores = out[i].scores;
        scores.reserve(inst.negatives.size() + 1);
        scores.push_back(logits(static_cast<Eigen::Index>(row), inst.target_item - 1));
        for (int n : inst.negatives) scores.push_back(logits(static_cast<Eigen::Index>(row), n - 1));
      }
    }
  }
  return out;
}

std::vector<InstanceMetrics> metrics_of(const std::vector<ScoredInstance>& scored,
                                        std::optional<std::size_t> expected_size) {
  std::vector<InstanceMetrics> out;
  out.reserve(scored.size());
  for (const auto& s : scored) out.push_back(rank_metrics(s.scores, 0, expected_size));
  return out;
}

namespace {

std::map<std::string, DomainMetrics> tabulate(const std::vector<ingest::EvalInstance>& instances,
                                              const std::vector<InstanceMetrics>& metrics,
                                              const std::vector<std::size_t>& subset) {
  std::array<std::vector<InstanceMetrics>, 2> per;
  std::vector<InstanceMetrics> all;
  for (std::size_t i : subset) {
    per[index_of(instances[i].target_domain)].push_back(metrics[i]);
    all.push_back(metrics[i]);
  }
  std::map<std::string, DomainMetrics> table;
  for (Domain d : kDomains) {
    if (!per[index_of(d)].empty()) table[std::string(domain_name(d))] = DomainMetrics::mean_of(per[index_of(d)]);
  }
  table["overall"] = DomainMetrics::mean_of(all);
  return table;
}

}  // namespace

MetricReport build_report(const std::vector<ingest::EvalInstance>& instances,
                          const std::vector<InstanceMetrics>& metrics, const std::string& config_hash,
                          const std::map<std::string, int>* buckets) {
  if (instances.empty()) throw std::invalid_argument("evaluate: no evaluation instances");
  if (metrics.size() != instances.size()) throw std::invalid_argument("evaluate: one metric row per instance expected");
  MetricReport r;
  r.config_hash = config_hash;
  std::vector<std::size_t> all(instances.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  r.domains = tabulate(instances, metrics, all);
  if (buckets) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      auto it = buckets->find(instances[i].history.user_id);
      if (it == buckets->end()) {
        throw std::invalid_argument("evaluate: no bucket for user " + instances[i].history.user_id);
      }
      groups[it->second].push_back(i);
    }
    r.buckets.emplace();
    for (const auto& [b, subset] : groups) (*r.buckets)[b] = tabulate(instances, metrics, subset);
  }
  return r;
}

MetricReport evaluate(const model::Model& model, train::SemanticSource* semantic,
                      const std::vector<ingest::EvalInstance>& instances, const EvaluateOptions& options) {
  if (instances.empty()) throw std::invalid_argument("evaluate: no evaluation instances");
  const auto scored = score_instances(model, semantic, instances, options.batch_size);
  return build_report(instances, metrics_of(scored, options.expected_candidates), options.config_hash,
                      options.buckets);
}

MetricReport semantic_only_evaluate(const model::Model& model, train::SemanticSource& semantic,
                                    const std::vector<ingest::EvalInstance>& instances,
                                    const EvaluateOptions& options) {
  if (model.config().behavioral()) {
    throw std::invalid_argument("semantic_only_evaluate: model was trained with behavioral signals");
  }
  return evaluate(model, &semantic, instances, options);
}

nlohmann::json FusionWeights::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (Domain d : kDomains) {
    const auto k = index_of(d);
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < weights[k].rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < weights[k].cols(); ++c) row.push_back(weights[k](r, c));
      rows.push_back(std::move(row));
    }
    j[std::string(domain_name(d))] = {{"users", users[k]}, {"weights", rows}};
  }
  return j;
}

FusionWeights export_fusion_weights(const model::Model& model, const std::vector<ingest::UserSequences>& users,
                                    std::size_t sample_size, std::uint64_t seed) {
  std::vector<std::size_t> order(users.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "fusion/sample"));
  shuffle_in_place(order, rng);
  order.resize(std::min(sample_size, order.size()));
  std::vector<const ingest::UserSequences*> sample;
  for (std::size_t i : order) sample.push_back(&users[i]);
  FusionWeights out;
  for (Domain d : kDomains) {
    std::vector<int> present;
    out.weights[index_of(d)] = model.final_fusion_gates(sample, d, &present);
    for (int p : present) out.users[index_of(d)].push_back(sample[static_cast<std::size_t>(p)]->user_id);
  }
  return out;
}

}  // namespace tcdsr::eval
