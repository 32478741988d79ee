#include "tcdsr/model.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <set>
#include <stdexcept>

namespace tcdsr::model {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kV1:
      return "V1";
    case Variant::kV2:
      return "V2";
    case Variant::kV3:
      return "V3";
    case Variant::kV4:
      return "V4";
    case Variant::kV5:
      return "V5";
    case Variant::kFull:
      return "full";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : kVariants) {
    if (variant_name(v) == s) return v;
  }
  if (s == "exact_time") return Variant::kV5;
  throw std::invalid_argument("unknown variant \"" + std::string(s) + "\"; valid: V1, V2, V3, V4, V5 (exact_time), full");
}

std::string_view semantic_only_name(SemanticOnly s) {
  switch (s) {
    case SemanticOnly::kOff:
      return "off";
    case SemanticOnly::kTitleOnly:
      return "title_only";
    case SemanticOnly::kTitleTime:
      return "title_time";
    case SemanticOnly::kCfEnhance:
      return "cf_enhance";
  }
  return "?";
}

SemanticOnly parse_semantic_only(std::string_view s) {
  for (SemanticOnly m : {SemanticOnly::kOff, SemanticOnly::kTitleOnly, SemanticOnly::kTitleTime, SemanticOnly::kCfEnhance}) {
    if (semantic_only_name(m) == s) return m;
  }
  throw std::invalid_argument("unknown semantic-only mode \"" + std::string(s) +
                              "\"; valid: off, title_only, title_time, cf_enhance");
}

// ---------------------------------------------------------------------------
// ModelConfig

bool ModelConfig::uses_semantic() const {
  if (!behavioral()) return true;
  return variant != Variant::kV1 && variant != Variant::kV2;
}

bool ModelConfig::uses_counterfactual() const {
  if (!behavioral()) return semantic_only == SemanticOnly::kCfEnhance;
  return variant == Variant::kV4 || variant == Variant::kV5 || variant == Variant::kFull;
}

bool ModelConfig::personalized_transfer() const {
  return behavioral() && (variant == Variant::kV5 || variant == Variant::kFull);
}

semantic::GapStyle ModelConfig::prompt_style() const {
  if (semantic_only == SemanticOnly::kTitleOnly) return semantic::GapStyle::kNone;
  if (behavioral() && variant == Variant::kV5) return semantic::GapStyle::kExactTime;
  return semantic::GapStyle::kTokens;
}

void ModelConfig::validate() const {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("model config: ") + what);
  };
  positive(dim > 0 && heads > 0 && dim % heads == 0, "dim must be a positive multiple of heads");
  positive(ffn_mult > 0, "ffn_mult must be positive");
  positive(max_len >= 3, "max_len must be >= 3");
  positive(batch_size > 0, "batch_size must be positive");
  positive(epochs > 0 && epochs <= 100, "epochs must be in [1, 100]");
  positive(patience > 0, "patience must be positive");
  positive(learning_rate >= 0, "learning_rate must be >= 0");
  positive(lambda_ode >= 0 && lambda_sem >= 0, "lambda_ode and lambda_sem must be >= 0");
  positive(tau_short > 0 && tau_cf > 0, "temperatures must be positive");
  positive(top_k >= 1, "top_k must be >= 1");
  positive(alpha_small >= 0 && alpha_small <= 1 && alpha_big >= 0 && alpha_big <= 1, "alphas must be in [0, 1]");
  positive(d_mid > 0, "d_mid must be positive");
  positive(time_buckets > 0 && gap_buckets > 0 && gap_scale > 0, "bucket settings must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"dim", dim},
          {"heads", heads},
          {"ffn_mult", ffn_mult},
          {"max_len", max_len},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patience", patience},
          {"learning_rate", learning_rate},
          {"lambda_ode", lambda_ode},
          {"lambda_sem", lambda_sem},
          {"tau_short", tau_short},
          {"tau_cf", tau_cf},
          {"top_k", top_k},
          {"alpha_small", alpha_small},
          {"alpha_big", alpha_big},
          {"d_mid", d_mid},
          {"time_buckets", time_buckets},
          {"gap_buckets", gap_buckets},
          {"gap_scale", gap_scale},
          {"share_gap_table", share_gap_table},
          {"seed", seed},
          {"variant", std::string(variant_name(variant))},
          {"semantic_only", std::string(semantic_only_name(semantic_only))}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  ModelConfig c;
  static const std::set<std::string> known = [] {
    std::set<std::string> k;
    const nlohmann::json defaults = ModelConfig{}.to_json();
    for (const auto& [key, _] : defaults.items()) k.insert(key);
    return k;
  }();
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("model config: unknown key \"" + key + "\"");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("dim", c.dim);
  get("heads", c.heads);
  get("ffn_mult", c.ffn_mult);
  get("max_len", c.max_len);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("patience", c.patience);
  get("learning_rate", c.learning_rate);
  get("lambda_ode", c.lambda_ode);
  get("lambda_sem", c.lambda_sem);
  get("tau_short", c.tau_short);
  get("tau_cf", c.tau_cf);
  get("top_k", c.top_k);
  get("alpha_small", c.alpha_small);
  get("alpha_big", c.alpha_big);
  get("d_mid", c.d_mid);
  get("time_buckets", c.time_buckets);
  get("gap_buckets", c.gap_buckets);
  get("gap_scale", c.gap_scale);
  get("share_gap_table", c.share_gap_table);
  get("seed", c.seed);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("semantic_only")) c.semantic_only = parse_semantic_only(j.at("semantic_only").get<std::string>());
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// FeatureSpace

FeatureSpace FeatureSpace::fit(const std::vector<ingest::UserSequences>& train, const std::array<int, 2>& item_counts,
                               const ModelConfig& cfg) {
  FeatureSpace f;
  f.item_counts = item_counts;
  f.bucketizer = temporal::GapBucketizer(cfg.gap_scale, cfg.gap_buckets);
  for (View v : kViews) f.normalizers[index_of(v)] = temporal::IntervalNormalizer::fit(train, v);
  f.absolute = encoder::AbsoluteTimeMapper::fit(train, cfg.time_buckets);
  return f;
}

nlohmann::json FeatureSpace::to_json() const {
  return {{"item_counts", {item_counts[0], item_counts[1]}},
          {"bucket_scale", bucketizer.scale()},
          {"bucket_count", bucketizer.bucket_count()},
          {"max_gaps", {normalizers[0].max_gap(), normalizers[1].max_gap(), normalizers[2].max_gap()}},
          {"time_origin", absolute.origin()},
          {"time_buckets", absolute.bucket_count()}};
}

FeatureSpace FeatureSpace::from_json(const nlohmann::json& j) {
  FeatureSpace f;
  f.item_counts = {j.at("item_counts").at(0).get<int>(), j.at("item_counts").at(1).get<int>()};
  f.bucketizer = temporal::GapBucketizer(j.at("bucket_scale").get<double>(), j.at("bucket_count").get<int>());
  for (std::size_t v = 0; v < 3; ++v) {
    f.normalizers[v] = temporal::IntervalNormalizer(j.at("max_gaps").at(v).get<std::int64_t>());
  }
  f.absolute = encoder::AbsoluteTimeMapper(j.at("time_origin").get<std::int64_t>(), j.at("time_buckets").get<int>());
  return f;
}

// ---------------------------------------------------------------------------
// Losses

nlohmann::json LossParts::to_json() const {
  auto triple = [](const std::array<double, 3>& a) { return nlohmann::json{{"A", a[0]}, {"B", a[1]}, {"M", a[2]}}; };
  return {{"main", main},         {"main_A", main_a},  {"main_B", main_b},
          {"long_reg", triple(long_reg)}, {"short_reg", triple(short_reg)},
          {"counterfactual", triple(counterfactual)}, {"ode", ode}, {"sem", sem}, {"total", total}};
}

double total_loss(double main, double ode, double sem, double lambda_ode, double lambda_sem) {
  if (!std::isfinite(main)) throw std::runtime_error(fmt::format("non-finite loss part L_main = {}", main));
  if (!std::isfinite(ode)) throw std::runtime_error(fmt::format("non-finite loss part L_ODE = {}", ode));
  if (!std::isfinite(sem)) throw std::runtime_error(fmt::format("non-finite loss part L_sem = {}", sem));
  return main + lambda_ode * ode + lambda_sem * sem;
}

ag::Matrix predict(const ag::Matrix& o, const ag::Matrix& r, double w, const ag::Matrix& head) {
  if (o.rows() != 1 || r.rows() != 1 || o.cols() != r.cols() || head.rows() != o.cols()) {
    throw std::invalid_argument("predict: shape mismatch");
  }
  const ag::RowVector rep = w * o.row(0) + (1.0 - w) * r.row(0);
  ag::RowVector scores = rep * head;
  scores.array() -= scores.maxCoeff();
  scores = scores.array().exp().matrix();
  return scores / scores.sum();
}

Var main_loss(Graph& g, const std::array<Var, 2>& logits, const std::array<std::vector<int>, 2>& targets,
              std::array<double, 2>* per_domain) {
  Var total;
  for (Domain d : kDomains) {
    const auto k = index_of(d);
    if (per_domain) (*per_domain)[k] = 0.0;
    if (targets[k].empty()) continue;
    const Var& lg = logits[k];
    if (lg.rows() != static_cast<Eigen::Index>(targets[k].size())) {
      throw std::invalid_argument("main_loss: one target per prediction row expected");
    }
    std::vector<int> idx;
    idx.reserve(targets[k].size());
    for (int t : targets[k]) {
      if (t < 1 || t > lg.cols()) {
        throw std::out_of_range(fmt::format("main_loss: target {} outside [1, {}] in domain {}", t, lg.cols(),
                                            domain_name(d)));
      }
      idx.push_back(t - 1);
    }
    Var loss = ag::scale(ag::mean(ag::pick(ag::log_softmax_rows(lg), idx)), -1.0);
    if (per_domain) (*per_domain)[k] = loss.scalar();
    total = total.valid() ? ag::add(total, loss) : loss;
  }
  return total.valid() ? total : g.constant(ag::Matrix::Zero(1, 1));
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg, FeatureSpace features, int llm_dim)
    : cfg_(std::move(cfg)), features_(std::move(features)) {
  cfg_.validate();
  Rng rng(derive_seed(cfg_.seed, "model/init"));
  const int d = cfg_.dim;
  if (cfg_.behavioral()) {
    tables_ = encoder::EmbeddingTables(store_, features_.item_counts, features_.absolute.bucket_count(),
                                       features_.bucketizer.bucket_count(), d, rng);
    for (View v : kViews) {
      const std::string name(view_name(v));
      encoders_[index_of(v)] = encoder::PreferenceEncoder(store_, "encoder." + name, d, cfg_.heads, cfg_.ffn_mult, rng);
      if (cfg_.dual_state()) {
        dual_[index_of(v)] = evolution::DualEvolution(store_, "evolution." + name, d, rng);
      } else {
        single_[index_of(v)] = evolution::SingleEvolution(store_, "evolution." + name, d, rng);
      }
    }
  }
  if (cfg_.uses_semantic()) {
    if (llm_dim < 1) throw std::invalid_argument("model: semantic variants need the text-encoder width");
    llm_dim_ = llm_dim;
    mid_dim_ = std::min(cfg_.d_mid, llm_dim);
    if (mid_dim_ < cfg_.d_mid) {
      spdlog::warn("d_mid {} exceeds the encoder width {}; using {}", cfg_.d_mid, llm_dim, mid_dim_);
    }
    pca_ = &store_.add("semantic.pca", ag::Matrix::Identity(llm_dim_, mid_dim_), false);
    adapter_ = semantic::Adapter(store_, "semantic.adapter", mid_dim_, d, rng);
  }
  if (cfg_.personalized_transfer()) {
    pattern_ = transfer::PatternEncoder(store_, "transfer.pattern", d, cfg_.heads, features_.bucketizer.bucket_count(),
                                        cfg_.max_len, rng, cfg_.share_gap_table ? tables_.relative_time : nullptr);
    gate_ = transfer::TransferGate(store_, "transfer", d, rng);
  } else if (cfg_.behavioral()) {
    for (Domain dom : kDomains) {
      global_logit_[index_of(dom)] =
          &store_.add("transfer.global." + std::string(domain_name(dom)), ag::Matrix::Zero(1, 1));
    }
  }
  for (Domain dom : kDomains) {
    heads_[index_of(dom)] = &store_.add("head." + std::string(domain_name(dom)),
                                        nn::xavier_uniform(d, features_.item_counts[index_of(dom)], rng));
  }
}

void Model::set_projection(const semantic::PcaProjection& pca) {
  if (pca_ == nullptr) throw std::logic_error("set_projection: variant has no semantic branch");
  if (pca.components.rows() != llm_dim_ || pca.components.cols() != mid_dim_) {
    throw std::invalid_argument(fmt::format("set_projection: expected {} x {} components, got {} x {}", llm_dim_,
                                            mid_dim_, pca.components.rows(), pca.components.cols()));
  }
  pca_->value = pca.components;
}

void Model::after_update() {
  if (cfg_.behavioral()) tables_.clear_padding();
}

Var Model::project(Graph& g, const ag::Matrix& raw) const {
  if (raw.cols() != llm_dim_) {
    throw std::invalid_argument(fmt::format("semantic input width {} != encoder width {}", raw.cols(), llm_dim_));
  }
  return adapter_(g, g.constant(raw * pca_->value));
}

Var Model::semantic_rows(Graph& g, const BatchInput& in, const encoder::SequenceBatch& batch, View v) const {
  ag::Matrix raw = ag::Matrix::Zero(batch.layout.rows(), llm_dim_);
  for (int b = 0; b < batch.layout.batch(); ++b) {
    const int len = batch.layout.lengths[static_cast<std::size_t>(b)];
    if (len == 0) continue;
    const ag::Matrix* m = in.semantic.at(static_cast<std::size_t>(b))[index_of(v)];
    if (m == nullptr || m->rows() < len || m->cols() != llm_dim_) {
      throw std::invalid_argument(fmt::format("semantic encodings missing or misshaped for user {} view {}",
                                              in.users[static_cast<std::size_t>(b)]->user_id, view_name(v)));
    }
    raw.middleRows(b * batch.layout.stride, len) = m->topRows(len);
  }
  return ag::mul_col(project(g, raw), g.constant(batch.mask_column()));
}

Model::ViewOutputs Model::run_view(Graph& g, const BatchInput& in, View v) const {
  ViewOutputs out;
  out.batch = encoder::make_batch(in.users, v, features_.time_features(v), features_.item_counts);
  for (int len : out.batch.layout.lengths) out.active = out.active || len > 0;
  if (!out.active) return out;
  if (cfg_.behavioral()) {
    Var emb = encoder::embed_sequence(g, out.batch, tables_);
    out.embedded = encoders_[index_of(v)].instantaneous_preferences(g, emb, out.batch.layout);
    const evolution::RollOutput roll =
        cfg_.dual_state()
            ? evolution::roll_sequence(g, out.embedded, out.batch.layout, out.batch.normalized_gaps, dual_[index_of(v)])
            : evolution::roll_single(g, out.embedded, out.batch.layout, out.batch.normalized_gaps, single_[index_of(v)]);
    out.z = roll.z;
    out.h_long = roll.h_long;
    out.h_short = roll.h_short;
  }
  if (cfg_.uses_semantic()) out.semantic = semantic_rows(g, in, out.batch, v);
  if (cfg_.personalized_transfer()) {
    std::vector<transfer::TemporalPattern> patterns;
    patterns.reserve(in.users.size());
    for (const auto* u : in.users) patterns.push_back(std::move(transfer::build_temporal_pattern(*u, features_.bucketizer)[index_of(v)]));
    std::vector<const transfer::TemporalPattern*> ptrs;
    for (const auto& p : patterns) ptrs.push_back(&p);
    out.pattern = pattern_.encode_prefixes(g, ptrs, out.batch.layout.stride);
  }
  return out;
}

ForwardResult Model::forward(Graph& g, const BatchInput& in) const {
  if (cfg_.uses_semantic() && in.semantic.size() != in.users.size()) {
    throw std::invalid_argument("forward: semantic encodings required for every user");
  }
  ForwardResult res;
  std::array<ViewOutputs, 3> views;
  for (View v : kViews) {
    if (!cfg_.behavioral() && v == View::kMixed) continue;
    views[index_of(v)] = run_view(g, in, v);
  }
  const ViewOutputs& mixed = views[index_of(View::kMixed)];

  std::array<Var, 2> factors;
  if (cfg_.behavioral()) {
    for (Domain d : kDomains) {
      const auto combos = transfer::cumulative_domain_means(mixed.batch.layout, mixed.batch.domains, d);
      Var pooled = ag::combine_rows(mixed.z, combos, mixed.batch.layout.rows());
      factors[index_of(d)] = cfg_.uses_semantic() ? ag::add(pooled, mixed.semantic) : pooled;
    }
  }

  std::array<std::vector<int>, 2> targets;
  for (Domain d : kDomains) {
    const auto k = index_of(d);
    const ViewOutputs& dv = views[index_of(view_of(d))];
    std::vector<int> rows_d, rows_m;
    for (std::size_t qi = 0; qi < in.queries.size(); ++qi) {
      const Query& q = in.queries[qi];
      if (q.domain != d) continue;
      const auto& user = *in.users.at(static_cast<std::size_t>(q.user));
      if (q.history < 1 || q.history > static_cast<int>(user.seq_m.size())) {
        throw std::invalid_argument(fmt::format("query for user {} has history {} outside [1, {}]", user.user_id,
                                                q.history, user.seq_m.size()));
      }
      const int seen = user.count_through(d, q.history - 1);
      if (seen < 1) {
        throw std::invalid_argument(fmt::format("query for user {} has no domain-{} event in its history",
                                                user.user_id, domain_name(d)));
      }
      rows_d.push_back(q.user * dv.batch.layout.stride + seen - 1);
      rows_m.push_back(q.user * mixed.batch.layout.stride + q.history - 1);
      res.query_ids[k].push_back(static_cast<int>(qi));
      targets[k].push_back(q.target);
    }
    if (rows_d.empty()) continue;
    Var rep;
    if (!cfg_.behavioral()) {
      rep = ag::gather_rows(dv.semantic, rows_d);
    } else {
      Var o = ag::gather_rows(dv.z, rows_d);
      if (cfg_.uses_semantic()) o = ag::add(o, ag::gather_rows(dv.semantic, rows_d));
      Var r = ag::gather_rows(factors[k], rows_m);
      Var w;
      if (cfg_.personalized_transfer()) {
        Var r_other = ag::gather_rows(factors[1 - k], rows_m);
        w = gate_.weight(g, d, ag::gather_rows(dv.pattern, rows_d), ag::gather_rows(mixed.pattern, rows_m), r, r_other);
      } else {
        Var ones = g.constant(ag::Matrix::Ones(static_cast<Eigen::Index>(rows_d.size()), 1));
        w = ag::sigmoid(ag::matmul(ones, g.param(*global_logit_[k])));
      }
      res.transfer_weight[k] = w;
      rep = ag::add(r, ag::mul_col(ag::sub(o, r), w));
    }
    res.logits[k] = ag::matmul(rep, g.param(*heads_[k]));
  }

  std::array<double, 2> per_domain{0, 0};
  res.main = main_loss(g, res.logits, targets, &per_domain);
  res.parts.main = res.main.scalar();
  res.parts.main_a = per_domain[0];
  res.parts.main_b = per_domain[1];

  Var ode;
  if (cfg_.dual_state() && !in.scoring_only) {
    for (View v : kViews) {
      const ViewOutputs& vo = views[index_of(v)];
      if (!vo.active) continue;
      Var ll = evolution::long_term_reg(g, vo.h_long, vo.batch.layout, vo.batch.normalized_gaps);
      Var ls = evolution::short_term_reg(g, vo.h_short, vo.embedded, vo.batch.layout, cfg_.tau_short);
      res.parts.long_reg[index_of(v)] = ll.scalar();
      res.parts.short_reg[index_of(v)] = ls.scalar();
      Var both = ag::add(ll, ls);
      ode = ode.valid() ? ag::add(ode, both) : both;
    }
  }
  res.ode = ode.valid() ? ode : g.constant(ag::Matrix::Zero(1, 1));

  Var sem;
  if (cfg_.uses_counterfactual() && !in.scoring_only) {
    for (View v : kViews) {
      std::vector<const CounterfactualInput*> rows;
      for (const auto& c : in.counterfactuals) {
        if (c.view == v) rows.push_back(&c);
      }
      if (rows.empty()) continue;
      const auto n = static_cast<Eigen::Index>(rows.size());
      ag::Matrix orig(n, llm_dim_), small(n, llm_dim_), big(n, llm_dim_);
      for (Eigen::Index i = 0; i < n; ++i) {
        orig.row(i) = rows[static_cast<std::size_t>(i)]->original;
        small.row(i) = rows[static_cast<std::size_t>(i)]->small;
        big.row(i) = rows[static_cast<std::size_t>(i)]->big;
      }
      Var l = semantic::counterfactual_loss(g, project(g, orig), project(g, small), project(g, big), cfg_.tau_cf,
                                            cfg_.top_k);
      res.parts.counterfactual[index_of(v)] = l.scalar();
      sem = sem.valid() ? ag::add(sem, l) : l;
    }
  }
  res.sem = sem.valid() ? sem : g.constant(ag::Matrix::Zero(1, 1));

  res.parts.ode = res.ode.scalar();
  res.parts.sem = res.sem.scalar();
  res.parts.total = total_loss(res.parts.main, res.parts.ode, res.parts.sem, cfg_.lambda_ode, cfg_.lambda_sem);
  res.total = ag::add(res.main, ag::add(ag::scale(res.ode, cfg_.lambda_ode), ag::scale(res.sem, cfg_.lambda_sem)));
  return res;
}

ag::Matrix Model::final_fusion_gates(const std::vector<const ingest::UserSequences*>& users, Domain d,
                                     std::vector<int>* present) const {
  if (!cfg_.dual_state()) throw std::logic_error("fusion gates exist only for dual-state variants");
  const View v = view_of(d);
  std::vector<const ingest::UserSequences*> kept;
  if (present) present->clear();
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (users[i]->events(v).empty()) continue;
    kept.push_back(users[i]);
    if (present) present->push_back(static_cast<int>(i));
  }
  if (kept.empty()) return ag::Matrix(0, cfg_.dim);
  Graph g;
  const auto batch = encoder::make_batch(kept, v, features_.time_features(v), features_.item_counts);
  Var emb = encoder::embed_sequence(g, batch, tables_);
  Var e = encoders_[index_of(v)].instantaneous_preferences(g, emb, batch.layout);
  const auto& p = dual_[index_of(v)];
  const evolution::RollOutput roll = evolution::roll_sequence(g, e, batch.layout, batch.normalized_gaps, p);
  ag::Matrix out(static_cast<Eigen::Index>(kept.size()), cfg_.dim);
  for (int b = 0; b < batch.layout.batch(); ++b) {
    out.row(b) = roll.gate.value().row(b * batch.layout.stride + batch.layout.lengths[static_cast<std::size_t>(b)] - 1);
  }
  return out;
}

}  // namespace tcdsr::model
