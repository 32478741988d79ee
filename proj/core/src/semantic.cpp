#include "tcdsr/semantic.hpp"

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace tcdsr::semantic {

using ag::Var;

std::string_view gap_style_name(GapStyle s) {
  switch (s) {
    case GapStyle::kTokens:
      return "tokens";
    case GapStyle::kExactTime:
      return "exact_time";
    case GapStyle::kNone:
      return "none";
  }
  return "?";
}

GapStyle parse_gap_style(std::string_view s) {
  if (s == "tokens") return GapStyle::kTokens;
  if (s == "exact_time") return GapStyle::kExactTime;
  if (s == "none") return GapStyle::kNone;
  throw std::invalid_argument("unknown gap style \"" + std::string(s) + "\" (expected tokens, exact_time or none)");
}

std::string domain_token(Domain d) { return fmt::format("[{}_Domain]", domain_name(d)); }

std::string exact_duration(std::int64_t seconds) {
  auto unit = [](std::int64_t n, std::string_view one) {
    return fmt::format("{} {}{}", n, one, n == 1 ? "" : "s");
  };
  if (seconds < 3600) return unit(seconds / 60, "minute");
  if (seconds < 86400) return unit(seconds / 3600, "hour");
  return unit(seconds / 86400, "day");
}

std::string Prompt::gap_text(std::size_t k) const {
  if (style == GapStyle::kExactTime) return exact_duration(gap_seconds.at(k));
  return std::string(temporal::token_text(gaps.at(k)));
}

std::string Prompt::render_prefix(std::size_t n) const {
  n = std::min(n, items.size());
  std::string out(kPromptPrefix);
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && style != GapStyle::kNone) {
      out += ' ';
      out += gap_text(i - 1);
    }
    out += ' ';
    out += domain_token(items[i].domain);
    out += ' ';
    out += items[i].title;
  }
  return out;
}

Prompt make_prompt(std::vector<PromptItem> items, const std::vector<std::int64_t>& gaps_between, GapStyle style) {
  if (items.empty()) throw std::invalid_argument("build_prompt: empty interaction sequence");
  if (gaps_between.size() + 1 != items.size()) {
    throw std::invalid_argument("build_prompt: expected one gap between each pair of interactions");
  }
  Prompt p;
  p.items = std::move(items);
  p.style = style;
  for (std::int64_t g : gaps_between) {
    if (g < 0) throw std::invalid_argument("build_prompt: gaps between interactions must be >= 0");
    p.gaps.push_back(temporal::gap_to_token(g));
    p.gap_seconds.push_back(g);
  }
  return p;
}

Prompt build_prompt(const std::vector<ingest::Event>& events, const ingest::InteractionLog& log, GapStyle style) {
  std::vector<PromptItem> items;
  std::vector<std::int64_t> gaps;
  items.reserve(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    auto title = log.title(e.domain, e.item);
    if (!title) {
      spdlog::debug("no title for item {} in domain {}; using its id", log.item_id(e.domain, e.item),
                    domain_name(e.domain));
      title = log.item_id(e.domain, e.item);
    }
    items.push_back({e.domain, std::move(*title)});
    if (i > 0) gaps.push_back(e.timestamp - events[i - 1].timestamp);
  }
  return make_prompt(std::move(items), gaps, style);
}

Prompt perturb(const Prompt& prompt, PerturbMode mode, double alpha, Rng& rng, PerturbStats* stats) {
  if (prompt.style == GapStyle::kNone || prompt.gaps.empty()) {
    throw std::invalid_argument("perturb: prompt has no gap tokens");
  }
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("perturb: alpha must be in [0, 1]");
  Prompt out = prompt;
  for (std::size_t k = 0; k < out.gaps.size(); ++k) {
    const temporal::GapToken original = out.gaps[k];
    if (stats) ++stats->eligible;
    if (!(uniform01(rng) < alpha)) continue;
    const temporal::GapGroup group = temporal::token_group(original);
    std::vector<temporal::GapToken> candidates;
    for (temporal::GapToken t : temporal::kDurationTokens) {
      const bool same = temporal::token_group(t) == group;
      if (mode == PerturbMode::kSmall ? (same && t != original) : !same) candidates.push_back(t);
    }
    if (candidates.empty()) {
      spdlog::info("perturb: group {} has a single token; {} left unchanged", temporal::group_name(group),
                   temporal::token_text(original));
      continue;
    }
    const temporal::GapToken replacement = candidates[uniform_index(rng, candidates.size())];
    out.gaps[k] = replacement;
    out.gap_seconds[k] = temporal::token_representative_gap(replacement);
    if (stats) ++stats->replaced;
  }
  return out;
}

CounterfactualPair make_counterfactuals(const Prompt& prompt, double alpha_small, double alpha_big,
                                        std::uint64_t seed, std::string_view label) {
  Rng small_rng(derive_seed(seed, std::string(label) + "/small"));
  Rng big_rng(derive_seed(seed, std::string(label) + "/big"));
  return {perturb(prompt, PerturbMode::kSmall, alpha_small, small_rng),
          perturb(prompt, PerturbMode::kBig, alpha_big, big_rng)};
}

PcaProjection PcaProjection::fit(const ag::Matrix& corpus, int mid) {
  if (mid < 1) throw std::invalid_argument("PCA: output dimension must be >= 1");
  if (mid > corpus.cols()) {
    throw std::invalid_argument(fmt::format("PCA: D_Mid {} exceeds encoder dimension {}", mid, corpus.cols()));
  }
  if (corpus.rows() < mid) {
    throw std::invalid_argument(fmt::format(
        "PCA: corpus has {} encodings but D_Mid is {}; lower it, e.g. --set model.d_mid={}", corpus.rows(), mid,
        std::max<Eigen::Index>(1, corpus.rows())));
  }
  PcaProjection p;
  p.mean = corpus.colwise().mean();
  const ag::Matrix centered = corpus.rowwise() - p.mean;
  const double denom = corpus.rows() > 1 ? static_cast<double>(corpus.rows() - 1) : 1.0;
  const ag::Matrix cov = (centered.transpose() * centered) / denom;
  Eigen::SelfAdjointEigenSolver<ag::Matrix> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("PCA: eigendecomposition failed");
  const Eigen::Index n = cov.rows();
  p.components.resize(n, mid);
  p.explained_variance.resize(mid);
  for (int k = 0; k < mid; ++k) {
    const Eigen::Index src = n - 1 - k;
    ag::Vector v = solver.eigenvectors().col(src);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v(pivot) < 0) v = -v;
    p.components.col(k) = v;
    p.explained_variance(k) = std::max(0.0, solver.eigenvalues()(src));
  }
  p.total_variance = ag::Vector::Constant(1, cov.trace());
  return p;
}

ag::Matrix PcaProjection::apply(const ag::Matrix& x) const {
  if (x.cols() != components.rows()) {
    throw std::invalid_argument(
        fmt::format("PCA: input width {} does not match fitted width {}", x.cols(), components.rows()));
  }
  return x * components;
}

ag::Var counterfactual_loss(ag::Graph& g, ag::Var z, ag::Var z_small, ag::Var z_big, double tau, int top_k) {
  if (!(tau > 0)) throw std::invalid_argument("counterfactual_loss: tau must be positive");
  if (top_k < 1) throw std::invalid_argument("counterfactual_loss: K must be >= 1");
  const Eigen::Index n = z.rows();
  if (n == 0) throw std::invalid_argument("counterfactual_loss: empty batch");
  Var sim_small = ag::cosine_rows(z, z_small);
  Var sim_big = ag::cosine_rows(z, z_big);
  Var l1 = ag::scale(ag::log_sigmoid(ag::scale(ag::sub(sim_small, sim_big), 1.0 / tau)), -1.0);
  if (n == 1) {
    spdlog::debug("counterfactual_loss: single-row batch, L2 skipped");
    return ag::mean(l1);
  }
  int k = top_k;
  if (n < k + 1) {
    spdlog::debug("counterfactual_loss: batch of {} lowers K from {} to {}", n, k, n - 1);
    k = static_cast<int>(n) - 1;
  }
  Var sims = ag::cosine_matrix(z, z);
  ag::Matrix select = ag::Matrix::Zero(n, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    order.erase(order.begin() + i);
    const auto& s = sims.value();
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return s(i, a) > s(i, b); });
    for (int j = 0; j < k; ++j) select(i, order[static_cast<std::size_t>(j)]) = 1.0 / k;
    order.resize(static_cast<std::size_t>(n));
  }
  Var sim_neg = ag::row_sum(ag::mul(sims, g.constant(select)));
  Var l2 = ag::scale(ag::log_sigmoid(ag::scale(ag::sub(sim_big, sim_neg), 1.0 / tau)), -1.0);
  return ag::mean(ag::add(l1, l2));
}

}  // namespace tcdsr::semantic
