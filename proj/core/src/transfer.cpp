#include "tcdsr/transfer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <stdexcept>

namespace tcdsr::transfer {

std::array<TemporalPattern, 3> build_temporal_pattern(const ingest::UserSequences& user,
                                                      const temporal::GapBucketizer& bucketizer) {
  std::array<TemporalPattern, 3> out;
  for (View v : kViews) {
    const auto& events = user.events(v);
    const auto& gaps = user.gaps(v);
    auto& p = out[index_of(v)];
    p.reserve(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) p.push_back({events[i].domain, bucketizer(gaps[i])});
  }
  return out;
}

PatternEncoder::PatternEncoder(ag::ParameterStore& store, const std::string& name, int dim, int heads,
                               int bucket_count, int max_len, Rng& rng, ag::Parameter* shared_buckets)
    : attention(store, name + ".attn", dim, heads, rng) {
  domain_table = &store.add(name + ".domain", nn::normal_init(2, dim, 0.1, rng));
  if (shared_buckets != nullptr) {
    if (shared_buckets->value.rows() != bucket_count + 1 || shared_buckets->value.cols() != dim) {
      throw std::invalid_argument("pattern encoder: shared gap table has the wrong shape");
    }
    bucket_table = shared_buckets;
    bucket_offset = 1;
  } else {
    bucket_table = &store.add(name + ".bucket", nn::normal_init(bucket_count, dim, 0.1, rng));
  }
  position_table = &store.add(name + ".position", nn::normal_init(std::max(1, max_len), dim, 0.02, rng));
}

Var PatternEncoder::attend(Graph& g, std::span<const TemporalPattern* const> patterns,
                           const nn::StackedLayout& layout) const {
  const auto rows = static_cast<std::size_t>(layout.rows());
  std::vector<int> dom(rows, 0), bucket(rows, 0), pos(rows, 0);
  const int max_pos = static_cast<int>(position_table->value.rows()) - 1;
  for (std::size_t b = 0; b < patterns.size(); ++b) {
    const auto& p = *patterns[b];
    for (std::size_t t = 0; t < p.size(); ++t) {
      const std::size_t r = b * static_cast<std::size_t>(layout.stride) + t;
      dom[r] = static_cast<int>(index_of(p[t].domain));
      bucket[r] = p[t].bucket + bucket_offset;
      pos[r] = std::min(static_cast<int>(t), max_pos);
    }
  }
  Var mask = g.constant(layout.mask_column());
  Var x = ag::add(ag::add(g.gather(*domain_table, dom), g.gather(*bucket_table, bucket)), g.gather(*position_table, pos));
  x = ag::mul_col(x, mask);
  return ag::mul_col(ag::add(x, attention(g, x, layout)), mask);
}

Var PatternEncoder::encode_prefixes(Graph& g, std::span<const TemporalPattern* const> patterns, int stride) const {
  nn::StackedLayout layout;
  layout.stride = stride;
  for (const auto* p : patterns) {
    if (static_cast<int>(p->size()) > stride) throw std::invalid_argument("encode_pattern: stride too short");
    layout.lengths.push_back(static_cast<int>(p->size()));
  }
  Var h = attend(g, patterns, layout);
  std::vector<ag::RowCombination> combos(static_cast<std::size_t>(layout.rows()));
  for (int b = 0; b < layout.batch(); ++b) {
    for (int t = 0; t < layout.lengths[static_cast<std::size_t>(b)]; ++t) {
      auto& c = combos[static_cast<std::size_t>(b * stride + t)];
      for (int s = 0; s <= t; ++s) c.emplace_back(b * stride + s, 1.0 / (t + 1));
    }
  }
  return ag::combine_rows(h, combos, layout.rows());
}

Var PatternEncoder::encode(Graph& g, const TemporalPattern& pattern) const {
  const auto dim = position_table->value.cols();
  if (pattern.empty()) {
    spdlog::debug("encode_pattern: empty pattern encodes to zero");
    return g.constant(ag::Matrix::Zero(1, dim));
  }
  const TemporalPattern* one[] = {&pattern};
  nn::StackedLayout layout{static_cast<int>(pattern.size()), {static_cast<int>(pattern.size())}};
  Var h = attend(g, one, layout);
  ag::RowCombination c;
  for (std::size_t t = 0; t < pattern.size(); ++t) c.emplace_back(static_cast<int>(t), 1.0 / pattern.size());
  const ag::RowCombination combos[] = {c};
  return ag::combine_rows(h, combos, 1);
}

std::vector<ag::RowCombination> cumulative_domain_means(const nn::StackedLayout& layout,
                                                        const std::vector<Domain>& domains, Domain domain) {
  std::vector<ag::RowCombination> combos(static_cast<std::size_t>(layout.rows()));
  for (int b = 0; b < layout.batch(); ++b) {
    std::vector<int> pool;
    for (int t = 0; t < layout.lengths[static_cast<std::size_t>(b)]; ++t) {
      const int r = b * layout.stride + t;
      if (domains[static_cast<std::size_t>(r)] == domain) pool.push_back(r);
      auto& c = combos[static_cast<std::size_t>(r)];
      for (int src : pool) c.emplace_back(src, 1.0 / static_cast<double>(pool.size()));
    }
  }
  return combos;
}

std::array<Var, 2> preference_factors(Var z_mixed, const std::vector<Domain>& domains, Var z_llm_mixed) {
  if (static_cast<Eigen::Index>(domains.size()) != z_mixed.rows()) {
    throw std::invalid_argument("preference_factors: domain flags do not align with rows");
  }
  std::array<Var, 2> out;
  for (Domain d : kDomains) {
    ag::RowCombination c;
    int count = 0;
    for (Domain f : domains) count += f == d ? 1 : 0;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      if (domains[i] == d) c.emplace_back(static_cast<int>(i), 1.0 / count);
    }
    const ag::RowCombination combos[] = {c};
    Var pooled = ag::combine_rows(z_mixed, combos, 1);
    out[index_of(d)] = z_llm_mixed.valid() ? ag::add(pooled, z_llm_mixed) : pooled;
  }
  return out;
}

TransferGate::TransferGate(ag::ParameterStore& store, const std::string& name, int dim, Rng& rng)
    : temporal{nn::Linear(store, name + ".temporal.A", 2 * dim, dim, rng),
               nn::Linear(store, name + ".temporal.B", 2 * dim, dim, rng)},
      preference{nn::Linear(store, name + ".preference.A", 2 * dim, dim, rng),
                 nn::Linear(store, name + ".preference.B", 2 * dim, dim, rng)},
      gate(store, name + ".gate", 2 * dim, dim, 1, nn::Activation::kTanh, rng) {}

Var TransferGate::weight(Graph& g, Domain d, Var u_domain, Var u_mixed, Var r_domain, Var r_other) const {
  const std::size_t k = index_of(d);
  const std::vector<Var> tu{u_domain, u_mixed};
  const std::vector<Var> rr{r_domain, r_other};
  const std::vector<Var> both{temporal[k](g, ag::concat_cols(tu)), preference[k](g, ag::concat_cols(rr))};
  return ag::sigmoid(gate(g, ag::concat_cols(both)));
}

}  // namespace tcdsr::transfer
