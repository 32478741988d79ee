#include "tcdsr/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tcdsr::encoder {

AbsoluteTimeMapper::AbsoluteTimeMapper(std::int64_t origin, int bucket_count)
    : origin_(origin), bucket_count_(bucket_count) {
  if (bucket_count < 1) throw std::invalid_argument("absolute time bucket count must be >= 1");
}

AbsoluteTimeMapper AbsoluteTimeMapper::fit(const std::vector<ingest::UserSequences>& train, int cap) {
  std::int64_t lo = std::numeric_limits<std::int64_t>::max();
  std::int64_t hi = std::numeric_limits<std::int64_t>::min();
  for (const auto& s : train) {
    for (const auto& e : s.seq_m) {
      lo = std::min(lo, e.timestamp);
      hi = std::max(hi, e.timestamp);
    }
  }
  if (lo > hi) return AbsoluteTimeMapper(0, 1);
  const int months = static_cast<int>(std::floor(static_cast<double>(hi - lo) / kMonthSeconds)) + 1;
  return AbsoluteTimeMapper(lo, std::clamp(months, 1, cap));
}

int AbsoluteTimeMapper::operator()(std::int64_t timestamp) const {
  const double m = std::floor(static_cast<double>(timestamp - origin_) / kMonthSeconds);
  return static_cast<int>(std::clamp(m, 0.0, static_cast<double>(bucket_count_ - 1))) + 1;
}

EmbeddingTables::EmbeddingTables(ag::ParameterStore& store, const std::array<int, 2>& item_counts, int time_buckets,
                                 int gap_buckets, int dim, Rng& rng) {
  const std::array<int, 3> rows{item_counts[0] + 1, item_counts[1] + 1, item_counts[0] + item_counts[1] + 1};
  for (View v : kViews) {
    ag::Matrix init = nn::normal_init(rows[index_of(v)], dim, 0.1, rng);
    init.row(0).setZero();
    item[index_of(v)] = &store.add("embed.item." + std::string(view_name(v)), std::move(init));
  }
  ag::Matrix at = nn::normal_init(time_buckets + 1, dim, 0.02, rng);
  at.row(0).setZero();
  absolute_time = &store.add("embed.time.absolute", std::move(at));
  ag::Matrix rt = nn::normal_init(gap_buckets + 1, dim, 0.02, rng);
  rt.row(0).setZero();
  relative_time = &store.add("embed.time.relative", std::move(rt));
}

void EmbeddingTables::clear_padding() const {
  for (auto* p : item) p->value.row(0).setZero();
  absolute_time->value.row(0).setZero();
  relative_time->value.row(0).setZero();
}

int item_row(View view, const ingest::Event& e, const std::array<int, 2>& item_counts) {
  if (view == View::kMixed && e.domain == Domain::kB) return item_counts[0] + e.item;
  return e.item;
}

SequenceBatch make_batch(std::span<const ingest::UserSequences* const> users, View view,
                         const TimeFeatures& features, const std::array<int, 2>& item_counts, int stride) {
  SequenceBatch batch;
  batch.view = view;
  int longest = 1;
  for (const auto* u : users) longest = std::max(longest, static_cast<int>(u->events(view).size()));
  if (stride < 0) stride = longest;
  if (stride < longest) throw std::invalid_argument("make_batch: stride shorter than longest sequence");
  batch.layout.stride = stride;
  const auto rows = static_cast<std::size_t>(stride) * users.size();
  batch.item_rows.assign(rows, 0);
  batch.absolute_rows.assign(rows, 0);
  batch.relative_rows.assign(rows, 0);
  batch.normalized_gaps.assign(rows, 0.0);
  batch.domains.assign(rows, Domain::kA);
  for (std::size_t b = 0; b < users.size(); ++b) {
    const auto& events = users[b]->events(view);
    const auto& gaps = users[b]->gaps(view);
    batch.layout.lengths.push_back(static_cast<int>(events.size()));
    for (std::size_t t = 0; t < events.size(); ++t) {
      const std::size_t r = b * static_cast<std::size_t>(stride) + t;
      batch.item_rows[r] = item_row(view, events[t], item_counts);
      batch.absolute_rows[r] = (*features.absolute)(events[t].timestamp);
      batch.relative_rows[r] = (*features.bucketizer)(gaps[t]) + 1;
      batch.normalized_gaps[r] = (*features.normalizer)(gaps[t]);
      batch.domains[r] = events[t].domain;
    }
  }
  return batch;
}

Var embed_sequence(Graph& g, const SequenceBatch& batch, const EmbeddingTables& tables) {
  Var items = g.gather(*tables.item[index_of(batch.view)], batch.item_rows);
  Var absolute = g.gather(*tables.absolute_time, batch.absolute_rows);
  Var relative = g.gather(*tables.relative_time, batch.relative_rows);
  Var sum = ag::add(ag::add(items, absolute), relative);
  return ag::mul_col(sum, g.constant(batch.mask_column()));
}

}  // namespace tcdsr::encoder
