#pragma once

// Embedding layer (item, absolute-time and relative-time tables) and the
// causal transformer layer producing instantaneous item-level preferences.

#include "tcdsr/autograd.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/layers.hpp"
#include "tcdsr/temporal.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace tcdsr::encoder {

using ag::Graph;
using ag::Var;

/// Maps a timestamp to a calendar-month bucket in [1, bucket_count]
/// counted from the training origin; row 0 of the table is padding.
class AbsoluteTimeMapper {
 public:
  static constexpr double kMonthSeconds = 30.4375 * 86400.0;

  AbsoluteTimeMapper() = default;
  AbsoluteTimeMapper(std::int64_t origin, int bucket_count);
  /// Origin = earliest training timestamp; bucket count spans the training
  /// months, capped at `cap`.
  static AbsoluteTimeMapper fit(const std::vector<ingest::UserSequences>& train, int cap);

  [[nodiscard]] int operator()(std::int64_t timestamp) const;
  [[nodiscard]] std::int64_t origin() const { return origin_; }
  [[nodiscard]] int bucket_count() const { return bucket_count_; }

 private:
  std::int64_t origin_ = 0;
  int bucket_count_ = 1;
};

struct EmbeddingTables {
  std::array<ag::Parameter*, 3> item{};  // per view; row 0 padding
  ag::Parameter* absolute_time = nullptr;  // (|T| + 1) x d
  ag::Parameter* relative_time = nullptr;  // (|P| + 1) x d, row = bucket + 1

  EmbeddingTables() = default;
  EmbeddingTables(ag::ParameterStore& store, const std::array<int, 2>& item_counts, int time_buckets,
                  int gap_buckets, int dim, Rng& rng);

  /// Zeroes the padding rows (called after every optimizer step).
  void clear_padding() const;
};

/// Row index of an item within a view's item table.
int item_row(View view, const ingest::Event& e, const std::array<int, 2>& item_counts);

/// One view of several user sequences laid out as stacked padded rows.
struct SequenceBatch {
  View view = View::kMixed;
  nn::StackedLayout layout;
  std::vector<int> item_rows;
  std::vector<int> absolute_rows;
  std::vector<int> relative_rows;
  std::vector<double> normalized_gaps;
  std::vector<Domain> domains;

  [[nodiscard]] ag::Matrix mask_column() const { return layout.mask_column(); }
};

struct TimeFeatures {
  const temporal::GapBucketizer* bucketizer = nullptr;
  const temporal::IntervalNormalizer* normalizer = nullptr;  // for this view
  const AbsoluteTimeMapper* absolute = nullptr;
};

/// Builds a batch; `stride` < 0 pads to the longest sequence.
SequenceBatch make_batch(std::span<const ingest::UserSequences* const> users, View view,
                         const TimeFeatures& features, const std::array<int, 2>& item_counts, int stride = -1);

/// Sum of item, absolute-time and relative-time embeddings; padding rows are zero.
Var embed_sequence(Graph& g, const SequenceBatch& batch, const EmbeddingTables& tables);

/// E = Att(Emb(S)): one causal pre-norm transformer layer.
struct PreferenceEncoder {
  nn::TransformerLayer layer;

  PreferenceEncoder() = default;
  PreferenceEncoder(ag::ParameterStore& store, const std::string& name, int dim, int heads, int ffn_mult, Rng& rng)
      : layer(store, name, dim, heads, ffn_mult, rng) {}

  [[nodiscard]] Var instantaneous_preferences(Graph& g, Var embedded, const nn::StackedLayout& layout) const {
    return layer(g, embedded, layout);
  }
};

}  // namespace tcdsr::encoder
