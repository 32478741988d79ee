#pragma once

// Time transforms: log-scale gap buckets for relative-time embeddings,
// normalized intervals driving the preference ODE, and the gap-token
// vocabulary used inside semantic prompts.

#include "tcdsr/ingest.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace tcdsr::temporal {

/// pos = min(floor(scale * log2(gap + 2)), bucket_count - 1); gap -1 maps to 0.
class GapBucketizer {
 public:
  explicit GapBucketizer(double scale = 2.0, int bucket_count = 64);

  /// Throws std::invalid_argument for gap < -1.
  [[nodiscard]] int operator()(std::int64_t gap) const;
  [[nodiscard]] double scale() const { return scale_; }
  [[nodiscard]] int bucket_count() const { return bucket_count_; }

 private:
  double scale_;
  int bucket_count_;
};

/// log2(gap + 2) / log2(max_gap + 2), clamped to [0, 1].
class IntervalNormalizer {
 public:
  explicit IntervalNormalizer(std::int64_t max_gap = 1);

  /// Largest observed gap of the view over the given (training) sequences, at least 1.
  static IntervalNormalizer fit(const std::vector<ingest::UserSequences>& train, View view);

  [[nodiscard]] double operator()(std::int64_t gap) const;
  [[nodiscard]] std::int64_t max_gap() const { return max_gap_; }

 private:
  std::int64_t max_gap_;
  double denom_;
};

/// Nine gap tokens: the sequence-start marker plus eight duration ranges.
enum class GapToken : std::uint8_t {
  kSeqStart = 0,
  kUnderHour,
  kHourToDay,
  kOneToThreeDays,
  kThreeToSevenDays,
  kOneToFourWeeks,
  kOneToThreeMonths,
  kThreeToTwelveMonths,
  kOverYear,
};

enum class GapGroup : std::uint8_t { kShort = 0, kMedium = 1, kLong = 2 };

inline constexpr std::array<GapToken, 8> kDurationTokens{
    GapToken::kUnderHour,        GapToken::kHourToDay,       GapToken::kOneToThreeDays,
    GapToken::kThreeToSevenDays, GapToken::kOneToFourWeeks,  GapToken::kOneToThreeMonths,
    GapToken::kThreeToTwelveMonths, GapToken::kOverYear};

/// Lower bound in seconds of each duration token (index aligned with kDurationTokens).
inline constexpr std::array<std::int64_t, 8> kTokenLowerBounds{
    0, 3600, 86400, 3 * 86400, 7 * 86400, 28 * 86400, 90 * 86400, 365 * 86400};

/// Bracketed surface form, e.g. "[1–3d]" or "[SEQ_START]".
std::string_view token_text(GapToken t);
/// Inverse of token_text; throws std::invalid_argument for unknown text.
GapToken parse_token(std::string_view text);
std::string_view group_name(GapGroup g);

/// Duration lookup; -1 maps to kSeqStart. Throws for gap < -1.
GapToken gap_to_token(std::int64_t gap);
/// Throws std::invalid_argument for kSeqStart.
GapGroup token_group(GapToken t);
std::vector<GapToken> group_members(GapGroup g);
/// A representative gap (seconds) inside the token's range.
std::int64_t token_representative_gap(GapToken t);

/// Vocabulary and bucketizer settings, serialized into run configs and
/// hashed into the semantic cache header.
nlohmann::json vocab_config(const GapBucketizer& bucketizer);

}  // namespace tcdsr::temporal
