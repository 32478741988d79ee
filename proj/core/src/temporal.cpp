#include "tcdsr/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tcdsr::temporal {

GapBucketizer::GapBucketizer(double scale, int bucket_count) : scale_(scale), bucket_count_(bucket_count) {
  if (!(scale > 0.0)) throw std::invalid_argument("gap bucket scale must be positive");
  if (bucket_count < 1) throw std::invalid_argument("gap bucket count must be >= 1");
}

int GapBucketizer::operator()(std::int64_t gap) const {
  if (gap < -1) throw std::invalid_argument("gap must be >= -1, got " + std::to_string(gap));
  const double pos = std::floor(scale_ * std::log2(static_cast<double>(gap) + 2.0));
  return static_cast<int>(std::min(pos, static_cast<double>(bucket_count_ - 1)));
}

IntervalNormalizer::IntervalNormalizer(std::int64_t max_gap) : max_gap_(max_gap) {
  if (max_gap < 1) throw std::invalid_argument("max_gap must be >= 1");
  denom_ = std::log2(static_cast<double>(max_gap) + 2.0);
}

IntervalNormalizer IntervalNormalizer::fit(const std::vector<ingest::UserSequences>& train, View view) {
  std::int64_t mx = 1;
  for (const auto& s : train) {
    for (std::int64_t g : s.gaps(view)) mx = std::max(mx, g);
  }
  return IntervalNormalizer(mx);
}

double IntervalNormalizer::operator()(std::int64_t gap) const {
  if (gap < -1) throw std::invalid_argument("gap must be >= -1, got " + std::to_string(gap));
  if (gap >= max_gap_) return 1.0;
  return std::log2(static_cast<double>(gap) + 2.0) / denom_;
}

namespace {
constexpr std::array<std::string_view, 9> kTokenText{
    "[SEQ_START]", "[<1h]", "[1h–1d]", "[1–3d]", "[3–7d]", "[1–4w]", "[1–3mo]", "[3–12mo]", "[>1yr]"};
}

std::string_view token_text(GapToken t) { return kTokenText[static_cast<std::size_t>(t)]; }

GapToken parse_token(std::string_view text) {
  for (std::size_t i = 0; i < kTokenText.size(); ++i) {
    if (kTokenText[i] == text) return static_cast<GapToken>(i);
  }
  throw std::invalid_argument("unknown gap token " + std::string(text));
}

std::string_view group_name(GapGroup g) {
  switch (g) {
    case GapGroup::kShort:
      return "short";
    case GapGroup::kMedium:
      return "medium";
    case GapGroup::kLong:
      return "long";
  }
  return "?";
}

GapToken gap_to_token(std::int64_t gap) {
  if (gap < -1) throw std::invalid_argument("gap must be >= -1, got " + std::to_string(gap));
  if (gap == -1) return GapToken::kSeqStart;
  std::size_t k = 0;
  while (k + 1 < kTokenLowerBounds.size() && gap >= kTokenLowerBounds[k + 1]) ++k;
  return kDurationTokens[k];
}

GapGroup token_group(GapToken t) {
  switch (t) {
    case GapToken::kUnderHour:
    case GapToken::kHourToDay:
    case GapToken::kOneToThreeDays:
      return GapGroup::kShort;
    case GapToken::kThreeToSevenDays:
    case GapToken::kOneToFourWeeks:
      return GapGroup::kMedium;
    case GapToken::kOneToThreeMonths:
    case GapToken::kThreeToTwelveMonths:
    case GapToken::kOverYear:
      return GapGroup::kLong;
    case GapToken::kSeqStart:
      break;
  }
  throw std::invalid_argument("[SEQ_START] has no duration group and cannot be perturbed");
}

std::vector<GapToken> group_members(GapGroup g) {
  std::vector<GapToken> out;
  for (GapToken t : kDurationTokens) {
    if (token_group(t) == g) out.push_back(t);
  }
  return out;
}

std::int64_t token_representative_gap(GapToken t) {
  if (t == GapToken::kSeqStart) return -1;
  const auto k = static_cast<std::size_t>(t) - 1;
  const std::int64_t lo = kTokenLowerBounds[k];
  const std::int64_t hi = k + 1 < kTokenLowerBounds.size() ? kTokenLowerBounds[k + 1] : 2 * lo;
  return (lo + hi) / 2;
}

nlohmann::json vocab_config(const GapBucketizer& bucketizer) {
  nlohmann::json tokens = nlohmann::json::array();
  for (std::size_t k = 0; k < kDurationTokens.size(); ++k) {
    tokens.push_back({{"token", std::string(token_text(kDurationTokens[k]))},
                      {"lower_bound_s", kTokenLowerBounds[k]},
                      {"group", std::string(group_name(token_group(kDurationTokens[k])))}});
  }
  return {{"start_token", std::string(token_text(GapToken::kSeqStart))},
          {"duration_tokens", tokens},
          {"bucket_scale", bucketizer.scale()},
          {"bucket_count", bucketizer.bucket_count()},
          {"log_base", 2}};
}

}  // namespace tcdsr::temporal
