#include "tcdsr/semantic_source.hpp"

#include <fmt/format.h>

namespace tcdsr::train {

std::string prefix_key(const ingest::UserSequences& user, View v) {
  const auto& events = user.events(v);
  if (events.empty()) return fmt::format("{}|{}|0", user.user_id, view_name(v));
  const auto& last = events.back();
  return fmt::format("{}|{}|{}|{}|{}{}", user.user_id, view_name(v), events.size(), last.timestamp,
                     domain_name(last.domain), last.item);
}

SemanticSource::SemanticSource(semantic::TextEncoder& encoder, const ingest::InteractionLog& log,
                               semantic::GapStyle style)
    : encoder_(encoder), log_(log), style_(style) {}

const ag::Matrix& SemanticSource::prefixes(const ingest::UserSequences& user, View v) {
  const std::string key = prefix_key(user, v);
  auto it = memo_.find(key);
  if (it != memo_.end()) return it->second;
  const auto& events = user.events(v);
  ag::Matrix m(static_cast<Eigen::Index>(events.size()), encoder_.dim());
  if (!events.empty()) {
    const auto rows = encoder_.encode_prefixes(semantic::build_prompt(events, log_, style_));
    for (std::size_t k = 0; k < rows.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
  }
  return memo_.emplace(key, std::move(m)).first->second;
}

std::optional<model::CounterfactualInput> SemanticSource::counterfactual(const ingest::UserSequences& user, View v,
                                                                         double alpha_small, double alpha_big,
                                                                         std::uint64_t seed) {
  const auto& events = user.events(v);
  if (events.size() < 2 || style_ == semantic::GapStyle::kNone) return std::nullopt;
  const semantic::Prompt prompt = semantic::build_prompt(events, log_, style_);
  const auto pair = semantic::make_counterfactuals(prompt, alpha_small, alpha_big, seed,
                                                   user.user_id + "/" + std::string(view_name(v)));
  model::CounterfactualInput c;
  c.view = v;
  c.original = prefixes(user, v).bottomRows(1);
  c.small = encoder_.encode(pair.small.render()).transpose();
  c.big = encoder_.encode(pair.big.render()).transpose();
  return c;
}

}  // namespace tcdsr::train
