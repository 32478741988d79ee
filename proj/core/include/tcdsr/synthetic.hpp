#pragma once

// Desk-scale synthetic cross-domain interaction generator.
//
// Users hold a stable base preference shared across domains plus a
// per-domain drift component that follows a mean-reverting random walk whose
// scale grows with elapsed time. Item choice is a softmax over affinity with
// the current preference, a short-term pull toward the previous item that
// decays with the gap, and a bonus for seasonal items inside their window.

#include "tcdsr/ingest.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace tcdsr::synth {

struct SynthConfig {
  int users = 200;
  int items_a = 500;
  int items_b = 500;
  double mean_gap_days_a = 0.5;
  double mean_gap_days_b = 2.0;
  /// Random-walk scale of the latent preference per sqrt(day).
  double drift_rate = 0.3;
  double seasonal_frac = 0.2;
  std::uint64_t seed = 1;

  double events_per_user = 30.0;
  int topics = 10;
  int latent_dim = 16;
  double span_days = 730.0;
  double season_days = 45.0;
  double seasonal_boost = 3.0;
  double affinity_scale = 4.0;
  double short_term_weight = 3.0;
  double short_term_decay_days = 1.0;
  double gap_sigma = 1.0;
  double reversion_days = 60.0;
  std::int64_t start_timestamp = 1577836800;  // 2020-01-01T00:00:00Z

  /// Throws std::invalid_argument for nonpositive counts or out-of-range values.
  void validate() const;
};

/// Flat `key = value` file ('#' starts a comment). Unknown keys are errors.
SynthConfig parse_synth_config(std::istream& in);
SynthConfig parse_synth_config(const std::filesystem::path& path);
void write_synth_config(const SynthConfig& cfg, std::ostream& out);

/// Optional per-event trace for tests: the item with the highest long-term
/// affinity (preference term only) at the moment of each generated event.
struct SynthTrace {
  struct Entry {
    std::string user_id;
    Domain domain;
    std::int64_t timestamp;
    int top_affinity_item;
  };
  std::vector<Entry> entries;
};

ingest::InteractionLog generate_synthetic(const SynthConfig& cfg, std::uint64_t seed, SynthTrace* trace = nullptr);

}  // namespace tcdsr::synth
