#include "tcdsr/synthetic.hpp"

#include "tcdsr/random.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tcdsr::synth {

namespace {

constexpr double kDaySeconds = 86400.0;

struct Field {
  std::function<void(SynthConfig&, const std::string&)> set;
  std::function<std::string(const SynthConfig&)> get;
};

template <typename T>
Field make_field(T SynthConfig::*member) {
  return {[member](SynthConfig& c, const std::string& v) {
            std::size_t used = 0;
            if constexpr (std::is_same_v<T, int>) {
              c.*member = std::stoi(v, &used);
            } else if constexpr (std::is_same_v<T, double>) {
              c.*member = std::stod(v, &used);
            } else {
              c.*member = static_cast<T>(std::stoll(v, &used));
            }
            if (used != v.size()) throw std::invalid_argument("trailing characters in value \"" + v + "\"");
          },
          [member](const SynthConfig& c) { return fmt::format("{}", c.*member); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"users", make_field(&SynthConfig::users)},
      {"items_a", make_field(&SynthConfig::items_a)},
      {"items_b", make_field(&SynthConfig::items_b)},
      {"mean_gap_days_a", make_field(&SynthConfig::mean_gap_days_a)},
      {"mean_gap_days_b", make_field(&SynthConfig::mean_gap_days_b)},
      {"drift_rate", make_field(&SynthConfig::drift_rate)},
      {"seasonal_frac", make_field(&SynthConfig::seasonal_frac)},
      {"seed", make_field(&SynthConfig::seed)},
      {"events_per_user", make_field(&SynthConfig::events_per_user)},
      {"topics", make_field(&SynthConfig::topics)},
      {"latent_dim", make_field(&SynthConfig::latent_dim)},
      {"span_days", make_field(&SynthConfig::span_days)},
      {"season_days", make_field(&SynthConfig::season_days)},
      {"seasonal_boost", make_field(&SynthConfig::seasonal_boost)},
      {"affinity_scale", make_field(&SynthConfig::affinity_scale)},
      {"short_term_weight", make_field(&SynthConfig::short_term_weight)},
      {"short_term_decay_days", make_field(&SynthConfig::short_term_decay_days)},
      {"gap_sigma", make_field(&SynthConfig::gap_sigma)},
      {"reversion_days", make_field(&SynthConfig::reversion_days)},
      {"start_timestamp", make_field(&SynthConfig::start_timestamp)},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double lognormal_gap_days(Rng& rng, double mean_days, double sigma) {
  const double mu = std::log(mean_days) - 0.5 * sigma * sigma;
  return std::exp(mu + sigma * standard_normal(rng));
}

Eigen::VectorXd normal_vector(Rng& rng, int dim, double scale) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = scale * standard_normal(rng);
  return v;
}

struct DomainItems {
  Eigen::MatrixXd embeddings;  // items x latent
  std::vector<int> topic;
  std::vector<double> window_start;  // negative when not seasonal
};

}  // namespace

void SynthConfig::validate() const {
  if (users <= 0 || items_a <= 0 || items_b <= 0 || topics <= 0 || latent_dim <= 0) {
    throw std::invalid_argument("synthetic config: users, items_a, items_b, topics and latent_dim must be positive");
  }
  if (mean_gap_days_a <= 0 || mean_gap_days_b <= 0 || events_per_user <= 0 || span_days <= 0 ||
      season_days <= 0 || short_term_decay_days <= 0 || reversion_days <= 0) {
    throw std::invalid_argument("synthetic config: gaps, events_per_user, spans and decay scales must be positive");
  }
  if (drift_rate < 0 || gap_sigma < 0) throw std::invalid_argument("synthetic config: drift_rate and gap_sigma must be >= 0");
  if (seasonal_frac < 0 || seasonal_frac > 1) throw std::invalid_argument("synthetic config: seasonal_frac must be in [0, 1]");
  if (start_timestamp < 0) throw std::invalid_argument("synthetic config: start_timestamp must be >= 0");
}

SynthConfig parse_synth_config(std::istream& in) {
  SynthConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto sep = line.find_first_of("=:");
    if (sep == std::string::npos) throw ingest::ParseError(lineno, "expected key = value");
    const std::string key = trim(line.substr(0, sep));
    const std::string value = trim(line.substr(sep + 1));
    auto it = fields().find(key);
    if (it == fields().end()) throw ingest::ParseError(lineno, "unknown synthetic config key \"" + key + "\"");
    try {
      it->second.set(cfg, value);
    } catch (const std::exception& e) {
      throw ingest::ParseError(lineno, "bad value for " + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

SynthConfig parse_synth_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open synthetic config " + path.string());
  return parse_synth_config(in);
}

void write_synth_config(const SynthConfig& cfg, std::ostream& out) {
  for (const auto& [key, field] : fields()) out << key << " = " << field.get(cfg) << '\n';
}

ingest::InteractionLog generate_synthetic(const SynthConfig& cfg, std::uint64_t seed, SynthTrace* trace) {
  cfg.validate();
  Rng rng(seed);
  const int L = cfg.latent_dim;

  Eigen::MatrixXd centers(cfg.topics, L);
  for (int k = 0; k < cfg.topics; ++k) centers.row(k) = normal_vector(rng, L, 1.0).normalized().transpose();

  std::array<DomainItems, 2> items;
  const std::array<int, 2> counts{cfg.items_a, cfg.items_b};
  for (Domain d : kDomains) {
    auto& di = items[index_of(d)];
    const int n = counts[index_of(d)];
    di.embeddings.resize(n, L);
    di.topic.resize(static_cast<std::size_t>(n));
    di.window_start.assign(static_cast<std::size_t>(n), -1.0);
    for (int i = 0; i < n; ++i) {
      const int topic = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.topics)));
      di.topic[static_cast<std::size_t>(i)] = topic;
      Eigen::VectorXd e = centers.row(topic).transpose() + normal_vector(rng, L, 0.35 / std::sqrt(L));
      di.embeddings.row(i) = e.normalized().transpose();
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    shuffle_in_place(order, rng);
    const auto seasonal = static_cast<std::size_t>(std::lround(cfg.seasonal_frac * n));
    for (std::size_t s = 0; s < seasonal; ++s) {
      di.window_start[static_cast<std::size_t>(order[s])] =
          uniform01(rng) * std::max(0.0, cfg.span_days - cfg.season_days);
    }
  }

  auto item_name = [](Domain d, int idx) { return fmt::format("{}{:04d}", d == Domain::kA ? 'a' : 'b', idx); };

  const double rate = 1.0 / cfg.mean_gap_days_a + 1.0 / cfg.mean_gap_days_b;
  const double active_days = std::min(cfg.span_days, cfg.events_per_user / rate);
  const std::array<double, 2> mean_gap{cfg.mean_gap_days_a, cfg.mean_gap_days_b};

  std::vector<ingest::Interaction> rows;
  for (int u = 0; u < cfg.users; ++u) {
    const std::string user = fmt::format("u{:05d}", u);
    const Eigen::VectorXd base = normal_vector(rng, L, 1.0).normalized();
    const double start = uniform01(rng) * (cfg.span_days - active_days);
    const double end = start + active_days;

    struct Pending {
      double day;
      Domain domain;
    };
    std::vector<Pending> pending;
    for (Domain d : kDomains) {
      double t = start + lognormal_gap_days(rng, mean_gap[index_of(d)], cfg.gap_sigma) * uniform01(rng);
      while (t < end) {
        pending.push_back({t, d});
        t += lognormal_gap_days(rng, mean_gap[index_of(d)], cfg.gap_sigma);
      }
    }
    std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
      return a.day < b.day || (a.day == b.day && a.domain < b.domain);
    });

    std::array<Eigen::VectorXd, 2> drift{Eigen::VectorXd::Zero(L), Eigen::VectorXd::Zero(L)};
    std::array<double, 2> drift_time{start, start};
    std::optional<Eigen::VectorXd> last_item;
    double last_day = start;
    std::array<std::int64_t, 2> last_ts{-1, -1};

    for (const auto& p : pending) {
      const std::size_t di = index_of(p.domain);
      const auto& dom = items[di];
      // Ornstein-Uhlenbeck advance: ~ drift_rate * sqrt(dt) noise for short dt.
      const double dt = p.day - drift_time[di];
      const double keep = std::exp(-dt / cfg.reversion_days);
      const double noise_sd = cfg.drift_rate * std::sqrt(0.5 * cfg.reversion_days * (1.0 - keep * keep));
      drift[di] = keep * drift[di] + normal_vector(rng, L, noise_sd);
      drift_time[di] = p.day;
      const Eigen::VectorXd pref = base + drift[di];

      Eigen::VectorXd logits = cfg.affinity_scale * (dom.embeddings * pref);
      Eigen::Index top = 0;
      logits.maxCoeff(&top);
      for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double ws = dom.window_start[static_cast<std::size_t>(i)];
        if (ws >= 0 && p.day >= ws && p.day < ws + cfg.season_days) logits(i) += cfg.seasonal_boost;
      }
      if (last_item) {
        const double pull = cfg.short_term_weight * std::exp(-(p.day - last_day) / cfg.short_term_decay_days);
        logits += pull * cfg.affinity_scale * (dom.embeddings * *last_item);
      }
      const double mx = logits.maxCoeff();
      Eigen::VectorXd probs = (logits.array() - mx).exp();
      double u01 = uniform01(rng) * probs.sum();
      Eigen::Index chosen = probs.size() - 1;
      for (Eigen::Index i = 0; i < probs.size(); ++i) {
        u01 -= probs(i);
        if (u01 < 0) {
          chosen = i;
          break;
        }
      }

      auto ts = cfg.start_timestamp + static_cast<std::int64_t>(std::llround(p.day * kDaySeconds));
      if (ts <= last_ts[di]) ts = last_ts[di] + 1;
      last_ts[di] = ts;
      const int idx = static_cast<int>(chosen) + 1;
      rows.push_back({user, item_name(p.domain, idx), p.domain, ts,
                      fmt::format("{}/topic{}/{}", domain_name(p.domain), dom.topic[static_cast<std::size_t>(chosen)],
                                  item_name(p.domain, idx))});
      if (trace) trace->entries.push_back({user, p.domain, ts, static_cast<int>(top) + 1});
      last_item = dom.embeddings.row(chosen).transpose();
      last_day = p.day;
    }
  }
  return ingest::InteractionLog::from_interactions(std::move(rows));
}

}  // namespace tcdsr::synth
