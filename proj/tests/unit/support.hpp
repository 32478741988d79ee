#pragma once

// Shared fixtures for the unit and acceptance binaries.

#include "tcdsr/autograd.hpp"
#include "tcdsr/ingest.hpp"
#include "tcdsr/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

namespace tcdsr::testing {

struct GradReport {
  double max_rel = 0;
  std::string worst;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences on up to `per_param` entries of every trainable
/// parameter whose name starts with `prefix`.
inline GradReport grad_check(ag::ParameterStore& store, const std::function<ag::Var(ag::Graph&)>& loss,
                             const std::string& prefix = "", std::size_t per_param = 6, double h = 1e-5,
                             std::uint64_t seed = 3) {
  store.zero_grad();
  {
    ag::Graph g;
    auto l = loss(g);
    g.backward(l);
  }
  Rng rng(seed);
  GradReport r;
  for (auto& [name, p] : store) {
    if (!p.trainable || name.rfind(prefix, 0) != 0) continue;
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    shuffle_in_place(idx, rng);
    idx.resize(std::min(n, per_param));
    for (auto i : idx) {
      double& x = p.value.data()[i];
      const double x0 = x;
      x = x0 + h;
      double up = 0;
      {
        ag::Graph g;
        up = loss(g).scalar();
      }
      x = x0 - h;
      double down = 0;
      {
        ag::Graph g;
        down = loss(g).scalar();
      }
      x = x0;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad.size() == 0 ? 0.0 : p.grad.data()[i];
      const double e = rel_error(analytic, numeric);
      ++r.checked;
      if (e > r.max_rel) {
        r.max_rel = e;
        r.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                  std::to_string(numeric);
      }
    }
  }
  return r;
}

inline ingest::Interaction interaction(std::string user, std::string item, Domain d, std::int64_t ts,
                                       std::optional<std::string> title = std::nullopt) {
  return {std::move(user), std::move(item), d, ts, std::move(title)};
}

/// Small random log: `users` users with `events` events each over two domains.
inline ingest::InteractionLog random_log(int users, int events, int items_per_domain, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ingest::Interaction> out;
  for (int u = 0; u < users; ++u) {
    std::int64_t t = 1000;
    for (int e = 0; e < events; ++e) {
      t += 1 + static_cast<std::int64_t>(uniform_index(rng, 5 * 86400));
      const Domain d = uniform01(rng) < 0.5 ? Domain::kA : Domain::kB;
      const int item = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(items_per_domain)));
      out.push_back(interaction("u" + std::to_string(100 + u), std::string(domain_name(d)) + std::to_string(item), d, t,
                                std::string(domain_name(d)) + "/t/" + std::to_string(item)));
    }
  }
  return ingest::InteractionLog::from_interactions(std::move(out));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tcdsr-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tcdsr::testing
