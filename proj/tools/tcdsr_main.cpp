// tcdsr: prepare, train, evaluate and run experiment suites from a config file.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "tcdsr/experiments.hpp"
#include "tcdsr/pipeline.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace tcdsr;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "runs";
  bool force = false;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Run config (JSON); defaults apply when omitted");
  cmd->add_option("-s,--set", c.overrides, "Override a config value, e.g. --set model.dim=32")->take_all();
  cmd->add_option("-o,--out", c.out, "Output directory holding run directories")->capture_default_str();
  cmd->add_flag("-f,--force", c.force, "Redo stages whose artifacts already exist");
}

pipeline::RunConfig resolve(const Common& c) {
  try {
    pipeline::RunConfig cfg = c.config.empty() ? pipeline::RunConfig{} : pipeline::load_run_config(c.config);
    return pipeline::apply_overrides(cfg, c.overrides);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string part = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--seeds expects comma-separated integers, got \"" + s + "\"");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-aware cross-domain sequential recommendation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")->capture_default_str();

  Common common;
  std::string seeds = "42";
  bool buckets = false;
  std::size_t sample = 16;

  auto* prepare = app.add_subcommand("prepare", "Build the dataset, prompts and embedding cache");
  auto* train = app.add_subcommand("train", "Train a model on a prepared dataset");
  auto* evaluate = app.add_subcommand("evaluate", "Score the test split with the trained checkpoint");
  evaluate->add_flag("--buckets", buckets, "Add per interval-variance bucket tables");
  auto* ablate = app.add_subcommand("ablate", "Ablation suite over V1..V5 and the full model");
  auto* noise = app.add_subcommand("noise", "Noise suite at 0%, 10% and 20% injected interactions");
  auto* bucket_suite = app.add_subcommand("buckets", "Interval-variance bucket suite");
  auto* semantic = app.add_subcommand("semantic-eval", "Semantic-only suite: title_only, title_time, cf_enhance");
  auto* analyze = app.add_subcommand("analyze", "Same-domain interval ratios of the prepared log");
  auto* weights = app.add_subcommand("export-weights", "Export final fusion-gate vectors for sampled users");
  weights->add_option("--sample", sample, "Number of users to sample")->capture_default_str();
  auto* show = app.add_subcommand("show-config", "Print the resolved config and its hash");
  for (auto* cmd : {prepare, train, evaluate, ablate, noise, bucket_suite, semantic, analyze, weights, show}) {
    add_common(cmd, common);
  }
  for (auto* cmd : {ablate, noise, bucket_suite, semantic}) {
    cmd->add_option("--seeds", seeds, "Comma-separated model seeds")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("tcdsr"));
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    const auto cfg = resolve(common);
    const auto ws = pipeline::Workspace::resolve(common.out, common.force);
    const auto run_dir = pipeline::RunPaths::of(ws, cfg).root;
    auto suite = [&](std::string_view name) {
      pipeline::SuiteOptions opts;
      opts.seeds = parse_seeds(seeds);
      const auto r = pipeline::run_experiment_suite(name, cfg, ws, opts);
      print_json(r.summary);
      std::cerr << "results: " << (r.dir / "results.json").string() << '\n';
    };

    if (*show) {
      print_json({{"config_hash", cfg.hash()}, {"config", cfg.to_json()}});
    } else if (*prepare) {
      pipeline::prepare(cfg, ws);
      std::cerr << "run directory: " << run_dir.string() << '\n';
    } else if (*train) {
      pipeline::train(cfg, ws);
      std::cerr << "checkpoint: " << pipeline::RunPaths::of(ws, cfg).checkpoint().string() << '\n';
    } else if (*evaluate) {
      print_json(pipeline::evaluate(cfg, ws, buckets).to_json());
    } else if (*ablate) {
      suite("ablation");
    } else if (*noise) {
      suite("noise");
    } else if (*bucket_suite) {
      suite("buckets");
    } else if (*semantic) {
      suite("semantic");
    } else if (*analyze) {
      suite("intervals");
    } else if (*weights) {
      const auto w = pipeline::export_weights(cfg, ws, sample);
      std::cerr << "fusion weights: " << (run_dir / "fusion_weights.json").string() << " (" << w.weights[0].rows()
                << " + " << w.weights[1].rows() << " rows)\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const pipeline::MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "; run `tcdsr " << e.command() << "` with the same config first\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
