#include "tcdsr/pipeline.hpp"

#include "tcdsr/hashing.hpp"
#include "tcdsr/random.hpp"
#include "tcdsr/semantic_source.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace tcdsr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument(fmt::format("{}: unknown key \"{}\"", where, key));
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json synth_to_json(const synth::SynthConfig& c) {
  std::ostringstream out;
  synth::write_synth_config(c, out);
  json j = json::object();
  std::istringstream in(out.str());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) j[line.substr(0, eq)] = json::parse(line.substr(eq + 3));
  }
  return j;
}

synth::SynthConfig synth_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("data.synthetic must be a JSON object");
  std::ostringstream lines;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw std::invalid_argument("data.synthetic." + key + " must be a number");
    lines << key << " = " << value.dump() << '\n';
  }
  std::istringstream in(lines.str());
  return synth::parse_synth_config(in);
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  }
  return s;
}

json instance_json(const ingest::EvalInstance& inst) {
  return {{"user_id", inst.history.user_id},
          {"domain", std::string(domain_name(inst.target_domain))},
          {"target", inst.target_item},
          {"history_length", inst.history.seq_m.size()},
          {"negatives", inst.negatives}};
}

void write_lines(const fs::path& path, const std::vector<json>& rows) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    for (const auto& r : rows) out << r.dump() << '\n';
  }
  fs::rename(tmp, path);
}

std::vector<json> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

std::vector<ingest::UserSequences> pick(const std::vector<ingest::UserSequences>& users, const json& ids) {
  std::set<std::string> wanted;
  for (const auto& id : ids) wanted.insert(id.get<std::string>());
  std::vector<ingest::UserSequences> out;
  for (const auto& u : users) {
    if (wanted.contains(u.user_id)) out.push_back(u);
  }
  if (out.size() != wanted.size()) throw std::runtime_error("prepared split names users missing from the log");
  return out;
}

json ids_of(const std::vector<ingest::UserSequences>& users) {
  json out = json::array();
  for (const auto& u : users) out.push_back(u.user_id);
  return out;
}

ingest::InteractionLog noised(const ingest::InteractionLog& log, const ingest::DatasetSplit& split, double ratio,
                              std::uint64_t seed) {
  std::set<std::string> train_ids;
  for (const auto& u : split.train) train_ids.insert(u.user_id);
  std::vector<ingest::Interaction> train_rows, other_rows;
  for (const auto& it : log.interactions()) (train_ids.contains(it.user_id) ? train_rows : other_rows).push_back(it);
  auto rows = ingest::inject_noise(ingest::InteractionLog::from_interactions(std::move(train_rows)), ratio, seed)
                  .interactions();
  rows.insert(rows.end(), other_rows.begin(), other_rows.end());
  return ingest::InteractionLog::from_interactions(std::move(rows));
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  if (synthetic.has_value() == data_path.has_value()) {
    throw std::invalid_argument("run config: set exactly one of data.synthetic and data.path");
  }
  if (synthetic) synthetic->validate();
  if (eval_negatives < 1) throw std::invalid_argument("run config: eval.negatives must be positive");
  if (eval_batch < 1) throw std::invalid_argument("run config: eval.batch must be positive");
  if (noise < 0 || noise > 1) throw std::invalid_argument("run config: noise.ratio must be in [0, 1]");
  if (encoder.backend != "stub" && encoder.backend != "remote") {
    throw std::invalid_argument("run config: encoder.backend must be stub or remote");
  }
  if (encoder.dim < 1) throw std::invalid_argument("run config: encoder.dim must be positive");
  if (!(encoder.memory >= 0 && encoder.memory < 1)) throw std::invalid_argument("run config: encoder.memory must be in [0, 1)");
  model.validate();
}

json RunConfig::to_json() const {
  json data = json::object();
  if (synthetic) data["synthetic"] = synth_to_json(*synthetic);
  if (data_path) data["path"] = *data_path;
  return {{"data", data},
          {"split", {{"train", split.train}, {"valid", split.valid}, {"test", split.test}, {"seed", split.seed}}},
          {"eval", {{"negatives", eval_negatives}, {"seed", eval_seed}, {"batch", eval_batch}}},
          {"noise", {{"ratio", noise}, {"seed", noise_seed}}},
          {"model", model.to_json()},
          {"encoder", {{"backend", encoder.backend}, {"dim", encoder.dim}, {"seed", encoder.seed}, {"memory", encoder.memory}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"data", "split", "eval", "noise", "model", "encoder"}, "run config");
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"synthetic", "path"}, "data");
    c.synthetic.reset();
    if (d.contains("synthetic")) c.synthetic = synth_from_json(d.at("synthetic"));
    if (d.contains("path")) c.data_path = d.at("path").get<std::string>();
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    reject_unknown(s, {"train", "valid", "test", "seed"}, "split");
    read_opt(s, "train", c.split.train);
    read_opt(s, "valid", c.split.valid);
    read_opt(s, "test", c.split.test);
    read_opt(s, "seed", c.split.seed);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"negatives", "seed", "batch"}, "eval");
    read_opt(e, "negatives", c.eval_negatives);
    read_opt(e, "seed", c.eval_seed);
    read_opt(e, "batch", c.eval_batch);
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    reject_unknown(n, {"ratio", "seed"}, "noise");
    read_opt(n, "ratio", c.noise);
    read_opt(n, "seed", c.noise_seed);
  }
  if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model"));
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    reject_unknown(e, {"backend", "dim", "seed", "memory"}, "encoder");
    read_opt(e, "backend", c.encoder.backend);
    read_opt(e, "dim", c.encoder.dim);
    read_opt(e, "seed", c.encoder.seed);
    read_opt(e, "memory", c.encoder.memory);
  }
  c.validate();
  return c;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(fmt::format("config {}: {}", path.string(), e.what()));
  }
  return RunConfig::from_json(j);
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  json j = cfg.to_json();
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override \"" + o + "\" is not key=value");
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    if (key.rfind("data.path", 0) == 0) j["data"].erase("synthetic");
    if (key.rfind("data.synthetic", 0) == 0) j["data"].erase("path");
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw std::invalid_argument("override key \"" + key + "\" has an empty component");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Files

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

Workspace Workspace::resolve(fs::path out, bool force) {
  Workspace ws;
  ws.out = std::move(out);
  ws.force = force;
  const char* env = std::getenv("TCDSR_CACHE_DIR");
  ws.cache_dir = env != nullptr && *env != '\0' ? fs::path(env) : ws.out / "cache";
  return ws;
}

// ---------------------------------------------------------------------------
// Encoders

std::unique_ptr<semantic::TextEncoder> make_encoder(const EncoderConfig& cfg) {
  if (cfg.backend == "stub") return std::make_unique<semantic::StubEncoder>(cfg.dim, cfg.seed, cfg.memory);
  if (cfg.backend == "remote") {
    auto opts = semantic::RemoteOptions::from_environment();
    if (opts.url.empty()) throw std::runtime_error("remote encoder selected but TCDSR_ENCODER_URL is not set");
    opts.expected_dim = cfg.dim;
    return std::make_unique<semantic::RemoteEncoder>(opts);
  }
  throw std::invalid_argument("unknown encoder backend " + cfg.backend);
}

EncoderStack::EncoderStack(const EncoderConfig& cfg, const fs::path& cache_dir) : inner_(make_encoder(cfg)) {
  fs::create_directories(cache_dir);
  semantic::EmbeddingCache::Header header{inner_->name(), inner_->version(), semantic::vocab_hash(), inner_->dim()};
  cache_ = std::make_unique<semantic::EmbeddingCache>(cache_dir / (sanitize(inner_->version()) + ".bin"), header);
  if (cache_->rebuilt()) spdlog::warn("embedding cache {} was stale or damaged and has been rebuilt", cache_->path().string());
  cached_ = std::make_unique<semantic::CachedEncoder>(*inner_, *cache_);
}

// ---------------------------------------------------------------------------
// Stages

StageStatus prepare(const RunConfig& cfg, const Workspace& ws) {
  const auto paths = RunPaths::of(ws, cfg);
  if (!ws.force && fs::exists(paths.prepared_marker())) {
    spdlog::info("prepare: {} already prepared; skipping", paths.root.string());
    return StageStatus::kSkipped;
  }
  fs::remove(paths.prepared_marker());
  fs::create_directories(paths.data());
  write_json(paths.config(), cfg.to_json());

  ingest::InteractionLog log = cfg.synthetic ? synth::generate_synthetic(*cfg.synthetic, cfg.synthetic->seed)
                                             : ingest::parse_interactions(fs::path(*cfg.data_path));
  auto users = ingest::build_user_sequences(log, cfg.model.max_len);
  auto split = ingest::split_dataset(users, cfg.split);
  if (cfg.noise > 0) {
    log = noised(log, split, cfg.noise, cfg.noise_seed);
    const json ids{{"train", ids_of(split.train)}, {"valid", ids_of(split.valid)}, {"test", ids_of(split.test)}};
    users = ingest::build_user_sequences(log, cfg.model.max_len);
    split = {pick(users, ids.at("train")), pick(users, ids.at("valid")), pick(users, ids.at("test"))};
  }
  {
    std::ofstream out(paths.data() / "interactions.jsonl", std::ios::trunc);
    ingest::write_interactions(log, out);
  }
  write_json(paths.data() / "split.json",
             {{"train", ids_of(split.train)}, {"valid", ids_of(split.valid)}, {"test", ids_of(split.test)}});

  const std::array<int, 2> counts{log.item_count(Domain::kA), log.item_count(Domain::kB)};
  const auto valid = ingest::build_eval_instances(split.valid, counts, cfg.eval_negatives, derive_seed(cfg.eval_seed, "valid"));
  const auto test = ingest::build_eval_instances(split.test, counts, cfg.eval_negatives, derive_seed(cfg.eval_seed, "test"));
  for (const auto& [name, set] : {std::pair{"valid", &valid}, std::pair{"test", &test}}) {
    std::vector<json> rows;
    for (const auto& inst : *set) rows.push_back(instance_json(inst));
    write_lines(paths.data() / fmt::format("{}_instances.jsonl", name), rows);
  }

  const auto style = cfg.model.prompt_style();
  std::vector<json> prompts, counterfactuals;
  const std::uint64_t cf_seed = derive_seed(cfg.model.seed, "counterfactual");
  for (const auto& [name, group] : {std::pair{"train", &split.train}, std::pair{"valid", &split.valid},
                                    std::pair{"test", &split.test}}) {
    for (const auto& u : *group) {
      for (View v : kViews) {
        const auto& events = u.events(v);
        if (events.empty()) continue;
        const auto prompt = semantic::build_prompt(events, log, style);
        prompts.push_back({{"user_id", u.user_id}, {"split", name}, {"view", view_name(v)}, {"prompt", prompt.render()}});
        if (std::string_view(name) == "train" && events.size() >= 2 && style != semantic::GapStyle::kNone) {
          const auto pair = semantic::make_counterfactuals(prompt, cfg.model.alpha_small, cfg.model.alpha_big, cf_seed,
                                                           u.user_id + "/" + std::string(view_name(v)));
          counterfactuals.push_back({{"user_id", u.user_id},
                                     {"view", view_name(v)},
                                     {"small", pair.small.render()},
                                     {"big", pair.big.render()}});
        }
      }
    }
  }
  write_lines(paths.data() / "prompts.jsonl", prompts);
  write_lines(paths.data() / "counterfactuals.jsonl", counterfactuals);

  json marker{{"config_hash", cfg.hash()},
              {"users", {{"train", split.train.size()}, {"valid", split.valid.size()}, {"test", split.test.size()}}},
              {"instances", {{"valid", valid.size()}, {"test", test.size()}}},
              {"item_counts", counts}};
  if (cfg.model.uses_semantic()) {
    EncoderStack stack(cfg.encoder, ws.cache_dir);
    train::SemanticSource source(stack.encoder(), log, style);
    for (const auto* group : {&split.train, &split.valid, &split.test}) {
      for (const auto& u : *group) {
        for (View v : kViews) source.prefixes(u, v);
      }
    }
    if (cfg.model.uses_counterfactual()) {
      for (const auto& u : split.train) {
        for (View v : kViews) source.counterfactual(u, v, cfg.model.alpha_small, cfg.model.alpha_big, cf_seed);
      }
    }
    marker["embedding_cache"] = stack.cache().path().filename().string();
    marker["cached_embeddings"] = stack.cache().size();
  }
  write_json(paths.prepared_marker(), marker);
  spdlog::info("prepare: wrote {}", paths.root.string());
  return StageStatus::kRan;
}

PreparedData load_prepared(const RunConfig& cfg, const Workspace& ws) {
  const auto paths = RunPaths::of(ws, cfg);
  if (!fs::exists(paths.prepared_marker())) {
    throw MissingPrerequisite(fmt::format("no prepared dataset for config {} under {}", cfg.hash(), ws.out.string()),
                              "prepare");
  }
  PreparedData d;
  d.log = ingest::parse_interactions(paths.data() / "interactions.jsonl");
  const auto users = ingest::build_user_sequences(d.log, cfg.model.max_len);
  const auto ids = read_json(paths.data() / "split.json");
  d.split = {pick(users, ids.at("train")), pick(users, ids.at("valid")), pick(users, ids.at("test"))};
  d.item_counts = {d.log.item_count(Domain::kA), d.log.item_count(Domain::kB)};
  std::map<std::string, const ingest::UserSequences*> by_id;
  for (const auto& u : users) by_id[u.user_id] = &u;
  for (auto [name, set] : {std::pair{"valid", &d.valid}, std::pair{"test", &d.test}}) {
    for (const auto& row : read_lines(paths.data() / fmt::format("{}_instances.jsonl", name))) {
      const auto& u = *by_id.at(row.at("user_id").get<std::string>());
      const auto len = row.at("history_length").get<std::size_t>();
      ingest::EvalInstance inst;
      inst.history = ingest::make_user_sequences(u.user_id, {u.seq_m.begin(), u.seq_m.begin() + static_cast<long>(len)});
      inst.target_domain = parse_domain(row.at("domain").get<std::string>());
      inst.target_item = row.at("target").get<int>();
      inst.negatives = row.at("negatives").get<std::vector<int>>();
      set->push_back(std::move(inst));
    }
  }
  return d;
}

StageStatus train(const RunConfig& cfg, const Workspace& ws) {
  const auto paths = RunPaths::of(ws, cfg);
  if (!ws.force && fs::exists(paths.trained_marker())) {
    spdlog::info("train: {} already trained; skipping", paths.root.string());
    return StageStatus::kSkipped;
  }
  const PreparedData data = load_prepared(cfg, ws);
  fs::remove(paths.trained_marker());
  fs::remove(paths.report());

  std::unique_ptr<EncoderStack> stack;
  std::unique_ptr<train::SemanticSource> source;
  if (cfg.model.uses_semantic()) {
    stack = std::make_unique<EncoderStack>(cfg.encoder, ws.cache_dir);
    source = std::make_unique<train::SemanticSource>(stack->encoder(), data.log, cfg.model.prompt_style());
  }
  model::Model m(cfg.model, model::FeatureSpace::fit(data.split.train, data.item_counts, cfg.model),
                 source ? source->dim() : 0);
  const std::string hash = cfg.hash();
  train::TrainOptions opts;
  opts.expected_candidates = static_cast<std::size_t>(cfg.eval_negatives) + 1;
  opts.eval_batch = cfg.eval_batch;
  opts.on_improvement = [&](const model::Model& best, const train::EpochRecord& rec) {
    json meta{{"config_hash", hash}, {"epoch", rec.epoch}};
    meta["valid_mrr"] = rec.valid_mrr ? json(*rec.valid_mrr) : json(nullptr);
    train::save_checkpoint(paths.checkpoint(), best, meta);
  };
  const auto history = train::train(m, data.split.train, data.valid, source.get(), opts);
  json hj = history.to_json();
  hj["config_hash"] = hash;
  write_json(paths.history(), hj);
  if (history.diverged()) {
    throw std::runtime_error(fmt::format("training diverged: {}; last good checkpoint (epoch {}) kept at {}",
                                         history.divergence, history.best_epoch, paths.checkpoint().string()));
  }
  json marker{{"config_hash", hash}, {"best_epoch", history.best_epoch}, {"stop_reason", history.stop_reason},
              {"epochs_run", history.epochs.size()}};
  marker["best_valid_mrr"] = history.best_valid_mrr ? json(*history.best_valid_mrr) : json(nullptr);
  write_json(paths.trained_marker(), marker);
  return StageStatus::kRan;
}

namespace {

train::Checkpoint require_checkpoint(const RunConfig& cfg, const RunPaths& paths) {
  if (!fs::exists(paths.trained_marker()) || !fs::exists(paths.checkpoint())) {
    throw MissingPrerequisite(fmt::format("no trained checkpoint for config {} under {}", cfg.hash(),
                                          paths.root.parent_path().string()),
                              "train");
  }
  return train::load_checkpoint(paths.checkpoint());
}

}  // namespace

eval::MetricReport evaluate(const RunConfig& cfg, const Workspace& ws, bool bucketed, StageStatus* status) {
  const auto paths = RunPaths::of(ws, cfg);
  const fs::path out = bucketed ? paths.root / "report_buckets.json" : paths.report();
  if (!ws.force && fs::exists(out) && fs::exists(paths.trained_marker())) {
    if (status) *status = StageStatus::kSkipped;
    spdlog::info("evaluate: {} exists; skipping", out.string());
    return eval::MetricReport::from_json(read_json(out));
  }
  auto ck = require_checkpoint(cfg, paths);
  const PreparedData data = load_prepared(cfg, ws);
  const auto& mcfg = ck.model.config();
  std::unique_ptr<EncoderStack> stack;
  std::unique_ptr<train::SemanticSource> source;
  if (mcfg.uses_semantic()) {
    stack = std::make_unique<EncoderStack>(cfg.encoder, ws.cache_dir);
    source = std::make_unique<train::SemanticSource>(stack->encoder(), data.log, mcfg.prompt_style());
  }
  std::map<std::string, int> buckets;
  eval::EvaluateOptions eo;
  eo.expected_candidates = static_cast<std::size_t>(cfg.eval_negatives) + 1;
  eo.batch_size = cfg.eval_batch;
  eo.config_hash = cfg.hash();
  if (bucketed) {
    buckets = ingest::bucket_by_interval_variance(data.split.test, 3);
    eo.buckets = &buckets;
  }
  const auto report = eval::evaluate(ck.model, source.get(), data.test, eo);
  write_json(out, report.to_json());
  if (status) *status = StageStatus::kRan;
  return report;
}

eval::MetricReport run_all(const RunConfig& cfg, const Workspace& ws) {
  prepare(cfg, ws);
  train(cfg, ws);
  return evaluate(cfg, ws);
}

eval::FusionWeights export_weights(const RunConfig& cfg, const Workspace& ws, std::size_t sample_size) {
  const auto paths = RunPaths::of(ws, cfg);
  auto ck = require_checkpoint(cfg, paths);
  const PreparedData data = load_prepared(cfg, ws);
  std::vector<ingest::UserSequences> all = data.split.train;
  all.insert(all.end(), data.split.valid.begin(), data.split.valid.end());
  all.insert(all.end(), data.split.test.begin(), data.split.test.end());
  auto w = eval::export_fusion_weights(ck.model, all, sample_size, derive_seed(cfg.model.seed, "export"));
  json j = w.to_json();
  j["config_hash"] = cfg.hash();
  write_json(paths.root / "fusion_weights.json", j);
  return w;
}

}  // namespace tcdsr::pipeline
