#include "tcdsr/text_encoder.hpp"

#include "tcdsr/random.hpp"
#include "tcdsr/temporal.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <atomic>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace tcdsr::semantic {

std::vector<ag::Vector> TextEncoder::encode_batch(const std::vector<std::string>& texts) {
  std::vector<ag::Vector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(encode(t));
  return out;
}

std::vector<ag::Vector> TextEncoder::encode_prefixes(const Prompt& prompt) {
  std::vector<std::string> texts;
  texts.reserve(prompt.items.size());
  for (std::size_t k = 1; k <= prompt.items.size(); ++k) texts.push_back(prompt.render_prefix(k));
  return encode_batch(texts);
}

// ---------------------------------------------------------------------------
// Stub

StubEncoder::StubEncoder(int dim, std::uint64_t seed, double memory) : dim_(dim), seed_(seed), memory_(memory) {
  if (dim < 1) throw std::invalid_argument("stub encoder dimension must be >= 1");
  if (!(memory > 0 && memory < 1)) throw std::invalid_argument("stub encoder memory must be in (0, 1)");
  Rng rng(derive_seed(seed, "stub/recurrent"));
  ag::Matrix w(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    for (Eigen::Index i = 0; i < dim; ++i) w(i, j) = standard_normal(rng);
  }
  Eigen::HouseholderQR<ag::Matrix> qr(w);
  recurrent_ = memory * ag::Matrix(qr.householderQ());
}

std::string StubEncoder::version() const { return fmt::format("stub-1/d{}/s{}/m{}", dim_, seed_, memory_); }

std::vector<std::string> StubEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '/') {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

const ag::Vector& StubEncoder::token_vector(const std::string& token) {
  auto it = token_cache_.find(token);
  if (it != token_cache_.end()) return it->second;
  Rng rng(derive_seed(seed_, "stub/token/" + token));
  ag::Vector v(dim_);
  for (int i = 0; i < dim_; ++i) v(i) = standard_normal(rng);
  return token_cache_.emplace(token, std::move(v)).first->second;
}

void StubEncoder::feed(ag::Vector& state, std::string_view text) {
  for (const auto& tok : tokenize(text)) {
    state = (recurrent_ * state + token_vector(tok)).array().tanh().matrix();
  }
}

ag::Vector StubEncoder::encode(const std::string& text) {
  ag::Vector state = ag::Vector::Zero(dim_);
  feed(state, text);
  return state;
}

std::vector<ag::Vector> StubEncoder::encode_prefixes(const Prompt& prompt) {
  std::vector<ag::Vector> out;
  out.reserve(prompt.items.size());
  ag::Vector state = ag::Vector::Zero(dim_);
  feed(state, kPromptPrefix);
  for (std::size_t i = 0; i < prompt.items.size(); ++i) {
    if (i > 0 && prompt.style != GapStyle::kNone) feed(state, prompt.gap_text(i - 1));
    feed(state, domain_token(prompt.items[i].domain));
    feed(state, prompt.items[i].title);
    out.push_back(state);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Remote

RemoteOptions RemoteOptions::from_environment() {
  RemoteOptions o;
  if (const char* url = std::getenv("TCDSR_ENCODER_URL")) o.url = url;
  if (const char* token = std::getenv("TCDSR_ENCODER_TOKEN")) o.token = token;
  return o;
}

struct RemoteEncoder::Endpoint {
  std::string scheme_host_port;
  std::string path;
};

namespace {

std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("encoder URL must include a scheme: " + url);
  const auto path = url.find('/', scheme + 3);
  if (path == std::string::npos) return {url, "/"};
  return {url.substr(0, path), url.substr(path)};
}

}  // namespace

RemoteEncoder::RemoteEncoder(RemoteOptions options) : options_(std::move(options)) {
  if (options_.url.empty()) {
    throw std::invalid_argument("remote encoder: no endpoint configured (set TCDSR_ENCODER_URL)");
  }
  if (options_.url.rfind("https://", 0) == 0) {
    throw std::invalid_argument("remote encoder: https endpoints are not supported; use a local http proxy");
  }
  auto [base, path] = split_url(options_.url);
  endpoint_ = std::make_unique<Endpoint>(Endpoint{base, path});
  dim_ = options_.expected_dim;
}

RemoteEncoder::~RemoteEncoder() = default;

int RemoteEncoder::dim() const {
  if (dim_ == 0) throw std::runtime_error("remote encoder: dimension unknown until the first response");
  return dim_;
}

ag::Vector RemoteEncoder::encode(const std::string& text) {
  httplib::Client client(endpoint_->scheme_host_port);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.token.empty()) headers.emplace("Authorization", "Bearer " + options_.token);
  const std::string body = nlohmann::json{{"text", text}}.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(options_.backoff * (1 << (attempt - 1)));
    auto res = client.Post(endpoint_->path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429) {
      last_error = fmt::format("HTTP {}", res->status);
      continue;
    }
    if (res->status != 200) throw std::runtime_error(fmt::format("remote encoder: HTTP {}: {}", res->status, res->body));
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("remote encoder: malformed response: ") + e.what());
    }
    if (!parsed.contains("embedding") || !parsed["embedding"].is_array()) {
      throw std::runtime_error("remote encoder: response lacks an \"embedding\" array");
    }
    const auto& arr = parsed["embedding"];
    ag::Vector v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
    if (dim_ == 0) dim_ = static_cast<int>(v.size());
    if (v.size() != dim_) {
      throw std::runtime_error(fmt::format("remote encoder: expected width {}, got {}", dim_, v.size()));
    }
    return v;
  }
  throw std::runtime_error(fmt::format("remote encoder: giving up after {} attempts ({})", options_.max_retries + 1,
                                       last_error));
}

std::vector<ag::Vector> RemoteEncoder::encode_batch(const std::vector<std::string>& texts) {
  std::vector<ag::Vector> out(texts.size());
  if (texts.empty()) return out;
  std::size_t start = 0;
  if (dim_ == 0) {
    out[0] = encode(texts[0]);  // fixes the width before going parallel
    start = 1;
  }
  std::atomic<std::size_t> next{start};
  std::mutex error_mutex;
  std::string error;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= texts.size()) return;
      try {
        out[i] = encode(texts[i]);
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mutex);
        if (error.empty()) error = e.what();
        next = texts.size();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(options_.concurrency, static_cast<int>(texts.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (!error.empty()) throw std::runtime_error(error);
  return out;
}

// ---------------------------------------------------------------------------
// Cache

namespace {
constexpr std::string_view kCacheFormat = "tcdsr-embedding-cache";
constexpr int kCacheVersion = 1;
}  // namespace

std::string EmbeddingCache::Header::to_line() const {
  return nlohmann::json{{"format", kCacheFormat},
                        {"version", kCacheVersion},
                        {"encoder", encoder},
                        {"encoder_version", encoder_version},
                        {"vocab_hash", vocab_hash},
                        {"dim", dim}}
      .dump();
}

EmbeddingCache::EmbeddingCache(std::filesystem::path path, Header header)
    : path_(std::move(path)), header_(std::move(header)) {
  if (header_.dim < 1) throw std::invalid_argument("embedding cache: dimension must be >= 1");
  bool damaged = false;
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    std::getline(in, line);
    bool header_ok = false;
    try {
      const auto j = nlohmann::json::parse(line);
      header_ok = j.at("format") == kCacheFormat && j.at("version") == kCacheVersion &&
                  j.at("encoder") == header_.encoder && j.at("encoder_version") == header_.encoder_version &&
                  j.at("vocab_hash") == header_.vocab_hash && j.at("dim") == header_.dim;
    } catch (const std::exception&) {
      header_ok = false;
    }
    if (!header_ok) {
      spdlog::warn("embedding cache {} was written for another encoder or vocabulary; rebuilding", path_.string());
      damaged = true;
    } else {
      for (;;) {
        Digest key{};
        if (!in.read(reinterpret_cast<char*>(key.data()), key.size())) {
          if (in.gcount() != 0) damaged = true;
          break;
        }
        std::uint32_t width = 0;
        if (!in.read(reinterpret_cast<char*>(&width), sizeof width) ||
            width != static_cast<std::uint32_t>(header_.dim)) {
          damaged = true;
          break;
        }
        ag::Vector v(header_.dim);
        if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * width))) {
          damaged = true;
          break;
        }
        entries_.emplace(key, std::move(v));
      }
      if (damaged) spdlog::warn("embedding cache {} is damaged; keeping {} readable records", path_.string(), entries_.size());
    }
  }
  if (damaged || !std::filesystem::exists(path_)) {
    rebuilt_ = damaged;
    rewrite();
  } else {
    out_.open(path_, std::ios::binary | std::ios::app);
  }
  if (!out_) throw std::runtime_error("cannot open embedding cache " + path_.string());
}

void EmbeddingCache::rewrite() {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  out_.close();
  out_.open(path_, std::ios::binary | std::ios::trunc);
  out_ << header_.to_line() << '\n';
  for (const auto& [key, v] : entries_) {
    const auto width = static_cast<std::uint32_t>(v.size());
    out_.write(reinterpret_cast<const char*>(key.data()), key.size());
    out_.write(reinterpret_cast<const char*>(&width), sizeof width);
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * width));
  }
  out_.flush();
}

std::optional<ag::Vector> EmbeddingCache::lookup(const Digest& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::insert(const Digest& key, const ag::Vector& value) {
  if (value.size() != header_.dim) {
    throw std::invalid_argument(fmt::format("embedding cache: width {} != {}", value.size(), header_.dim));
  }
  if (!entries_.emplace(key, value).second) return;
  const auto width = static_cast<std::uint32_t>(value.size());
  out_.write(reinterpret_cast<const char*>(key.data()), key.size());
  out_.write(reinterpret_cast<const char*>(&width), sizeof width);
  out_.write(reinterpret_cast<const char*>(value.data()), static_cast<std::streamsize>(sizeof(double) * width));
  out_.flush();
}

ag::Vector CachedEncoder::encode(const std::string& text) {
  const Digest key = sha256(text);
  if (auto hit = cache_.lookup(key)) {
    ++hits_;
    return *hit;
  }
  ++misses_;
  ag::Vector v = inner_.encode(text);
  cache_.insert(key, v);
  return v;
}

std::vector<ag::Vector> CachedEncoder::encode_batch(const std::vector<std::string>& texts) {
  std::vector<ag::Vector> out(texts.size());
  std::vector<std::string> missing;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (auto hit = cache_.lookup(sha256(texts[i]))) {
      ++hits_;
      out[i] = std::move(*hit);
    } else {
      missing.push_back(texts[i]);
      where.push_back(i);
    }
  }
  if (!missing.empty()) {
    misses_ += missing.size();
    auto fresh = inner_.encode_batch(missing);
    for (std::size_t k = 0; k < missing.size(); ++k) {
      cache_.insert(sha256(missing[k]), fresh[k]);
      out[where[k]] = std::move(fresh[k]);
    }
  }
  return out;
}

std::vector<ag::Vector> CachedEncoder::encode_prefixes(const Prompt& prompt) {
  std::vector<Digest> keys;
  keys.reserve(prompt.items.size());
  std::vector<ag::Vector> out;
  out.reserve(prompt.items.size());
  bool complete = true;
  for (std::size_t k = 1; k <= prompt.items.size(); ++k) {
    keys.push_back(sha256(prompt.render_prefix(k)));
    if (complete) {
      if (auto hit = cache_.lookup(keys.back())) {
        out.push_back(std::move(*hit));
      } else {
        complete = false;
      }
    }
  }
  if (complete) {
    hits_ += out.size();
    return out;
  }
  misses_ += prompt.items.size();
  out = inner_.encode_prefixes(prompt);
  for (std::size_t k = 0; k < out.size(); ++k) cache_.insert(keys[k], out[k]);
  return out;
}

std::string vocab_hash() { return sha256_hex(temporal::vocab_config(temporal::GapBucketizer()).dump()); }

}  // namespace tcdsr::semantic
