#pragma once

// Frozen text encoders producing the last-valid-token state of a prompt:
// a deterministic hash-seeded stub, a JSON-over-HTTP client, and an
// append-only on-disk cache wrapping either.

#include "tcdsr/autograd.hpp"
#include "tcdsr/hashing.hpp"
#include "tcdsr/semantic.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tcdsr::semantic {

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;

  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::string version() const = 0;
  [[nodiscard]] virtual int dim() const = 0;

  virtual ag::Vector encode(const std::string& text) = 0;
  virtual std::vector<ag::Vector> encode_batch(const std::vector<std::string>& texts);
  /// Encodings of prompt.render_prefix(k) for k = 1..items.size().
  virtual std::vector<ag::Vector> encode_prefixes(const Prompt& prompt);
};

/// Tokens are split on whitespace and '/'. Each token maps to a seeded
/// pseudo-random vector that drives a fixed contractive tanh recurrence;
/// the state after the last token is the encoding.
class StubEncoder final : public TextEncoder {
 public:
  static constexpr int kDefaultDim = 64;

  explicit StubEncoder(int dim = kDefaultDim, std::uint64_t seed = 7, double memory = 0.85);

  [[nodiscard]] std::string name() const override { return "stub"; }
  [[nodiscard]] std::string version() const override;
  [[nodiscard]] int dim() const override { return dim_; }

  ag::Vector encode(const std::string& text) override;
  std::vector<ag::Vector> encode_prefixes(const Prompt& prompt) override;

  static std::vector<std::string> tokenize(std::string_view text);

 private:
  void feed(ag::Vector& state, std::string_view text);
  const ag::Vector& token_vector(const std::string& token);

  int dim_;
  std::uint64_t seed_;
  double memory_;
  ag::Matrix recurrent_;
  std::map<std::string, ag::Vector, std::less<>> token_cache_;
};

struct RemoteOptions {
  std::string url;  // e.g. http://localhost:8080/embed
  std::string token;
  int expected_dim = 0;  // 0 accepts the first response's width
  int max_retries = 3;
  std::chrono::milliseconds backoff{200};
  std::chrono::seconds timeout{30};
  int concurrency = 4;

  /// Reads TCDSR_ENCODER_URL and TCDSR_ENCODER_TOKEN.
  static RemoteOptions from_environment();
};

/// POST {"text": ...} -> {"embedding": [...]} with bounded retries.
class RemoteEncoder final : public TextEncoder {
 public:
  explicit RemoteEncoder(RemoteOptions options);
  ~RemoteEncoder() override;

  [[nodiscard]] std::string name() const override { return "remote"; }
  [[nodiscard]] std::string version() const override { return "remote:" + options_.url; }
  [[nodiscard]] int dim() const override;

  ag::Vector encode(const std::string& text) override;
  std::vector<ag::Vector> encode_batch(const std::vector<std::string>& texts) override;

 private:
  struct Endpoint;
  RemoteOptions options_;
  std::unique_ptr<Endpoint> endpoint_;
  mutable int dim_ = 0;
};

/// Append-only file: one JSON header line, then records of
/// (32-byte SHA-256 of the prompt, u32 width, width little-endian f64).
/// A header mismatch or a damaged record rebuilds the file from the
/// records that could be read.
class EmbeddingCache {
 public:
  struct Header {
    std::string encoder;
    std::string encoder_version;
    std::string vocab_hash;
    int dim = 0;

    [[nodiscard]] std::string to_line() const;
    friend bool operator==(const Header&, const Header&) = default;
  };

  EmbeddingCache(std::filesystem::path path, Header header);

  [[nodiscard]] std::optional<ag::Vector> lookup(const Digest& key) const;
  void insert(const Digest& key, const ag::Vector& value);
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  /// True when opening discarded a stale or damaged file.
  [[nodiscard]] bool rebuilt() const { return rebuilt_; }

 private:
  void rewrite();

  std::filesystem::path path_;
  Header header_;
  std::map<Digest, ag::Vector> entries_;
  std::ofstream out_;
  bool rebuilt_ = false;
};

/// Consults the cache before the wrapped encoder and stores every miss.
class CachedEncoder final : public TextEncoder {
 public:
  CachedEncoder(TextEncoder& inner, EmbeddingCache& cache) : inner_(inner), cache_(cache) {}

  [[nodiscard]] std::string name() const override { return inner_.name(); }
  [[nodiscard]] std::string version() const override { return inner_.version(); }
  [[nodiscard]] int dim() const override { return inner_.dim(); }

  ag::Vector encode(const std::string& text) override;
  std::vector<ag::Vector> encode_batch(const std::vector<std::string>& texts) override;
  std::vector<ag::Vector> encode_prefixes(const Prompt& prompt) override;

  [[nodiscard]] std::size_t hits() const { return hits_; }
  [[nodiscard]] std::size_t misses() const { return misses_; }

 private:
  TextEncoder& inner_;
  EmbeddingCache& cache_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Hash of the gap-token vocabulary and bucket settings, recorded in cache headers.
std::string vocab_hash();

}  // namespace tcdsr::semantic
