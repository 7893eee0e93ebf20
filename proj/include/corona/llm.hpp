#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#define CPPHTTPLIB_OPENSSL_SUPPORT
// Eigen must come before httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "corona/common.hpp"

#include <httplib.h>
#include <json.hpp>

namespace corona {

struct MockBackend {
  std::uint64_t seed = 0;
};

struct OpenAiCompatibleBackend {
  std::string endpoint;  // e.g. https://api.openai.com/v1
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
};

using BackendSpec = std::variant<MockBackend, OpenAiCompatibleBackend>;

struct LlmConfig {
  BackendSpec chat = MockBackend{};
  BackendSpec embedding = MockBackend{};
  double temperature = 0.2;
  std::size_t embed_dim_native = 1536;
  std::size_t dim = 128;
  std::uint64_t projection_seed = 20240601;
  std::filesystem::path cache_dir;  // empty: in-memory cache only
  std::size_t max_in_flight = 4;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{1000};

  void validate() const {
    if (!(temperature >= 0.0 && temperature <= 1.0)) throw ValidationError("temperature must lie in [0, 1]");
    if (dim == 0) throw ValidationError("embedding target dimension must be positive");
    if (embed_dim_native < dim) throw ValidationError("native embedding dimension is smaller than the target dimension");
    if (max_in_flight == 0 || max_attempts < 1) throw ValidationError("max_in_flight and max_attempts must be positive");
  }
};

struct QueryEmbedding {
  Vector vector;
  Stage stage = Stage::Preference;
  std::string source_hash;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string id() const = 0;
  virtual std::string model() const = 0;
  virtual std::string complete(const std::string& prompt, double temperature) = 0;
};

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::string id() const = 0;
  virtual std::string model() const = 0;
  virtual std::vector<double> embed(const std::string& text) = 0;
};

// Lower-cased whitespace tokens with surrounding punctuation removed.
inline std::vector<std::string> mock_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    const auto b = cur.find_first_not_of(".,;:!?()[]\"'");
    const auto e = cur.find_last_not_of(".,;:!?()[]\"'");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  flush();
  return out;
}

// Echoes the attribute values found after the instruction block, interleaved
// with filler words picked by a seeded hash. Pure in (seed, prompt, temperature).
class MockChatBackend : public ChatBackend {
 public:
  explicit MockChatBackend(std::uint64_t seed) : seed_(seed) {}

  std::string id() const override { return "mock-chat:" + std::to_string(seed_); }
  std::string model() const override { return "mock"; }

  std::string complete(const std::string& prompt, double temperature) override {
    calls_.fetch_add(1);
    static constexpr std::string_view kFiller[] = {"likely", "enjoys", "prefers", "probably", "interest", "tends", "toward", "style"};
    const auto body_at = prompt.find("\n\n");
    const std::string_view body = body_at == std::string::npos ? std::string_view(prompt) : std::string_view(prompt).substr(body_at + 2);
    std::string out = "Reasoning:";
    std::uint64_t state = mix64(seed_ ^ fnv1a64(prompt));
    const double filler_rate = 0.15 + 0.2 * temperature;
    std::size_t start = 0;
    while (start <= body.size()) {
      auto end = body.find_first_of(";\n", start);
      if (end == std::string_view::npos) end = body.size();
      std::string_view field = body.substr(start, end - start);
      const auto colon = field.rfind(": ");
      const std::string_view value = colon == std::string_view::npos ? field : field.substr(colon + 2);
      for (const auto& tok : mock_tokens(value)) {
        out += ' ';
        out += tok;
        state = mix64(state);
        if (static_cast<double>(state >> 11) * 0x1.0p-53 < filler_rate) {
          out += ' ';
          out += kFiller[(state >> 3) % std::size(kFiller)];
        }
      }
      start = end + 1;
    }
    return out;
  }

  std::size_t calls() const { return calls_.load(); }

 private:
  std::uint64_t seed_;
  std::atomic<std::size_t> calls_{0};
};

// Normalised sum of seeded Gaussian hash-vectors of the text's tokens.
class MockEmbeddingBackend : public EmbeddingBackend {
 public:
  MockEmbeddingBackend(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {}

  std::string id() const override { return "mock-embed:" + std::to_string(seed_) + ":" + std::to_string(dim_); }
  std::string model() const override { return "mock"; }

  std::vector<double> embed(const std::string& text) override {
    calls_.fetch_add(1);
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(dim_));
    for (const auto& tok : mock_tokens(text)) acc += cached_token_vector(tok);
    const double n = acc.norm();
    if (n > 0) acc /= n;
    return {acc.data(), acc.data() + acc.size()};
  }

  Vector token_vector(const std::string& token) const {
    std::mt19937_64 rng(mix64(seed_ ^ fnv1a64(token)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(static_cast<Eigen::Index>(dim_));
    for (auto& x : v) x = normal(rng);
    return v;
  }

  std::size_t calls() const { return calls_.load(); }

 private:
  const Vector& cached_token_vector(const std::string& token) {
    std::lock_guard lock(mu_);
    auto it = tokens_.find(token);
    if (it == tokens_.end()) it = tokens_.emplace(token, token_vector(token)).first;
    return it->second;
  }

  std::uint64_t seed_;
  std::size_t dim_;
  std::atomic<std::size_t> calls_{0};
  std::mutex mu_;
  std::unordered_map<std::string, Vector> tokens_;
};

namespace detail {

struct EndpointParts {
  std::string origin;  // scheme://host[:port]
  std::string base_path;
};

inline EndpointParts split_endpoint(const std::string& endpoint) {
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint '" + endpoint + "' lacks a scheme");
  const auto path_at = endpoint.find('/', scheme_end + 3);
  EndpointParts p;
  p.origin = endpoint.substr(0, path_at);
  p.base_path = path_at == std::string::npos ? "" : endpoint.substr(path_at);
  while (!p.base_path.empty() && p.base_path.back() == '/') p.base_path.pop_back();
  return p;
}

inline nlohmann::json post_json(const OpenAiCompatibleBackend& spec, const std::string& route, const nlohmann::json& body) {
  const auto parts = split_endpoint(spec.endpoint);
  httplib::Headers headers;
  if (!spec.api_key_env.empty()) {
    const char* key = std::getenv(spec.api_key_env.c_str());
    if (key == nullptr) throw BackendError("environment variable " + spec.api_key_env + " is not set", false);
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  httplib::Client client(parts.origin);
  client.set_connection_timeout(10);
  client.set_read_timeout(120);
  auto res = client.Post(parts.base_path + route, headers, body.dump(), "application/json");
  if (!res) throw BackendError("transport failure calling " + spec.endpoint + route + ": " + httplib::to_string(res.error()), true);
  if (res->status < 200 || res->status >= 300)
    throw BackendError("HTTP " + std::to_string(res->status) + " from " + spec.endpoint + route,
                       res->status == 429 || res->status >= 500);
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw BackendError("malformed response body from " + spec.endpoint + route, true);
  }
}

}  // namespace detail

class OpenAiChatBackend : public ChatBackend {
 public:
  explicit OpenAiChatBackend(OpenAiCompatibleBackend spec) : spec_(std::move(spec)) {}

  std::string id() const override { return "openai:" + spec_.endpoint; }
  std::string model() const override { return spec_.model; }

  std::string complete(const std::string& prompt, double temperature) override {
    const nlohmann::json body = {{"model", spec_.model},
                                 {"messages", {{{"role", "user"}, {"content", prompt}}}},
                                 {"temperature", temperature}};
    const auto reply = detail::post_json(spec_, "/chat/completions", body);
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw BackendError("chat response lacks choices[0].message.content", true);
    }
  }

 private:
  OpenAiCompatibleBackend spec_;
};

class OpenAiEmbeddingBackend : public EmbeddingBackend {
 public:
  explicit OpenAiEmbeddingBackend(OpenAiCompatibleBackend spec) : spec_(std::move(spec)) {}

  std::string id() const override { return "openai:" + spec_.endpoint; }
  std::string model() const override { return spec_.model; }

  std::vector<double> embed(const std::string& text) override {
    const auto reply = detail::post_json(spec_, "/embeddings", {{"model", spec_.model}, {"input", text}});
    try {
      return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
      throw BackendError("embedding response lacks data[0].embedding", true);
    }
  }

 private:
  OpenAiCompatibleBackend spec_;
};

// Content-addressed JSON documents, mirrored in memory. Concurrent writers of
// the same key race benignly: values for a key are identical.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  std::optional<nlohmann::json> get(const std::string& key) {
    {
      std::lock_guard lock(mu_);
      if (auto it = memory_.find(key); it != memory_.end()) return it->second;
    }
    if (dir_.empty()) return std::nullopt;
    std::ifstream in(dir_ / (key + ".json"));
    if (!in) return std::nullopt;
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;  // torn or foreign file: treat as a miss
    }
    std::lock_guard lock(mu_);
    memory_[key] = doc.at("value");
    return doc.at("value");
  }

  void put(const std::string& key, const nlohmann::json& request, const nlohmann::json& value) {
    {
      std::lock_guard lock(mu_);
      memory_[key] = value;
    }
    if (dir_.empty()) return;
    const auto tmp = dir_ / (key + ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())));
    {
      std::ofstream out(tmp);
      out << nlohmann::json{{"request", request}, {"value", value}}.dump();
    }
    std::filesystem::rename(tmp, dir_ / (key + ".json"));
  }

  std::size_t entries_on_disk() const {
    if (dir_.empty() || !std::filesystem::exists(dir_)) return 0;
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir_))
      if (e.path().extension() == ".json") ++n;
    return n;
  }

  void clear() {
    std::lock_guard lock(mu_);
    memory_.clear();
    if (!dir_.empty() && std::filesystem::exists(dir_))
      for (const auto& e : std::filesystem::directory_iterator(dir_))
        if (e.path().extension() == ".json") std::filesystem::remove(e.path());
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::mutex mu_;
  std::unordered_map<std::string, nlohmann::json> memory_;
};

struct GatewayStats {
  std::size_t chat_calls = 0;
  std::size_t embedding_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t estimated_tokens = 0;
};

inline std::shared_ptr<ChatBackend> make_chat_backend(const BackendSpec& spec) {
  if (const auto* m = std::get_if<MockBackend>(&spec)) return std::make_shared<MockChatBackend>(m->seed);
  return std::make_shared<OpenAiChatBackend>(std::get<OpenAiCompatibleBackend>(spec));
}

inline std::shared_ptr<EmbeddingBackend> make_embedding_backend(const BackendSpec& spec, std::size_t native_dim) {
  if (const auto* m = std::get_if<MockBackend>(&spec)) return std::make_shared<MockEmbeddingBackend>(m->seed, native_dim);
  return std::make_shared<OpenAiEmbeddingBackend>(std::get<OpenAiCompatibleBackend>(spec));
}

// Seeded Gaussian projection native_dim -> dim, scaled by 1/sqrt(dim).
inline Matrix projection_matrix(std::uint64_t seed, std::size_t dim, std::size_t native_dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  Matrix p(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(native_dim));
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = normal(rng);
  return p;
}

class LlmGateway {
 public:
  explicit LlmGateway(LlmConfig cfg)
      : LlmGateway(cfg, make_chat_backend(cfg.chat), make_embedding_backend(cfg.embedding, cfg.embed_dim_native)) {}

  LlmGateway(LlmConfig cfg, std::shared_ptr<ChatBackend> chat, std::shared_ptr<EmbeddingBackend> embedder)
      : cfg_(std::move(cfg)),
        chat_(std::move(chat)),
        embedder_(std::move(embedder)),
        cache_(cfg_.cache_dir),
        in_flight_(static_cast<std::ptrdiff_t>(std::min<std::size_t>(cfg_.max_in_flight, kMaxInFlight))) {
    cfg_.validate();
    projection_ = projection_matrix(cfg_.projection_seed, cfg_.dim, cfg_.embed_dim_native);
  }

  const LlmConfig& config() const { return cfg_; }
  const Matrix& projection() const { return projection_; }
  ResponseCache& cache() { return cache_; }

  std::string complete(const std::string& prompt) {
    if (prompt.empty()) throw ValidationError("complete: empty prompt");
    const nlohmann::json request = {{"kind", "chat"},
                                    {"backend", chat_->id()},
                                    {"model", chat_->model()},
                                    {"temperature", cfg_.temperature},
                                    {"prompt_sha256", sha256_hex(prompt)}};
    const std::string key = sha256_hex(request.dump());
    if (auto hit = cache_.get(key)) {
      ++cache_hits_;
      return hit->get<std::string>();
    }
    std::string text = with_retries([&] { return chat_->complete(prompt, cfg_.temperature); });
    ++chat_calls_;
    tokens_ += (prompt.size() + text.size()) / 4;
    cache_.put(key, request, text);
    return text;
  }

  QueryEmbedding encode_text(const std::string& text, Stage stage) {
    if (text.empty()) throw ValidationError("encode_text: empty text");
    const nlohmann::json request = {{"kind", "embedding"},
                                    {"backend", embedder_->id()},
                                    {"model", embedder_->model()},
                                    {"text_sha256", sha256_hex(text)}};
    const std::string key = sha256_hex(request.dump());
    std::vector<double> native;
    if (auto hit = cache_.get(key)) {
      ++cache_hits_;
      native = hit->get<std::vector<double>>();
    } else {
      native = with_retries([&] { return embedder_->embed(text); });
      ++embedding_calls_;
      tokens_ += text.size() / 4;
      cache_.put(key, request, native);
    }
    return {project(native), stage, sha256_hex(text)};
  }

  Vector project(const std::vector<double>& native) const {
    if (native.size() != cfg_.embed_dim_native)
      throw BackendError("embedding backend returned " + std::to_string(native.size()) + " dims, expected " +
                             std::to_string(cfg_.embed_dim_native),
                         false);
    const Eigen::Map<const Vector> v(native.data(), static_cast<Eigen::Index>(native.size()));
    Vector out = projection_ * v;
    const double n = out.norm();
    if (!(n > 0) || !std::isfinite(n)) throw ValidationError("embedding has zero or non-finite norm");
    return out / n;
  }

  GatewayStats stats() const { return {chat_calls_.load(), embedding_calls_.load(), cache_hits_.load(), tokens_.load()}; }

 private:
  static constexpr std::ptrdiff_t kMaxInFlight = 64;

  template <class Fn>
  auto with_retries(Fn&& fn) -> decltype(fn()) {
    auto backoff = cfg_.initial_backoff;
    for (int attempt = 1;; ++attempt) {
      in_flight_.acquire();
      try {
        auto result = fn();
        in_flight_.release();
        return result;
      } catch (const BackendError& e) {
        in_flight_.release();
        if (!e.retryable()) throw;
        if (attempt >= cfg_.max_attempts)
          throw BackendError("giving up after " + std::to_string(attempt) + " attempts: " + e.what(), false);
      } catch (...) {
        in_flight_.release();
        throw;
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }

  LlmConfig cfg_;
  std::shared_ptr<ChatBackend> chat_;
  std::shared_ptr<EmbeddingBackend> embedder_;
  ResponseCache cache_;
  std::counting_semaphore<kMaxInFlight> in_flight_;
  Matrix projection_;
  std::atomic<std::size_t> chat_calls_{0}, embedding_calls_{0}, cache_hits_{0}, tokens_{0};
};

}  // namespace corona
