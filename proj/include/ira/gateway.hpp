// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "ira/error.hpp"
#include "ira/util.hpp"

namespace ira {

enum class Role { Completion, Vqa, Caption, EmbedText, EmbedImage };

inline std::string_view to_string(Role r) {
    switch (r) {
        case Role::Completion: return "completion";
        case Role::Vqa: return "vqa";
        case Role::Caption: return "caption";
        case Role::EmbedText: return "embed_text";
        case Role::EmbedImage: return "embed_image";
    }
    return "completion";
}

inline Role parse_role(std::string_view s) {
    if (s == "completion") return Role::Completion;
    if (s == "vqa") return Role::Vqa;
    if (s == "caption") return Role::Caption;
    if (s == "embed_text") return Role::EmbedText;
    if (s == "embed_image") return Role::EmbedImage;
    fail(ErrorCode::ConfigInvalid, "unknown role '" + std::string(s) + "'", "role");
}

/// Connection settings for one external model role. A base_url of the form
/// "stub:<seed>" selects the built-in deterministic backend.
struct ServiceEndpointConfig {
    Role role = Role::Completion;
    std::string base_url = "stub:0";
    std::string model_name = "stub";
    double timeout_s = 60.0;
    int max_retries = 3;
    std::optional<double> rate_limit;  // requests per second
    std::size_t max_in_flight = 4;
    std::size_t dim = 0;       // embedding roles: declared dimension, 0 = accept what the service reports
    std::string fixture_path;  // stub only: canned responses

    [[nodiscard]] bool is_stub() const { return starts_with(base_url, "stub:"); }

    [[nodiscard]] std::uint64_t stub_seed() const {
        try {
            return std::stoull(base_url.substr(5));
        } catch (const std::exception&) {
            fail(ErrorCode::ConfigInvalid, "bad stub seed in '" + base_url + "'", "base_url");
        }
    }

    void validate() const {
        if (!(timeout_s > 0.0)) fail(ErrorCode::ConfigInvalid, "timeout must be > 0", "timeout");
        if (max_retries < 0) fail(ErrorCode::ConfigInvalid, "max_retries must be >= 0", "max_retries");
        if (rate_limit && !(*rate_limit > 0.0)) fail(ErrorCode::ConfigInvalid, "rate_limit must be > 0", "rate_limit");
        if (max_in_flight == 0) fail(ErrorCode::ConfigInvalid, "max_in_flight must be >= 1", "max_in_flight");
        if (is_stub()) (void)stub_seed();
    }

    /// Identity of the endpoint for per-endpoint throttling state.
    [[nodiscard]] std::string endpoint_key() const {
        return std::string(to_string(role)) + "|" + base_url + "|" + model_name;
    }
};

struct CompletionRequest {
    std::string prompt;
    int max_tokens = 64;
    double temperature = 0.0;
    std::vector<std::string> stop_sequences;
};

struct EmbeddingVector {
    std::vector<double> values;
    bool normalized = false;

    [[nodiscard]] std::size_t dim() const { return values.size(); }
};

inline double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline EmbeddingVector normalized(std::vector<double> values) {
    const double n = l2_norm(values);
    if (n == 0.0) return {std::move(values), false};
    for (auto& x : values) x /= n;
    return {std::move(values), true};
}

/// Image handed to a vision role: `ref` is the dataset identifier, `path`
/// the file whose bytes are sent.
struct ImageRef {
    std::string ref;
    fs::path path;
};

// ---------------------------------------------------------------------------
// Time

class Clock {
  public:
    using Duration = std::chrono::nanoseconds;
    virtual ~Clock() = default;
    virtual Duration now() = 0;
    virtual void sleep_for(Duration d) = 0;
};

class SystemClock final : public Clock {
  public:
    Duration now() override {
        return std::chrono::duration_cast<Duration>(std::chrono::steady_clock::now().time_since_epoch());
    }
    void sleep_for(Duration d) override { std::this_thread::sleep_for(d); }
};

/// Test clock: sleeping advances time instantly.
class VirtualClock final : public Clock {
  public:
    Duration now() override { return Duration(now_.load()); }
    void sleep_for(Duration d) override {
        if (d.count() > 0) now_ += d.count();
    }
    void advance(Duration d) { now_ += d.count(); }

  private:
    std::atomic<Duration::rep> now_{0};
};

inline Clock::Duration seconds(double s) {
    return std::chrono::duration_cast<Clock::Duration>(std::chrono::duration<double>(s));
}

/// Sliding-window limiter. With rate r, at most max(1, floor(r)) requests are
/// issued in any window of max(1 s, floor(r)/r), so no 1-second window
/// exceeds r.
class RateLimiter {
  public:
    RateLimiter(double rate, std::shared_ptr<Clock> clock) : clock_(std::move(clock)) {
        capacity_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rate)));
        window_ = seconds(std::max(1.0, static_cast<double>(capacity_) / rate));
    }

    void acquire() {
        std::lock_guard lock(mu_);
        auto now = clock_->now();
        if (issued_.size() == capacity_) {
            auto ready = issued_.front() + window_;
            if (now < ready) {
                clock_->sleep_for(ready - now);
                now = clock_->now();
            }
            issued_.pop_front();
        }
        issued_.push_back(now);
    }

  private:
    std::shared_ptr<Clock> clock_;
    std::size_t capacity_ = 1;
    Clock::Duration window_{};
    std::deque<Clock::Duration> issued_;
    std::mutex mu_;
};

/// Counting gate for concurrent requests against one endpoint.
class InFlightLimiter {
  public:
    explicit InFlightLimiter(std::size_t limit) : limit_(limit) {}

    class Guard {
      public:
        explicit Guard(InFlightLimiter& l) : l_(l) { l_.enter(); }
        ~Guard() { l_.leave(); }
        Guard(const Guard&) = delete;
        Guard& operator=(const Guard&) = delete;

      private:
        InFlightLimiter& l_;
    };

    [[nodiscard]] std::size_t peak() const { return peak_.load(); }

  private:
    void enter() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return active_ < limit_; });
        ++active_;
        peak_ = std::max(peak_.load(), active_);
    }
    void leave() {
        {
            std::lock_guard lock(mu_);
            --active_;
        }
        cv_.notify_one();
    }

    std::size_t limit_;
    std::size_t active_ = 0;
    std::atomic<std::size_t> peak_{0};
    std::mutex mu_;
    std::condition_variable cv_;
};

/// Exponential backoff: initial delay doubling per attempt, jittered by
/// +/- jitter (fraction).
struct RetryPolicy {
    double initial_delay_s = 1.0;
    double multiplier = 2.0;
    double jitter = 0.2;

    [[nodiscard]] double delay_s(int attempt, Rng& rng) const {
        const double base = initial_delay_s * std::pow(multiplier, attempt);
        return base * (1.0 + jitter * (2.0 * rng.uniform() - 1.0));
    }
};

// ---------------------------------------------------------------------------
// Transport

struct HttpResponse {
    int status = 200;
    std::string body;
};

/// POSTs a JSON body to `path` relative to the endpoint's base URL.
/// Implementations throw Error(Timeout) on timeouts and ServiceError with
/// status 0 when the connection fails.
class Transport {
  public:
    virtual ~Transport() = default;
    virtual HttpResponse post(const std::string& path, const std::string& body,
                              const std::vector<std::pair<std::string, std::string>>& headers,
                              Clock::Duration timeout) = 0;
};

using TransportFactory = std::function<std::shared_ptr<Transport>(const ServiceEndpointConfig&)>;

// ---------------------------------------------------------------------------
// Cache

/// Content-addressed on-disk response store: one JSON file per key under
/// `<dir>/<key[0:2]>/<key>.json`. Writes are atomic renames, so concurrent
/// writers of the same key leave one complete record.
class ResponseCache {
  public:
    explicit ResponseCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    static std::string key(Role role, const std::string& model, const json& request) {
        return sha256_hex(std::string(to_string(role)) + '\n' + model + '\n' + request.dump());
    }

    [[nodiscard]] std::optional<json> get(const std::string& key) const {
        auto path = path_for(key);
        std::error_code ec;
        if (!fs::exists(path, ec)) return std::nullopt;
        try {
            json rec = json::parse(read_file(path));
            return rec.at("response");
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    void put(const std::string& key, Role role, const std::string& model, const json& response) const {
        json rec = {{"key", key}, {"role", to_string(role)}, {"model", model}, {"response", response}};
        write_file_atomic(path_for(key), rec.dump());
    }

    [[nodiscard]] const fs::path& dir() const { return dir_; }

  private:
    [[nodiscard]] fs::path path_for(const std::string& key) const { return dir_ / key.substr(0, 2) / (key + ".json"); }

    fs::path dir_;
};

// ---------------------------------------------------------------------------
// Stub backend

/// Offline stand-in for the four model services. Every response is a pure
/// function of (seed, request); canned fixture responses take precedence.
///
/// Fixture file: {"complete": [{"contains"|"prompt": ..., "text": ...}],
///                "vqa": [{"image": ..., "question"?: ..., "answer": ...}],
///                "caption": [{"image": ..., "question"?: ..., "caption": ...}]}
/// `contains` is matched against the query block of the prompt, which is the
/// text after the last in-context example.
class StubBackend {
  public:
    StubBackend(std::uint64_t seed, std::size_t embed_dim, const std::string& fixture_path)
        : seed_(seed), embed_dim_(embed_dim == 0 ? kDefaultDim : embed_dim) {
        if (!fixture_path.empty()) fixtures_ = parse_json_file(fixture_path);
    }

    static constexpr std::size_t kDefaultDim = 64;

    json handle(Role role, const json& payload, const std::string& image_ref) const {
        switch (role) {
            case Role::Completion: return {{"text", complete(payload.at("prompt").get<std::string>())}};
            case Role::Vqa: return {{"answer", vqa(image_ref, payload.at("question").get<std::string>())}};
            case Role::Caption: {
                std::optional<std::string> q;
                if (payload.contains("question")) q = payload["question"].get<std::string>();
                return {{"caption", caption(image_ref, q)}};
            }
            case Role::EmbedText:
            case Role::EmbedImage: {
                const bool text = payload.at("kind") == "text";
                auto values = embed_values(text ? "text\n" + payload.at("text").get<std::string>()
                                                : "image\n" + image_ref);
                return {{"vector", values}, {"dim", values.size()}};
            }
        }
        return {};
    }

    static const std::vector<std::string>& answer_vocabulary() {
        static const std::vector<std::string> vocab = {
            "ski",   "snow",  "ham",    "water",  "surfing", "tennis", "red",  "wood",
            "horse", "pizza", "summer", "winter", "cold",    "dog",    "bread", "1990",
        };
        return vocab;
    }

  private:
    std::uint64_t h(std::string_view salt, std::string_view data) const {
        return stable_hash64(std::to_string(seed_) + '\x1f' + std::string(salt) + '\x1f' + std::string(data));
    }

    static std::string query_block(const std::string& prompt) {
        std::size_t cut = 0;
        for (std::string_view marker : {"TARGET-QUESTION:", "Q:", "Image information:"}) {
            auto pos = prompt.rfind(marker);
            if (pos != std::string::npos) cut = std::max(cut, pos);
        }
        return prompt.substr(cut);
    }

    static bool image_matches(const json& entry, const std::string& image_ref) {
        if (!entry.contains("image")) return true;
        const auto want = entry["image"].get<std::string>();
        return want == image_ref || want == fs::path(image_ref).filename().string();
    }

    std::optional<std::string> fixture_lookup(const char* section, const char* field,
                                              const std::function<bool(const json&)>& match) const {
        if (!fixtures_.is_object() || !fixtures_.contains(section)) return std::nullopt;
        for (const auto& entry : fixtures_[section]) {
            if (match(entry)) return entry.at(field).get<std::string>();
        }
        return std::nullopt;
    }

    std::string complete(const std::string& prompt) const {
        const std::string block = query_block(prompt);
        auto hit = fixture_lookup("complete", "text", [&](const json& e) {
            if (e.contains("prompt")) return e["prompt"].get<std::string>() == prompt;
            if (e.contains("contains")) return block.find(e["contains"].get<std::string>()) != std::string::npos;
            return false;
        });
        if (hit) return *hit;

        const std::string tail = trim(prompt.substr(prompt.size() > 32 ? prompt.size() - 32 : 0));
        if (ends_with(tail, "Sub questions:")) return sub_questions(prompt, block);
        if (ends_with(tail, "Summary:")) return summary(block);
        const auto& vocab = answer_vocabulary();
        if (ends_with(tail, "Answer:")) return " " + vocab[h("answer", block) % vocab.size()];
        auto x = h("complete", prompt);
        return vocab[x % vocab.size()] + " " + vocab[(x >> 16) % vocab.size()];
    }

    std::string sub_questions(const std::string& prompt, const std::string& block) const {
        static const std::vector<std::string> templates = {
            "What is the main object in the image?",
            "What color is the object?",
            "Where is this scene taking place?",
            "What season does it appear to be?",
            "What is the person holding?",
            "What material is it made of?",
            "What is the weather like?",
            "What activity is being performed?",
            "How old is the object?",
            "What is in the background?",
        };
        int k = 3;
        std::smatch m;
        static const std::regex count_re(R"(into (\d+) questions)");
        if (std::regex_search(prompt, m, count_re)) k = std::stoi(m[1].str());
        auto x = h("subq", block);
        std::string out;
        for (int i = 0; i < k; ++i) {
            if (i) out += ' ';
            out += std::to_string(i + 1) + ". " + templates[(x + static_cast<std::uint64_t>(i) * 3) % templates.size()];
        }
        return " " + out;
    }

    static std::string summary(const std::string& block) {
        // block looks like "Q: <q>\nA: <a>\nSummary:"
        std::string q;
        std::string a;
        for (const auto& line : split(block, "\n")) {
            auto t = trim(line);
            if (starts_with(t, "Q:")) q = trim(t.substr(2));
            if (starts_with(t, "A:")) a = trim(t.substr(2));
        }
        if (!q.empty() && (q.back() == '?' || q.back() == '.')) q.pop_back();
        return " Asked \"" + q + "\", the answer is " + a + ".";
    }

    std::string vqa(const std::string& image_ref, const std::string& question) const {
        auto hit = fixture_lookup("vqa", "answer", [&](const json& e) {
            return image_matches(e, image_ref) && (!e.contains("question") || e["question"] == question);
        });
        if (hit) return *hit;
        const auto& vocab = answer_vocabulary();
        return vocab[h("vqa", image_ref + '\n' + question) % vocab.size()];
    }

    std::string caption(const std::string& image_ref, const std::optional<std::string>& question) const {
        auto hit = fixture_lookup("caption", "caption", [&](const json& e) {
            if (!image_matches(e, image_ref)) return false;
            if (e.contains("question")) return question && e["question"] == *question;
            return true;
        });
        if (hit) return *hit;
        static const std::vector<std::string> subjects = {"a person", "a dog", "two people", "a man", "a woman", "a child"};
        static const std::vector<std::string> scenes = {"on a beach", "in the snow", "in a kitchen", "on a street", "near a tree", "at a table"};
        auto x = h("caption", image_ref + (question ? '\n' + *question : std::string{}));
        return subjects[x % subjects.size()] + " " + scenes[(x >> 8) % scenes.size()] + ".";
    }

    std::vector<double> embed_values(const std::string& content) const {
        Rng rng(h("embed", content));
        std::vector<double> v(embed_dim_);
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
        return v;
    }

    std::uint64_t seed_;
    std::size_t embed_dim_;
    json fixtures_;
};

// ---------------------------------------------------------------------------
// Gateway

struct GatewayOptions {
    std::optional<fs::path> cache_dir;
    std::optional<std::string> api_key;
    std::shared_ptr<Clock> clock = std::make_shared<SystemClock>();
    TransportFactory transport_factory;  // required for non-stub endpoints
    RetryPolicy retry;
    std::uint64_t jitter_seed = 0;
    bool record_requests = false;

    /// Reads IRA_CACHE_DIR and IRA_API_KEY.
    static GatewayOptions from_env() {
        GatewayOptions o;
        if (const char* dir = std::getenv("IRA_CACHE_DIR"); dir && *dir) o.cache_dir = fs::path(dir);
        if (const char* key = std::getenv("IRA_API_KEY"); key && *key) o.api_key = std::string(key);
        return o;
    }
};

struct RecordedRequest {
    Role role;
    std::string path;
    json payload;
};

/// Uniform client for the frozen model roles. Thread-safe.
class Gateway {
  public:
    explicit Gateway(GatewayOptions opts = {}) : opts_(std::move(opts)), jitter_rng_(opts_.jitter_seed) {
        if (!opts_.clock) opts_.clock = std::make_shared<SystemClock>();
        if (opts_.cache_dir) cache_.emplace(*opts_.cache_dir);
    }

    std::string complete(const ServiceEndpointConfig& cfg, const CompletionRequest& req) {
        require(cfg.role == Role::Completion, "complete() needs a completion endpoint");
        require(!req.prompt.empty(), "completion prompt must be non-empty");
        require(req.max_tokens >= 1, "max_tokens must be >= 1");
        require(req.temperature >= 0.0, "temperature must be >= 0");
        json payload = {{"model", cfg.model_name},
                        {"prompt", req.prompt},
                        {"max_tokens", req.max_tokens},
                        {"temperature", req.temperature},
                        {"stop", req.stop_sequences}};
        json resp = call(cfg, "/v1/complete", payload, "");
        return field<std::string>(resp, "text");
    }

    std::string vqa_answer(const ServiceEndpointConfig& cfg, const ImageRef& image, const std::string& question) {
        require(cfg.role == Role::Vqa, "vqa_answer() needs a vqa endpoint");
        json payload = {{"model", cfg.model_name}, {"image_b64", image_b64(image)}, {"question", question}};
        return field<std::string>(call(cfg, "/v1/vqa", payload, image.ref), "answer");
    }

    std::string caption(const ServiceEndpointConfig& cfg, const ImageRef& image,
                        const std::optional<std::string>& question = std::nullopt) {
        require(cfg.role == Role::Caption, "caption() needs a caption endpoint");
        json payload = {{"model", cfg.model_name}, {"image_b64", image_b64(image)}};
        if (question) payload["question"] = *question;
        return field<std::string>(call(cfg, "/v1/caption", payload, image.ref), "caption");
    }

    EmbeddingVector embed_text(const ServiceEndpointConfig& cfg, const std::string& text) {
        require(cfg.role == Role::EmbedText, "text embedding needs an embed_text endpoint");
        json payload = {{"model", cfg.model_name}, {"kind", "text"}, {"text", text}};
        return to_embedding(cfg, call(cfg, "/v1/embed", payload, ""));
    }

    EmbeddingVector embed_image(const ServiceEndpointConfig& cfg, const ImageRef& image) {
        require(cfg.role == Role::EmbedImage, "image embedding needs an embed_image endpoint");
        json payload = {{"model", cfg.model_name}, {"kind", "image"}, {"image_b64", image_b64(image)}};
        return to_embedding(cfg, call(cfg, "/v1/embed", payload, image.ref));
    }

    EmbeddingVector embed(const ServiceEndpointConfig& cfg, const std::variant<std::string, ImageRef>& payload) {
        if (const auto* text = std::get_if<std::string>(&payload)) return embed_text(cfg, *text);
        return embed_image(cfg, std::get<ImageRef>(payload));
    }

    /// Backend invocations (network requests or stub evaluations); cache hits excluded.
    [[nodiscard]] std::size_t network_calls() const { return network_calls_.load(); }
    [[nodiscard]] std::size_t cache_hits() const { return cache_hits_.load(); }

    [[nodiscard]] std::vector<RecordedRequest> recorded_requests() const {
        std::lock_guard lock(log_mu_);
        return log_;
    }

    [[nodiscard]] std::size_t peak_in_flight(const ServiceEndpointConfig& cfg) {
        return state_for(cfg).in_flight.peak();
    }

  private:
    struct EndpointState {
        explicit EndpointState(const ServiceEndpointConfig& cfg, const GatewayOptions& opts) : in_flight(cfg.max_in_flight) {
            if (cfg.rate_limit) limiter.emplace(*cfg.rate_limit, opts.clock);
            if (cfg.is_stub()) {
                stub.emplace(cfg.stub_seed(), cfg.dim, cfg.fixture_path);
            } else {
                if (!opts.transport_factory) {
                    fail(ErrorCode::ConfigInvalid, "no HTTP transport configured for " + cfg.base_url, "base_url");
                }
                transport = opts.transport_factory(cfg);
            }
        }
        InFlightLimiter in_flight;
        std::optional<RateLimiter> limiter;
        std::optional<StubBackend> stub;
        std::shared_ptr<Transport> transport;
    };

    EndpointState& state_for(const ServiceEndpointConfig& cfg) {
        std::lock_guard lock(state_mu_);
        auto key = cfg.endpoint_key();
        auto it = states_.find(key);
        if (it == states_.end()) {
            cfg.validate();
            it = states_.emplace(key, std::make_unique<EndpointState>(cfg, opts_)).first;
        }
        return *it->second;
    }

    static std::string image_b64(const ImageRef& image) {
        std::error_code ec;
        if (!fs::is_regular_file(image.path, ec)) {
            fail(ErrorCode::UnreadableImage, "cannot read image " + image.path.string(), image.ref);
        }
        std::string bytes;
        try {
            bytes = read_file(image.path);
        } catch (const Error&) {
            fail(ErrorCode::UnreadableImage, "cannot read image " + image.path.string(), image.ref);
        }
        return base64_encode(bytes);
    }

    template <typename T>
    static T field(const json& resp, const char* name) {
        try {
            return resp.at(name).get<T>();
        } catch (const json::exception&) {
            throw ServiceError(200, std::string("response lacks field '") + name + "': " + resp.dump());
        }
    }

    static EmbeddingVector to_embedding(const ServiceEndpointConfig& cfg, const json& resp) {
        auto values = field<std::vector<double>>(resp, "vector");
        if (resp.contains("dim") && resp["dim"].get<std::size_t>() != values.size()) {
            fail(ErrorCode::DimensionMismatch, "service reported dim " + resp["dim"].dump() + " but sent " +
                                                   std::to_string(values.size()) + " values");
        }
        if (cfg.dim != 0 && values.size() != cfg.dim) {
            fail(ErrorCode::DimensionMismatch, "expected dim " + std::to_string(cfg.dim) + ", got " +
                                                   std::to_string(values.size()));
        }
        if (values.empty()) fail(ErrorCode::DimensionMismatch, "empty embedding");
        return normalized(std::move(values));
    }

    json call(const ServiceEndpointConfig& cfg, const std::string& path, const json& payload,
              const std::string& image_ref) {
        if (opts_.record_requests) {
            std::lock_guard lock(log_mu_);
            log_.push_back({cfg.role, path, payload});
        }
        std::string cache_key;
        if (cache_) {
            const std::string model = cfg.is_stub() ? cfg.base_url + "|" + cfg.fixture_path + "|" + cfg.model_name
                                                    : cfg.model_name;
            cache_key = ResponseCache::key(cfg.role, model, payload);
            if (auto hit = cache_->get(cache_key)) {
                ++cache_hits_;
                return *hit;
            }
        }

        EndpointState& st = state_for(cfg);
        const std::string body = payload.dump();
        std::optional<Error> last;
        for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
            try {
                json resp = dispatch(cfg, st, path, payload, body, image_ref);
                if (cache_) cache_->put(cache_key, cfg.role, cfg.model_name, resp);
                return resp;
            } catch (const ServiceError& e) {
                if (!e.transient()) throw;
                if (cfg.max_retries == 0) throw;
                last.emplace(e);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::Timeout) throw;
                if (cfg.max_retries == 0) throw;
                last.emplace(e);
            }
            if (attempt < cfg.max_retries) {
                double delay = 0.0;
                {
                    std::lock_guard lock(jitter_mu_);
                    delay = opts_.retry.delay_s(attempt, jitter_rng_);
                }
                opts_.clock->sleep_for(seconds(delay));
            }
        }
        fail(ErrorCode::RetriesExhausted,
             std::to_string(cfg.max_retries + 1) + " attempts to " + cfg.base_url + path + " failed; last: " +
                 last->what());
    }

    json dispatch(const ServiceEndpointConfig& cfg, EndpointState& st, const std::string& path, const json& payload,
                  const std::string& body, const std::string& image_ref) {
        if (st.limiter) st.limiter->acquire();
        InFlightLimiter::Guard guard(st.in_flight);
        ++network_calls_;
        if (st.stub) return st.stub->handle(cfg.role, payload, image_ref);

        std::vector<std::pair<std::string, std::string>> headers = {{"Content-Type", "application/json"}};
        if (opts_.api_key) headers.emplace_back("Authorization", "Bearer " + *opts_.api_key);
        HttpResponse resp = st.transport->post(path, body, headers, seconds(cfg.timeout_s));
        if (resp.status < 200 || resp.status >= 300) throw ServiceError(resp.status, resp.body);
        try {
            return json::parse(resp.body);
        } catch (const json::parse_error&) {
            throw ServiceError(resp.status, "malformed response body: " + resp.body);
        }
    }

    GatewayOptions opts_;
    std::optional<ResponseCache> cache_;
    std::mutex state_mu_;
    std::map<std::string, std::unique_ptr<EndpointState>> states_;
    std::atomic<std::size_t> network_calls_{0};
    std::atomic<std::size_t> cache_hits_{0};
    mutable std::mutex log_mu_;
    std::vector<RecordedRequest> log_;
    std::mutex jitter_mu_;
    Rng jitter_rng_;
};

}  // namespace ira
