// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ira/answering.hpp"
#include "ira/dataset.hpp"
#include "ira/filter.hpp"
#include "ira/gateway.hpp"
#include "ira/inquiry.hpp"
#include "ira/parallel.hpp"
#include "ira/refinement.hpp"

namespace ira {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    fs::path path;
    DatasetFormat format = DatasetFormat::OkVqa;
    Split train_split = Split::Train;
    Split eval_split = Split::Test;
    fs::path image_root;
    bool official_normalization = false;
};

/// Endpoint names used by the pipeline. "reasoning" answers the final
/// question and falls back to "completion" when not configured.
inline constexpr std::array<std::string_view, 6> kEndpointNames = {"completion", "reasoning", "vqa",
                                                                   "caption",    "embed_text", "embed_image"};

struct PipelineConfig {
    DatasetConfig dataset;
    std::map<std::string, ServiceEndpointConfig> endpoints;
    std::size_t k = 3;
    std::optional<std::size_t> shots;  // default 16, or 20 for the prophet variant
    std::optional<std::size_t> supervision_shots;
    std::size_t ensemble = 1;
    bool disjoint = true;
    Variant variant = Variant::Pica;
    FilterInputMode filter_mode = FilterInputMode::Ensemble;
    bool refine_examples = true;
    std::optional<fs::path> filter_dir;
    std::uint64_t seed = 0;
    std::optional<fs::path> cache_dir;
    fs::path output_dir = "ira_out";
    FilterHyperparams train;
    std::size_t workers = 4;
    std::optional<fs::path> question_gen_examples;
    std::optional<fs::path> summary_examples;

    [[nodiscard]] std::size_t effective_shots() const { return shots.value_or(variant == Variant::Prophet ? 20 : 16); }
    [[nodiscard]] std::size_t effective_supervision_shots() const { return supervision_shots.value_or(effective_shots()); }
    [[nodiscard]] fs::path effective_filter_dir() const { return filter_dir.value_or(output_dir / "filters"); }

    [[nodiscard]] const ServiceEndpointConfig& endpoint(std::string_view name) const {
        auto it = endpoints.find(std::string(name));
        if (it == endpoints.end() && name == "reasoning") it = endpoints.find("completion");
        if (it == endpoints.end()) {
            fail(ErrorCode::ConfigInvalid, "endpoint '" + std::string(name) + "' not configured",
                 "endpoints." + std::string(name));
        }
        return it->second;
    }

    /// Modes whose filters are trained and consulted.
    [[nodiscard]] std::vector<FilterInputMode> filter_modes() const {
        if (filter_mode == FilterInputMode::Ensemble) return {kSingleModes.begin(), kSingleModes.end()};
        return {filter_mode};
    }

    void validate() const {
        if (dataset.path.empty() || !fs::is_directory(dataset.path)) {
            fail(ErrorCode::ConfigInvalid, "dataset.path '" + dataset.path.string() + "' is not a directory", "dataset.path");
        }
        if (!dataset.image_root.empty() && !fs::is_directory(dataset.image_root)) {
            fail(ErrorCode::ConfigInvalid, "dataset.image_root '" + dataset.image_root.string() + "' is not a directory",
                 "dataset.image_root");
        }
        if (k < 1) fail(ErrorCode::ConfigInvalid, "k must be >= 1", "k");
        if (ensemble < 1) fail(ErrorCode::ConfigInvalid, "ensemble must be >= 1", "ensemble");
        if (workers < 1) fail(ErrorCode::ConfigInvalid, "workers must be >= 1", "workers");
        if (train.batch_size < 1) fail(ErrorCode::ConfigInvalid, "train.batch_size must be >= 1", "train.batch_size");
        if (!(train.learning_rate > 0.0)) fail(ErrorCode::ConfigInvalid, "train.learning_rate must be > 0", "train.learning_rate");
        for (auto name : {"completion", "vqa", "caption", "embed_text", "embed_image"}) {
            const auto& ep = endpoint(name);
            ep.validate();
            if (!ep.fixture_path.empty() && !fs::exists(ep.fixture_path)) {
                fail(ErrorCode::ConfigInvalid, "fixture '" + ep.fixture_path + "' not found", "endpoints." + std::string(name) + ".fixture");
            }
        }
        endpoint("reasoning").validate();
        for (const auto& [field, p] : {std::pair{"question_gen_examples", question_gen_examples},
                                       std::pair{"summary_examples", summary_examples}}) {
            if (p && !fs::exists(*p)) fail(ErrorCode::ConfigInvalid, std::string(field) + " '" + p->string() + "' not found", field);
        }
    }
};

struct ConfigOverrides {
    std::optional<std::size_t> k;
    std::optional<std::size_t> shots;
    std::optional<std::size_t> ensemble;
    std::optional<Variant> variant;
    std::optional<FilterInputMode> filter_mode;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> output_dir;
    bool stub = false;
};

namespace detail {

inline Role role_for_endpoint(std::string_view name) {
    if (name == "completion" || name == "reasoning") return Role::Completion;
    return parse_role(name);
}

inline fs::path resolve_against(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || p.empty() ? path : base / path;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& field_prefix = {}) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    try {
        return j[key].get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCode::ConfigInvalid, field_prefix + key + ": " + e.what(), field_prefix + key);
    }
}

}  // namespace detail

/// Builds a config from its JSON form; relative paths resolve against `base_dir`.
///
/// Schema (all keys optional except dataset.path):
///   dataset: {path, format: okvqa|aokvqa, train_split, eval_split, image_root, official_normalization}
///   endpoints: {<name>: {base_url, model, timeout, max_retries, rate_limit, max_in_flight, dim, fixture}}
///   k, shots, supervision_shots, ensemble, disjoint, variant, filter_mode, refine_examples,
///   filter_dir, seed, cache_dir, output_dir, workers, question_gen_examples, summary_examples,
///   train: {learning_rate, batch_size, epochs, beta1, beta2, epsilon}
inline PipelineConfig config_from_json(const json& j, const fs::path& base_dir) {
    using detail::get_or;
    using detail::resolve_against;
    if (!j.is_object()) fail(ErrorCode::ConfigInvalid, "config must be a JSON object", "config");
    PipelineConfig c;
    try {
        const json ds = j.value("dataset", json::object());
        c.dataset.path = resolve_against(base_dir, get_or<std::string>(ds, "path", "", "dataset."));
        c.dataset.format = parse_dataset_format(get_or<std::string>(ds, "format", "okvqa", "dataset."));
        c.dataset.train_split = parse_split(get_or<std::string>(ds, "train_split", "train", "dataset."));
        c.dataset.eval_split = parse_split(get_or<std::string>(ds, "eval_split", "test", "dataset."));
        c.dataset.image_root = resolve_against(base_dir, get_or<std::string>(ds, "image_root", "", "dataset."));
        c.dataset.official_normalization = get_or<bool>(ds, "official_normalization", false, "dataset.");

        const json eps = j.value("endpoints", json::object());
        for (auto name : kEndpointNames) {
            const std::string key(name);
            if (!eps.contains(key)) continue;
            const json& e = eps[key];
            const std::string prefix = "endpoints." + key + ".";
            ServiceEndpointConfig ep;
            ep.role = detail::role_for_endpoint(name);
            ep.base_url = get_or<std::string>(e, "base_url", "", prefix);
            if (ep.base_url.empty()) fail(ErrorCode::ConfigInvalid, prefix + "base_url is required", prefix + "base_url");
            ep.model_name = get_or<std::string>(e, "model", ep.model_name, prefix);
            ep.timeout_s = get_or<double>(e, "timeout", ep.timeout_s, prefix);
            ep.max_retries = get_or<int>(e, "max_retries", ep.max_retries, prefix);
            if (e.contains("rate_limit") && !e["rate_limit"].is_null()) ep.rate_limit = get_or<double>(e, "rate_limit", 0.0, prefix);
            ep.max_in_flight = get_or<std::size_t>(e, "max_in_flight", ep.max_in_flight, prefix);
            ep.dim = get_or<std::size_t>(e, "dim", ep.dim, prefix);
            auto fixture = get_or<std::string>(e, "fixture", "", prefix);
            if (!fixture.empty()) ep.fixture_path = resolve_against(base_dir, fixture).string();
            c.endpoints[key] = ep;
        }

        c.k = get_or<std::size_t>(j, "k", c.k);
        if (j.contains("shots") && !j["shots"].is_null()) c.shots = get_or<std::size_t>(j, "shots", 0);
        if (j.contains("supervision_shots") && !j["supervision_shots"].is_null()) {
            c.supervision_shots = get_or<std::size_t>(j, "supervision_shots", 0);
        }
        c.ensemble = get_or<std::size_t>(j, "ensemble", c.ensemble);
        c.disjoint = get_or<bool>(j, "disjoint", c.disjoint);
        c.variant = parse_variant(get_or<std::string>(j, "variant", "pica"));
        c.filter_mode = parse_filter_mode(get_or<std::string>(j, "filter_mode", "ensemble"));
        c.refine_examples = get_or<bool>(j, "refine_examples", c.refine_examples);
        if (auto fd = get_or<std::string>(j, "filter_dir", ""); !fd.empty()) c.filter_dir = resolve_against(base_dir, fd);
        c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
        if (auto cd = get_or<std::string>(j, "cache_dir", ""); !cd.empty()) c.cache_dir = resolve_against(base_dir, cd);
        c.output_dir = resolve_against(base_dir, get_or<std::string>(j, "output_dir", "ira_out"));
        c.workers = get_or<std::size_t>(j, "workers", c.workers);
        if (auto p = get_or<std::string>(j, "question_gen_examples", ""); !p.empty()) {
            c.question_gen_examples = resolve_against(base_dir, p);
        }
        if (auto p = get_or<std::string>(j, "summary_examples", ""); !p.empty()) c.summary_examples = resolve_against(base_dir, p);

        const json tr = j.value("train", json::object());
        c.train.learning_rate = get_or<double>(tr, "learning_rate", c.train.learning_rate, "train.");
        c.train.batch_size = get_or<std::size_t>(tr, "batch_size", c.train.batch_size, "train.");
        c.train.epochs = get_or<std::size_t>(tr, "epochs", c.train.epochs, "train.");
        c.train.beta1 = get_or<double>(tr, "beta1", c.train.beta1, "train.");
        c.train.beta2 = get_or<double>(tr, "beta2", c.train.beta2, "train.");
        c.train.epsilon = get_or<double>(tr, "epsilon", c.train.epsilon, "train.");
    } catch (const json::exception& e) {
        fail(ErrorCode::ConfigInvalid, e.what(), "config");
    }
    return c;
}

/// Precedence: overrides (flags) > file > defaults. With `stub`, every
/// endpoint is redirected to the offline backend seeded by the run seed.
inline PipelineConfig load_config(const fs::path& path, const ConfigOverrides& overrides = {}) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        fail(ErrorCode::ConfigInvalid, path.string() + ": " + e.what(), "config");
    } catch (const Error& e) {
        fail(ErrorCode::ConfigInvalid, e.what(), "config");
    }
    PipelineConfig c = config_from_json(j, fs::absolute(path).parent_path());
    if (overrides.k) c.k = *overrides.k;
    if (overrides.shots) c.shots = *overrides.shots;
    if (overrides.ensemble) c.ensemble = *overrides.ensemble;
    if (overrides.variant) c.variant = *overrides.variant;
    if (overrides.filter_mode) c.filter_mode = *overrides.filter_mode;
    if (overrides.seed) c.seed = *overrides.seed;
    if (overrides.output_dir) c.output_dir = *overrides.output_dir;
    if (overrides.stub) {
        for (auto& [name, ep] : c.endpoints) ep.base_url = "stub:" + std::to_string(c.seed);
    }
    c.validate();
    return c;
}

inline json endpoint_json(const ServiceEndpointConfig& ep) {
    json j = {{"role", to_string(ep.role)}, {"base_url", ep.base_url}, {"model", ep.model_name}, {"dim", ep.dim}};
    if (!ep.fixture_path.empty()) j["fixture_sha256"] = sha256_hex(read_file(ep.fixture_path));
    return j;
}

// ---------------------------------------------------------------------------
// Stages

enum class Stage { Caption, Inquire, Summarize, Supervise, TrainFilter, Select, Answer, Evaluate, All };

inline constexpr std::array<Stage, 8> kStageOrder = {Stage::Caption,     Stage::Inquire, Stage::Summarize,
                                                     Stage::Supervise,   Stage::TrainFilter, Stage::Select,
                                                     Stage::Answer,      Stage::Evaluate};

inline std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::Caption: return "caption";
        case Stage::Inquire: return "inquire";
        case Stage::Summarize: return "summarize";
        case Stage::Supervise: return "supervise";
        case Stage::TrainFilter: return "train-filter";
        case Stage::Select: return "select";
        case Stage::Answer: return "answer";
        case Stage::Evaluate: return "evaluate";
        case Stage::All: return "all";
    }
    return "all";
}

inline Stage parse_stage(std::string_view s) {
    for (auto st : kStageOrder) {
        if (to_string(st) == s) return st;
    }
    if (s == "all") return Stage::All;
    fail(ErrorCode::ConfigInvalid, "unknown stage '" + std::string(s) + "'", "stage");
}

struct StageReport {
    Stage stage = Stage::All;
    std::size_t instances_processed = 0;
    std::size_t failures = 0;
    bool up_to_date = false;  // inputs unchanged, nothing recomputed
    double wall_time_s = 0.0;
    json details = json::object();

    [[nodiscard]] json to_json() const {
        return {{"stage", to_string(stage)}, {"instances_processed", instances_processed}, {"failures", failures},
                {"up_to_date", up_to_date},  {"wall_time", wall_time_s},                   {"details", details}};
    }
};

enum class ProbeMode { Original, All, Random, Best };

inline std::string_view to_string(ProbeMode m) {
    switch (m) {
        case ProbeMode::Original: return "original";
        case ProbeMode::All: return "all";
        case ProbeMode::Random: return "random";
        case ProbeMode::Best: return "best";
    }
    return "original";
}

inline ProbeMode parse_probe_mode(std::string_view s) {
    if (s == "original") return ProbeMode::Original;
    if (s == "all") return ProbeMode::All;
    if (s == "random") return ProbeMode::Random;
    if (s == "best") return ProbeMode::Best;
    fail(ErrorCode::ConfigInvalid, "unknown probe mode '" + std::string(s) + "'", "mode");
}

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirectoryLock {
  public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".ira.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            fail(ErrorCode::Io, "output directory is locked by another run (remove " + path_.string() +
                                    " if no run is active)");
        }
    }
    ~DirectoryLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

  private:
    fs::path path_;
    int fd_ = -1;
};

/// Runs the inquire -> refine -> answer -> evaluate stages over one output
/// directory. Every stage reads its predecessors' line-delimited artifacts,
/// writes its own, and records a manifest so unchanged stages are skipped.
class Pipeline {
  public:
    static constexpr int kArtifactVersion = 1;

    Pipeline(PipelineConfig config, GatewayOptions gateway_options)
        : cfg_(std::move(config)), gateway_([&] {
              if (cfg_.cache_dir) gateway_options.cache_dir = cfg_.cache_dir;
              return Gateway(std::move(gateway_options));
          }()) {
        norm_.official_tables = cfg_.dataset.official_normalization;
    }

    [[nodiscard]] const PipelineConfig& config() const { return cfg_; }
    Gateway& gateway() { return gateway_; }

    std::vector<StageReport> run(Stage stage) {
        DirectoryLock lock(cfg_.output_dir);
        std::vector<StageReport> reports;
        if (stage == Stage::All) {
            for (auto s : kStageOrder) reports.push_back(run_locked(s));
        } else {
            reports.push_back(run_locked(stage));
        }
        return reports;
    }

    StageReport run_stage(Stage stage) {
        require(stage != Stage::All, "run_stage takes a single stage; use run(Stage::All)");
        return run(stage).front();
    }

    /// Answers each evaluation question with one context policy over its QA
    /// pairs and writes probe_<mode>.json. "best" takes, per question, the
    /// maximum over no pairs, all pairs, and each single pair.
    json probe_qa_modes(ProbeMode mode) {
        DirectoryLock lock(cfg_.output_dir);
        load_data();
        auto inquiry = load_records(Stage::Inquire);
        auto captions = load_records(Stage::Caption);
        const ExamplePool pool = build_pool(captions, nullptr, nullptr);
        const auto& reasoning = cfg_.endpoint("reasoning");

        auto answer_with = [&](const VQAInstance& inst, const std::vector<std::string>& info) {
            EnsembleRequest req{make_context(inst, info), query_key(inst), inst.question_id};
            return ensemble_predict(gateway_, reasoning, pool, req, {1, cfg_.effective_shots(), true}, cfg_.variant,
                                    ExampleInfo::None, 1)
                .answer;
        };

        auto outcomes = parallel_map<json>(eval_.size(), cfg_.workers, [&](std::size_t i) {
            VQAInstance inst = with_caption(eval_[i], captions);
            require(!inst.gold_answers.empty(), "probe needs gold answers for " + inst.question_id);
            auto it = inquiry.find(inst.question_id);
            if (it == inquiry.end()) fail(ErrorCode::MissingArtifact, "no QA pairs for " + inst.question_id, "inquire");
            std::vector<std::string> pairs;
            for (const auto& p : pairs_from_record(it->second)) pairs.push_back(p.joined());

            auto acc = [&](const std::vector<std::string>& info) {
                return instance_accuracy(answer_with(inst, info), inst.gold_answers, norm_);
            };
            double score = 0.0;
            switch (mode) {
                case ProbeMode::Original: score = acc({}); break;
                case ProbeMode::All: score = acc(pairs); break;
                case ProbeMode::Random: {
                    if (pairs.empty()) {
                        score = acc({});
                    } else {
                        Rng rng(stable_hash64(std::to_string(cfg_.seed) + "\x1fprobe\x1f" + inst.question_id));
                        score = acc({pairs[rng.below(pairs.size())]});
                    }
                    break;
                }
                case ProbeMode::Best: {
                    score = std::max(acc({}), acc(pairs));
                    for (const auto& p : pairs) score = std::max(score, acc({p}));
                    break;
                }
            }
            return json{{"question_id", inst.question_id}, {"accuracy", score}};
        });

        json per_question = json::array();
        double total = 0.0;
        std::size_t excluded = 0;
        for (std::size_t i = 0; i < outcomes.size(); ++i) {
            if (!outcomes[i].ok()) {
                log_failure("probe", eval_[i].question_id, outcomes[i].error);
                ++excluded;
                continue;
            }
            total += (*outcomes[i].value)["accuracy"].get<double>();
            per_question.push_back(*outcomes[i].value);
        }
        const std::size_t evaluated = per_question.size();
        json report = {{"mode", to_string(mode)},
                       {"accuracy", evaluated ? total / static_cast<double>(evaluated) : 0.0},
                       {"evaluated", evaluated},
                       {"excluded", excluded},
                       {"per_question", per_question}};
        write_file_atomic(cfg_.output_dir / ("probe_" + std::string(to_string(mode)) + ".json"), report.dump(2) + "\n");
        return report;
    }

    [[nodiscard]] fs::path artifact_path(Stage s) const {
        switch (s) {
            case Stage::Caption: return cfg_.output_dir / "captions.jsonl";
            case Stage::Inquire: return cfg_.output_dir / "inquiry.jsonl";
            case Stage::Summarize: return cfg_.output_dir / "summaries.jsonl";
            case Stage::Supervise: return cfg_.output_dir / "supervision.jsonl";
            case Stage::TrainFilter: return cfg_.effective_filter_dir();
            case Stage::Select: return cfg_.output_dir / "selected.jsonl";
            case Stage::Answer: return cfg_.output_dir / "predictions.jsonl";
            case Stage::Evaluate: return cfg_.output_dir / "report.json";
            case Stage::All: break;
        }
        return cfg_.output_dir;
    }

  private:
    using Records = std::map<std::string, json>;

    // -- data ---------------------------------------------------------------

    void load_data() {
        if (loaded_) return;
        train_ = load_dataset(cfg_.dataset.path, cfg_.dataset.format, cfg_.dataset.train_split);
        eval_ = load_dataset(cfg_.dataset.path, cfg_.dataset.format, cfg_.dataset.eval_split);
        qgen_examples_ = cfg_.question_gen_examples ? load_question_gen_examples(*cfg_.question_gen_examples)
                                                    : default_question_gen_examples();
        summary_examples_ = cfg_.summary_examples ? load_summary_examples(*cfg_.summary_examples)
                                                  : default_summary_examples();
        loaded_ = true;
    }

    [[nodiscard]] std::vector<VQAInstance> all_instances() const {
        std::vector<VQAInstance> all = train_;
        all.insert(all.end(), eval_.begin(), eval_.end());
        return all;
    }

    [[nodiscard]] std::string dataset_hash() const {
        std::string acc;
        for (auto split : {cfg_.dataset.train_split, cfg_.dataset.eval_split}) {
            for (const auto& f : {questions_file(cfg_.dataset.path, split), annotations_file(cfg_.dataset.path, split),
                                  cfg_.dataset.path / ("aokvqa_v1p0_" + std::string(to_string(split)) + ".json")}) {
                if (fs::exists(f)) acc += f.filename().string() + ":" + sha256_hex(read_file(f)) + "\n";
            }
        }
        return sha256_hex(acc);
    }

    static VQAInstance with_caption(VQAInstance inst, const Records& captions) {
        auto it = captions.find(inst.question_id);
        if (it == captions.end()) fail(ErrorCode::MissingArtifact, "no caption for " + inst.question_id, "caption");
        inst.caption = it->second.at("caption").get<std::string>();
        return inst;
    }

    static std::vector<QAPair> pairs_from_record(const json& rec) {
        std::vector<QAPair> pairs;
        const auto& qs = rec.at("sub_questions");
        const auto& as = rec.at("answers");
        const auto& idx = rec.at("indices");
        for (std::size_t i = 0; i < qs.size(); ++i) {
            pairs.push_back({qs[i].get<std::string>(), as[i].get<std::string>(), idx[i].get<std::size_t>()});
        }
        return pairs;
    }

    static std::vector<InfoItem> items_from_records(const json& inquiry_rec, const json& summary_rec) {
        std::vector<InfoItem> items;
        std::map<std::size_t, std::string> texts;
        for (const auto& s : summary_rec.at("summaries")) texts[s.at("index").get<std::size_t>()] = s.at("text").get<std::string>();
        const std::string qid = inquiry_rec.at("question_id").get<std::string>();
        for (auto& p : pairs_from_record(inquiry_rec)) {
            auto it = texts.find(p.index);
            if (it == texts.end()) continue;
            items.push_back({p, {it->second, p.index, qid}});
        }
        return items;
    }

    // -- embeddings ---------------------------------------------------------

    static std::string text_key(const std::string& text) { return sha256_hex("text\n" + text); }
    static std::string image_key(const std::string& ref) { return sha256_hex("image\n" + ref); }

    std::vector<double> embed_text(const std::string& text) {
        const auto key = text_key(text);
        {
            std::lock_guard lock(embed_mu_);
            if (auto it = embed_memo_.find(key); it != embed_memo_.end()) return it->second;
        }
        auto v = gateway_.embed_text(cfg_.endpoint("embed_text"), text).values;
        std::lock_guard lock(embed_mu_);
        return embed_memo_.emplace(key, std::move(v)).first->second;
    }

    std::vector<double> embed_image(const VQAInstance& inst) {
        const auto key = image_key(inst.image_ref);
        {
            std::lock_guard lock(embed_mu_);
            if (auto it = embed_memo_.find(key); it != embed_memo_.end()) return it->second;
        }
        auto v = gateway_.embed_image(cfg_.endpoint("embed_image"), image_for(inst, cfg_.dataset.image_root)).values;
        std::lock_guard lock(embed_mu_);
        return embed_memo_.emplace(key, std::move(v)).first->second;
    }

    std::vector<double> query_key(const VQAInstance& inst) {
        EmbeddingVector q{embed_text(inst.question), true};
        std::optional<EmbeddingVector> c;
        if (inst.caption) c = EmbeddingVector{embed_text(*inst.caption), true};
        return selection_key(q, c);
    }

    // -- artifacts ----------------------------------------------------------

    [[nodiscard]] fs::path manifest_path(Stage s) const {
        return cfg_.output_dir / "manifests" / (std::string(to_string(s)) + ".json");
    }

    [[nodiscard]] std::optional<json> read_manifest(Stage s) const {
        auto p = manifest_path(s);
        if (!fs::exists(p)) return std::nullopt;
        try {
            return parse_json_file(p);
        } catch (const Error&) {
            return std::nullopt;
        }
    }

    [[nodiscard]] bool manifest_matches(Stage s, const std::string& inputs_hash) const {
        auto m = read_manifest(s);
        if (!m || m->value("inputs_hash", "") != inputs_hash) return false;
        for (const auto& [file, hash] : m->at("outputs").items()) {
            auto p = cfg_.output_dir / file;
            if (!fs::exists(p) || sha256_hex(read_file(p)) != hash.get<std::string>()) return false;
        }
        return true;
    }

    void write_manifest(Stage s, const std::string& inputs_hash, const std::vector<fs::path>& outputs) const {
        json files = json::object();
        for (const auto& p : outputs) files[fs::relative(p, cfg_.output_dir).generic_string()] = sha256_hex(read_file(p));
        json m = {{"stage", to_string(s)}, {"version", kArtifactVersion}, {"inputs_hash", inputs_hash}, {"outputs", files}};
        write_file_atomic(manifest_path(s), m.dump(2) + "\n");
    }

    /// Digest of a completed upstream stage; MissingArtifact if it never finished.
    [[nodiscard]] std::string upstream_digest(Stage s) const {
        auto m = read_manifest(s);
        if (!m) fail(ErrorCode::MissingArtifact, "stage '" + std::string(to_string(s)) + "' has not been run", std::string(to_string(s)));
        for (const auto& [file, hash] : m->at("outputs").items()) {
            if (!fs::exists(cfg_.output_dir / file)) {
                fail(ErrorCode::MissingArtifact, "artifact " + file + " is missing", std::string(to_string(s)));
            }
        }
        return sha256_hex(m->dump());
    }

    /// Records of a completed jsonl stage keyed by question_id.
    [[nodiscard]] Records load_records(Stage s) const {
        (void)upstream_digest(s);
        Records out;
        bool header = true;
        for (auto& rec : read_jsonl(artifact_path(s))) {
            if (header) {
                header = false;
                if (rec.contains("ira_artifact")) continue;
            }
            auto qid = rec.at("question_id").get<std::string>();
            out[qid] = std::move(rec);
        }
        return out;
    }

    static void log_failure(std::string_view stage, const std::string& qid, const std::exception_ptr& err) {
        try {
            std::rethrow_exception(err);
        } catch (const std::exception& e) {
            std::cerr << "[ira] " << stage << ": question " << qid << " failed: " << e.what() << "\n";
        }
    }

    static std::string error_text(const std::exception_ptr& err) {
        try {
            std::rethrow_exception(err);
        } catch (const std::exception& e) {
            return e.what();
        }
    }

    /// Shared driver for per-instance stages. Records already present under a
    /// matching header are kept (resumption) and new ones are appended.
    StageReport run_instance_stage(Stage stage, const std::vector<VQAInstance>& instances, const std::string& inputs_hash,
                                   const std::function<json(const VQAInstance&)>& work) {
        StageReport report;
        report.stage = stage;
        const fs::path path = artifact_path(stage);
        const fs::path failures_path = cfg_.output_dir / (std::string(to_string(stage)) + ".failures.jsonl");
        const json header = {{"ira_artifact", to_string(stage)}, {"version", kArtifactVersion}, {"inputs_hash", inputs_hash}};

        std::set<std::string> done;
        std::string existing;
        if (fs::exists(path)) {
            auto recs = read_jsonl(path);
            if (!recs.empty() && recs.front() == header) {
                existing = read_file(path);
                for (std::size_t i = 1; i < recs.size(); ++i) done.insert(recs[i].at("question_id").get<std::string>());
            }
        }
        if (existing.empty()) existing = header.dump() + "\n";

        std::vector<const VQAInstance*> todo;
        for (const auto& inst : instances) {
            if (!done.count(inst.question_id)) todo.push_back(&inst);
        }
        auto outcomes = parallel_map<json>(todo.size(), cfg_.workers, [&](std::size_t i) { return work(*todo[i]); });

        std::string appended;
        std::vector<json> failures;
        for (std::size_t i = 0; i < outcomes.size(); ++i) {
            if (outcomes[i].ok()) {
                appended += outcomes[i].value->dump() + "\n";
                ++report.instances_processed;
            } else {
                log_failure(to_string(stage), todo[i]->question_id, outcomes[i].error);
                failures.push_back({{"question_id", todo[i]->question_id}, {"error", error_text(outcomes[i].error)}});
            }
        }
        report.failures = failures.size();
        write_file_atomic(path, existing + appended);
        std::vector<fs::path> outputs = {path};
        if (!failures.empty()) {
            write_file_atomic(failures_path, to_jsonl(failures));
            outputs.push_back(failures_path);
        } else if (fs::exists(failures_path)) {
            fs::remove(failures_path);
        }
        write_manifest(stage, inputs_hash, outputs);
        report.details["resumed_from"] = done.size();
        return report;
    }

    // -- stage dispatch -----------------------------------------------------

    StageReport run_locked(Stage stage) {
        const auto start = std::chrono::steady_clock::now();
        load_data();
        const std::string inputs_hash = stage_inputs_hash(stage);
        StageReport report;
        if (manifest_matches(stage, inputs_hash)) {
            report.stage = stage;
            report.up_to_date = true;
        } else {
            switch (stage) {
                case Stage::Caption: report = stage_caption(inputs_hash); break;
                case Stage::Inquire: report = stage_inquire(inputs_hash); break;
                case Stage::Summarize: report = stage_summarize(inputs_hash); break;
                case Stage::Supervise: report = stage_supervise(inputs_hash); break;
                case Stage::TrainFilter: report = stage_train_filter(inputs_hash); break;
                case Stage::Select: report = stage_select(inputs_hash); break;
                case Stage::Answer: report = stage_answer(inputs_hash); break;
                case Stage::Evaluate: report = stage_evaluate(inputs_hash); break;
                case Stage::All: break;
            }
        }
        report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return report;
    }

    /// Content hash over the stage's relevant settings and upstream artifacts.
    std::string stage_inputs_hash(Stage stage) const {
        json in = {{"stage", to_string(stage)}, {"version", kArtifactVersion}};
        auto ep = [&](std::string_view name) { return endpoint_json(cfg_.endpoint(name)); };
        auto upstream = [&](std::initializer_list<Stage> stages) {
            json u = json::object();
            for (auto s : stages) u[std::string(to_string(s))] = upstream_digest(s);
            return u;
        };
        auto train_json = [&] {
            return json{{"learning_rate", cfg_.train.learning_rate}, {"batch_size", cfg_.train.batch_size},
                        {"epochs", cfg_.train.epochs},               {"beta1", cfg_.train.beta1},
                        {"beta2", cfg_.train.beta2},                 {"epsilon", cfg_.train.epsilon}};
        };
        std::vector<std::string> modes;
        for (auto m : cfg_.filter_modes()) modes.emplace_back(to_string(m));

        switch (stage) {
            case Stage::Caption:
                in["dataset"] = dataset_hash();
                in["caption"] = ep("caption");
                in["variant"] = to_string(cfg_.variant);
                break;
            case Stage::Inquire: {
                json ex = json::array();
                for (const auto& e : qgen_examples_) ex.push_back({e.target_question, e.caption, e.sub_questions});
                in["k"] = cfg_.k;
                in["completion"] = ep("completion");
                in["vqa"] = ep("vqa");
                in["examples"] = ex;
                in["upstream"] = upstream({Stage::Caption});
                break;
            }
            case Stage::Summarize: {
                json ex = json::array();
                for (const auto& e : summary_examples_) ex.push_back({e.question, e.answer, e.summary});
                in["completion"] = ep("completion");
                in["examples"] = ex;
                in["upstream"] = upstream({Stage::Inquire});
                break;
            }
            case Stage::Supervise:
                in["reasoning"] = ep("reasoning");
                in["embed_text"] = ep("embed_text");
                in["embed_image"] = ep("embed_image");
                in["variant"] = to_string(cfg_.variant);
                in["shots"] = cfg_.effective_supervision_shots();
                in["modes"] = modes;
                in["official_normalization"] = cfg_.dataset.official_normalization;
                in["upstream"] = upstream({Stage::Caption, Stage::Inquire, Stage::Summarize});
                break;
            case Stage::TrainFilter:
                in["train"] = train_json();
                in["seed"] = cfg_.seed;
                in["modes"] = modes;
                in["upstream"] = upstream({Stage::Supervise});
                break;
            case Stage::Select:
                in["embed_text"] = ep("embed_text");
                in["embed_image"] = ep("embed_image");
                in["modes"] = modes;
                in["refine_examples"] = cfg_.refine_examples;
                in["upstream"] = upstream({Stage::Inquire, Stage::Summarize, Stage::TrainFilter});
                break;
            case Stage::Answer:
                in["reasoning"] = ep("reasoning");
                in["embed_text"] = ep("embed_text");
                in["variant"] = to_string(cfg_.variant);
                in["shots"] = cfg_.effective_shots();
                in["ensemble"] = cfg_.ensemble;
                in["disjoint"] = cfg_.disjoint;
                in["refine_examples"] = cfg_.refine_examples;
                in["upstream"] = upstream({Stage::Caption, Stage::Summarize, Stage::Select});
                break;
            case Stage::Evaluate:
                in["dataset"] = dataset_hash();
                in["official_normalization"] = cfg_.dataset.official_normalization;
                in["upstream"] = upstream({Stage::Answer});
                break;
            case Stage::All: break;
        }
        return sha256_hex(in.dump());
    }

    // -- stages -------------------------------------------------------------

    StageReport stage_caption(const std::string& inputs_hash) {
        const auto& ep = cfg_.endpoint("caption");
        return run_instance_stage(Stage::Caption, all_instances(), inputs_hash, [&](const VQAInstance& inst) {
            std::string caption;
            std::string source = "dataset";
            if (inst.caption) {
                caption = *inst.caption;
            } else {
                std::optional<std::string> q;
                if (cfg_.variant == Variant::PromptCap) q = inst.question;
                caption = trim(gateway_.caption(ep, image_for(inst, cfg_.dataset.image_root), q));
                source = "service";
            }
            return json{{"question_id", inst.question_id}, {"split", to_string(inst.split)}, {"caption", caption},
                        {"source", source}};
        });
    }

    StageReport stage_inquire(const std::string& inputs_hash) {
        const Records captions = load_records(Stage::Caption);
        const InquiryEndpoints eps{cfg_.endpoint("completion"), cfg_.endpoint("vqa"), cfg_.endpoint("caption")};
        InquiryOptions opts;
        opts.k = cfg_.k;
        opts.workers = 1;
        opts.image_root = cfg_.dataset.image_root;
        return run_instance_stage(Stage::Inquire, all_instances(), inputs_hash, [&](const VQAInstance& raw) {
            const VQAInstance inst = with_caption(raw, captions);
            auto pairs = generate_qa_pairs(gateway_, eps, inst, qgen_examples_, opts);
            json qs = json::array();
            json as = json::array();
            json idx = json::array();
            for (const auto& p : pairs) {
                qs.push_back(p.sub_question);
                as.push_back(p.answer);
                idx.push_back(p.index);
            }
            return json{{"question_id", inst.question_id}, {"caption", *inst.caption}, {"sub_questions", qs},
                        {"answers", as},                   {"indices", idx}};
        });
    }

    StageReport stage_summarize(const std::string& inputs_hash) {
        const Records inquiry = load_records(Stage::Inquire);
        const auto& ep = cfg_.endpoint("completion");
        std::vector<VQAInstance> todo;
        for (const auto& inst : all_instances()) {
            if (inquiry.count(inst.question_id)) todo.push_back(inst);
        }
        return run_instance_stage(Stage::Summarize, todo, inputs_hash, [&](const VQAInstance& inst) {
            json out = json::array();
            for (const auto& p : pairs_from_record(inquiry.at(inst.question_id))) {
                auto s = summarize(gateway_, ep, inst.question_id, p, summary_examples_);
                out.push_back({{"index", s.source_index}, {"text", s.text}});
            }
            return json{{"question_id", inst.question_id}, {"summaries", out}};
        });
    }

    StageReport stage_supervise(const std::string& inputs_hash) {
        const Records captions = load_records(Stage::Caption);
        const Records inquiry = load_records(Stage::Inquire);
        const Records summaries = load_records(Stage::Summarize);
        const ExamplePool pool = build_pool(captions, nullptr, nullptr);
        const auto& reasoning = cfg_.endpoint("reasoning");
        const auto modes = cfg_.filter_modes();
        const std::size_t shots = cfg_.effective_supervision_shots();

        AnswerFn answer = [&](const VQAInstance& inst, const std::string& info) {
            EnsembleRequest req{make_context(inst, {info}), query_key(inst), inst.question_id};
            return ensemble_predict(gateway_, reasoning, pool, req, {1, shots, true}, cfg_.variant, ExampleInfo::None, 1)
                .answer;
        };
        EvaluatorFn evaluate = [&](const std::string& pred, const std::vector<std::string>& gold) {
            return instance_accuracy(pred, gold, norm_);
        };

        std::vector<VQAInstance> todo;
        for (const auto& inst : train_) {
            if (inquiry.count(inst.question_id) && summaries.count(inst.question_id)) todo.push_back(inst);
        }
        StageReport report = run_instance_stage(Stage::Supervise, todo, inputs_hash, [&](const VQAInstance& raw) {
            const VQAInstance inst = with_caption(raw, captions);
            std::map<std::string, std::vector<InfoItem>> info;
            info[inst.question_id] =
                items_from_records(inquiry.at(inst.question_id), summaries.at(inst.question_id));
            json recs = json::array();
            for (const auto& r : build_supervision({inst}, info, modes, answer, evaluate)) {
                // Warm the embeddings used by training.
                (void)embed_text(r.info_text);
                recs.push_back(r.to_json());
            }
            (void)embed_text(inst.question);
            (void)embed_image(inst);
            return json{{"question_id", inst.question_id}, {"records", recs}};
        });

        // Sidecar: every embedding training needs, keyed by content hash.
        const Records done = load_records(Stage::Supervise);
        std::map<std::string, std::vector<double>> sidecar;
        for (const auto& inst : todo) {
            auto it = done.find(inst.question_id);
            if (it == done.end()) continue;
            sidecar[text_key(inst.question)] = embed_text(inst.question);
            sidecar[image_key(inst.image_ref)] = embed_image(inst);
            for (const auto& r : it->second.at("records")) {
                const auto t = r.at("info_text").get<std::string>();
                sidecar[text_key(t)] = embed_text(t);
            }
        }
        std::vector<json> rows;
        for (const auto& [k, v] : sidecar) rows.push_back({{"key", k}, {"vector", v}});
        const fs::path sidecar_path = cfg_.output_dir / "supervision_embeddings.jsonl";
        write_file_atomic(sidecar_path, to_jsonl(rows));
        std::vector<fs::path> outputs = {artifact_path(Stage::Supervise), sidecar_path};
        const fs::path failures_path = cfg_.output_dir / "supervise.failures.jsonl";
        if (fs::exists(failures_path)) outputs.push_back(failures_path);
        write_manifest(Stage::Supervise, inputs_hash, outputs);
        return report;
    }

    StageReport stage_train_filter(const std::string& inputs_hash) {
        const Records supervision = load_records(Stage::Supervise);
        std::map<std::string, std::vector<double>> sidecar;
        for (const auto& row : read_jsonl(cfg_.output_dir / "supervision_embeddings.jsonl")) {
            sidecar[row.at("key").get<std::string>()] = row.at("vector").get<std::vector<double>>();
        }
        auto lookup = [&](const std::string& key) -> const std::vector<double>& {
            auto it = sidecar.find(key);
            if (it == sidecar.end()) fail(ErrorCode::MissingArtifact, "embedding " + key + " missing from sidecar", "supervise");
            return it->second;
        };

        std::map<std::string, const VQAInstance*> by_id;
        for (const auto& inst : train_) by_id[inst.question_id] = &inst;

        StageReport report;
        report.stage = Stage::TrainFilter;
        const fs::path dir = cfg_.effective_filter_dir();
        std::vector<fs::path> outputs;
        for (auto mode : cfg_.filter_modes()) {
            std::vector<FusedSample> samples;
            std::size_t dim = 0;
            for (const auto& [qid, rec] : supervision) {
                auto inst = by_id.find(qid);
                if (inst == by_id.end()) continue;
                for (const auto& r : rec.at("records")) {
                    auto sr = SupervisionRecord::from_json(r);
                    if (sr.mode != mode) continue;
                    FilterSample s{lookup(text_key(inst->second->question)), lookup(text_key(sr.info_text)),
                                   lookup(image_key(inst->second->image_ref)), sr.label};
                    dim = s.question_embed.size();
                    samples.push_back(s.fused());
                }
            }
            if (samples.empty()) {
                fail(ErrorCode::MissingArtifact, "no supervision samples for filter mode " + std::string(to_string(mode)),
                     "supervise");
            }
            auto result = train_filter(samples, dim, mode, cfg_.train, cfg_.seed);
            const fs::path out = dir / ("filter_" + std::string(to_string(mode)) + ".json");
            result.model.save(out);
            outputs.push_back(out);
            report.instances_processed += samples.size();
            report.details[std::string(to_string(mode))] = {{"samples", samples.size()}, {"final_loss", result.final_loss}};
        }
        // Manifest paths are relative to the output directory; keep the filters inside it or record absolute paths.
        write_manifest(Stage::TrainFilter, inputs_hash, outputs);
        return report;
    }

    FilterSet load_filters() const {
        const fs::path dir = cfg_.effective_filter_dir();
        std::vector<FilterModel> models;
        for (auto mode : cfg_.filter_modes()) {
            models.push_back(FilterModel::load(dir / ("filter_" + std::string(to_string(mode)) + ".json")));
        }
        if (cfg_.filter_mode == FilterInputMode::Ensemble) return FilterSet::ensemble(std::move(models));
        return FilterSet::single(std::move(models.front()));
    }

    StageReport stage_select(const std::string& inputs_hash) {
        const Records inquiry = load_records(Stage::Inquire);
        const Records summaries = load_records(Stage::Summarize);
        const FilterSet filters = load_filters();
        std::vector<VQAInstance> todo;
        for (const auto& inst : cfg_.refine_examples ? all_instances() : eval_) {
            if (inquiry.count(inst.question_id) && summaries.count(inst.question_id)) todo.push_back(inst);
        }
        return run_instance_stage(Stage::Select, todo, inputs_hash, [&](const VQAInstance& inst) {
            const auto items = items_from_records(inquiry.at(inst.question_id), summaries.at(inst.question_id));
            std::vector<SelectionCandidate> cands;
            for (const auto& item : items) {
                SelectionCandidate c{item.summary, {}};
                for (auto mode : filters.input_modes()) c.info_embeds[mode] = embed_text(info_text(mode, item.pair, item.summary));
                cands.push_back(std::move(c));
            }
            const Selection sel = select_information(filters, embed_text(inst.question), embed_image(inst), cands);
            json selected = json::array();
            for (const auto& s : sel.selected) {
                selected.push_back({{"index", s.summary.source_index}, {"text", s.summary.text}, {"score", s.score}});
            }
            return json{{"question_id", inst.question_id}, {"baseline", sel.baseline}, {"selected", selected}};
        });
    }

    static std::vector<std::string> selected_texts(const json& rec) {
        std::vector<std::string> out;
        for (const auto& s : rec.at("selected")) out.push_back(s.at("text").get<std::string>());
        return out;
    }

    /// Training instances as in-context examples. Summaries feed the raw
    /// information, selections the refined information, when provided.
    ExamplePool build_pool(const Records& captions, const Records* summaries, const Records* selected) {
        ExamplePool pool;
        for (const auto& raw : train_) {
            if (raw.gold_answers.empty() || !captions.count(raw.question_id)) continue;
            PoolEntry e;
            e.instance = with_caption(raw, captions);
            e.key = query_key(e.instance);
            e.answer = most_common_answer(raw.gold_answers);
            if (summaries) {
                if (auto it = summaries->find(raw.question_id); it != summaries->end()) {
                    for (const auto& s : it->second.at("summaries")) e.raw_info.push_back(s.at("text").get<std::string>());
                }
            }
            if (selected) {
                if (auto it = selected->find(raw.question_id); it != selected->end()) e.refined_info = selected_texts(it->second);
            }
            pool.entries.push_back(std::move(e));
        }
        return pool;
    }

    StageReport stage_answer(const std::string& inputs_hash) {
        const Records captions = load_records(Stage::Caption);
        const Records summaries = load_records(Stage::Summarize);
        const Records selected = load_records(Stage::Select);
        const ExamplePool pool = build_pool(captions, &summaries, &selected);
        const auto& reasoning = cfg_.endpoint("reasoning");
        const EnsembleConfig ens{cfg_.ensemble, cfg_.effective_shots(), cfg_.disjoint};
        const ExampleInfo example_info = cfg_.refine_examples ? ExampleInfo::Refined : ExampleInfo::Raw;

        return run_instance_stage(Stage::Answer, eval_, inputs_hash, [&](const VQAInstance& raw) {
            const VQAInstance inst = with_caption(raw, captions);
            std::vector<std::string> info;
            if (auto it = selected.find(inst.question_id); it != selected.end()) info = selected_texts(it->second);
            EnsembleRequest req{make_context(inst, info), query_key(inst), {}};
            auto result = ensemble_predict(gateway_, reasoning, pool, req, ens, cfg_.variant, example_info, 1);
            json per_query = json::array();
            for (const auto& a : result.per_query_answers) per_query.push_back(a ? json(*a) : json(nullptr));
            return json{{"question_id", inst.question_id}, {"answer", result.answer}, {"per_query_answers", per_query},
                        {"prompt_hashes", result.prompt_hashes}};
        });
    }

    StageReport stage_evaluate(const std::string& inputs_hash) {
        const Records predictions = load_records(Stage::Answer);
        StageReport report;
        report.stage = Stage::Evaluate;
        json per_question = json::array();
        double total = 0.0;
        std::size_t excluded = 0;
        for (const auto& inst : eval_) {
            auto it = predictions.find(inst.question_id);
            if (it == predictions.end() || inst.gold_answers.empty()) {
                ++excluded;
                continue;
            }
            const auto answer = it->second.at("answer").get<std::string>();
            const double acc = instance_accuracy(answer, inst.gold_answers, norm_);
            total += acc;
            per_question.push_back({{"question_id", inst.question_id}, {"answer", answer}, {"accuracy", acc}});
        }
        const std::size_t evaluated = per_question.size();
        json out = {{"overall_accuracy", evaluated ? total / static_cast<double>(evaluated) : 0.0},
                    {"evaluated", evaluated},
                    {"excluded", excluded},
                    {"per_question", per_question}};
        write_file_atomic(artifact_path(Stage::Evaluate), out.dump(2) + "\n");
        write_manifest(Stage::Evaluate, inputs_hash, {artifact_path(Stage::Evaluate)});
        report.instances_processed = evaluated;
        report.failures = excluded;
        report.details = {{"overall_accuracy", out["overall_accuracy"]}, {"excluded", excluded}};
        return report;
    }

    PipelineConfig cfg_;
    Gateway gateway_;
    NormalizationOptions norm_;
    bool loaded_ = false;
    std::vector<VQAInstance> train_;
    std::vector<VQAInstance> eval_;
    std::vector<QuestionGenExample> qgen_examples_;
    std::vector<SummaryExample> summary_examples_;
    std::mutex embed_mu_;
    std::map<std::string, std::vector<double>> embed_memo_;
};

}  // namespace ira
