// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ira/dataset.hpp"
#include "ira/gateway.hpp"
#include "ira/parallel.hpp"
#include "ira/prompt.hpp"

namespace ira {

// ---------------------------------------------------------------------------
// Example pool and similarity search

struct PoolEntry {
    VQAInstance instance;
    std::vector<double> key;                // unit-norm selection embedding
    std::string answer;                     // answer shown in the prompt
    std::vector<std::string> raw_info;      // every summary
    std::vector<std::string> refined_info;  // summaries kept by the filter
};

struct ExamplePool {
    std::vector<PoolEntry> entries;

    [[nodiscard]] std::size_t size() const { return entries.size(); }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        fail(ErrorCode::DimensionMismatch,
             "vector dims differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double d = dot(a, b);
    double na = 0.0;
    double nb = 0.0;
    for (double x : a) na += x * x;
    for (double x : b) nb += x * x;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return d / std::sqrt(na * nb);
}

/// Question embedding, averaged with the caption embedding when one exists,
/// then re-normalized.
inline std::vector<double> selection_key(const EmbeddingVector& question,
                                         const std::optional<EmbeddingVector>& caption = std::nullopt) {
    std::vector<double> key = question.values;
    if (caption) {
        if (caption->dim() != key.size()) fail(ErrorCode::DimensionMismatch, "caption/question embedding dims differ");
        for (std::size_t i = 0; i < key.size(); ++i) key[i] = (key[i] + caption->values[i]) / 2.0;
    }
    return normalized(std::move(key)).values;
}

/// Pool indices by descending cosine similarity; ties by question_id ascending.
/// Entries whose question_id equals `exclude_id` are left out.
inline std::vector<std::size_t> rank_examples(const ExamplePool& pool, std::span<const double> query_key,
                                              const std::string& exclude_id = {}) {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!exclude_id.empty() && pool.entries[i].instance.question_id == exclude_id) continue;
        scored.emplace_back(cosine_similarity(pool.entries[i].key, query_key), i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return pool.entries[a.second].instance.question_id < pool.entries[b.second].instance.question_id;
    });
    std::vector<std::size_t> out;
    out.reserve(scored.size());
    for (const auto& s : scored) out.push_back(s.second);
    return out;
}

/// Ranked entries [start, start + n).
inline std::vector<std::size_t> select_window(const ExamplePool& pool, std::span<const double> query_key,
                                              std::size_t start, std::size_t n, const std::string& exclude_id = {}) {
    if (n == 0) return {};
    auto ranked = rank_examples(pool, query_key, exclude_id);
    if (ranked.size() < start + n) {
        fail(ErrorCode::PoolTooSmall, "need " + std::to_string(start + n) + " examples, pool has " +
                                          std::to_string(ranked.size()));
    }
    return {ranked.begin() + static_cast<std::ptrdiff_t>(start),
            ranked.begin() + static_cast<std::ptrdiff_t>(start + n)};
}

/// The offset-th window of n nearest examples: ranks [offset*n, offset*n + n).
inline std::vector<std::size_t> select_examples(const ExamplePool& pool, std::span<const double> query_key,
                                                std::size_t n, std::size_t offset, const std::string& exclude_id = {}) {
    return select_window(pool, query_key, offset * n, n, exclude_id);
}

// ---------------------------------------------------------------------------
// Answer prompt
//
//   <instruction>\n
//   Image information: <S^n joined by "; ">\nCaption: <c>[ <tags>]\nQuestion: <q>\n[Candidates: ...\n]Answer: <a>\n
//   ...
//   Image information: <S>\nCaption: <c>\nQuestion: <q>\n[Candidates: ...\n]Answer:

/// Everything one prompt block needs. `answer` is set for in-context examples only.
struct AnswerContext {
    std::vector<std::string> info;
    std::optional<std::string> caption;
    std::optional<std::vector<std::string>> tags;
    std::string question;
    std::optional<std::vector<Candidate>> candidates;
    std::optional<std::string> answer;
};

inline AnswerContext make_context(const VQAInstance& inst, std::vector<std::string> info,
                                  std::optional<std::string> answer = std::nullopt) {
    return {std::move(info), inst.caption, inst.tags, inst.question, inst.candidates, std::move(answer)};
}

inline std::string answer_instruction(Variant v) {
    if (v == Variant::Prophet) {
        return "Answer the questions using the provided image information, captions, candidate answers and extra "
               "commonsense knowledge. Each candidate answer is associated with a confidence score within a "
               "bracket. The true answer may not be included in the candidate answers. Answers should be no longer "
               "than 3 words:";
    }
    return "Answer the questions using the provided image information, captions and extra commonsense knowledge. "
           "Answers should be no longer than 3 words:";
}

inline std::string format_candidates(const std::vector<Candidate>& cands) {
    std::string out;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        char conf[32];
        std::snprintf(conf, sizeof conf, "%.2f", cands[i].confidence);
        if (i) out += ", ";
        out += single_line(cands[i].answer) + " (" + conf + ")";
    }
    return out;
}

inline std::string join_info(const std::vector<std::string>& info) {
    std::vector<std::string> items;
    for (const auto& s : info) {
        auto t = trim(single_line(s));
        if (!t.empty()) items.push_back(std::move(t));
    }
    return join(items, "; ");
}

namespace detail {

inline void render_block(std::string& text, const std::map<std::string, std::string>& slots, const std::string& prefix,
                         Variant variant, bool is_query) {
    const std::string& info = slot(slots, prefix + "info");
    text += info.empty() ? std::string("Image information:") : "Image information: " + info;
    text += "\nCaption: " + slot(slots, prefix + "caption");
    text += "\nQuestion: " + slot(slots, prefix + "question");
    if (variant == Variant::Prophet) text += "\nCandidates: " + slot(slots, prefix + "candidates");
    text += is_query ? std::string("\nAnswer:") : "\nAnswer: " + slot(slots, prefix + "answer");
}

inline void fill_block(std::map<std::string, std::string>& slots, const std::string& prefix, const AnswerContext& ctx,
                       Variant variant) {
    if (!ctx.caption) fail(ErrorCode::MissingField, std::string(to_string(variant)) + " prompt needs a caption", "caption");
    std::string caption = single_line(*ctx.caption);
    if (variant == Variant::Pica) {
        if (!ctx.tags) fail(ErrorCode::MissingField, "pica prompt needs image tags", "tags");
        std::vector<std::string> tags;
        for (const auto& t : *ctx.tags) tags.push_back(single_line(t));
        if (!tags.empty()) caption += " " + join(tags, ", ");
    }
    slots[prefix + "info"] = join_info(ctx.info);
    slots[prefix + "caption"] = caption;
    slots[prefix + "question"] = single_line(ctx.question);
    if (variant == Variant::Prophet) {
        if (!ctx.candidates) fail(ErrorCode::MissingField, "prophet prompt needs answer candidates", "candidates");
        slots[prefix + "candidates"] = format_candidates(*ctx.candidates);
    }
}

}  // namespace detail

inline std::string render_answer_prompt(const std::map<std::string, std::string>& slots, Variant variant) {
    std::string text = detail::slot(slots, "instruction") + "\n";
    const std::size_t n = detail::count_examples(slots, "question");
    for (std::size_t i = 0; i < n; ++i) {
        detail::render_block(text, slots, example_slot(i, ""), variant, false);
        text += "\n";
    }
    detail::render_block(text, slots, query_slot(""), variant, true);
    return text;
}

inline PromptBundle build_answer_prompt(const AnswerContext& query, const std::vector<AnswerContext>& examples,
                                        Variant variant) {
    PromptBundle b;
    b.kind = PromptKind::Answer;
    b.variant = variant;
    b.shots = examples.size();
    b.slots["instruction"] = answer_instruction(variant);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        if (!ex.answer) fail(ErrorCode::MissingField, "in-context example needs an answer", "answer");
        const std::string prefix = example_slot(i, "");
        detail::fill_block(b.slots, prefix, ex, variant);
        b.slots[prefix + "answer"] = single_line(*ex.answer);
    }
    detail::fill_block(b.slots, query_slot(""), query, variant);
    b.text = render_answer_prompt(b.slots, variant);
    return b;
}

/// Recovers the slot map from a rendered answer prompt.
inline std::map<std::string, std::string> extract_answer_slots(const std::string& text, Variant variant) {
    auto lines = split(text, "\n");
    const std::size_t per_block = variant == Variant::Prophet ? 5 : 4;
    if (lines.size() < 1 + per_block || (lines.size() - 1) % per_block != 0) {
        fail(ErrorCode::MalformedRecord, "answer prompt has " + std::to_string(lines.size()) + " lines");
    }
    auto strip = [](const std::string& line, std::string_view prefix) {
        if (!starts_with(line, prefix)) {
            fail(ErrorCode::MalformedRecord, "expected '" + std::string(prefix) + "' in line: " + line);
        }
        return line.substr(prefix.size());
    };
    std::map<std::string, std::string> slots;
    slots["instruction"] = lines[0];
    const std::size_t blocks = (lines.size() - 1) / per_block;
    for (std::size_t b = 0; b < blocks; ++b) {
        const bool is_query = b + 1 == blocks;
        const std::string prefix = is_query ? query_slot("") : example_slot(b, "");
        std::size_t l = 1 + b * per_block;
        const auto& info_line = lines[l++];
        slots[prefix + "info"] = info_line == "Image information:" ? std::string{} : strip(info_line, "Image information: ");
        slots[prefix + "caption"] = strip(lines[l++], "Caption: ");
        slots[prefix + "question"] = strip(lines[l++], "Question: ");
        if (variant == Variant::Prophet) slots[prefix + "candidates"] = strip(lines[l++], "Candidates: ");
        if (is_query) {
            if (lines[l] != "Answer:") fail(ErrorCode::MalformedRecord, "query block must end with 'Answer:'");
        } else {
            slots[prefix + "answer"] = strip(lines[l], "Answer: ");
        }
    }
    return slots;
}

// ---------------------------------------------------------------------------
// Prediction

/// Strips whitespace, anything after the first line break, and an echoed
/// "Answer:" prefix.
inline std::string clean_completion(std::string_view completion) {
    auto text = trim_view(completion);
    text = trim_view(text.substr(0, text.find('\n')));
    if (starts_with(text, "Answer:")) text = trim_view(text.substr(7));
    return std::string(text);
}

inline std::string predict_answer(Gateway& gateway, const ServiceEndpointConfig& completion,
                                  const PromptBundle& bundle, int max_tokens = 16) {
    auto answer = clean_completion(gateway.complete(completion, {bundle.text, max_tokens, 0.0, {"\n"}}));
    if (answer.empty()) fail(ErrorCode::EmptyCompletion, "completion produced no answer");
    return answer;
}

struct EnsembleConfig {
    std::size_t queries = 1;  // T
    std::size_t shots = 16;   // n per query
    bool disjoint = true;     // windows partition the top T*n neighbours; otherwise slide by one

    void validate() const {
        if (queries < 1) fail(ErrorCode::ConfigInvalid, "ensemble size must be >= 1", "ensemble");
    }
};

/// Index of the majority answer under normalize_answer among the successful
/// predictions; ties go to the lowest offset. Returns nullopt when none succeeded.
inline std::optional<std::size_t> majority_vote(const std::vector<std::optional<std::string>>& predictions,
                                                const NormalizationOptions& opts = {}) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // norm -> (count, first index)
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (!predictions[i]) continue;
        auto [it, inserted] = tally.try_emplace(normalize_answer(*predictions[i], opts), 0, i);
        ++it->second.first;
    }
    std::optional<std::size_t> best;
    std::size_t best_count = 0;
    for (const auto& [norm, entry] : tally) {
        const auto [count, first] = entry;
        if (count > best_count || (best && count == best_count && first < *best)) {
            best_count = count;
            best = first;
        }
    }
    return best;
}

struct EnsembleResult {
    std::string answer;
    std::vector<std::optional<std::string>> per_query_answers;
    std::vector<std::string> prompt_hashes;
};

/// Which summaries go into the in-context examples.
enum class ExampleInfo { Refined, Raw, None };

struct EnsembleRequest {
    AnswerContext query;
    std::vector<double> query_key;
    std::string exclude_id;  // keep a training instance out of its own examples
};

/// Issues T prompts over successive example windows and majority-votes the
/// answers. T = 1 returns exactly the single prediction.
inline EnsembleResult ensemble_predict(Gateway& gateway, const ServiceEndpointConfig& completion,
                                       const ExamplePool& pool, const EnsembleRequest& request,
                                       const EnsembleConfig& cfg, Variant variant, ExampleInfo example_info,
                                       std::size_t workers = 4) {
    cfg.validate();
    // A short pool fails the request before any query is sent.
    const std::size_t last_start = cfg.disjoint ? (cfg.queries - 1) * cfg.shots : cfg.queries - 1;
    if (cfg.shots > 0) (void)select_window(pool, request.query_key, last_start, cfg.shots, request.exclude_id);

    std::vector<PromptBundle> prompts;
    for (std::size_t t = 0; t < cfg.queries; ++t) {
        const std::size_t start = cfg.disjoint ? t * cfg.shots : t;
        std::vector<AnswerContext> examples;
        for (auto idx : select_window(pool, request.query_key, start, cfg.shots, request.exclude_id)) {
            const auto& e = pool.entries[idx];
            std::vector<std::string> info;
            if (example_info == ExampleInfo::Refined) info = e.refined_info;
            if (example_info == ExampleInfo::Raw) info = e.raw_info;
            examples.push_back(make_context(e.instance, std::move(info), e.answer));
        }
        prompts.push_back(build_answer_prompt(request.query, examples, variant));
    }

    auto outcomes = parallel_map<std::string>(prompts.size(), workers, [&](std::size_t t) {
        return predict_answer(gateway, completion, prompts[t]);
    });

    EnsembleResult result;
    std::exception_ptr first_error;
    for (std::size_t t = 0; t < outcomes.size(); ++t) {
        result.prompt_hashes.push_back(prompts[t].hash());
        if (outcomes[t].ok()) {
            result.per_query_answers.push_back(*outcomes[t].value);
        } else {
            result.per_query_answers.emplace_back(std::nullopt);
            if (!first_error) first_error = outcomes[t].error;
        }
    }
    auto winner = majority_vote(result.per_query_answers);
    if (!winner) std::rethrow_exception(first_error);
    result.answer = *result.per_query_answers[*winner];
    return result;
}

}  // namespace ira
