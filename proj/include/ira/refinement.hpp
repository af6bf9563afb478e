// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <functional>
#include <iostream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ira/dataset.hpp"
#include "ira/filter.hpp"
#include "ira/gateway.hpp"
#include "ira/inquiry.hpp"
#include "ira/prompt.hpp"

namespace ira {

/// Narrative rewrite of one QA pair.
struct Summary {
    std::string text;
    std::size_t source_index = 1;  // QAPair::index it came from
    std::string instance_id;
};

struct SummaryExample {
    std::string question;
    std::string answer;
    std::string summary;
};

inline std::vector<SummaryExample> default_summary_examples() {
    return {
        {"What is the specific type of drink be?", "martini.", "People are drinking martinis."},
        {"What is the legal age to consume alcohol in Canada?", "18.",
         "People should be at least 18 to consume alcohol in Canada."},
        {"What type of drinks are on the table?", "a soda.", "There is a soda on the table."},
    };
}

/// Reads a JSON array of {question, answer, summary}.
inline std::vector<SummaryExample> load_summary_examples(const fs::path& path) {
    std::vector<SummaryExample> out;
    for (const auto& e : parse_json_file(path)) {
        out.push_back({e.at("question").get<std::string>(), e.at("answer").get<std::string>(),
                       e.at("summary").get<std::string>()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Summarization prompt
//
//   <instruction>\n
//   Q: <q>\nA: <a>\nSummary: <s>\n      (per example)
//   Q: <q>\nA: <a>\nSummary:

inline constexpr std::string_view kSummaryInstruction =
    "Please summarise the following question and corresponding answer into a description sentence.";

inline std::string render_summary_prompt(const std::map<std::string, std::string>& slots) {
    using detail::slot;
    std::string text = slot(slots, "instruction") + "\n";
    const std::size_t n = detail::count_examples(slots, "question");
    for (std::size_t i = 0; i < n; ++i) {
        text += "Q: " + slot(slots, example_slot(i, "question")) + "\n";
        text += "A: " + slot(slots, example_slot(i, "answer")) + "\n";
        text += "Summary: " + slot(slots, example_slot(i, "summary")) + "\n";
    }
    text += "Q: " + slot(slots, query_slot("question")) + "\n";
    text += "A: " + slot(slots, query_slot("answer")) + "\n";
    text += "Summary:";
    return text;
}

inline PromptBundle build_summary_prompt(const QAPair& pair, const std::vector<SummaryExample>& examples) {
    require(!pair.sub_question.empty() && !pair.answer.empty(), "QA pair needs a question and an answer");
    PromptBundle b;
    b.kind = PromptKind::Summarization;
    b.shots = examples.size();
    b.slots["instruction"] = std::string(kSummaryInstruction);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        b.slots[example_slot(i, "question")] = single_line(examples[i].question);
        b.slots[example_slot(i, "answer")] = single_line(examples[i].answer);
        b.slots[example_slot(i, "summary")] = single_line(examples[i].summary);
    }
    b.slots[query_slot("question")] = single_line(pair.sub_question);
    b.slots[query_slot("answer")] = single_line(pair.answer);
    b.text = render_summary_prompt(b.slots);
    return b;
}

/// Asks the completion service for the narrative sentence of one pair.
inline Summary summarize(Gateway& gateway, const ServiceEndpointConfig& completion, const std::string& instance_id,
                         const QAPair& pair, const std::vector<SummaryExample>& examples, int max_tokens = 64) {
    const PromptBundle prompt = build_summary_prompt(pair, examples);
    std::string text = gateway.complete(completion, {prompt.text, max_tokens, 0.0, {"\n"}});
    text = trim(trim_view(text).substr(0, trim_view(text).find('\n')));
    if (text.empty()) {
        fail(ErrorCode::EmptyCompletion, "empty summary for question " + instance_id + " pair " +
                                             std::to_string(pair.index), instance_id);
    }
    return {text, pair.index, instance_id};
}

// ---------------------------------------------------------------------------
// Filter inputs

/// The text a single-mode filter reads for one generated item.
inline std::string info_text(FilterInputMode mode, const QAPair& pair, const Summary& summary) {
    switch (mode) {
        case FilterInputMode::Question: return pair.sub_question;
        case FilterInputMode::Answer: return pair.answer;
        case FilterInputMode::QuestionAnswer: return pair.joined();
        case FilterInputMode::Summary: return summary.text;
        case FilterInputMode::Ensemble: break;
    }
    fail(ErrorCode::PreconditionViolation, "ensemble mode has no single information text");
}

/// One trained filter, or the four single-mode filters scored together.
class FilterSet {
  public:
    static FilterSet single(FilterModel model) {
        require(model.mode() != FilterInputMode::Ensemble, "a single filter must use one input mode");
        FilterSet s;
        s.mode_ = model.mode();
        s.models_.push_back(std::move(model));
        return s;
    }

    static FilterSet ensemble(std::vector<FilterModel> models) {
        require(models.size() == kSingleModes.size(), "an ensemble needs one filter per input mode");
        for (std::size_t i = 0; i < models.size(); ++i) {
            require(std::count_if(models.begin(), models.end(),
                                  [&](const FilterModel& m) { return m.mode() == kSingleModes[i]; }) == 1,
                    "an ensemble needs exactly one filter per input mode");
        }
        const auto d = models.front().dim();
        for (const auto& m : models) {
            if (m.dim() != d) fail(ErrorCode::DimensionMismatch, "ensemble filters disagree on dim");
        }
        FilterSet s;
        s.mode_ = FilterInputMode::Ensemble;
        s.models_ = std::move(models);
        return s;
    }

    [[nodiscard]] FilterInputMode mode() const { return mode_; }
    [[nodiscard]] const std::vector<FilterModel>& models() const { return models_; }
    [[nodiscard]] std::size_t dim() const { return models_.front().dim(); }

    /// Modes whose information embeddings score() needs.
    [[nodiscard]] std::vector<FilterInputMode> input_modes() const {
        std::vector<FilterInputMode> out;
        for (const auto& m : models_) out.push_back(m.mode());
        return out;
    }

    /// Mean contribution score over member filters, each fed its own info embedding.
    [[nodiscard]] double score(std::span<const double> question_embed, std::span<const double> visual_embed,
                               const std::map<FilterInputMode, std::vector<double>>& info_embeds) const {
        double total = 0.0;
        for (const auto& m : models_) {
            auto it = info_embeds.find(m.mode());
            if (it == info_embeds.end()) {
                fail(ErrorCode::MissingField, "no embedding for filter input '" + std::string(to_string(m.mode())) + "'",
                     std::string(to_string(m.mode())));
            }
            total += m.score(fuse_features(question_embed, it->second, visual_embed));
        }
        return total / static_cast<double>(models_.size());
    }

    /// Score of the original question used as its own information.
    [[nodiscard]] double baseline(std::span<const double> question_embed, std::span<const double> visual_embed) const {
        std::map<FilterInputMode, std::vector<double>> info;
        for (const auto& m : models_) info[m.mode()].assign(question_embed.begin(), question_embed.end());
        return score(question_embed, visual_embed, info);
    }

  private:
    FilterInputMode mode_ = FilterInputMode::Summary;
    std::vector<FilterModel> models_;
};

// ---------------------------------------------------------------------------
// Selection

struct SelectionCandidate {
    Summary summary;
    std::map<FilterInputMode, std::vector<double>> info_embeds;
};

struct ScoredSummary {
    Summary summary;
    double score = 0.0;
};

struct Selection {
    double baseline = 0.0;
    std::vector<ScoredSummary> selected;  // non-increasing score

    [[nodiscard]] std::vector<std::string> texts() const {
        std::vector<std::string> out;
        for (const auto& s : selected) out.push_back(s.summary.text);
        return out;
    }
};

/// Keeps every summary whose contribution score is at least the question's
/// own baseline score, highest first (ties by source index).
inline Selection select_information(const FilterSet& filters, std::span<const double> question_embed,
                                    std::span<const double> visual_embed,
                                    const std::vector<SelectionCandidate>& candidates) {
    Selection out;
    out.baseline = filters.baseline(question_embed, visual_embed);
    for (const auto& c : candidates) {
        const double s = filters.score(question_embed, visual_embed, c.info_embeds);
        if (s >= out.baseline) out.selected.push_back({c.summary, s});
    }
    std::stable_sort(out.selected.begin(), out.selected.end(), [](const ScoredSummary& a, const ScoredSummary& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.summary.source_index < b.summary.source_index;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Supervision

/// A generated item together with its summary.
struct InfoItem {
    QAPair pair;
    Summary summary;
};

/// Label for one (instance, item, mode): 1 when answering with that text alone
/// earns non-zero accuracy.
struct SupervisionRecord {
    std::string question_id;
    FilterInputMode mode = FilterInputMode::Summary;
    std::size_t source_index = 1;
    std::string info_text;
    int label = 0;
    double accuracy = 0.0;

    [[nodiscard]] json to_json() const {
        return {{"question_id", question_id}, {"mode", to_string(mode)}, {"source_index", source_index},
                {"info_text", info_text},     {"label", label},          {"accuracy", accuracy}};
    }

    static SupervisionRecord from_json(const json& j) {
        return {j.at("question_id").get<std::string>(), parse_filter_mode(j.at("mode").get<std::string>()),
                j.value("source_index", std::size_t{1}),  j.at("info_text").get<std::string>(),
                j.at("label").get<int>(),                 j.value("accuracy", 0.0)};
    }
};

using AnswerFn = std::function<std::string(const VQAInstance&, const std::string& info_text)>;
using EvaluatorFn = std::function<double(const std::string& prediction, const std::vector<std::string>& gold)>;

/// Labels every (instance, generated item, mode) by answering the instance
/// with that one piece of information and thresholding accuracy at > 0.
/// Instances with no generated information are skipped with a log line.
inline std::vector<SupervisionRecord> build_supervision(
    const std::vector<VQAInstance>& instances, const std::map<std::string, std::vector<InfoItem>>& info,
    const std::vector<FilterInputMode>& modes, const AnswerFn& answer, const EvaluatorFn& evaluate) {
    std::vector<SupervisionRecord> out;
    for (const auto& inst : instances) {
        require(!inst.gold_answers.empty(), "supervision needs gold answers for " + inst.question_id);
        auto it = info.find(inst.question_id);
        if (it == info.end() || it->second.empty()) {
            std::cerr << "[ira] supervision: no generated information for question " << inst.question_id
                      << ", skipped\n";
            continue;
        }
        for (const auto& item : it->second) {
            for (auto mode : modes) {
                SupervisionRecord rec;
                rec.question_id = inst.question_id;
                rec.mode = mode;
                rec.source_index = item.pair.index;
                rec.info_text = info_text(mode, item.pair, item.summary);
                rec.accuracy = evaluate(answer(inst, rec.info_text), inst.gold_answers);
                rec.label = rec.accuracy > 0.0 ? 1 : 0;
                out.push_back(std::move(rec));
            }
        }
    }
    return out;
}

/// Embeddings of one labelled item, ready to fuse.
struct FilterSample {
    std::vector<double> question_embed;
    std::vector<double> info_embed;
    std::vector<double> visual_embed;
    int label = 0;

    [[nodiscard]] FusedSample fused() const {
        return {fuse_features(question_embed, info_embed, visual_embed), label};
    }
};

}  // namespace ira
