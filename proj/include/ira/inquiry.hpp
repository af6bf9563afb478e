// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <vector>

#include "ira/dataset.hpp"
#include "ira/gateway.hpp"
#include "ira/parallel.hpp"
#include "ira/prompt.hpp"

namespace ira {

/// One solved decomposition shown to the LLM before the query.
struct QuestionGenExample {
    std::string target_question;
    std::string caption;
    std::vector<std::string> sub_questions;
};

/// Sub-question with the VQA model's answer. `index` is 1-based.
struct QAPair {
    std::string sub_question;
    std::string answer;
    std::size_t index = 1;

    /// Concatenated [q'; a'] text.
    [[nodiscard]] std::string joined() const { return sub_question + " " + answer; }

    bool operator==(const QAPair&) const = default;
};

inline std::vector<QuestionGenExample> default_question_gen_examples() {
    return {
        {"What is the hairstyle of the blond called?",
         "Two women tennis players on a tennis court.",
         {"It this hairstyle long or short?", "What are the notable features of the hairstyle?",
          "What hairstyle are common for women player when they are playing tennis"}},
        {"How old do you have to be in canada to do this?",
         "a couple of people are holding up drinks.",
         {"Why are people holding up drinks?", "What is the restriction of age to drink in Canada?",
          "What are people drinking?"}},
        {"When was this piece of sporting equipment invented?",
         "A man in a wetsuit carrying a surfboard to the water.",
         {"What is the man carrying with him?", "What is the purpose of the sporting equipment?",
          "What is the history of the invention of the sporting equipment?"}},
    };
}

/// Reads a JSON array of {target_question, caption, sub_questions}.
inline std::vector<QuestionGenExample> load_question_gen_examples(const fs::path& path) {
    std::vector<QuestionGenExample> out;
    for (const auto& e : parse_json_file(path)) {
        QuestionGenExample ex{e.at("target_question").get<std::string>(), e.at("caption").get<std::string>(),
                              e.at("sub_questions").get<std::vector<std::string>>()};
        if (ex.sub_questions.empty()) fail(ErrorCode::MalformedRecord, path.string() + ": example without sub-questions");
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Question-generation prompt
//
//   <instruction>\n
//   TARGET-QUESTION: <q>\nCaption: <c>\nSub questions: 1. <q'1> 2. <q'2> ...\n   (per example)
//   TARGET-QUESTION: <q>\nCaption: <c>\nSub questions:\n

inline std::string question_gen_instruction(std::size_t k) {
    return "Please decompose the TARGET-QUESTION into " + std::to_string(k) +
           " questions that can be answered via commonsense knowledge. The sub-questions should not mention "
           "another sub-questions. You can use information from the CAPTION.";
}

inline std::string number_items(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(i + 1) + ". " + single_line(items[i]);
    }
    return out;
}

inline std::string render_question_gen(const std::map<std::string, std::string>& slots) {
    using detail::slot;
    std::string text = slot(slots, "instruction") + "\n";
    const std::size_t n = detail::count_examples(slots, "question");
    for (std::size_t i = 0; i < n; ++i) {
        text += "TARGET-QUESTION: " + slot(slots, example_slot(i, "question")) + "\n";
        text += "Caption: " + slot(slots, example_slot(i, "caption")) + "\n";
        text += "Sub questions: " + slot(slots, example_slot(i, "sub_questions")) + "\n";
    }
    text += "TARGET-QUESTION: " + slot(slots, query_slot("question")) + "\n";
    text += "Caption: " + slot(slots, query_slot("caption")) + "\n";
    text += "Sub questions:\n";
    return text;
}

inline PromptBundle build_question_gen_prompt(const VQAInstance& instance,
                                              const std::vector<QuestionGenExample>& examples, std::size_t k) {
    require(k >= 1, "number of sub-questions must be >= 1");
    if (!instance.caption) {
        fail(ErrorCode::MissingCaption, "question " + instance.question_id + " has no caption", instance.question_id);
    }
    PromptBundle b;
    b.kind = PromptKind::QuestionGeneration;
    b.shots = examples.size();
    b.slots["instruction"] = question_gen_instruction(k);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        require(!ex.sub_questions.empty(), "question-generation example needs sub-questions");
        b.slots[example_slot(i, "question")] = single_line(ex.target_question);
        b.slots[example_slot(i, "caption")] = single_line(ex.caption);
        b.slots[example_slot(i, "sub_questions")] = number_items(ex.sub_questions);
    }
    b.slots[query_slot("question")] = single_line(instance.question);
    b.slots[query_slot("caption")] = single_line(*instance.caption);
    b.text = render_question_gen(b.slots);
    return b;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

/// Finds "<n>." at a boundary: start of text or after whitespace, and
/// followed by whitespace or end of text.
inline std::size_t find_item_marker(const std::string& text, std::size_t n, std::size_t from) {
    const std::string marker = std::to_string(n) + ".";
    for (auto pos = text.find(marker, from); pos != std::string::npos; pos = text.find(marker, pos + 1)) {
        const bool left_ok = pos == 0 || std::isspace(static_cast<unsigned char>(text[pos - 1])) != 0;
        const std::size_t end = pos + marker.size();
        const bool right_ok = end == text.size() || std::isspace(static_cast<unsigned char>(text[end])) != 0;
        if (left_ok && right_ok) return pos;
    }
    return std::string::npos;
}

}  // namespace detail

/// Extracts the numbered items "1." .. "k." in order. An item runs to the next
/// marker or the end of its line; trailing empty items are dropped and extra
/// items beyond k are ignored.
inline std::vector<std::string> parse_subquestions(const std::string& completion, std::size_t k) {
    require(k >= 1, "number of sub-questions must be >= 1");
    std::vector<std::string> items;
    std::size_t pos = detail::find_item_marker(completion, 1, 0);
    if (pos == std::string::npos) fail(ErrorCode::NoQuestionsFound, "no numbered sub-question in completion");

    for (std::size_t n = 1; n <= k && pos != std::string::npos; ++n) {
        const std::size_t start = pos + std::to_string(n).size() + 1;
        const std::size_t next = detail::find_item_marker(completion, n + 1, start);
        const std::size_t end = next == std::string::npos ? completion.size() : next;
        auto item = trim_view(std::string_view(completion).substr(start, end - start));
        item = trim_view(item.substr(0, item.find('\n')));
        items.emplace_back(item);
        pos = n < k ? next : std::string::npos;
    }
    while (!items.empty() && items.back().empty()) items.pop_back();
    if (items.empty()) fail(ErrorCode::NoQuestionsFound, "numbered items were all empty");
    return items;
}

// ---------------------------------------------------------------------------
// Generation

struct InquiryEndpoints {
    ServiceEndpointConfig completion;
    ServiceEndpointConfig vqa;
    ServiceEndpointConfig caption;
};

struct InquiryOptions {
    std::size_t k = 3;
    int max_tokens = 128;
    std::size_t workers = 4;  // concurrent VQA calls per instance
    fs::path image_root;
};

inline ImageRef image_for(const VQAInstance& instance, const fs::path& image_root) {
    return {instance.image_ref, resolve_image(image_root, instance.image_ref)};
}

/// Asks the LLM for k sub-questions about the instance and answers each with
/// the VQA model. Pairs follow question order. A missing caption is generated
/// first. Pairs whose answer comes back empty are dropped.
inline std::vector<QAPair> generate_qa_pairs(Gateway& gateway, const InquiryEndpoints& endpoints,
                                             const VQAInstance& instance,
                                             const std::vector<QuestionGenExample>& examples,
                                             const InquiryOptions& opts) {
    require(opts.k >= 1, "number of sub-questions must be >= 1");
    try {
        VQAInstance inst = instance;
        if (!inst.caption) inst.caption = trim(gateway.caption(endpoints.caption, image_for(inst, opts.image_root)));

        const PromptBundle prompt = build_question_gen_prompt(inst, examples, opts.k);
        const std::string completion =
            gateway.complete(endpoints.completion, {prompt.text, opts.max_tokens, 0.0, {"TARGET-QUESTION:"}});
        const auto questions = parse_subquestions(completion, opts.k);

        const ImageRef image = image_for(inst, opts.image_root);
        auto answers = parallel_map<std::string>(questions.size(), opts.workers, [&](std::size_t i) {
            return trim(gateway.vqa_answer(endpoints.vqa, image, questions[i]));
        });

        std::vector<QAPair> pairs;
        for (std::size_t i = 0; i < questions.size(); ++i) {
            if (answers[i].error) std::rethrow_exception(answers[i].error);
            if (questions[i].empty() || answers[i].value->empty()) continue;
            pairs.push_back({questions[i], *answers[i].value, i + 1});
        }
        return pairs;
    } catch (const Error& e) {
        throw Error(e.code(), "question " + instance.question_id + ": " + e.what(),
                    e.detail().empty() ? instance.question_id : e.detail());
    }
}

}  // namespace ira
