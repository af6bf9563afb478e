// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ira/error.hpp"
#include "ira/util.hpp"

namespace ira {

enum class DatasetFormat { OkVqa, AOkVqa };
enum class Split { Train, Val, Test };

inline std::string_view to_string(DatasetFormat f) { return f == DatasetFormat::OkVqa ? "okvqa" : "aokvqa"; }

inline DatasetFormat parse_dataset_format(std::string_view s) {
    if (s == "okvqa") return DatasetFormat::OkVqa;
    if (s == "aokvqa") return DatasetFormat::AOkVqa;
    fail(ErrorCode::ConfigInvalid, "unknown dataset format '" + std::string(s) + "'", "dataset.format");
}

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    fail(ErrorCode::ConfigInvalid, "unknown split '" + std::string(s) + "'", "dataset.split");
}

/// Answer proposal from an upstream VQA model, used by the candidate-aware prompt.
struct Candidate {
    std::string answer;
    double confidence = 0.0;  // in [0, 1]
};

struct VQAInstance {
    std::string question_id;
    std::string image_ref;
    std::string question;
    std::vector<std::string> gold_answers;
    std::optional<std::string> caption;
    std::optional<std::vector<std::string>> tags;
    std::optional<std::vector<Candidate>> candidates;
    Split split = Split::Train;
};

inline constexpr std::size_t kOkVqaAnswerCount = 10;

// ---------------------------------------------------------------------------
// Answer normalization

/// Optional lookup tables in the style of the official VQA evaluator.
/// Off by default; only the rules documented on normalize_answer apply then.
struct NormalizationOptions {
    bool official_tables = false;
};

namespace detail {

inline const std::unordered_map<std::string, std::string>& number_words() {
    static const std::unordered_map<std::string, std::string> table = {
        {"none", "0"}, {"zero", "0"}, {"one", "1"},   {"two", "2"},   {"three", "3"}, {"four", "4"},
        {"five", "5"}, {"six", "6"},  {"seven", "7"}, {"eight", "8"}, {"nine", "9"},  {"ten", "10"},
    };
    return table;
}

// Apostrophe-less spellings mapped back to the canonical contraction.
inline const std::unordered_map<std::string, std::string>& contractions() {
    static const std::unordered_map<std::string, std::string> table = {
        {"aint", "ain't"},       {"arent", "aren't"},     {"cant", "can't"},       {"couldve", "could've"},
        {"couldnt", "couldn't"}, {"didnt", "didn't"},     {"doesnt", "doesn't"},   {"dont", "don't"},
        {"hadnt", "hadn't"},     {"hasnt", "hasn't"},     {"havent", "haven't"},   {"hed", "he'd"},
        {"hes", "he's"},         {"howd", "how'd"},       {"howll", "how'll"},     {"hows", "how's"},
        {"im", "i'm"},           {"ive", "i've"},         {"isnt", "isn't"},       {"itd", "it'd"},
        {"itll", "it'll"},       {"lets", "let's"},       {"maam", "ma'am"},       {"mightnt", "mightn't"},
        {"mightve", "might've"}, {"mustnt", "mustn't"},   {"mustve", "must've"},   {"neednt", "needn't"},
        {"notve", "not've"},     {"oclock", "o'clock"},   {"shant", "shan't"},     {"shed", "she'd"},
        {"shes", "she's"},       {"shouldve", "should've"}, {"shouldnt", "shouldn't"}, {"thats", "that's"},
        {"thered", "there'd"},   {"theres", "there's"},   {"theyd", "they'd"},     {"theyll", "they'll"},
        {"theyre", "they're"},   {"theyve", "they've"},   {"wasnt", "wasn't"},     {"wed", "we'd"},
        {"weve", "we've"},       {"werent", "weren't"},   {"whatll", "what'll"},   {"whatre", "what're"},
        {"whats", "what's"},     {"whatve", "what've"},   {"whens", "when's"},     {"whered", "where'd"},
        {"wheres", "where's"},   {"whereve", "where've"}, {"whod", "who'd"},       {"wholl", "who'll"},
        {"whos", "who's"},       {"whove", "who've"},     {"whyll", "why'll"},     {"whyre", "why're"},
        {"whys", "why's"},       {"wont", "won't"},       {"wouldve", "would've"}, {"wouldnt", "wouldn't"},
        {"yall", "y'all"},       {"youd", "you'd"},       {"youll", "you'll"},     {"youre", "you're"},
        {"youve", "you've"},
    };
    return table;
}

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace detail

/// Canonical form used for answer matching: lowercase, trimmed, punctuation
/// dropped (apostrophes between word characters survive), standalone
/// articles removed, whitespace collapsed. Idempotent.
inline std::string normalize_answer(std::string_view raw, const NormalizationOptions& opts = {}) {
    std::string lowered = to_lower(raw);

    std::string stripped;
    stripped.reserve(lowered.size());
    for (std::size_t i = 0; i < lowered.size(); ++i) {
        auto c = static_cast<unsigned char>(lowered[i]);
        if (c == '\'') {
            bool inside = i > 0 && i + 1 < lowered.size() &&
                          detail::is_word_byte(static_cast<unsigned char>(lowered[i - 1])) &&
                          detail::is_word_byte(static_cast<unsigned char>(lowered[i + 1]));
            if (inside) stripped += '\'';
            continue;
        }
        if (c < 0x80 && std::ispunct(c)) continue;
        stripped += static_cast<char>(c);
    }

    std::vector<std::string> tokens;
    std::istringstream words(stripped);
    for (std::string tok; words >> tok;) {
        if (tok == "a" || tok == "an" || tok == "the") continue;
        if (opts.official_tables) {
            if (auto it = detail::number_words().find(tok); it != detail::number_words().end()) {
                tok = it->second;
            } else if (auto ct = detail::contractions().find(tok); ct != detail::contractions().end()) {
                tok = ct->second;
            }
        }
        tokens.push_back(std::move(tok));
    }
    return join(tokens, " ");
}

// ---------------------------------------------------------------------------
// Soft accuracy

/// VQA soft accuracy over exactly ten annotations: the mean over the ten
/// leave-one-out subsets of min(matches / 3, 1).
inline double soft_accuracy(std::string_view prediction, const std::vector<std::string>& gold_answers,
                            const NormalizationOptions& opts = {}) {
    if (gold_answers.size() != kOkVqaAnswerCount) {
        fail(ErrorCode::WrongAnnotationCount,
             "expected 10 gold answers, got " + std::to_string(gold_answers.size()));
    }
    const std::string pred = normalize_answer(prediction, opts);
    int matches = 0;
    for (const auto& g : gold_answers) {
        if (normalize_answer(g, opts) == pred) ++matches;
    }
    // Dropping a matching annotation leaves matches-1 in the subset; dropping
    // any other leaves all of them. The clipped counts are summed in thirds
    // and divided once.
    const int n = static_cast<int>(kOkVqaAnswerCount);
    const int clipped = matches * std::min(matches - 1, 3) + (n - matches) * std::min(matches, 3);
    return clipped / (3.0 * n);
}

/// Direct-answer scoring for annotation lists of any length: min(matches / 3, 1).
inline double direct_match_accuracy(std::string_view prediction, const std::vector<std::string>& gold_answers,
                                    const NormalizationOptions& opts = {}) {
    const std::string pred = normalize_answer(prediction, opts);
    int matches = 0;
    for (const auto& g : gold_answers) {
        if (normalize_answer(g, opts) == pred) ++matches;
    }
    return std::min(matches / 3.0, 1.0);
}

/// Picks the scorer for an instance: ten annotations use the leave-one-out
/// protocol, other list lengths (A-OKVQA direct answers) use direct matching.
inline double instance_accuracy(std::string_view prediction, const std::vector<std::string>& gold_answers,
                                const NormalizationOptions& opts = {}) {
    if (gold_answers.size() == kOkVqaAnswerCount) return soft_accuracy(prediction, gold_answers, opts);
    return direct_match_accuracy(prediction, gold_answers, opts);
}

/// Most frequent gold answer (first occurrence wins ties); used as the
/// in-context example answer.
inline std::string most_common_answer(const std::vector<std::string>& gold_answers) {
    std::string best;
    int best_count = 0;
    std::map<std::string, int> counts;
    for (const auto& g : gold_answers) {
        int c = ++counts[g];
        if (c > best_count) {
            best_count = c;
            best = g;
        }
    }
    // Re-scan so ties go to the earliest answer, not the one completed first.
    for (const auto& g : gold_answers) {
        if (counts[g] == best_count) return g;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Loading

namespace detail {

inline std::string id_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
    throw std::invalid_argument("id must be a string or integer");
}

inline std::string coco_image_name(Split split, const json& image_id) {
    // OK-VQA test questions come from the COCO val2014 images.
    const char* coco_split = split == Split::Train ? "train2014" : "val2014";
    if (image_id.is_number_integer()) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "COCO_%s_%012lld.jpg", coco_split, image_id.get<long long>());
        return buf;
    }
    return id_string(image_id);
}

/// A-OKVQA images live in the COCO 2017 layout: "<split>2017/<id:012>.jpg".
inline std::string coco2017_image_name(Split split, const json& image_id) {
    if (image_id.is_number_integer()) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s2017/%012lld.jpg", std::string(to_string(split)).c_str(),
                      image_id.get<long long>());
        return buf;
    }
    return id_string(image_id);
}

inline void read_optional_fields(const json& q, VQAInstance& inst) {
    if (auto it = q.find("caption"); it != q.end() && it->is_string()) inst.caption = it->get<std::string>();
    if (auto it = q.find("tags"); it != q.end() && it->is_array()) {
        inst.tags = it->get<std::vector<std::string>>();
    }
    if (auto it = q.find("candidates"); it != q.end() && it->is_array()) {
        std::vector<Candidate> cands;
        for (const auto& c : *it) {
            Candidate cand{c.at("answer").get<std::string>(), c.at("confidence").get<double>()};
            if (!(cand.confidence >= 0.0 && cand.confidence <= 1.0)) {
                throw std::invalid_argument("candidate confidence outside [0,1]");
            }
            cands.push_back(std::move(cand));
        }
        inst.candidates = std::move(cands);
    }
}

inline std::vector<VQAInstance> load_aokvqa_native(const fs::path& file, Split split) {
    json doc = parse_json_file(file);
    if (!doc.is_array()) fail(ErrorCode::MalformedRecord, file.string() + ": expected a top-level array");
    std::vector<VQAInstance> out;
    for (const auto& rec : doc) {
        std::string qid = rec.contains("question_id") ? id_string(rec["question_id"]) : std::string{};
        try {
            VQAInstance inst;
            inst.question_id = qid;
            inst.split = split;
            inst.question = rec.at("question").get<std::string>();
            inst.image_ref = rec.contains("image") ? rec["image"].get<std::string>()
                                                   : coco2017_image_name(split, rec.at("image_id"));
            if (rec.contains("direct_answers")) {
                inst.gold_answers = rec["direct_answers"].get<std::vector<std::string>>();
            }
            read_optional_fields(rec, inst);
            if (qid.empty() || trim_view(inst.question).empty()) throw std::invalid_argument("empty id or question");
            out.push_back(std::move(inst));
        } catch (const std::exception& e) {
            fail(ErrorCode::MalformedRecord, qid + ": " + e.what(), qid);
        }
    }
    return out;
}

}  // namespace detail

inline fs::path questions_file(const fs::path& dir, Split split) {
    return dir / (std::string(to_string(split)) + "_questions.json");
}

inline fs::path annotations_file(const fs::path& dir, Split split) {
    return dir / (std::string(to_string(split)) + "_annotations.json");
}

/// Loads `<split>_questions.json` joined with `<split>_annotations.json`.
///
/// Annotations are mandatory for train and val; for test they are joined when
/// present. A-OKVQA directories may instead hold the native
/// `aokvqa_v1p0_<split>.json` array with `direct_answers`.
inline std::vector<VQAInstance> load_dataset(const fs::path& dir, DatasetFormat format, Split split) {
    const fs::path qfile = questions_file(dir, split);
    if (format == DatasetFormat::AOkVqa && !fs::exists(qfile)) {
        fs::path native = dir / ("aokvqa_v1p0_" + std::string(to_string(split)) + ".json");
        if (fs::exists(native)) return detail::load_aokvqa_native(native, split);
    }
    if (!fs::exists(qfile)) fail(ErrorCode::MissingFile, qfile.string() + " not found", qfile.string());

    const fs::path afile = annotations_file(dir, split);
    const bool annotated = split != Split::Test || fs::exists(afile);
    if (annotated && !fs::exists(afile)) fail(ErrorCode::MissingFile, afile.string() + " not found", afile.string());

    json qdoc = parse_json_file(qfile);
    if (!qdoc.is_object() || !qdoc.contains("questions") || !qdoc["questions"].is_array()) {
        fail(ErrorCode::MalformedRecord, qfile.string() + ": missing \"questions\" array");
    }

    std::unordered_map<std::string, std::vector<std::string>> answers;
    if (annotated) {
        json adoc = parse_json_file(afile);
        if (!adoc.is_object() || !adoc.contains("annotations") || !adoc["annotations"].is_array()) {
            fail(ErrorCode::MalformedRecord, afile.string() + ": missing \"annotations\" array");
        }
        for (const auto& ann : adoc["annotations"]) {
            std::string qid;
            try {
                qid = detail::id_string(ann.at("question_id"));
                std::vector<std::string> golds;
                for (const auto& a : ann.at("answers")) {
                    golds.push_back(a.is_string() ? a.get<std::string>() : a.at("answer").get<std::string>());
                }
                answers[qid] = std::move(golds);
            } catch (const std::exception& e) {
                fail(ErrorCode::MalformedRecord, "annotation " + qid + ": " + e.what(), qid);
            }
        }
    }

    std::vector<VQAInstance> out;
    std::set<std::string> seen;
    for (const auto& q : qdoc["questions"]) {
        std::string qid;
        VQAInstance inst;
        try {
            qid = detail::id_string(q.at("question_id"));
            inst.question_id = qid;
            inst.split = split;
            inst.question = q.at("question").get<std::string>();
            if (q.contains("image")) {
                inst.image_ref = q["image"].get<std::string>();
            } else {
                inst.image_ref = detail::coco_image_name(split, q.at("image_id"));
            }
            detail::read_optional_fields(q, inst);
        } catch (const std::exception& e) {
            fail(ErrorCode::MalformedRecord, qid + ": " + e.what(), qid);
        }
        if (trim_view(inst.question).empty()) fail(ErrorCode::MalformedRecord, qid + ": empty question", qid);
        if (!seen.insert(qid).second) fail(ErrorCode::MalformedRecord, qid + ": duplicate question_id", qid);

        if (annotated) {
            auto it = answers.find(qid);
            if (it == answers.end()) {
                fail(ErrorCode::AnnotationMismatch, "no annotation for question " + qid, qid);
            }
            inst.gold_answers = it->second;
            if (format == DatasetFormat::OkVqa && inst.gold_answers.size() != kOkVqaAnswerCount) {
                fail(ErrorCode::MalformedRecord,
                     qid + ": expected 10 answers, got " + std::to_string(inst.gold_answers.size()), qid);
            }
        }
        out.push_back(std::move(inst));
    }
    return out;
}

inline fs::path resolve_image(const fs::path& image_root, const std::string& image_ref) {
    fs::path p(image_ref);
    if (p.is_absolute() || image_root.empty()) return p;
    return image_root / p;
}

}  // namespace ira
