// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include "ira/util.hpp"

namespace ira {

enum class Variant { Pica, PromptCap, Prophet };

inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Pica: return "pica";
        case Variant::PromptCap: return "promptcap";
        case Variant::Prophet: return "prophet";
    }
    return "pica";
}

inline Variant parse_variant(std::string_view s) {
    if (s == "pica") return Variant::Pica;
    if (s == "promptcap") return Variant::PromptCap;
    if (s == "prophet") return Variant::Prophet;
    fail(ErrorCode::ConfigInvalid, "unknown variant '" + std::string(s) + "'", "variant");
}

enum class PromptKind { QuestionGeneration, Summarization, Answer };

/// A rendered prompt plus every slot value that went into it.
///
/// Slot names are "instruction", "example[<i>].<field>" and "query.<field>";
/// the kind-specific render function rebuilds `text` from `slots` alone.
struct PromptBundle {
    PromptKind kind = PromptKind::Answer;
    std::string text;
    std::map<std::string, std::string> slots;
    Variant variant = Variant::Pica;  // meaningful for answer prompts
    std::size_t shots = 0;

    [[nodiscard]] std::string hash() const { return sha256_hex(text); }
};

inline std::string example_slot(std::size_t i, std::string_view field) {
    return "example[" + std::to_string(i) + "]." + std::string(field);
}

inline std::string query_slot(std::string_view field) { return "query." + std::string(field); }

namespace detail {

inline const std::string& slot(const std::map<std::string, std::string>& slots, const std::string& name) {
    auto it = slots.find(name);
    if (it == slots.end()) fail(ErrorCode::MissingField, "prompt slot '" + name + "' not filled", name);
    return it->second;
}

inline std::size_t count_examples(const std::map<std::string, std::string>& slots, std::string_view field) {
    std::size_t n = 0;
    while (slots.count(example_slot(n, field))) ++n;
    return n;
}

}  // namespace detail

}  // namespace ira
