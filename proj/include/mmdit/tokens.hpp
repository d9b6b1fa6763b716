#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace mmdit {

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;

// Fixed vocabulary of the attribute grammar. Ids above kGrammarVocab are
// valid embedding rows that no prompt ever produces.
namespace tok {
inline constexpr TokenId pad = 0;
inline constexpr TokenId one = 1, two = 2, three = 3, four = 4;
inline constexpr TokenId red = 5, green = 6, blue = 7, yellow = 8;
inline constexpr TokenId square = 9, circle = 10;
inline constexpr TokenId left_of = 11, right_of = 12, above = 13, below = 14, none = 15;
}  // namespace tok

inline constexpr std::size_t kGrammarVocab = 16;

inline constexpr std::array<std::string_view, kGrammarVocab> kTokenWords = {
    "PAD",   "one",    "two",     "three",    "four",  "red",   "green", "blue",
    "yellow", "square", "circle", "left-of", "right-of", "above", "below", "none"};

inline std::optional<TokenId> token_from_word(std::string_view w) {
    for (std::size_t i = 0; i < kTokenWords.size(); ++i)
        if (kTokenWords[i] == w) return static_cast<TokenId>(i);
    return std::nullopt;
}

inline std::string_view token_word(TokenId id) {
    return id < kTokenWords.size() ? kTokenWords[id] : std::string_view("?");
}

}  // namespace mmdit
