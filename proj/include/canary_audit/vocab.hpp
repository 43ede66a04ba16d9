#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "canary_audit/errors.hpp"

namespace canary_audit {

using Symbol = int;

/// Symbol inventory: 0-25 letters, 26 space, 27 end-of-sequence, 28 padding.
///
/// Only 0-26 appear in stored text. EOS is scored by the language model but
/// never rendered, and padding exists only in left-padded LM contexts.
namespace vocab {

inline constexpr int kLetters = 26;
inline constexpr Symbol kSpace = 26;
inline constexpr Symbol kEos = 27;
inline constexpr Symbol kPad = 28;
/// Symbols with an output logit (letters, space, EOS).
inline constexpr int kScored = 28;
inline constexpr int kSymbols = 29;

constexpr bool is_letter(Symbol s) noexcept { return s >= 0 && s < kLetters; }
constexpr bool is_text_symbol(Symbol s) noexcept { return s >= 0 && s <= kSpace; }

inline Symbol from_char(char c) {
  if (c >= 'a' && c <= 'z') return c - 'a';
  if (c == ' ') return kSpace;
  throw InvalidArgument(std::string("character outside the a-z/space inventory: '") + c + "'");
}

inline char to_char(Symbol s) {
  if (is_letter(s)) return static_cast<char>('a' + s);
  if (s == kSpace) return ' ';
  throw InvalidArgument("symbol has no text form: " + std::to_string(s));
}

inline std::vector<Symbol> encode(std::string_view text) {
  std::vector<Symbol> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(from_char(c));
  return out;
}

/// Inverse of encode. EOS symbols are dropped; padding is rejected.
inline std::string decode(const std::vector<Symbol>& symbols) {
  std::string out;
  out.reserve(symbols.size());
  for (Symbol s : symbols) {
    if (s == kEos) continue;
    out.push_back(to_char(s));
  }
  return out;
}

}  // namespace vocab

/// Whitespace-separated tokens.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

}  // namespace canary_audit
