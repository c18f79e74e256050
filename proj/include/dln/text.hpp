#pragma once

// Shared string helpers: tokenization into whitespace units, answer
// normalization for exact-match scoring, and a stable content hash.

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dln::text {

/// Splits on runs of whitespace. Empty input (or all-whitespace) -> {}.
inline std::vector<std::string> split_units(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

/// Number of whitespace-delimited units. Accounting granularity for the
/// token ledger and for length normalization of sequence log-probs.
inline std::size_t unit_count(std::string_view s) {
  std::size_t n = 0;
  bool in_unit = false;
  for (char c : s) {
    bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!ws && !in_unit) ++n;
    in_unit = !ws;
  }
  return n;
}

inline std::string join(const std::vector<std::string>& units,
                        std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (i) out += sep;
    out += units[i];
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

/// Canonical form used for exact-match comparison: lowercase, trimmed,
/// inner whitespace runs collapsed to single spaces, trailing '.', '!'
/// and '?' stripped.
inline std::string normalize_answer(std::string_view s) {
  std::string t = lower(trim(s));
  std::string out;
  out.reserve(t.size());
  bool prev_ws = false;
  for (char c : t) {
    bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (ws) {
      prev_ws = true;
      continue;
    }
    if (prev_ws && !out.empty()) out += ' ';
    prev_ws = false;
    out += c;
  }
  // Strip trailing sentence punctuation and any spaces it exposes, to a
  // fixed point ("a . !" -> "a").
  while (!out.empty() && (out.back() == '.' || out.back() == '!' ||
                          out.back() == '?' || out.back() == ' ')) {
    out.pop_back();
  }
  return out;
}

/// FNV-1a 64-bit. Used for content-derived ids and seeding by string.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace dln::text
