#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <compare>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "kgcap/error.hpp"

namespace kgcap {

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline bool ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// A normalized vocabulary term: lowercase, internal whitespace runs collapsed
// to a single underscore, no leading/trailing whitespace. Bytes outside ASCII
// pass through untouched so UTF-8 labels survive.
class Term {
 public:
  Term() = default;
  explicit Term(std::string_view raw) : text_(normalize(raw)) {
    if (text_.empty()) throw ValidationError("empty term");
  }

  static std::string normalize(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_sep = false;
    for (char c : raw) {
      if (ascii_space(c) || c == '_') {
        pending_sep = !out.empty();
        continue;
      }
      if (pending_sep) out.push_back('_');
      pending_sep = false;
      out.push_back(ascii_lower(c));
    }
    return out;
  }

  const std::string& str() const noexcept { return text_; }
  bool empty() const noexcept { return text_.empty(); }

  friend bool operator==(const Term&, const Term&) = default;
  friend auto operator<=>(const Term&, const Term&) = default;

 private:
  std::string text_;
};

// Caption tokenizer shared by vocabulary construction and the metrics:
// lowercase, split on whitespace, strip punctuation at token boundaries.
inline std::vector<std::string> tokenize(std::string_view text) {
  auto is_punct = [](char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
  };
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && ascii_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !ascii_space(text[j])) ++j;
    std::size_t b = i, e = j;
    while (b < e && is_punct(text[b])) ++b;
    while (e > b && is_punct(text[e - 1])) --e;
    if (b < e) {
      std::string tok(text.substr(b, e - b));
      std::transform(tok.begin(), tok.end(), tok.begin(), ascii_lower);
      tokens.push_back(std::move(tok));
    }
    i = j;
  }
  return tokens;
}

inline std::string join(const std::vector<std::string>& words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && ascii_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && ascii_space(s.back())) s.remove_suffix(1);
  return s;
}

// Strict decimal parse of a whole field; returns false on trailing garbage.
inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace kgcap
