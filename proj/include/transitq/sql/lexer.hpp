#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace transitq::sql {

// Byte offsets into the original query text, half-open.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
};

enum class TokenKind {
  word,         // bare identifier or keyword
  quoted_name,  // "x", `x` or [x]
  string,       // '...'
  number,
  param,        // ?, ?1, :name, @name, $name
  op,           // operators and punctuation
  comment,
  error,        // unterminated literal or comment
};

struct Token {
  TokenKind kind = TokenKind::op;
  std::string text;   // raw text
  std::string value;  // upper-cased word, unquoted name or string contents
  Span span;
  int depth = 0;  // parenthesis depth at the token (an opening paren has the outer depth)

  bool is_word(std::string_view upper) const { return kind == TokenKind::word && value == upper; }
  bool is_op(std::string_view s) const { return kind == TokenKind::op && text == s; }
  bool is_name() const { return kind == TokenKind::word || kind == TokenKind::quoted_name; }
  // Identifier spelling for lookups: lower-cased bare words, verbatim quoted names.
  std::string name() const {
    if (kind == TokenKind::quoted_name) return value;
    std::string s = text;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
  }
};

inline std::string to_upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Tokenizes SQLite / standard SQL. Comments are kept as tokens so callers can
// decide whether to skip them; whitespace is dropped.
inline std::vector<Token> lex(std::string_view src) {
  std::vector<Token> out;
  std::size_t i = 0;
  int depth = 0;
  auto push = [&](TokenKind k, std::size_t start, std::size_t end, std::string value) {
    Token t;
    t.kind = k;
    t.text = std::string(src.substr(start, end - start));
    t.value = std::move(value);
    t.span = {start, end};
    t.depth = depth;
    out.push_back(std::move(t));
  };
  auto is_word_start = [](unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; };
  auto is_word_char = [](unsigned char c) { return std::isalnum(c) || c == '_' || c == '$' || c >= 0x80; };

  while (i < src.size()) {
    unsigned char c = static_cast<unsigned char>(src[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    std::size_t start = i;
    if (c == '-' && i + 1 < src.size() && src[i + 1] == '-') {
      while (i < src.size() && src[i] != '\n') ++i;
      push(TokenKind::comment, start, i, {});
      continue;
    }
    if (c == '/' && i + 1 < src.size() && src[i + 1] == '*') {
      auto close = src.find("*/", i + 2);
      if (close == std::string_view::npos) {
        push(TokenKind::error, start, src.size(), "unterminated comment");
        break;
      }
      i = close + 2;
      push(TokenKind::comment, start, i, {});
      continue;
    }
    if (c == '\'' || c == '"' || c == '`' || c == '[') {
      char close = c == '[' ? ']' : static_cast<char>(c);
      std::string value;
      ++i;
      bool closed = false;
      while (i < src.size()) {
        if (src[i] == close) {
          if (close != ']' && i + 1 < src.size() && src[i + 1] == close) {
            value.push_back(close);
            i += 2;
            continue;
          }
          ++i;
          closed = true;
          break;
        }
        value.push_back(src[i++]);
      }
      if (!closed) {
        push(TokenKind::error, start, src.size(), c == '\'' ? "unterminated string literal" : "unterminated quoted identifier");
        break;
      }
      push(c == '\'' ? TokenKind::string : TokenKind::quoted_name, start, i, std::move(value));
      continue;
    }
    if (std::isdigit(c) || (c == '.' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      if (c == '0' && i + 1 < src.size() && (src[i + 1] == 'x' || src[i + 1] == 'X')) {
        i += 2;
        while (i < src.size() && std::isxdigit(static_cast<unsigned char>(src[i]))) ++i;
      } else {
        while (i < src.size() && (std::isdigit(static_cast<unsigned char>(src[i])) || src[i] == '.')) ++i;
        if (i < src.size() && (src[i] == 'e' || src[i] == 'E')) {
          std::size_t j = i + 1;
          if (j < src.size() && (src[j] == '+' || src[j] == '-')) ++j;
          if (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) {
            i = j;
            while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) ++i;
          }
        }
      }
      push(TokenKind::number, start, i, std::string(src.substr(start, i - start)));
      continue;
    }
    if (is_word_start(c)) {
      // x'..' blob literal
      if ((c == 'x' || c == 'X') && i + 1 < src.size() && src[i + 1] == '\'') {
        auto close = src.find('\'', i + 2);
        if (close == std::string_view::npos) {
          push(TokenKind::error, start, src.size(), "unterminated blob literal");
          break;
        }
        i = close + 1;
        push(TokenKind::string, start, i, std::string(src.substr(start + 2, close - start - 2)));
        continue;
      }
      while (i < src.size() && is_word_char(static_cast<unsigned char>(src[i]))) ++i;
      push(TokenKind::word, start, i, to_upper(src.substr(start, i - start)));
      continue;
    }
    if (c == '?' || c == ':' || c == '@' || c == '$') {
      if (c == ':' && i + 1 < src.size() && src[i + 1] == ':') {  // postgres cast
        i += 2;
        push(TokenKind::op, start, i, "::");
        continue;
      }
      ++i;
      while (i < src.size() && is_word_char(static_cast<unsigned char>(src[i]))) ++i;
      push(TokenKind::param, start, i, {});
      continue;
    }
    static constexpr std::string_view two_char[] = {"<=", ">=", "<>", "!=", "==", "||", "<<", ">>", "->"};
    std::string_view rest = src.substr(i);
    bool matched = false;
    for (auto op : two_char) {
      if (rest.substr(0, op.size()) == op) {
        i += op.size();
        // ->> (json)
        if (op == "->" && i < src.size() && src[i] == '>') ++i;
        push(TokenKind::op, start, i, {});
        matched = true;
        break;
      }
    }
    if (matched) continue;
    ++i;
    if (c == ')') depth = std::max(0, depth - 1);
    push(TokenKind::op, start, i, {});
    if (c == '(') ++depth;
  }
  return out;
}

// Tokens without comments.
inline std::vector<Token> lex_code(std::string_view src) {
  auto all = lex(src);
  std::vector<Token> out;
  out.reserve(all.size());
  for (auto& t : all)
    if (t.kind != TokenKind::comment) out.push_back(std::move(t));
  return out;
}

}  // namespace transitq::sql
