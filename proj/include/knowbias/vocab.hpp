#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knowbias/error.hpp"

namespace knowbias {

using TokenId = std::uint32_t;

// Word-level vocabulary. Punctuation and '/' are tokens of their own; the
// detokenizer glues them back so that detokenize(tokenize(t)) == t for text in
// normal form (single spaces, no space before punctuation or around '/').
class Vocab {
 public:
  static constexpr std::string_view kYes = "Yes";
  static constexpr std::string_view kNo = "No";
  static constexpr std::string_view kBos = "<bos>";

  Vocab() = default;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto& t = tokens_[i];
      require(!t.empty(), ErrorCode::parse, "vocab: empty token at line " + std::to_string(i + 1));
      require(t.find_first_of(" \t\r\n") == std::string::npos, ErrorCode::parse,
              "vocab: token '" + t + "' contains whitespace");
      const bool fresh = ids_.emplace(t, static_cast<TokenId>(i)).second;
      require(fresh, ErrorCode::parse, "vocab: duplicate token '" + t + "'");
    }
    require(ids_.contains(std::string(kYes)) && ids_.contains(std::string(kNo)), ErrorCode::parse,
            "vocab: the answer tokens 'Yes' and 'No' must be present");
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::io, "cannot open vocab file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write vocab file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view token) const {
    auto found = find(token);
    require(found.has_value(), ErrorCode::not_found, "unknown token '" + std::string(token) + "'");
    return *found;
  }

  bool contains(std::string_view token) const { return find(token).has_value(); }

  const std::string& token(TokenId id) const {
    require(id < tokens_.size(), ErrorCode::not_found, "token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  TokenId yes() const { return id(kYes); }
  TokenId no() const { return id(kNo); }
  std::optional<TokenId> bos() const { return find(kBos); }

  // Split text into vocab units. Throws not_found on the first uncovered unit.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& piece : split_units(text)) {
      auto id = find(piece);
      require(id.has_value(), ErrorCode::not_found,
              "unknown token '" + piece + "' in \"" + std::string(text) + "\"");
      out.push_back(*id);
    }
    return out;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    bool glue_next = true;
    for (TokenId id : ids) {
      const std::string& t = token(id);
      if (!glue_next && !attaches_left(t)) out.push_back(' ');
      out += t;
      glue_next = (t == "/");
    }
    return out;
  }

  static std::vector<std::string> split_units(std::string_view text) {
    std::vector<std::string> units;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      std::size_t j = i;
      while (j < text.size() && !is_space(text[j])) ++j;
      if (j > i) split_chunk(text.substr(i, j - i), units);
      i = j;
    }
    return units;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
  static bool is_punct(char c) { return c == '?' || c == '.' || c == ',' || c == '!' || c == ';' || c == ':'; }
  static bool attaches_left(const std::string& t) {
    return t == "/" || (t.size() == 1 && is_punct(t[0]));
  }

  static void split_chunk(std::string_view chunk, std::vector<std::string>& units) {
    std::size_t start = 0;
    for (std::size_t k = 0; k <= chunk.size(); ++k) {
      if (k == chunk.size() || chunk[k] == '/') {
        split_word(chunk.substr(start, k - start), units);
        if (k < chunk.size()) units.emplace_back("/");
        start = k + 1;
      }
    }
  }

  static void split_word(std::string_view word, std::vector<std::string>& units) {
    std::size_t end = word.size();
    while (end > 0 && is_punct(word[end - 1])) --end;
    if (end > 0) units.emplace_back(word.substr(0, end));
    for (std::size_t k = end; k < word.size(); ++k) units.emplace_back(1, word[k]);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace knowbias
