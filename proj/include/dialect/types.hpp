#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialect {

using TokenId = std::int32_t;

enum class Dialect : std::uint8_t { A = 0, B = 1 };

constexpr Dialect other(Dialect d) { return d == Dialect::A ? Dialect::B : Dialect::A; }
constexpr std::size_t index_of(Dialect d) { return static_cast<std::size_t>(d); }
inline std::string dialect_name(Dialect d) { return d == Dialect::A ? "A" : "B"; }
Dialect parse_dialect(const std::string& name);

// Reserved vocabulary ids, always the first entries of every Vocab.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kBlank = 4;
inline constexpr std::size_t kNumSpecials = 5;

constexpr bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }

struct Sentence {
  std::vector<TokenId> ids;
  Dialect dialect = Dialect::A;

  std::size_t size() const { return ids.size(); }
  bool operator==(const Sentence&) const = default;
};

/// Monolingual collection; every sentence carries the corpus dialect.
struct Corpus {
  Dialect dialect = Dialect::A;
  std::vector<Sentence> sentences;

  std::size_t size() const { return sentences.size(); }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class VocabError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

}  // namespace dialect
