// Tokenization, joint vocabulary, corpus filtering and corpus statistics.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dialect/types.hpp"

namespace dialect::corpus {

enum class TokenizeMode { Char, Whitespace };

TokenizeMode parse_mode(const std::string& name);

using Tokens = std::vector<std::string>;
using TokenizedCorpus = std::vector<Tokens>;
using FreqTable = std::map<std::string, std::uint64_t>;

/// Char mode emits one token per non-whitespace code point; whitespace mode
/// splits on runs of ASCII/Unicode whitespace.
Tokens tokenize(std::string_view text, TokenizeMode mode);
/// Inverse of tokenize up to whitespace normalization: char mode joins with no
/// separator, whitespace mode with single spaces.
std::string detokenize(std::span<const std::string> tokens, TokenizeMode mode);

class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocab {
 public:
  Vocab();  // specials only

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(const std::string& token) const;
  std::uint64_t freq(TokenId id) const { return freq_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Unknown tokens map to kUnk.
  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  /// Drops special ids.
  Tokens decode(std::span<const TokenId> ids) const;

  /// Appends a new non-special token; throws if it already exists.
  TokenId add(const std::string& token, std::uint64_t freq);

  void write(std::ostream& os) const;
  static Vocab read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const {
    return tokens_ == other.tokens_ && freq_ == other.freq_;
  }

  static const std::vector<std::string>& special_tokens();

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> freq_;
  std::unordered_map<std::string, TokenId> id_of_;
};

FreqTable count_tokens(const TokenizedCorpus& corpus);

/// Pools counts over all corpora; orders non-specials by descending frequency
/// with ties broken by code point order.
Vocab build_joint_vocab(std::span<const TokenizedCorpus> corpora, std::uint64_t min_freq = 1);

/// Keeps sentences of length [min_len, max_len] whose tokens are all in the
/// vocabulary, preserving order.
Corpus filter_corpus(const TokenizedCorpus& corpus, const Vocab& vocab, Dialect dialect,
                     std::size_t min_len = 4, std::size_t max_len = 32);

/// Average ranks (1-based) of `values` sorted in descending order.
std::vector<double> average_ranks(std::span<const double> values);
double pearson(std::span<const double> x, std::span<const double> y);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Spearman correlation between the frequency rankings of tokens present in
/// both tables. With `top_k`, only the k most frequent tokens of `a` that also
/// occur in `b` are ranked. The p-value is a two-sided permutation test.
SpearmanResult spearman_rank_correlation(const FreqTable& a, const FreqTable& b,
                                         std::optional<std::size_t> top_k = std::nullopt,
                                         std::size_t permutations = 1000,
                                         std::uint64_t seed = 0x5eed);

struct CorpusStats {
  std::size_t sentence_count = 0;
  std::size_t vocab_size = 0;
  std::size_t unique_token_count = 0;
  std::size_t top_k_overlap = 0;
};

std::pair<CorpusStats, CorpusStats> corpus_stats(const TokenizedCorpus& a,
                                                 const TokenizedCorpus& b,
                                                 std::size_t top_k = 250);

std::string stats_to_json(const CorpusStats& stats);

// ---- file helpers ---------------------------------------------------------

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);
TokenizedCorpus tokenize_lines(std::span<const std::string> lines, TokenizeMode mode);

/// Encodes token lists; unknown tokens become kUnk.
Corpus encode_corpus(const TokenizedCorpus& corpus, const Vocab& vocab, Dialect dialect);
std::vector<std::string> decode_corpus(std::span<const Sentence> sentences, const Vocab& vocab,
                                       TokenizeMode mode);

}  // namespace dialect::corpus
