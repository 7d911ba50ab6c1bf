// Synthetic dialect pairs related by token rewrite rules, and the rule-based
// baseline translator.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dialect/corpus.hpp"
#include "dialect/types.hpp"

namespace dialect::synth {

struct SynthConfig {
  std::size_t base_vocab_size = 200;
  double zipf_exponent = 1.0;
  std::size_t successor_count = 6;  // allowed next tokens per token
  std::size_t n_train_per_dialect = 20000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  double substitution_fraction = 0.3;  // of the substitution_top most frequent tokens
  std::size_t substitution_top = 50;
  std::size_t partner_rank_max = 120;  // swap partners come from ranks [top, this)
  std::size_t unique_token_count = 2;
  std::size_t len_min = 4;
  std::size_t len_max = 16;
  std::uint64_t seed = 1;
  bool check_targets = true;
  double full_spearman_min = 0.7;
  double top_spearman_max = 0.5;

  void validate() const;
};

/// Injective token rewrite applied in one simultaneous pass.
class RuleTable {
 public:
  RuleTable() = default;
  RuleTable(Dialect from, Dialect to) : from_(from), to_(to) {}

  /// Throws ConfigError if `src` is already mapped or `trg` already used.
  void add(const std::string& src, const std::string& trg);
  const std::map<std::string, std::string>& entries() const { return map_; }
  std::size_t size() const { return map_.size(); }
  Dialect from() const { return from_; }
  Dialect to() const { return to_; }

  RuleTable inverse() const;
  corpus::Tokens apply(const corpus::Tokens& tokens) const;
  /// Id-level table over `vocab`; rules whose tokens are missing are skipped.
  std::unordered_map<TokenId, TokenId> compile(const corpus::Vocab& vocab) const;

  /// TSV src<TAB>trg; the direction is written as a leading comment line.
  void save(const std::filesystem::path& path) const;
  static RuleTable load(const std::filesystem::path& path);

  bool operator==(const RuleTable& o) const {
    return map_ == o.map_ && from_ == o.from_ && to_ == o.to_;
  }

 private:
  std::map<std::string, std::string> map_;
  std::map<std::string, std::string> reverse_;
  Dialect from_ = Dialect::A;
  Dialect to_ = Dialect::B;
};

Sentence rule_based_translate(const Sentence& sentence,
                              const std::unordered_map<TokenId, TokenId>& table, Dialect to);
Sentence rule_based_translate(const Sentence& sentence, const RuleTable& table,
                              const corpus::Vocab& vocab);

struct SynthStats {
  double full_spearman = 0.0;
  double top_spearman = 0.0;
  std::size_t unique_a = 0;
  std::size_t unique_b = 0;
};

struct SynthData {
  corpus::TokenizedCorpus train_a, train_b;  // sentence-disjoint pools
  corpus::TokenizedCorpus dev_a, dev_b;      // parallel
  corpus::TokenizedCorpus test_a, test_b;    // parallel
  RuleTable rules;                           // A -> B
  SynthStats stats;
};

/// Base-token surface form: one CJK ideograph per index.
std::string token_text(std::size_t index);

SynthData generate_synthetic_pair(const SynthConfig& cfg);

/// Writes train/dev/test .A/.B files (char-mode lines), rules.tsv and
/// synth.json under `dir`.
void write_synth_data(const SynthData& data, const SynthConfig& cfg,
                      const std::filesystem::path& dir);

}  // namespace dialect::synth
