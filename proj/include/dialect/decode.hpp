// Greedy and beam decoding, corpus BLEU.
#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dialect/model.hpp"
#include "dialect/types.hpp"

namespace dialect::decode {

struct BeamConfig {
  std::size_t beam_size = 4;
  std::size_t max_len = 32;
  double length_penalty_alpha = 0.6;

  void validate() const;
};

/// Incremental next-token scorer over a set of rows (hypotheses).
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t rows() const = 0;
  virtual std::size_t vocab_size() const = 0;
  /// Log-probabilities [rows * V] of the next token given each row's previous
  /// token (ignored on the first call).
  virtual std::vector<double> step(std::span<const TokenId> previous) = 0;
  /// New row i continues old row `source_rows[i]`.
  virtual void reorder(std::span<const std::size_t> source_rows) = 0;
};

template <typename T>
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const model::Transformer<T>& model, std::span<const Sentence> sources,
              Dialect target_dialect);
  std::size_t rows() const override { return decoder_.rows(); }
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<double> step(std::span<const TokenId> previous) override;
  void reorder(std::span<const std::size_t> source_rows) override { decoder_.reorder(source_rows); }

 private:
  model::IncrementalDecoder<T> decoder_;
  std::size_t vocab_;
};

/// Score divisor ((5 + len) / 6)^alpha.
double length_penalty(std::size_t length, double alpha);

/// Decodes every row of `scorer` greedily. Specials other than EOS are never
/// emitted; EOS is disallowed before `min_len` tokens. Ties go to the lowest id.
/// `row_max_len`, when non-empty, further caps each row.
std::vector<std::vector<TokenId>> greedy_search(StepScorer& scorer, std::size_t max_len,
                                                std::size_t min_len = 0,
                                                std::span<const std::size_t> row_max_len = {});

struct Hypothesis {
  std::vector<TokenId> ids;  // without EOS
  double log_prob = 0.0;
  bool finished = false;
};

/// Beam search over a scorer holding exactly one row.
Hypothesis beam_search(StepScorer& scorer, const BeamConfig& cfg, std::size_t min_len = 0);

template <typename T>
std::vector<Sentence> greedy_decode(const model::Transformer<T>& model,
                                    std::span<const Sentence> sources, Dialect target_dialect,
                                    std::size_t max_len, std::size_t min_len = 0,
                                    std::span<const std::size_t> row_max_len = {});
template <typename T>
Sentence greedy_decode(const model::Transformer<T>& model, const Sentence& source,
                       Dialect target_dialect, std::size_t max_len);
template <typename T>
Sentence beam_decode(const model::Transformer<T>& model, const Sentence& source,
                     Dialect target_dialect, const BeamConfig& cfg);

/// Decodes in chunks of `batch` sentences.
template <typename T>
std::vector<Sentence> translate_corpus(const model::Transformer<T>& model,
                                       std::span<const Sentence> sources, Dialect target_dialect,
                                       const BeamConfig& cfg, std::size_t batch = 64);

struct BleuReport {
  double score = 0.0;
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

BleuReport bleu(std::span<const std::vector<TokenId>> hypotheses,
                std::span<const std::vector<TokenId>> references);
BleuReport bleu(std::span<const Sentence> hypotheses, std::span<const Sentence> references);

std::string bleu_to_json(const BleuReport& report);

}  // namespace dialect::decode
