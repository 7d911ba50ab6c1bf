// Raw corpora to encoded training, dev and test data.
#pragma once

#include <filesystem>
#include <optional>

#include "dialect/config.hpp"
#include "dialect/corpus.hpp"
#include "dialect/synth.hpp"
#include "dialect/training.hpp"

namespace dialect::pipeline {

struct PreparedData {
  corpus::Vocab vocab;
  Corpus train_a{Dialect::A, {}};
  Corpus train_b{Dialect::B, {}};
  train::DevSet dev;
  train::DevSet test;
};

/// Builds the joint vocabulary over both training corpora, filters them by
/// length and vocabulary, and encodes the parallel sets (unknown tokens become
/// kUnk; pairs with either side outside the length bounds are dropped).
PreparedData prepare(const corpus::TokenizedCorpus& train_a, const corpus::TokenizedCorpus& train_b,
                     const corpus::TokenizedCorpus& dev_a, const corpus::TokenizedCorpus& dev_b,
                     const corpus::TokenizedCorpus& test_a, const corpus::TokenizedCorpus& test_b,
                     const config::DataConfig& cfg);

PreparedData prepare(const synth::SynthData& data, const config::DataConfig& cfg);

/// Reads train.{A,B} and, when present, dev.{A,B} and test.{A,B} from `dir`.
PreparedData prepare_dir(const std::filesystem::path& dir, const config::DataConfig& cfg);

/// Encodes a parallel set against an existing vocabulary.
train::DevSet encode_parallel(const corpus::TokenizedCorpus& a, const corpus::TokenizedCorpus& b,
                              const corpus::Vocab& vocab, std::size_t min_len, std::size_t max_len);

}  // namespace dialect::pipeline
