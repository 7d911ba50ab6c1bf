// Input corruption for the denoising reconstruction objective.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dialect/rng.hpp"
#include "dialect/types.hpp"

namespace dialect::noise {

struct NoiseConfig {
  double p_drop = 0.1;
  double p_blank = 0.1;
  std::size_t n_swaps = 1;  // adjacent-pair transpositions per sentence
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct NoisedBatch {
  std::vector<Sentence> original;
  std::vector<Sentence> corrupted;
};

/// Applies, in order: token dropping (at least one token survives), BLANK
/// substitution, then `n_swaps` transpositions of a uniformly chosen adjacent
/// pair.
Sentence add_noise(const Sentence& sentence, const NoiseConfig& cfg, Rng& rng);

/// Noises every sentence with its own stream derived from
/// (cfg.rng_seed, stream, first_index + i).
NoisedBatch make_noised_batch(std::span<const Sentence> sentences, const NoiseConfig& cfg,
                              std::uint64_t stream, std::uint64_t first_index = 0);

}  // namespace dialect::noise
