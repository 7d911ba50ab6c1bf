#include "dialect/noise.hpp"

#include <stdexcept>
#include <string>

namespace dialect::noise {

void NoiseConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0))
      throw ConfigError(std::string("noise ") + name + " must lie in [0, 1], got " +
                        std::to_string(p));
  };
  prob(p_drop, "p_drop");
  prob(p_blank, "p_blank");
}

Sentence add_noise(const Sentence& sentence, const NoiseConfig& cfg, Rng& rng) {
  if (sentence.ids.empty()) throw std::invalid_argument("add_noise: empty sentence");
  Sentence out{{}, sentence.dialect};
  out.ids.reserve(sentence.ids.size());

  if (cfg.p_drop > 0.0) {
    std::vector<bool> keep(sentence.ids.size());
    std::size_t kept = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      keep[i] = !rng.bernoulli(cfg.p_drop);
      kept += keep[i];
    }
    if (kept == 0) keep[rng.below(keep.size())] = true;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) out.ids.push_back(sentence.ids[i]);
  } else {
    out.ids = sentence.ids;
  }

  if (cfg.p_blank > 0.0)
    for (auto& id : out.ids)
      if (rng.bernoulli(cfg.p_blank)) id = kBlank;

  if (out.ids.size() >= 2)
    for (std::size_t s = 0; s < cfg.n_swaps; ++s) {
      const auto i = rng.below(out.ids.size() - 1);
      std::swap(out.ids[i], out.ids[i + 1]);
    }
  return out;
}

NoisedBatch make_noised_batch(std::span<const Sentence> sentences, const NoiseConfig& cfg,
                              std::uint64_t stream, std::uint64_t first_index) {
  NoisedBatch batch;
  batch.original.assign(sentences.begin(), sentences.end());
  batch.corrupted.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    Rng rng(derive_seed(cfg.rng_seed, stream, first_index + i));
    batch.corrupted.push_back(add_noise(sentences[i], cfg, rng));
  }
  return batch;
}

}  // namespace dialect::noise
