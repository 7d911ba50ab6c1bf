// Checks shared by the unit tests and the acceptance runner.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dialect/autodiff.hpp"
#include "dialect/model.hpp"

namespace probes {

using dialect::Sentence;
using dialect::ad::Tensor;

// ---- gradients --------------------------------------------------------------

using GradProblem = std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>;

struct GradCase {
  std::string name;
  std::function<GradProblem(std::uint64_t seed)> make;
};

/// One randomized problem generator per differentiable primitive.
std::vector<GradCase> primitive_grad_cases();
/// Worst relative error of `c` over `seeds` seeds.
double worst_grad_error(const GradCase& c, int seeds);
/// Worst relative error of the full 2-layer, d=8 model loss over `seeds`
/// random models (varying pivot size, coordination, sharing and dialect
/// token); `max_per_tensor` = 0 checks every scalar.
double model_grad_error(int seeds, std::size_t max_per_tensor);

// ---- model wiring -------------------------------------------------------------

dialect::model::ModelConfig tiny_config(std::size_t pivot = 4, bool coordination = true,
                                        std::size_t shared = 1);
std::vector<Sentence> random_sentences(dialect::Rng& rng, std::size_t n, dialect::Dialect d,
                                       std::size_t vocab, std::size_t lo = 2, std::size_t hi = 6);

struct ProbeResult {
  bool ok = true;
  std::size_t checks = 0;
  std::string failure;  // first violation

  void expect(bool cond, const std::string& what) {
    ++checks;
    if (!cond && ok) {
      ok = false;
      failure = what;
    }
  }
};

/// Changing the target token at column c changes the logits at c and leaves
/// every earlier column bit-identical.
ProbeResult causal_mask_probe(int reps = 20);
/// Perturbing encoder layer k changes decoder cross-attention at layer n iff
/// n >= k with coordination on; with it off, only the top encoder layer
/// matters.
ProbeResult coordination_probe();

/// Independent closed form of the scalar parameter count.
std::size_t expected_param_count(const dialect::model::ModelConfig& c);
/// Closed form vs param_count vs built store over pivot sizes, sharing and
/// dialect token, plus strict decrease over d_s in {0, d/4, d/2, d}.
ProbeResult param_count_probe(const dialect::model::ModelConfig& base);

/// Every token's first pivot_dim embedding columns agree bit-for-bit across
/// dialects; the private columns differ for at least one token.
ProbeResult pivot_identity_probe(const dialect::model::Transformer<float>& model);

// ---- metrics ------------------------------------------------------------------

/// Corpus BLEU-4 by explicit n-gram map counting.
double oracle_bleu(const std::vector<std::vector<dialect::TokenId>>& hyp,
                   const std::vector<std::vector<dialect::TokenId>>& ref);
/// Largest |bleu - oracle_bleu| over `corpora` random small corpora.
double bleu_oracle_gap(int corpora, std::uint64_t seed = 99);
/// Largest |rho - (1 - 6 sum d^2 / (n (n^2 - 1)))| over `cases` random
/// tie-free frequency tables.
double spearman_closed_form_gap(int cases, std::uint64_t seed = 77);

}  // namespace probes
