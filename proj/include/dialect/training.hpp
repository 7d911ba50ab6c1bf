// Unsupervised objective: denoising reconstruction plus on-the-fly
// back-translation, combined with a decaying weight on the former.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dialect/model.hpp"
#include "dialect/noise.hpp"

namespace dialect::train {

using model::Tensor;

struct TrainConfig {
  double lambda_com_start = 1.0;
  double lambda_com_end = 0.0;
  std::size_t lambda_decay_steps = 10000;
  double lambda_div = 1.0;
  std::size_t total_steps = 20000;
  std::size_t batch_size = 32;  // sentences per dialect per step
  double lr = 5e-4;
  std::size_t warmup_steps = 200;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double grad_clip_norm = 5.0;
  std::size_t eval_every = 500;
  std::size_t dev_eval_sentences = 200;  // 0 = whole dev set
  std::size_t patience = 0;              // evaluations without improvement; 0 disables
  std::size_t bt_max_len = 32;
  std::uint64_t seed = 1;
  noise::NoiseConfig noise;

  void validate() const;
};

struct LambdaPair {
  double com = 0.0;
  double div = 0.0;
};

LambdaPair lambda_schedule(std::size_t step, const TrainConfig& cfg);
double learning_rate(std::size_t step, const TrainConfig& cfg);

/// Sum of the two reconstruction cross-entropies of noised inputs.
Tensor<float> loss_commonality(const model::Transformer<float>& model,
                               std::span<const Sentence> batch_a,
                               std::span<const Sentence> batch_b,
                               const noise::NoiseConfig& noise_cfg, std::uint64_t stream,
                               Rng* dropout_rng = nullptr);

struct BackTranslatedBatch {
  std::vector<Sentence> synthetic_source;  // opposite dialect, no gradient history
  std::vector<Sentence> true_target;
};

/// Greedy translation of `batch` into the other dialect, with at least one
/// token emitted per sentence and at most min(max_len, 1.3 * len + 5).
BackTranslatedBatch backtranslate_batch(const model::Transformer<float>& model,
                                        std::span<const Sentence> batch, std::size_t max_len);

/// CE(model(synthetic -> true)) summed over both directions.
Tensor<float> loss_diversity(const model::Transformer<float>& model,
                             const BackTranslatedBatch& bt_a, const BackTranslatedBatch& bt_b,
                             Rng* dropout_rng = nullptr);

/// Teacher-forced reconstruction of noised sentences: the fraction of
/// reference tokens (EOS excluded) that are the argmax prediction given the
/// gold prefix. Sentences are noised with `noise_cfg` under `stream`.
double reconstruction_accuracy(const model::Transformer<float>& model,
                               std::span<const Sentence> sentences,
                               const noise::NoiseConfig& noise_cfg, std::uint64_t stream,
                               std::size_t batch_size = 64);

struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::size_t t = 0;
};

AdamState make_adam_state(const model::ParameterStore<float>& params);
/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_grad_norm(model::ParameterStore<float>& params, double max_norm);
void adam_update(model::ParameterStore<float>& params, AdamState& state, double lr,
                 const TrainConfig& cfg);

struct MetricsRecord {
  std::size_t step = 0;
  double lambda_com = 0.0;
  double lambda_div = 0.0;
  double loss_com = 0.0;
  double loss_div = 0.0;
  double loss_total = 0.0;
  std::optional<double> dev_bleu_ab;
  std::optional<double> dev_bleu_ba;
  double wallclock_s = 0.0;
};

std::string metrics_to_json(const MetricsRecord& record);

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DevSet {
  std::vector<Sentence> a, b;  // parallel
};

/// Early-stopping bookkeeping, persisted with the optimizer state.
struct DevProgress {
  double best_dev_bleu = -1.0;  // mean of both directions
  std::size_t best_step = 0;
  std::size_t stale = 0;  // evaluations since the last improvement
};

class Trainer {
 public:
  Trainer(model::ModelConfig model_cfg, TrainConfig cfg, Corpus corpus_a, Corpus corpus_b,
          std::optional<DevSet> dev = std::nullopt,
          std::optional<model::ParameterStore<float>> init = std::nullopt);

  /// Runs one optimization step (the next one) and returns its record, without
  /// dev evaluation.
  MetricsRecord step();
  /// Dev BLEU in both directions on the first dev_eval_sentences pairs.
  std::pair<double, double> evaluate_dev() const;

  std::size_t current_step() const { return step_; }
  const model::Transformer<float>& model() const { return model_; }
  model::Transformer<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const AdamState& adam() const { return adam_; }
  DevProgress& progress() { return progress_; }

  void save_state(const std::filesystem::path& path) const;
  /// Restores optimizer moments, the step counter and dev progress; parameters
  /// come from the checkpoint passed as `init`.
  void load_state(const std::filesystem::path& path);

 private:
  std::vector<Sentence> sample(const Corpus& corpus, std::uint64_t stream) const;

  model::ModelConfig model_cfg_;
  TrainConfig cfg_;
  Corpus corpus_a_, corpus_b_;
  std::optional<DevSet> dev_;
  model::Transformer<float> model_;
  AdamState adam_;
  std::size_t step_ = 0;
  DevProgress progress_;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::optional<std::filesystem::path> resume_state;
  std::size_t stop_at = 0;  // 0 = cfg.total_steps
  bool quiet = true;
  std::function<void(const MetricsRecord&)> on_record;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  double best_dev_bleu = -1.0;  // mean of both directions
  std::size_t best_step = 0;
  bool early_stopped = false;
};

/// Full loop: one record per step (dev BLEU every eval_every steps and at
/// total_steps). With out_dir, appends metrics.jsonl and writes best.ckpt at
/// improvements and last.ckpt/last.state at evaluations and at stop_at. On
/// resume, metrics lines past the restored step are dropped first.
RunResult run_training(Trainer& trainer, const RunOptions& options);

}  // namespace dialect::train
