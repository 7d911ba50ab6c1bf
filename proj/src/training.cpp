#include "dialect/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "dialect/config.hpp"
#include "dialect/decode.hpp"

namespace dialect::train {

namespace {

constexpr std::uint64_t kStreamA = 1, kStreamB = 2, kStreamDropout = 3, kStreamNoise = 4;

void check_batch(std::span<const Sentence> batch, const char* what) {
  if (batch.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (total_steps == 0) fail("total_steps must be positive");
  if (lambda_decay_steps > total_steps) fail("lambda_decay_steps must not exceed total_steps");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be positive");
  if (eval_every == 0) fail("eval_every must be positive");
  if (bt_max_len == 0) fail("bt_max_len must be positive");
  if (lambda_div < 0.0 || lambda_com_start < 0.0 || lambda_com_end < 0.0)
    fail("loss weights must be non-negative");
  if (lambda_div == 0.0 && (lambda_com_start == 0.0 || lambda_com_end == 0.0))
    fail("lambda_div = 0 needs a commonality weight that stays positive");
  noise.validate();
}

LambdaPair lambda_schedule(std::size_t step, const TrainConfig& cfg) {
  const double frac =
      cfg.lambda_decay_steps == 0
          ? 1.0
          : std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.lambda_decay_steps));
  return {cfg.lambda_com_start + (cfg.lambda_com_end - cfg.lambda_com_start) * frac,
          cfg.lambda_div};
}

double learning_rate(std::size_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps));
}

Tensor<float> loss_commonality(const model::Transformer<float>& model,
                               std::span<const Sentence> batch_a,
                               std::span<const Sentence> batch_b,
                               const noise::NoiseConfig& noise_cfg, std::uint64_t stream,
                               Rng* dropout_rng) {
  check_batch(batch_a, "loss_commonality");
  check_batch(batch_b, "loss_commonality");
  const auto na = noise::make_noised_batch(batch_a, noise_cfg, derive_seed(stream, kStreamA));
  const auto nb = noise::make_noised_batch(batch_b, noise_cfg, derive_seed(stream, kStreamB));
  auto la = model.loss(na.corrupted, na.original, dropout_rng);
  auto lb = model.loss(nb.corrupted, nb.original, dropout_rng);
  return ad::add(la, lb);
}

BackTranslatedBatch backtranslate_batch(const model::Transformer<float>& model,
                                        std::span<const Sentence> batch, std::size_t max_len) {
  check_batch(batch, "backtranslate_batch");
  ad::NoGradScope<float> no_grad;
  const Dialect from = batch.front().dialect;
  BackTranslatedBatch out;
  std::vector<std::size_t> caps;
  for (const auto& s : batch)
    caps.push_back(std::min(max_len, static_cast<std::size_t>(1.3 * static_cast<double>(s.size())) + 5));
  out.synthetic_source = decode::greedy_decode(model, batch, other(from), max_len, 1, caps);
  out.true_target.assign(batch.begin(), batch.end());
  return out;
}

Tensor<float> loss_diversity(const model::Transformer<float>& model,
                             const BackTranslatedBatch& bt_a, const BackTranslatedBatch& bt_b,
                             Rng* dropout_rng) {
  check_batch(bt_a.true_target, "loss_diversity");
  check_batch(bt_b.true_target, "loss_diversity");
  auto la = model.loss(bt_a.synthetic_source, bt_a.true_target, dropout_rng);
  auto lb = model.loss(bt_b.synthetic_source, bt_b.true_target, dropout_rng);
  return ad::add(la, lb);
}

double reconstruction_accuracy(const model::Transformer<float>& model,
                               std::span<const Sentence> sentences,
                               const noise::NoiseConfig& noise_cfg, std::uint64_t stream,
                               std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("reconstruction_accuracy: batch_size is 0");
  ad::NoGradScope<float> no_grad;
  const std::size_t V = model.config().vocab_size;
  std::size_t correct = 0, total = 0;
  for (std::size_t lo = 0; lo < sentences.size(); lo += batch_size) {
    const auto chunk = sentences.subspan(lo, std::min(batch_size, sentences.size() - lo));
    const auto noised = noise::make_noised_batch(chunk, noise_cfg, stream, lo);
    const Dialect d = chunk.front().dialect;
    const auto src = model::make_source_batch(noised.corrupted);
    const auto [tgt_in, tgt_out] = model::make_target_batch(noised.original);
    const auto logits = model.forward(src, d, tgt_in, d);
    const auto z = logits.data();
    for (std::size_t r = 0; r < tgt_in.rows; ++r)
      for (std::size_t c = 0; c < chunk[r].size(); ++c) {
        const std::size_t row = r * tgt_in.cols + c;
        const auto first = z.begin() + static_cast<std::ptrdiff_t>(row * V);
        const auto best = std::max_element(first, first + static_cast<std::ptrdiff_t>(V)) - first;
        correct += best == tgt_out[row];
        ++total;
      }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ---- optimizer ------------------------------------------------------------

AdamState make_adam_state(const model::ParameterStore<float>& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.size(), 0.0f);
    s.v.emplace_back(t.size(), 0.0f);
  }
  return s;
}

double clip_grad_norm(model::ParameterStore<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params.entries())
    if (t.has_grad())
      for (float g : t.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float factor = static_cast<float>(max_norm / norm);
    for (const auto& [name, t] : params.entries()) {
      Tensor<float> handle = t;
      if (handle.has_grad())
        for (float& g : handle.grad()) g *= factor;
    }
  }
  return norm;
}

void adam_update(model::ParameterStore<float>& params, AdamState& state, double lr,
                 const TrainConfig& cfg) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw ad::DimensionError("adam state / parameter count mismatch");
  ++state.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<float> p = entries[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ad::DimensionError("adam moment shape mismatch for " + entries[i].first);
    auto w = p.data();
    const bool has = p.has_grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has ? static_cast<double>(p.grad()[k]) : 0.0;
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      w[k] -= static_cast<float>(lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps));
    }
  }
}

// ---- metrics --------------------------------------------------------------

std::string metrics_to_json(const MetricsRecord& r) {
  config::Json j;
  j["step"] = r.step;
  j["lambda_com"] = r.lambda_com;
  j["lambda_div"] = r.lambda_div;
  j["loss_com"] = r.loss_com;
  j["loss_div"] = r.loss_div;
  j["loss_total"] = r.loss_total;
  j["dev_bleu_AB"] = r.dev_bleu_ab ? config::Json(*r.dev_bleu_ab) : config::Json(nullptr);
  j["dev_bleu_BA"] = r.dev_bleu_ba ? config::Json(*r.dev_bleu_ba) : config::Json(nullptr);
  j["wallclock_s"] = r.wallclock_s;
  return j.dump();
}

// ---- Trainer --------------------------------------------------------------

Trainer::Trainer(model::ModelConfig model_cfg, TrainConfig cfg, Corpus corpus_a, Corpus corpus_b,
                 std::optional<DevSet> dev, std::optional<model::ParameterStore<float>> init)
    : model_cfg_(std::move(model_cfg)),
      cfg_(std::move(cfg)),
      corpus_a_(std::move(corpus_a)),
      corpus_b_(std::move(corpus_b)),
      dev_(std::move(dev)),
      model_(model_cfg_, init ? std::move(*init)
                              : model::build_model<float>(model_cfg_, derive_seed(cfg_.seed, 0))) {
  cfg_.validate();
  if (cfg_.bt_max_len > model_cfg_.max_len)
    throw ConfigError("train.bt_max_len exceeds model.max_len");
  if (corpus_a_.dialect != Dialect::A || corpus_b_.dialect != Dialect::B)
    throw std::invalid_argument("Trainer expects an A corpus and a B corpus");
  if (corpus_a_.sentences.empty() || corpus_b_.sentences.empty())
    throw std::invalid_argument("Trainer: empty training corpus");
  if (dev_ && dev_->a.size() != dev_->b.size())
    throw std::invalid_argument("Trainer: dev set is not parallel");
  adam_ = make_adam_state(model_.params());
}

std::vector<Sentence> Trainer::sample(const Corpus& corpus, std::uint64_t stream) const {
  Rng rng(derive_seed(cfg_.seed, step_, stream));
  std::vector<Sentence> out;
  out.reserve(cfg_.batch_size);
  for (std::size_t i = 0; i < cfg_.batch_size; ++i)
    out.push_back(corpus.sentences[rng.below(corpus.sentences.size())]);
  return out;
}

MetricsRecord Trainer::step() {
  const auto batch_a = sample(corpus_a_, kStreamA);
  const auto batch_b = sample(corpus_b_, kStreamB);
  Rng dropout_rng(derive_seed(cfg_.seed, step_, kStreamDropout));
  const auto lambda = lambda_schedule(step_, cfg_);

  auto& params = model_.params();
  params.zero_grad();
  ad::Tape<float> tape;
  ad::TapeScope<float> scope(&tape);


  noise::NoiseConfig noise_cfg = cfg_.noise;
  const std::uint64_t noise_stream = derive_seed(cfg_.seed, step_, kStreamNoise);
  Tensor<float> l_com;
  if (lambda.com > 0.0) {
    l_com = loss_commonality(model_, batch_a, batch_b, noise_cfg, noise_stream, &dropout_rng);
  } else {
    ad::NoGradScope<float> no_grad;
    l_com = loss_commonality(model_, batch_a, batch_b, noise_cfg, noise_stream);
  }
  // with lambda_div = 0 the back-translation pass is skipped and loss_div is 0
  Tensor<float> l_div({}, {0.0f});
  Tensor<float> total;
  if (lambda.div > 0.0) {
    const auto bt_a = backtranslate_batch(model_, batch_a, cfg_.bt_max_len);
    const auto bt_b = backtranslate_batch(model_, batch_b, cfg_.bt_max_len);
    l_div = loss_diversity(model_, bt_a, bt_b, &dropout_rng);
    total = ad::scale(l_div, static_cast<float>(lambda.div));
    if (lambda.com > 0.0) total = ad::add(ad::scale(l_com, static_cast<float>(lambda.com)), total);
  } else {
    if (!(lambda.com > 0.0)) throw ConfigError("train: both loss weights are zero");
    total = ad::scale(l_com, static_cast<float>(lambda.com));
  }

  MetricsRecord rec;
  rec.step = step_;
  rec.lambda_com = lambda.com;
  rec.lambda_div = lambda.div;
  rec.loss_com = l_com.item();
  rec.loss_div = l_div.item();
  rec.loss_total = total.item();
  if (!std::isfinite(rec.loss_total) || !std::isfinite(rec.loss_com))
    throw NonFiniteLossError("non-finite loss: " + metrics_to_json(rec));

  tape.backward(total);
  clip_grad_norm(params, cfg_.grad_clip_norm);
  adam_update(params, adam_, learning_rate(step_, cfg_), cfg_);
  params.zero_grad();
  ++step_;
  return rec;
}

std::pair<double, double> Trainer::evaluate_dev() const {
  if (!dev_ || dev_->a.empty()) return {0.0, 0.0};
  const std::size_t n = cfg_.dev_eval_sentences == 0
                            ? dev_->a.size()
                            : std::min(cfg_.dev_eval_sentences, dev_->a.size());
  std::span<const Sentence> a(dev_->a.data(), n), b(dev_->b.data(), n);
  decode::BeamConfig greedy{1, model_cfg_.max_len, 0.0};
  const auto ab = decode::translate_corpus(model_, a, Dialect::B, greedy);
  const auto ba = decode::translate_corpus(model_, b, Dialect::A, greedy);
  return {decode::bleu(ab, b).score, decode::bleu(ba, a).score};
}

void Trainer::save_state(const std::filesystem::path& path) const {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  const auto& entries = model_.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    tensors.emplace_back("adam.m." + entries[i].first,
                         Tensor<float>(entries[i].second.shape(), adam_.m[i]));
    tensors.emplace_back("adam.v." + entries[i].first,
                         Tensor<float>(entries[i].second.shape(), adam_.v[i]));
  }
  config::Json extra{{"kind", "train_state"},
                     {"step", step_},
                     {"adam_t", adam_.t},
                     {"best_dev_bleu", progress_.best_dev_bleu},
                     {"best_step", progress_.best_step},
                     {"stale", progress_.stale},
                     {"train", config::to_json(cfg_)}};
  model::save_tensors(path, extra.dump(), tensors);
}

void Trainer::load_state(const std::filesystem::path& path) {
  auto file = model::load_tensors(path);
  const auto extra = config::Json::parse(file.extra_json);
  if (extra.value("kind", "") != "train_state")
    throw model::CheckpointError(path.string() + ": not a training state file");
  const auto& entries = model_.params().entries();
  if (file.tensors.size() != 2 * entries.size())
    throw model::CheckpointError(path.string() + ": optimizer state does not match the model");
  AdamState s;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& m = file.tensors[2 * i];
    const auto& v = file.tensors[2 * i + 1];
    if (m.first != "adam.m." + entries[i].first || v.first != "adam.v." + entries[i].first ||
        m.second.shape() != entries[i].second.shape())
      throw model::CheckpointError(path.string() + ": optimizer state mismatch at " +
                                   entries[i].first);
    s.m.emplace_back(m.second.data().begin(), m.second.data().end());
    s.v.emplace_back(v.second.data().begin(), v.second.data().end());
  }
  s.t = extra.at("adam_t").get<std::size_t>();
  adam_ = std::move(s);
  step_ = extra.at("step").get<std::size_t>();
  progress_.best_dev_bleu = extra.value("best_dev_bleu", -1.0);
  progress_.best_step = extra.value("best_step", std::size_t{0});
  progress_.stale = extra.value("stale", std::size_t{0});
}

// ---- loop -----------------------------------------------------------------

RunResult run_training(Trainer& trainer, const RunOptions& options) {
  const auto& cfg = trainer.config();
  const std::size_t stop = options.stop_at ? std::min(options.stop_at, cfg.total_steps)
                                           : cfg.total_steps;
  if (options.resume_state) trainer.load_state(*options.resume_state);

  std::ofstream metrics;
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto path = options.out_dir / "metrics.jsonl";
    if (options.resume_state && std::filesystem::exists(path)) {
      std::vector<std::string> kept;
      std::ifstream in(path);
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        if (config::Json::parse(line).at("step").get<std::size_t>() < trainer.current_step())
          kept.push_back(line);
      }
      in.close();
      std::ofstream out(path, std::ios::trunc);
      for (const auto& line : kept) out << line << '\n';
    }
    metrics.open(path, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open metrics.jsonl in " + options.out_dir.string());
  }
  auto save_last = [&] {
    model::save_checkpoint(trainer.model().params(), trainer.model().config(),
                           options.out_dir / "last.ckpt");
    trainer.save_state(options.out_dir / "last.state");
  };

  RunResult result;
  auto& progress = trainer.progress();
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.current_step() < stop) {
    auto rec = trainer.step();
    const std::size_t done = trainer.current_step();
    const bool eval = done % cfg.eval_every == 0 || done == cfg.total_steps;
    if (eval) {
      auto [ab, ba] = trainer.evaluate_dev();
      rec.dev_bleu_ab = ab;
      rec.dev_bleu_ba = ba;
      const double mean = 0.5 * (ab + ba);
      if (mean > progress.best_dev_bleu) {
        progress.best_dev_bleu = mean;
        progress.best_step = done;
        progress.stale = 0;
        if (write)
          model::save_checkpoint(trainer.model().params(), trainer.model().config(),
                                 options.out_dir / "best.ckpt");
      } else {
        ++progress.stale;
      }
    }
    rec.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (write) {
      metrics << metrics_to_json(rec) << '\n';
      metrics.flush();
      if (eval || done == stop) save_last();
    }
    if (options.on_record) options.on_record(rec);
    result.records.push_back(rec);
    if (eval && cfg.patience > 0 && progress.stale >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  result.best_dev_bleu = progress.best_dev_bleu;
  result.best_step = progress.best_step;
  return result;
}

}  // namespace dialect::train
