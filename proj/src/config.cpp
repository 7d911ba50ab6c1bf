#include "dialect/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace dialect::config {

namespace {

// Reads known keys into fields and rejects anything else.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + section_ + "." + key + "'");
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + section_ + "." + key + "': " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

void DataConfig::validate() const {
  corpus::parse_mode(tokenize);
  if (min_freq == 0) throw ConfigError("data.min_freq must be at least 1");
  if (min_len == 0 || min_len > max_len) throw ConfigError("data.min_len/max_len out of order");
}

void RunConfig::validate() const {
  auto m = model;
  if (m.vocab_size == 0) m.vocab_size = kNumSpecials + 1;  // filled in from data later
  m.validate();
  train.validate();
  decode.validate();
  data.validate();
  synth.validate();
}

Json to_json(const model::ModelConfig& c) {
  return Json{{"n_layers", c.n_layers},         {"model_dim", c.model_dim},
              {"pivot_dim", c.pivot_dim},       {"n_heads", c.n_heads},
              {"ffn_dim", c.ffn_dim},           {"n_shared_enc", c.n_shared_enc},
              {"n_shared_dec", c.n_shared_dec}, {"layer_coordination", c.layer_coordination},
              {"max_len", c.max_len},           {"vocab_size", c.vocab_size},
              {"dropout", c.dropout},           {"dialect_token", c.dialect_token},
              {"tie_pivot_output", c.tie_pivot_output}};
}

Json to_json(const noise::NoiseConfig& c) {
  return Json{{"p_drop", c.p_drop}, {"p_blank", c.p_blank}, {"n_swaps", c.n_swaps},
              {"rng_seed", c.rng_seed}};
}

Json to_json(const train::TrainConfig& c) {
  return Json{{"lambda_com_start", c.lambda_com_start},
              {"lambda_com_end", c.lambda_com_end},
              {"lambda_decay_steps", c.lambda_decay_steps},
              {"lambda_div", c.lambda_div},
              {"total_steps", c.total_steps},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"warmup_steps", c.warmup_steps},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"grad_clip_norm", c.grad_clip_norm},
              {"eval_every", c.eval_every},
              {"dev_eval_sentences", c.dev_eval_sentences},
              {"patience", c.patience},
              {"bt_max_len", c.bt_max_len},
              {"seed", c.seed}};
}

Json to_json(const decode::BeamConfig& c) {
  return Json{{"beam_size", c.beam_size}, {"max_len", c.max_len},
              {"length_penalty_alpha", c.length_penalty_alpha}};
}

Json to_json(const DataConfig& c) {
  return Json{{"tokenize", c.tokenize}, {"min_freq", c.min_freq}, {"min_len", c.min_len},
              {"max_len", c.max_len}};
}

Json to_json(const synth::SynthConfig& c) {
  return Json{{"base_vocab_size", c.base_vocab_size},
              {"zipf_exponent", c.zipf_exponent},
              {"successor_count", c.successor_count},
              {"n_train_per_dialect", c.n_train_per_dialect},
              {"n_dev", c.n_dev},
              {"n_test", c.n_test},
              {"substitution_fraction", c.substitution_fraction},
              {"substitution_top", c.substitution_top},
              {"partner_rank_max", c.partner_rank_max},
              {"unique_token_count", c.unique_token_count},
              {"len_min", c.len_min},
              {"len_max", c.len_max},
              {"seed", c.seed},
              {"check_targets", c.check_targets},
              {"full_spearman_min", c.full_spearman_min},
              {"top_spearman_max", c.top_spearman_max}};
}

Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},   {"train", to_json(c.train)},
              {"noise", to_json(c.train.noise)}, {"decode", to_json(c.decode)},
              {"data", to_json(c.data)},     {"synth", to_json(c.synth)}};
}

model::ModelConfig model_from_json(const Json& j) {
  model::ModelConfig c;
  Reader r(j, "model");
  r.get("n_layers", c.n_layers);
  r.get("model_dim", c.model_dim);
  r.get("pivot_dim", c.pivot_dim);
  r.get("n_heads", c.n_heads);
  r.get("ffn_dim", c.ffn_dim);
  r.get("n_shared_enc", c.n_shared_enc);
  r.get("n_shared_dec", c.n_shared_dec);
  r.get("layer_coordination", c.layer_coordination);
  r.get("max_len", c.max_len);
  r.get("vocab_size", c.vocab_size);
  r.get("dropout", c.dropout);
  r.get("dialect_token", c.dialect_token);
  r.get("tie_pivot_output", c.tie_pivot_output);
  r.finish();
  return c;
}

noise::NoiseConfig noise_from_json(const Json& j) {
  noise::NoiseConfig c;
  Reader r(j, "noise");
  r.get("p_drop", c.p_drop);
  r.get("p_blank", c.p_blank);
  r.get("n_swaps", c.n_swaps);
  r.get("rng_seed", c.rng_seed);
  r.finish();
  return c;
}

train::TrainConfig train_from_json(const Json& j) {
  train::TrainConfig c;
  Reader r(j, "train");
  r.get("lambda_com_start", c.lambda_com_start);
  r.get("lambda_com_end", c.lambda_com_end);
  r.get("lambda_decay_steps", c.lambda_decay_steps);
  r.get("lambda_div", c.lambda_div);
  r.get("total_steps", c.total_steps);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("warmup_steps", c.warmup_steps);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("grad_clip_norm", c.grad_clip_norm);
  r.get("eval_every", c.eval_every);
  r.get("dev_eval_sentences", c.dev_eval_sentences);
  r.get("patience", c.patience);
  r.get("bt_max_len", c.bt_max_len);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

decode::BeamConfig beam_from_json(const Json& j) {
  decode::BeamConfig c;
  Reader r(j, "decode");
  r.get("beam_size", c.beam_size);
  r.get("max_len", c.max_len);
  r.get("length_penalty_alpha", c.length_penalty_alpha);
  r.finish();
  return c;
}

DataConfig data_from_json(const Json& j) {
  DataConfig c;
  Reader r(j, "data");
  r.get("tokenize", c.tokenize);
  r.get("min_freq", c.min_freq);
  r.get("min_len", c.min_len);
  r.get("max_len", c.max_len);
  r.finish();
  return c;
}

synth::SynthConfig synth_from_json(const Json& j) {
  synth::SynthConfig c;
  Reader r(j, "synth");
  r.get("base_vocab_size", c.base_vocab_size);
  r.get("zipf_exponent", c.zipf_exponent);
  r.get("successor_count", c.successor_count);
  r.get("n_train_per_dialect", c.n_train_per_dialect);
  r.get("n_dev", c.n_dev);
  r.get("n_test", c.n_test);
  r.get("substitution_fraction", c.substitution_fraction);
  r.get("substitution_top", c.substitution_top);
  r.get("partner_rank_max", c.partner_rank_max);
  r.get("unique_token_count", c.unique_token_count);
  r.get("len_min", c.len_min);
  r.get("len_max", c.len_max);
  r.get("seed", c.seed);
  r.get("check_targets", c.check_targets);
  r.get("full_spearman_min", c.full_spearman_min);
  r.get("top_spearman_max", c.top_spearman_max);
  r.finish();
  return c;
}

RunConfig run_from_json(const Json& j) {
  RunConfig c;
  {
    Reader r(j, "<root>");
    if (auto* s = r.child("model")) c.model = model_from_json(*s);
    if (auto* s = r.child("train")) c.train = train_from_json(*s);
    if (auto* s = r.child("noise")) c.train.noise = noise_from_json(*s);
    if (auto* s = r.child("decode")) c.decode = beam_from_json(*s);
    if (auto* s = r.child("data")) c.data = data_from_json(*s);
    if (auto* s = r.child("synth")) c.synth = synth_from_json(*s);
    r.finish();
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return run_from_json(j);
}

}  // namespace dialect::config
