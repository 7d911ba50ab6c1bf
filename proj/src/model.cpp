#include "dialect/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dialect::model {

using ad::Shape;

namespace {

constexpr double kMaskValue = -1e9;

std::string owner_name(bool shared, Dialect d) { return shared ? "shared" : dialect_name(d); }

bool encoder_shared(const ModelConfig& cfg, std::size_t layer) {
  return layer + cfg.n_shared_enc >= cfg.n_layers;
}

bool decoder_shared(const ModelConfig& cfg, std::size_t layer) {
  return layer < cfg.n_shared_dec;
}

void add_attention_layout(std::vector<std::pair<std::string, Shape>>& out,
                          const std::string& prefix, std::size_t d) {
  for (const char* m : {"q", "k", "v", "o"}) {
    out.emplace_back(prefix + ".w" + m, Shape{d, d});
    out.emplace_back(prefix + ".b" + m, Shape{d});
  }
}

void add_norm_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix,
                     std::size_t d) {
  out.emplace_back(prefix + ".gamma", Shape{d});
  out.emplace_back(prefix + ".beta", Shape{d});
}

void add_ffn_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix,
                    std::size_t d, std::size_t f) {
  out.emplace_back(prefix + ".w1", Shape{d, f});
  out.emplace_back(prefix + ".b1", Shape{f});
  out.emplace_back(prefix + ".w2", Shape{f, d});
  out.emplace_back(prefix + ".b2", Shape{d});
}

std::string encoder_prefix(const ModelConfig& cfg, std::size_t layer, Dialect d) {
  return "enc." + std::to_string(layer) + "." + owner_name(encoder_shared(cfg, layer), d);
}

std::string decoder_prefix(const ModelConfig& cfg, std::size_t layer, Dialect d) {
  return "dec." + std::to_string(layer) + "." + owner_name(decoder_shared(cfg, layer), d);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Copies H consecutive row blocks of `t` (leading dim rows*heads) per new row.
template <typename T>
Tensor<T> gather_row_blocks(const Tensor<T>& t, std::span<const std::size_t> source_rows,
                            std::size_t heads) {
  Shape shape = t.shape();
  const std::size_t block = t.size() / shape[0] * heads;
  shape[0] = source_rows.size() * heads;
  std::vector<T> out(source_rows.size() * block);
  for (std::size_t i = 0; i < source_rows.size(); ++i)
    std::copy_n(t.data().data() + source_rows[i] * block, block, out.data() + i * block);
  return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ad::add_bias(ad::matmul(x, w), b);
}

}  // namespace

// ---- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (model_dim == 0 || ffn_dim == 0 || n_heads == 0) fail("dimensions must be positive");
  if (pivot_dim > model_dim) fail("pivot_dim must not exceed model_dim");
  if (model_dim % n_heads != 0) fail("model_dim must be divisible by n_heads");
  if (n_shared_enc > n_layers || n_shared_dec > n_layers)
    fail("shared layer counts must not exceed n_layers");
  if (vocab_size <= kNumSpecials) fail("vocab_size must exceed the special tokens");
  if (max_len == 0) fail("max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (tie_pivot_output && pivot_dim == 0) fail("tie_pivot_output requires pivot_dim > 0");
}

ParamCount param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim, f = cfg.ffn_dim, V = cfg.vocab_size, N = cfg.n_layers;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norm = 2 * d;
  const std::size_t enc_layer = attention + ffn + 2 * norm;
  const std::size_t dec_layer = 2 * attention + ffn + 3 * norm;
  ParamCount c;
  c.embedding = V * (2 * d - cfg.pivot_dim);
  c.dialect_token = cfg.dialect_token ? 2 * d : 0;
  c.encoder = enc_layer * (cfg.n_shared_enc + 2 * (N - cfg.n_shared_enc));
  c.decoder = dec_layer * (cfg.n_shared_dec + 2 * (N - cfg.n_shared_dec));
  c.output = (cfg.tie_pivot_output ? (d - cfg.pivot_dim) * V : d * V) + V;
  return c;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim, V = cfg.vocab_size, ds = cfg.pivot_dim;
  std::vector<std::pair<std::string, Shape>> out;
  if (ds > 0) out.emplace_back("emb.pivot", Shape{V, ds});
  if (ds < d) {
    out.emplace_back("emb.private.A", Shape{V, d - ds});
    out.emplace_back("emb.private.B", Shape{V, d - ds});
  }
  if (cfg.dialect_token) out.emplace_back("emb.dialect", Shape{2, d});
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    for (Dialect side : {Dialect::A, Dialect::B}) {
      if (side == Dialect::B && encoder_shared(cfg, i)) break;
      const auto p = encoder_prefix(cfg, i, side);
      add_attention_layout(out, p + ".self", d);
      add_norm_layout(out, p + ".ln1", d);
      add_ffn_layout(out, p + ".ffn", d, cfg.ffn_dim);
      add_norm_layout(out, p + ".ln2", d);
    }
  }
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    for (Dialect side : {Dialect::A, Dialect::B}) {
      if (side == Dialect::B && decoder_shared(cfg, i)) break;
      const auto p = decoder_prefix(cfg, i, side);
      add_attention_layout(out, p + ".self", d);
      add_norm_layout(out, p + ".ln1", d);
      add_attention_layout(out, p + ".cross", d);
      add_norm_layout(out, p + ".ln2", d);
      add_ffn_layout(out, p + ".ffn", d, cfg.ffn_dim);
      add_norm_layout(out, p + ".ln3", d);
    }
  }
  if (cfg.tie_pivot_output) {
    if (ds < d) out.emplace_back("out.private", Shape{d - ds, V});
  } else {
    out.emplace_back("out.w", Shape{d, V});
  }
  out.emplace_back("out.b", Shape{V});
  return out;
}

// ---- ParameterStore -------------------------------------------------------

template <typename T>
void ParameterStore<T>::add(const std::string& name, Tensor<T> tensor) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(tensor));
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : entries_) out.push_back(name);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

template <typename To, typename From>
ParameterStore<To> cast_store(const ParameterStore<From>& store) {
  ParameterStore<To> out;
  for (const auto& [name, t] : store.entries()) {
    std::vector<To> values(t.data().begin(), t.data().end());
    out.add(name, Tensor<To>(t.shape(), std::move(values), true));
  }
  return out;
}

template <typename T>
ParameterStore<T> clone_store(const ParameterStore<T>& store) {
  return cast_store<T, T>(store);
}

template <typename T>
ParameterStore<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterStore<T> store;
  Rng rng(seed);
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    std::vector<T> values(ad::numel(shape), T(0));
    if (ends_with(name, ".gamma")) {
      std::fill(values.begin(), values.end(), T(1));
    } else if (shape.size() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    store.add(name, Tensor<T>(shape, std::move(values), true));
  }
  return store;
}

// ---- batching -------------------------------------------------------------

Batch make_source_batch(std::span<const Sentence> sentences) {
  Batch b;
  b.rows = sentences.size();
  for (const auto& s : sentences) b.cols = std::max(b.cols, s.size());
  if (b.rows == 0 || b.cols == 0) throw std::invalid_argument("empty source batch");
  b.ids.assign(b.rows * b.cols, kPad);
  for (std::size_t r = 0; r < b.rows; ++r) {
    std::copy(sentences[r].ids.begin(), sentences[r].ids.end(), b.ids.begin() + r * b.cols);
    b.lengths.push_back(sentences[r].size());
  }
  return b;
}

std::pair<Batch, std::vector<TokenId>> make_target_batch(std::span<const Sentence> sentences) {
  Batch b;
  b.rows = sentences.size();
  if (b.rows == 0) throw std::invalid_argument("empty target batch");
  for (const auto& s : sentences) b.cols = std::max(b.cols, s.size() + 1);
  b.ids.assign(b.rows * b.cols, kPad);
  std::vector<TokenId> targets(b.rows * b.cols, kPad);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& ids = sentences[r].ids;
    b.ids[r * b.cols] = kBos;
    std::copy(ids.begin(), ids.end(), b.ids.begin() + r * b.cols + 1);
    std::copy(ids.begin(), ids.end(), targets.begin() + r * b.cols);
    targets[r * b.cols + ids.size()] = kEos;
    b.lengths.push_back(ids.size() + 1);
  }
  return {std::move(b), std::move(targets)};
}

// ---- Transformer ----------------------------------------------------------

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg, ParameterStore<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  for (const auto& [name, shape] : parameter_layout(cfg_)) {
    if (!params_.contains(name)) throw std::invalid_argument("missing parameter " + name);
    if (params_.get(name).shape() != shape)
      throw ad::DimensionError("parameter " + name + " has shape " +
                               ad::shape_str(params_.get(name).shape()) + ", expected " +
                               ad::shape_str(shape));
  }
  auto attention = [&](const std::string& p) {
    return Attention{params_.get(p + ".wq"), params_.get(p + ".bq"), params_.get(p + ".wk"),
                     params_.get(p + ".bk"), params_.get(p + ".wv"), params_.get(p + ".bv"),
                     params_.get(p + ".wo"), params_.get(p + ".bo")};
  };
  auto norm = [&](const std::string& p) {
    return Norm{params_.get(p + ".gamma"), params_.get(p + ".beta")};
  };
  auto ffn = [&](const std::string& p) {
    return FeedForward{params_.get(p + ".w1"), params_.get(p + ".b1"), params_.get(p + ".w2"),
                       params_.get(p + ".b2")};
  };
  for (Dialect side : {Dialect::A, Dialect::B}) {
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      const auto e = encoder_prefix(cfg_, i, side);
      enc_[index_of(side)].push_back(
          EncoderLayer{attention(e + ".self"), norm(e + ".ln1"), ffn(e + ".ffn"), norm(e + ".ln2")});
      const auto p = decoder_prefix(cfg_, i, side);
      dec_[index_of(side)].push_back(DecoderLayer{attention(p + ".self"), norm(p + ".ln1"),
                                                  attention(p + ".cross"), norm(p + ".ln2"),
                                                  ffn(p + ".ffn"), norm(p + ".ln3")});
    }
  }
  const std::size_t d = cfg_.model_dim, n_pos = cfg_.max_len + 2;
  positions_.resize(n_pos * d);
  for (std::size_t pos = 0; pos < n_pos; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      positions_[pos * d + i] = static_cast<T>(std::sin(angle));
      if (i + 1 < d) positions_[pos * d + i + 1] = static_cast<T>(std::cos(angle));
    }
}

template <typename T>
std::size_t Transformer<T>::memory_layer(std::size_t decoder_layer) const {
  return cfg_.layer_coordination ? decoder_layer : cfg_.n_layers - 1;
}

template <typename T>
Tensor<T> Transformer<T>::maybe_dropout(const Tensor<T>& x, Rng* rng) const {
  if (rng == nullptr || cfg_.dropout <= 0.0) return x;
  return ad::dropout(x, static_cast<T>(cfg_.dropout), *rng);
}

template <typename T>
Tensor<T> Transformer<T>::embed(const Batch& batch, Dialect dialect, bool decoder_side,
                                std::size_t position_offset, Rng* dropout_rng) const {
  const std::size_t d = cfg_.model_dim, ds = cfg_.pivot_dim;
  const std::size_t n = batch.rows * batch.cols;
  for (auto id : batch.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg_.vocab_size));
  if (position_offset + batch.cols > cfg_.max_len + 2)
    throw std::length_error("sequence longer than the position table (max_len " +
                            std::to_string(cfg_.max_len) + ")");

  Tensor<T> tokens;
  if (ds == d) {
    tokens = ad::embedding(params_.get("emb.pivot"), std::span<const TokenId>(batch.ids));
  } else {
    auto priv = ad::embedding(params_.get("emb.private." + dialect_name(dialect)),
                              std::span<const TokenId>(batch.ids));
    tokens = ds == 0 ? priv
                     : ad::concat(ad::embedding(params_.get("emb.pivot"),
                                                std::span<const TokenId>(batch.ids)),
                                  priv, -1);
  }
  if (decoder_side && cfg_.dialect_token && position_offset == 0) {
    std::vector<TokenId> which(batch.rows, static_cast<TokenId>(index_of(dialect)));
    auto rows = ad::reshape(ad::embedding(params_.get("emb.dialect"),
                                          std::span<const TokenId>(which)),
                            Shape{batch.rows, 1, d});
    if (batch.cols > 1) {
      auto rest = ad::narrow(ad::reshape(tokens, Shape{batch.rows, batch.cols, d}), 1, 1,
                             batch.cols - 1);
      rows = ad::concat(rows, rest, 1);
    }
    tokens = ad::reshape(rows, Shape{n, d});
  }
  tokens = ad::scale(tokens, static_cast<T>(std::sqrt(static_cast<double>(d))));

  std::vector<T> pe(n * d);
  for (std::size_t r = 0; r < batch.rows; ++r)
    for (std::size_t c = 0; c < batch.cols; ++c)
      std::copy_n(positions_.data() + (position_offset + c) * d, d, pe.data() + (r * batch.cols + c) * d);
  auto out = ad::add(tokens, Tensor<T>(Shape{n, d}, std::move(pe)));
  return maybe_dropout(out, dropout_rng);
}

template <typename T>
Tensor<T> Transformer<T>::embed(const Sentence& sentence, Dialect dialect) const {
  const Sentence s[1] = {sentence};
  return embed(make_source_batch(s), dialect, false);
}

template <typename T>
Tensor<T> Transformer<T>::attention_mask(std::span<const std::size_t> key_lengths,
                                         std::size_t q_len, std::size_t k_len,
                                         bool causal) const {
  const std::size_t rows = key_lengths.size(), H = cfg_.n_heads;
  std::vector<T> mask(rows * H * q_len * k_len, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < q_len; ++q) {
        T* row = mask.data() + ((r * H + h) * q_len + q) * k_len;
        for (std::size_t k = 0; k < k_len; ++k)
          if (k >= key_lengths[r] || (causal && k > q)) row[k] = static_cast<T>(kMaskValue);
      }
  return Tensor<T>(Shape{rows * H, q_len, k_len}, std::move(mask));
}

template <typename T>
Tensor<T> Transformer<T>::split_heads(const Tensor<T>& x, std::size_t rows,
                                      std::size_t len) const {
  const std::size_t H = cfg_.n_heads, dh = cfg_.model_dim / H;
  auto t = ad::permute(ad::reshape(x, Shape{rows, len, H, dh}), {0, 2, 1, 3});
  return ad::reshape(t, Shape{rows * H, len, dh});
}

template <typename T>
Tensor<T> Transformer<T>::merge_heads(const Tensor<T>& x, std::size_t rows,
                                      std::size_t len) const {
  const std::size_t H = cfg_.n_heads, dh = cfg_.model_dim / H;
  auto t = ad::permute(ad::reshape(x, Shape{rows, H, len, dh}), {0, 2, 1, 3});
  return ad::reshape(t, Shape{rows * len, cfg_.model_dim});
}

template <typename T>
Tensor<T> Transformer<T>::attend(const Attention& p, const Tensor<T>& q_heads,
                                 const Tensor<T>& k_heads, const Tensor<T>& v_heads,
                                 const Tensor<T>* mask, std::size_t rows,
                                 std::size_t q_len) const {
  const double dh = static_cast<double>(cfg_.model_dim / cfg_.n_heads);
  auto scores = ad::scale(ad::batched_matmul(q_heads, k_heads, true),
                          static_cast<T>(1.0 / std::sqrt(dh)));
  if (mask != nullptr) scores = ad::add(scores, *mask);
  auto context = ad::batched_matmul(ad::softmax(scores, -1), v_heads);
  return linear(merge_heads(context, rows, q_len), p.wo, p.bo);
}

template <typename T>
Tensor<T> Transformer<T>::encoder_layer_forward(const EncoderLayer& layer, const Tensor<T>& x,
                                                std::size_t rows, std::size_t len,
                                                const Tensor<T>* mask, Rng* rng) const {
  const auto& a = layer.self;
  auto q = split_heads(linear(x, a.wq, a.bq), rows, len);
  auto k = split_heads(linear(x, a.wk, a.bk), rows, len);
  auto v = split_heads(linear(x, a.wv, a.bv), rows, len);
  auto attended = attend(a, q, k, v, mask, rows, len);
  auto h = ad::layer_norm(ad::add(x, maybe_dropout(attended, rng)), layer.ln1.gamma,
                          layer.ln1.beta);
  auto f = linear(ad::relu(linear(h, layer.ffn.w1, layer.ffn.b1)), layer.ffn.w2, layer.ffn.b2);
  return ad::layer_norm(ad::add(h, maybe_dropout(f, rng)), layer.ln2.gamma, layer.ln2.beta);
}

template <typename T>
Tensor<T> Transformer<T>::decoder_layer_forward(const DecoderLayer& layer, const Tensor<T>& x,
                                                std::size_t rows, std::size_t q_len,
                                                const Tensor<T>& self_k, const Tensor<T>& self_v,
                                                const Tensor<T>* self_mask,
                                                const Tensor<T>& cross_k,
                                                const Tensor<T>& cross_v,
                                                const Tensor<T>* cross_mask, Rng* rng,
                                                Tensor<T>* cross_out) const {
  auto q = split_heads(linear(x, layer.self.wq, layer.self.bq), rows, q_len);
  auto attended = attend(layer.self, q, self_k, self_v, self_mask, rows, q_len);
  auto h1 = ad::layer_norm(ad::add(x, maybe_dropout(attended, rng)), layer.ln1.gamma,
                           layer.ln1.beta);
  auto cq = split_heads(linear(h1, layer.cross.wq, layer.cross.bq), rows, q_len);
  auto crossed = attend(layer.cross, cq, cross_k, cross_v, cross_mask, rows, q_len);
  if (cross_out != nullptr) *cross_out = crossed;
  auto h2 = ad::layer_norm(ad::add(h1, maybe_dropout(crossed, rng)), layer.ln2.gamma,
                           layer.ln2.beta);
  auto f = linear(ad::relu(linear(h2, layer.ffn.w1, layer.ffn.b1)), layer.ffn.w2, layer.ffn.b2);
  return ad::layer_norm(ad::add(h2, maybe_dropout(f, rng)), layer.ln3.gamma, layer.ln3.beta);
}

template <typename T>
LayerActivations<T> Transformer<T>::encode(const Tensor<T>& s0, const Batch& src,
                                           Dialect src_dialect, Rng* rng) const {
  LayerActivations<T> acts;
  acts.batch = src.rows;
  acts.src_len = src.cols;
  const auto mask = attention_mask(src.lengths, src.cols, src.cols, false);
  Tensor<T> x = s0;
  for (const auto& layer : enc_[index_of(src_dialect)]) {
    x = encoder_layer_forward(layer, x, src.rows, src.cols, &mask, rng);
    acts.encoder_layers.push_back(x);
  }
  return acts;
}

template <typename T>
void Transformer<T>::resume_encode(LayerActivations<T>& acts, std::size_t from_layer,
                                   const Tensor<T>& replacement, const Batch& src,
                                   Dialect src_dialect, Rng* rng) const {
  if (from_layer == 0 || from_layer > cfg_.n_layers)
    throw std::out_of_range("resume_encode: layer must be in 1..N");
  const auto mask = attention_mask(src.lengths, src.cols, src.cols, false);
  acts.encoder_layers.resize(from_layer);
  acts.encoder_layers[from_layer - 1] = replacement;
  Tensor<T> x = replacement;
  for (std::size_t i = from_layer; i < cfg_.n_layers; ++i) {
    x = encoder_layer_forward(enc_[index_of(src_dialect)][i], x, src.rows, src.cols, &mask, rng);
    acts.encoder_layers.push_back(x);
  }
}

template <typename T>
Tensor<T> Transformer<T>::output_weight() const {
  if (!cfg_.tie_pivot_output) return params_.get("out.w");
  auto pivot = ad::transpose(params_.get("emb.pivot"));
  if (cfg_.pivot_dim == cfg_.model_dim) return pivot;
  return ad::concat(pivot, params_.get("out.private"), 0);
}

template <typename T>
Tensor<T> Transformer<T>::decode(const Tensor<T>& t0, const Batch& tgt_in,
                                 LayerActivations<T>& acts, const Batch& src,
                                 Dialect tgt_dialect, Rng* rng, DecodeTrace<T>* trace) const {
  if (acts.encoder_layers.size() != cfg_.n_layers)
    throw std::invalid_argument("decode: incomplete encoder activations");
  const std::size_t rows = tgt_in.rows, J = tgt_in.cols, I = src.cols;
  acts.tgt_len = J;
  acts.decoder_layers.clear();
  if (trace) trace->cross_attention.clear();
  std::vector<std::size_t> full(rows, J);
  const auto self_mask = attention_mask(full, J, J, true);
  const auto cross_mask = attention_mask(src.lengths, J, I, false);
  Tensor<T> x = t0;
  for (std::size_t n = 0; n < cfg_.n_layers; ++n) {
    const auto& layer = dec_[index_of(tgt_dialect)][n];
    const auto& memory = acts.encoder_layers[memory_layer(n)];
    auto ck = split_heads(linear(memory, layer.cross.wk, layer.cross.bk), rows, I);
    auto cv = split_heads(linear(memory, layer.cross.wv, layer.cross.bv), rows, I);
    auto sk = split_heads(linear(x, layer.self.wk, layer.self.bk), rows, J);
    auto sv = split_heads(linear(x, layer.self.wv, layer.self.bv), rows, J);
    Tensor<T> crossed;
    x = decoder_layer_forward(layer, x, rows, J, sk, sv, &self_mask, ck, cv, &cross_mask, rng,
                              trace ? &crossed : nullptr);
    if (trace) trace->cross_attention.push_back(crossed);
    acts.decoder_layers.push_back(x);
  }
  return linear(x, output_weight(), params_.get("out.b"));
}

template <typename T>
Tensor<T> Transformer<T>::forward(const Batch& src, Dialect src_dialect, const Batch& tgt_in,
                                  Dialect tgt_dialect, Rng* rng) const {
  auto s0 = embed(src, src_dialect, false, 0, rng);
  auto acts = encode(s0, src, src_dialect, rng);
  auto t0 = embed(tgt_in, tgt_dialect, true, 0, rng);
  return decode(t0, tgt_in, acts, src, tgt_dialect, rng);
}

template <typename T>
Tensor<T> Transformer<T>::loss(std::span<const Sentence> sources,
                               std::span<const Sentence> targets, Rng* rng) const {
  if (sources.empty() || sources.size() != targets.size())
    throw std::invalid_argument("loss: source/target batches must be non-empty and aligned");
  const Dialect src_dialect = sources.front().dialect;
  const Dialect tgt_dialect = targets.front().dialect;
  for (std::size_t i = 0; i < sources.size(); ++i)
    if (sources[i].dialect != src_dialect || targets[i].dialect != tgt_dialect)
      throw std::invalid_argument("loss: mixed dialects within a batch");
  const auto src = make_source_batch(sources);
  auto [tgt_in, tgt_out] = make_target_batch(targets);
  auto logits = forward(src, src_dialect, tgt_in, tgt_dialect, rng);
  return ad::cross_entropy(logits, std::span<const TokenId>(tgt_out), kPad);
}

// ---- IncrementalDecoder ---------------------------------------------------

template <typename T>
IncrementalDecoder<T>::IncrementalDecoder(const Transformer<T>& model,
                                          std::span<const Sentence> sources,
                                          Dialect target_dialect)
    : model_(model), target_(target_dialect) {
  if (sources.empty()) throw std::invalid_argument("IncrementalDecoder: no sources");
  ad::NoGradScope<T> no_grad;
  const Dialect src_dialect = sources.front().dialect;
  const auto src = make_source_batch(sources);
  rows_ = src.rows;
  src_len_ = src.cols;
  src_lengths_ = src.lengths;
  auto acts = model_.encode(model_.embed(src, src_dialect, false), src, src_dialect);
  const auto& cfg = model_.config();
  for (std::size_t n = 0; n < cfg.n_layers; ++n) {
    const auto& layer = model_.decoder_layer(target_, n);
    const auto& memory = acts.encoder_layers[model_.memory_layer(n)];
    cross_k_.push_back(model_.split_heads(linear(memory, layer.cross.wk, layer.cross.bk), rows_, src_len_));
    cross_v_.push_back(model_.split_heads(linear(memory, layer.cross.wv, layer.cross.bv), rows_, src_len_));
  }
  self_k_.resize(cfg.n_layers);
  self_v_.resize(cfg.n_layers);
  cross_mask_ = model_.attention_mask(src_lengths_, 1, src_len_, false);
}

template <typename T>
Tensor<T> IncrementalDecoder<T>::step(std::span<const TokenId> previous) {
  ad::NoGradScope<T> no_grad;
  const auto& cfg = model_.config();
  Batch b;
  b.rows = rows_;
  b.cols = 1;
  b.lengths.assign(rows_, 1);
  if (position_ == 0) {
    b.ids.assign(rows_, kBos);
  } else {
    if (previous.size() != rows_) throw std::invalid_argument("step: one token per row expected");
    b.ids.assign(previous.begin(), previous.end());
  }
  Tensor<T> x = model_.embed(b, target_, true, position_);
  for (std::size_t n = 0; n < cfg.n_layers; ++n) {
    const auto& layer = model_.decoder_layer(target_, n);
    auto k = model_.split_heads(linear(x, layer.self.wk, layer.self.bk), rows_, 1);
    auto v = model_.split_heads(linear(x, layer.self.wv, layer.self.bv), rows_, 1);
    self_k_[n] = position_ == 0 ? k : ad::concat(self_k_[n], k, 1);
    self_v_[n] = position_ == 0 ? v : ad::concat(self_v_[n], v, 1);
    x = model_.decoder_layer_forward(layer, x, rows_, 1, self_k_[n], self_v_[n], nullptr,
                                     cross_k_[n], cross_v_[n], &cross_mask_, nullptr, nullptr);
  }
  ++position_;
  return linear(x, model_.output_weight(), model_.params().get("out.b"));
}

template <typename T>
void IncrementalDecoder<T>::reorder(std::span<const std::size_t> source_rows) {
  const std::size_t H = model_.config().n_heads;
  for (auto r : source_rows)
    if (r >= rows_) throw std::out_of_range("reorder: row index out of range");
  for (auto& t : cross_k_) t = gather_row_blocks(t, source_rows, H);
  for (auto& t : cross_v_) t = gather_row_blocks(t, source_rows, H);
  if (position_ > 0) {
    for (auto& t : self_k_) t = gather_row_blocks(t, source_rows, H);
    for (auto& t : self_v_) t = gather_row_blocks(t, source_rows, H);
  }
  cross_mask_ = gather_row_blocks(cross_mask_, source_rows, H);
  std::vector<std::size_t> lengths;
  for (auto r : source_rows) lengths.push_back(src_lengths_[r]);
  src_lengths_ = std::move(lengths);
  rows_ = source_rows.size();
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Transformer<float>;
template class Transformer<double>;
template class IncrementalDecoder<float>;
template class IncrementalDecoder<double>;
template ParameterStore<float> build_model<float>(const ModelConfig&, std::uint64_t);
template ParameterStore<double> build_model<double>(const ModelConfig&, std::uint64_t);
template ParameterStore<float> cast_store<float, double>(const ParameterStore<double>&);
template ParameterStore<double> cast_store<double, float>(const ParameterStore<float>&);
template ParameterStore<float> clone_store<float>(const ParameterStore<float>&);
template ParameterStore<double> clone_store<double>(const ParameterStore<double>&);

}  // namespace dialect::model
