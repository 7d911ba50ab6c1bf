// Transformer encoder-decoder shared by both translation directions.
//
// Token embeddings are the concatenation of a pivot slice (one table for both
// dialects) and a private slice (one table per dialect). Encoder layers at the
// top of the stack and decoder layers at the bottom can be shared between the
// two directions; the rest are owned by the source (encoder) or target
// (decoder) dialect. With layer coordination, decoder layer n attends to the
// output of encoder layer n instead of the topmost one.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dialect/autodiff.hpp"
#include "dialect/types.hpp"

namespace dialect::model {

using ad::Tensor;

struct ModelConfig {
  std::size_t n_layers = 3;
  std::size_t model_dim = 128;
  std::size_t pivot_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t n_shared_enc = 3;  // topmost encoder layers shared by both directions
  std::size_t n_shared_dec = 3;  // bottom decoder layers shared by both directions
  bool layer_coordination = true;
  std::size_t max_len = 32;  // longest sentence, in tokens
  std::size_t vocab_size = 0;
  double dropout = 0.1;
  bool dialect_token = true;  // decoder BOS row is a learned per-dialect vector
  bool tie_pivot_output = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form number of scalar parameters.
struct ParamCount {
  std::size_t embedding = 0;  // pivot + private tables
  std::size_t dialect_token = 0;
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t output = 0;

  std::size_t total() const { return embedding + dialect_token + encoder + decoder + output; }
};

ParamCount param_count(const ModelConfig& cfg);

/// Named parameter tensors in deterministic creation order.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename To, typename From>
ParameterStore<To> cast_store(const ParameterStore<From>& store);

/// Deep copy (fresh storage, no gradients).
template <typename T>
ParameterStore<T> clone_store(const ParameterStore<T>& store);

/// Parameter names and shapes that `cfg` requires, in creation order.
std::vector<std::pair<std::string, ad::Shape>> parameter_layout(const ModelConfig& cfg);

/// Xavier-uniform matrices, zero biases, unit layer-norm gains.
template <typename T>
ParameterStore<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Right-padded id matrix.
struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;
};

Batch make_source_batch(std::span<const Sentence> sentences);
/// Decoder input [BOS, y1..yn] and targets [y1..yn, EOS], PAD-padded.
std::pair<Batch, std::vector<TokenId>> make_target_batch(std::span<const Sentence> sentences);

template <typename T>
struct LayerActivations {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<Tensor<T>> encoder_layers;  // S^1..S^N, each [batch*src_len, d]
  std::vector<Tensor<T>> decoder_layers;  // T^1..T^N, each [batch*tgt_len, d]
};

/// Per-layer cross-attention outputs (before the residual) of one decode.
template <typename T>
struct DecodeTrace {
  std::vector<Tensor<T>> cross_attention;
};

template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig cfg, ParameterStore<T> params);

  const ModelConfig& config() const { return cfg_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }

  /// Scaled pivot ⊕ private embedding plus sinusoidal positions, [rows*cols, d].
  /// On the decoder side column 0 holds the BOS slot, replaced by the dialect
  /// row when dialect tokens are enabled. `dropout_rng` enables dropout.
  Tensor<T> embed(const Batch& batch, Dialect dialect, bool decoder_side,
                  std::size_t position_offset = 0, Rng* dropout_rng = nullptr) const;
  /// Single-sentence encoder-side embedding, [len, d].
  Tensor<T> embed(const Sentence& sentence, Dialect dialect) const;

  LayerActivations<T> encode(const Tensor<T>& s0, const Batch& src, Dialect src_dialect,
                             Rng* dropout_rng = nullptr) const;
  /// Replaces S^from_layer (1-based) with `replacement` and recomputes the
  /// layers above it.
  void resume_encode(LayerActivations<T>& acts, std::size_t from_layer,
                     const Tensor<T>& replacement, const Batch& src, Dialect src_dialect,
                     Rng* dropout_rng = nullptr) const;

  /// Logits [rows*cols, V] for every decoder input position. Fills
  /// acts.decoder_layers.
  Tensor<T> decode(const Tensor<T>& t0, const Batch& tgt_in, LayerActivations<T>& acts,
                   const Batch& src, Dialect tgt_dialect, Rng* dropout_rng = nullptr,
                   DecodeTrace<T>* trace = nullptr) const;

  Tensor<T> forward(const Batch& src, Dialect src_dialect, const Batch& tgt_in,
                    Dialect tgt_dialect, Rng* dropout_rng = nullptr) const;

  /// Mean token cross-entropy of P(targets | sources).
  Tensor<T> loss(std::span<const Sentence> sources, std::span<const Sentence> targets,
                 Rng* dropout_rng = nullptr) const;

  Tensor<T> output_weight() const;

  struct Attention {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    Tensor<T> gamma, beta;
  };
  struct FeedForward {
    Tensor<T> w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Attention self;
    Norm ln1;
    FeedForward ffn;
    Norm ln2;
  };
  struct DecoderLayer {
    Attention self;
    Norm ln1;
    Attention cross;
    Norm ln2;
    FeedForward ffn;
    Norm ln3;
  };

  const EncoderLayer& encoder_layer(Dialect d, std::size_t i) const {
    return enc_[index_of(d)][i];
  }
  const DecoderLayer& decoder_layer(Dialect d, std::size_t i) const {
    return dec_[index_of(d)][i];
  }
  std::size_t memory_layer(std::size_t decoder_layer) const;

  /// Constant additive mask [rows*heads, q_len, k_len] hiding padded keys and,
  /// when causal, future positions.
  Tensor<T> attention_mask(std::span<const std::size_t> key_lengths, std::size_t q_len,
                           std::size_t k_len, bool causal) const;

  Tensor<T> split_heads(const Tensor<T>& x, std::size_t rows, std::size_t len) const;
  Tensor<T> merge_heads(const Tensor<T>& x, std::size_t rows, std::size_t len) const;
  Tensor<T> attend(const Attention& p, const Tensor<T>& q_heads, const Tensor<T>& k_heads,
                   const Tensor<T>& v_heads, const Tensor<T>* mask, std::size_t rows,
                   std::size_t q_len) const;
  Tensor<T> decoder_layer_forward(const DecoderLayer& layer, const Tensor<T>& x,
                                  std::size_t rows, std::size_t q_len, const Tensor<T>& self_k,
                                  const Tensor<T>& self_v, const Tensor<T>* self_mask,
                                  const Tensor<T>& cross_k, const Tensor<T>& cross_v,
                                  const Tensor<T>* cross_mask, Rng* dropout_rng,
                                  Tensor<T>* cross_out) const;
  Tensor<T> encoder_layer_forward(const EncoderLayer& layer, const Tensor<T>& x,
                                  std::size_t rows, std::size_t len, const Tensor<T>* mask,
                                  Rng* dropout_rng) const;
  Tensor<T> maybe_dropout(const Tensor<T>& x, Rng* rng) const;

 private:
  ModelConfig cfg_;
  ParameterStore<T> params_;
  std::vector<EncoderLayer> enc_[2];
  std::vector<DecoderLayer> dec_[2];
  std::vector<T> positions_;  // sinusoidal table [(max_len + 2), d]
};

/// Gradient-free step-by-step decoder with cached keys and values.
template <typename T>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Transformer<T>& model, std::span<const Sentence> sources,
                     Dialect target_dialect);

  std::size_t rows() const { return rows_; }
  std::size_t position() const { return position_; }

  /// Feeds the previous token of every row (ignored at position 0, which feeds
  /// BOS) and returns logits [rows, V] for the next token.
  Tensor<T> step(std::span<const TokenId> previous);
  /// New row i continues old row `source_rows[i]`.
  void reorder(std::span<const std::size_t> source_rows);

 private:
  const Transformer<T>& model_;
  Dialect target_;
  std::size_t rows_ = 0;
  std::size_t src_len_ = 0;
  std::size_t position_ = 0;
  std::vector<std::size_t> src_lengths_;
  std::vector<Tensor<T>> cross_k_, cross_v_;
  std::vector<Tensor<T>> self_k_, self_v_;
  Tensor<T> cross_mask_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes [u64 LE manifest length][JSON manifest][f32 LE blob in manifest order].
void save_tensors(const std::filesystem::path& path, const std::string& manifest_extra_json,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors);
struct TensorFile {
  std::string extra_json;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};
TensorFile load_tensors(const std::filesystem::path& path);

void save_checkpoint(const ParameterStore<float>& store, const ModelConfig& cfg,
                     const std::filesystem::path& path);
/// When `expected` is given, every parameter shape must match its layout.
std::pair<ParameterStore<float>, ModelConfig> load_checkpoint(
    const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace dialect::model
