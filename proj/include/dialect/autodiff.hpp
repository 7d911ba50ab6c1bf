// Minimal dense reverse-mode automatic differentiation.
//
// Tensors are row-major with explicit shape metadata. Operations record
// themselves on the thread's active Tape when at least one input requires a
// gradient; with no active tape they only compute values.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dialect/rng.hpp"

namespace dialect::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Shared handle to tensor storage. Copies alias the same storage, which is
/// how parameters are shared between model components.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorData<T>> data) : d_(std::move(data)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  /// Extent of axis `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return d_->value.size(); }

  std::span<const T> data() const { return d_->value; }
  std::span<T> data() { return d_->value; }
  std::span<const T> grad() const { return d_->grad; }
  std::span<T> grad() { return d_->grad; }
  bool has_grad() const { return d_->grad.size() == d_->value.size() && !d_->value.empty(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }
  void zero_grad();

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }
  const std::shared_ptr<TensorData<T>>& impl() const { return d_; }

  /// Deep copy without gradient or tape history.
  Tensor detach() const;

 private:
  std::shared_ptr<TensorData<T>> d_;
};

/// Ordered record of executed primitives. Inputs of every node were produced
/// before it, so a reverse sweep is a valid topological traversal.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<TensorData<T>> output, BackwardFn backward);
  /// Populates d(loss)/d(leaf) for every requires_grad leaf reached. Leaf
  /// gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor<T>& loss);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<TensorData<T>> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

template <typename T>
Tape<T>* active_tape();

/// Installs a tape (or none, for gradient-free evaluation) for the current
/// thread until destroyed.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

/// Runs backward on the active tape.
template <typename T>
void backward(const Tensor<T>& loss);

// ---- primitives -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// [batch, m, k] x [batch, k, n] (or [batch, n, k] when trans_b).
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., n] + bias[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Gathers rows of `table` ([V, e]) -> [ids.size(), e].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis = -1);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
/// Mean token negative log-likelihood over positions whose target differs
/// from `ignore_id`.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_id);

// ---- gradient checking ----------------------------------------------------

struct GradCheckOptions {
  /// Central-difference step sizes, tried in order until one agrees within
  /// 1e-7; the best agreement counts. Several steps tolerate ReLU kinks close
  /// to a probe point and roundoff on exactly-zero gradients.
  std::vector<double> steps{1e-5, 1e-4, 1e-6};
  double floor = 1e-6;              // denominator floor for tiny gradients
  std::size_t max_per_tensor = 0;   // 0 checks every element
  std::uint64_t sample_seed = 0;
};

/// Compares backward gradients of the scalar `f` with central differences for
/// the elements of `params`. Returns the worst relative error
/// |a - n| / max(|a|, |n|, floor).
double grad_check(const std::function<Tensor<double>()>& f,
                  const std::vector<Tensor<double>>& params, const GradCheckOptions& options = {});

}  // namespace dialect::ad
