#include "dialect/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dialect::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// c (+)= op(a) * op(b), all row-major; a is m x k after op, b is k x n after op.
template <typename T>
void gemm(const T* a, bool ta, const T* b, bool tb, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MatMap<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!ta && !tb) {
    C.noalias() += ConstMatMap<T>(a, M, K) * ConstMatMap<T>(b, K, N);
  } else if (!ta && tb) {
    C.noalias() += ConstMatMap<T>(a, M, K) * ConstMatMap<T>(b, N, K).transpose();
  } else if (ta && !tb) {
    C.noalias() += ConstMatMap<T>(a, K, M).transpose() * ConstMatMap<T>(b, K, N);
  } else {
    C.noalias() += ConstMatMap<T>(a, K, M).transpose() * ConstMatMap<T>(b, N, K).transpose();
  }
}

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

template <typename T>
using DataPtr = std::shared_ptr<TensorData<T>>;

// Creates the output tensor; records `make_backward(out)` on the active tape
// when any input requires a gradient.
template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool track) {
  Tensor<T> out(std::move(shape), std::move(values), track);
  if (track) out.impl()->leaf = false;
  return out;
}

template <typename T>
void record(const Tensor<T>& out, std::function<void()> fn) {
  active_tape<T>()->record(out.impl(), std::move(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// (outer, axis extent, inner) decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : d_(std::make_shared<TensorData<T>>()) {
  if (numel(shape) != values.size())
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  d_->shape = std::move(shape);
  d_->value = std::move(values);
  d_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  return d_->shape[normalize_axis(axis, d_->shape.size())];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return d_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= d_->shape[i]) throw DimensionError("index out of range");
    flat = flat * d_->shape[i] + v;
    ++i;
  }
  return d_->value[flat];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(d_->shape, d_->value, false);
}

// ---- Tape -----------------------------------------------------------------

template <typename T>
Tape<T>* active_tape() {
  return g_active_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>* tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active_tape<T> = previous_;
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorData<T>> output, BackwardFn backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw DimensionError("backward requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  for (auto& node : nodes_) node.output->grad.clear();
  auto& root = *loss.impl();
  if (!root.requires_grad) return;
  root.ensure_grad();
  root.grad[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) throw std::logic_error("backward called without an active tape");
  tape->backward(loss);
}

// ---- primitives -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> c(m * n);
  gemm(a.data().data(), false, b.data().data(), false, c.data(), m, k, n, false);
  const bool track = needs_grad<T>({&a, &b});
  auto out = make_output<T>({m, n}, std::move(c), track);
  if (track) {
    DataPtr<T> pa = a.impl(), pb = b.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [pa, pb, po, m, k, n] {
      if (pa->requires_grad) {
        pa->ensure_grad();
        gemm(po->grad.data(), false, pb->value.data(), true, pa->grad.data(), m, n, k, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        gemm(pa->value.data(), true, po->grad.data(), false, pb->grad.data(), k, m, n, true);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0])
    throw DimensionError("batched_matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
  const std::size_t bk = trans_b ? b.shape()[2] : b.shape()[1];
  const std::size_t n = trans_b ? b.shape()[1] : b.shape()[2];
  if (bk != k)
    throw DimensionError("batched_matmul: inner dimension mismatch " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  std::vector<T> c(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    gemm(a.data().data() + i * m * k, false, b.data().data() + i * k * n, trans_b,
         c.data() + i * m * n, m, k, n, false);
  const bool track = needs_grad<T>({&a, &b});
  auto out = make_output<T>({batch, m, n}, std::move(c), track);
  if (track) {
    DataPtr<T> pa = a.impl(), pb = b.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [pa, pb, po, batch, m, k, n, trans_b] {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t i = 0; i < batch; ++i) {
        const T* g = po->grad.data() + i * m * n;
        const T* av = pa->value.data() + i * m * k;
        const T* bv = pb->value.data() + i * k * n;
        if (pa->requires_grad)
          gemm(g, false, bv, !trans_b, pa->grad.data() + i * m * k, m, n, k, true);
        if (pb->requires_grad) {
          if (trans_b)  // dB (n x k) = G^T A
            gemm(g, true, av, false, pb->grad.data() + i * k * n, n, m, k, true);
          else  // dB (k x n) = A^T G
            gemm(av, true, g, false, pb->grad.data() + i * k * n, k, m, n, true);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

namespace {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                             Bwd bwd) {
  require_same_shape(a, b, name);
  const auto n = a.size();
  std::vector<T> c(n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) c[i] = fwd(av[i], bv[i]);
  const bool track = needs_grad<T>({&a, &b});
  auto out = make_output<T>(a.shape(), std::move(c), track);
  if (track) {
    DataPtr<T> pa = a.impl(), pb = b.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [pa, pb, po, n, bwd] {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T da, db;
        bwd(pa->value[i], pb->value[i], po->grad[i], da, db);
        if (pa->requires_grad) pa->grad[i] += da;
        if (pb->requires_grad) pb->grad[i] += db;
      }
    });
  }
  return out;
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_elementwise(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  const auto n = x.size();
  std::vector<T> y(n);
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(xv[i]);
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>(x.shape(), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, po, n, bwd] {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        px->grad[i] += bwd(px->value[i], po->value[i], po->grad[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) { da = g, db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) { da = g, db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) { da = g * y, db = g * x; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.dim(-1) != bias.size())
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  const std::size_t n = bias.size(), rows = x.size() / n;
  std::vector<T> y(x.data().begin(), x.data().end());
  const T* bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += bv[j];
  const bool track = needs_grad<T>({&x, &bias});
  auto out = make_output<T>(x.shape(), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl(), pb = bias.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, pb, po, n, rows] {
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < rows * n; ++i) px->grad[i] += po->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) pb->grad[j] += po->grad[r * n + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_elementwise(
      x, [factor](T v) { return v * factor; }, [factor](T, T, T g) { return g * factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_elementwise(
      x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  std::vector<T> y(x.size());
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(xv[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < s.extent; ++j) y[base + j * s.inner] *= inv;
    }
  }
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>(x.shape(), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, po, s] {
      px->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < s.extent; ++j) {
            const auto idx = base + j * s.inner;
            dot += po->grad[idx] * po->value[idx];
          }
          for (std::size_t j = 0; j < s.extent; ++j) {
            const auto idx = base + j * s.inner;
            px->grad[idx] += po->value[idx] * (po->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t n = x.dim(-1);
  if (gamma.size() != n || beta.size() != n)
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
  const std::size_t rows = x.size() / n;
  std::vector<T> y(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[r * n + j] = h;
      y[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const bool track = needs_grad<T>({&x, &gamma, &beta});
  auto out = make_output<T>(x.shape(), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl(), pg = gamma.impl(), pb = beta.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, pg, pb, po, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      if (px->requires_grad) px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = po->grad.data() + r * n;
        const T* h = xhat.data() + r * n;
        if (pg->requires_grad)
          for (std::size_t j = 0; j < n; ++j) pg->grad[j] += g[j] * h[j];
        if (pb->requires_grad)
          for (std::size_t j = 0; j < n; ++j) pb->grad[j] += g[j];
        if (px->requires_grad) {
          T sum_dh = 0, sum_dh_h = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T dh = g[j] * pg->value[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const T is = inv_std[r];
          for (std::size_t j = 0; j < n; ++j) {
            const T dh = g[j] * pg->value[j];
            px->grad[r * n + j] += is * (dh - sum_dh / T(n) - h[j] * sum_dh_h / T(n));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  const std::size_t vocab = table.shape()[0], width = table.shape()[1];
  std::vector<T> y(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * width, width,
                y.data() + i * width);
  }
  const bool track = needs_grad<T>({&table});
  auto out = make_output<T>({ids.size(), width}, std::move(y), track);
  if (track) {
    DataPtr<T> pt = table.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [pt, po, width, idv = std::vector<std::int32_t>(ids.begin(), ids.end())] {
      pt->ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = pt->grad.data() + static_cast<std::size_t>(idv[i]) * width;
        const T* src = po->grad.data() + i * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
  const auto ax = normalize_axis(axis, a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != ax && a.shape()[i] != b.shape()[i])
      throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " differ off the concat axis");
  const auto sa = split_at(a.shape(), ax);
  const auto sb = split_at(b.shape(), ax);
  const std::size_t ca = sa.extent * sa.inner, cb = sb.extent * sb.inner;
  Shape shape = a.shape();
  shape[ax] += b.shape()[ax];
  std::vector<T> y(a.size() + b.size());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(a.data().data() + o * ca, ca, y.data() + o * (ca + cb));
    std::copy_n(b.data().data() + o * cb, cb, y.data() + o * (ca + cb) + ca);
  }
  const bool track = needs_grad<T>({&a, &b});
  auto out = make_output<T>(std::move(shape), std::move(y), track);
  if (track) {
    DataPtr<T> pa = a.impl(), pb = b.impl();
    TensorData<T>* po = out.impl().get();
    const std::size_t outer = sa.outer;
    record(out, [pa, pb, po, outer, ca, cb] {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* g = po->grad.data() + o * (ca + cb);
        if (pa->requires_grad)
          for (std::size_t j = 0; j < ca; ++j) pa->grad[o * ca + j] += g[j];
        if (pb->requires_grad)
          for (std::size_t j = 0; j < cb; ++j) pb->grad[o * cb + j] += g[ca + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const auto ax = normalize_axis(axis, x.rank());
  if (length == 0 || start + length > x.shape()[ax])
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside " + shape_str(x.shape()));
  const auto s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  const std::size_t src_block = s.extent * s.inner, dst_block = length * s.inner;
  const std::size_t offset = start * s.inner;
  std::vector<T> y(s.outer * dst_block);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data().data() + o * src_block + offset, dst_block, y.data() + o * dst_block);
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>(std::move(shape), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    const std::size_t outer = s.outer;
    record(out, [px, po, outer, src_block, dst_block, offset] {
      px->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < dst_block; ++j)
          px->grad[o * src_block + offset + j] += po->grad[o * dst_block + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  std::vector<T> y(x.data().begin(), x.data().end());
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>(std::move(shape), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, po] {
      px->ensure_grad();
      for (std::size_t i = 0; i < po->grad.size(); ++i) px->grad[i] += po->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw DimensionError("permute: order length differs from rank");
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order");
    seen[o] = true;
  }
  const Shape& in_shape = x.shape();
  // trailing axes left in place are copied as contiguous runs
  std::size_t keep = r;
  while (keep > 0 && order[keep - 1] == keep - 1) --keep;
  std::size_t run = 1;
  for (std::size_t i = keep; i < r; ++i) run *= in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<std::size_t> src_stride(r);  // stride in the input for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_stride[order[i]];
  }
  const std::size_t n = x.size(), chunks = n / run;
  // chunk map: out chunk -> in flat offset
  std::vector<std::size_t> map(chunks);
  std::vector<std::size_t> idx(keep, 0);
  std::size_t src = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    map[c] = src;
    for (std::size_t ax = keep; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  std::vector<T> y(n);
  const T* xv = x.data().data();
  for (std::size_t c = 0; c < chunks; ++c) std::copy_n(xv + map[c], run, y.data() + c * run);
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>(std::move(out_shape), std::move(y), track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, po, run, map = std::move(map)] {
      px->ensure_grad();
      for (std::size_t c = 0; c < map.size(); ++c) {
        T* dst = px->grad.data() + map[c];
        const T* g = po->grad.data() + c * run;
        for (std::size_t i = 0; i < run; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw std::invalid_argument("dropout probability must be < 1");
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(static_cast<double>(p)) ? T(0) : keep_scale;
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  const bool track = needs_grad<T>({&x});
  auto out = make_output<T>({1}, {total}, track);
  if (track) {
    DataPtr<T> px = x.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [px, po] {
      px->ensure_grad();
      for (auto& g : px->grad) g += po->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_id) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
  std::vector<T> probs(rows * vocab);
  std::size_t counted = 0;
  T total = 0;
  const T* lv = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = lv + r * vocab;
    T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) +
                           " outside vocabulary of " + std::to_string(vocab));
    total += -(row[targets[r]] - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) throw EmptyLossError("cross_entropy: every target position is ignored");
  const bool track = needs_grad<T>({&logits});
  auto out = make_output<T>({1}, {total / T(counted)}, track);
  if (track) {
    DataPtr<T> pl = logits.impl();
    TensorData<T>* po = out.impl().get();
    record(out, [pl, po, rows, vocab, counted, probs = std::move(probs),
                 tg = std::vector<std::int32_t>(targets.begin(), targets.end()), ignore_id] {
      pl->ensure_grad();
      const T g = po->grad[0] / T(counted);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tg[r] == ignore_id) continue;
        T* dst = pl->grad.data() + r * vocab;
        const T* p = probs.data() + r * vocab;
        for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * p[j];
        dst[tg[r]] -= g;
      }
    });
  }
  return out;
}

// ---- gradient check -------------------------------------------------------

double grad_check(const std::function<Tensor<double>()>& f,
                  const std::vector<Tensor<double>>& params, const GradCheckOptions& options) {
  if (options.steps.empty()) throw std::invalid_argument("grad_check: no step sizes");
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    for (auto p : params) p.zero_grad();
    auto loss = f();
    tape.backward(loss);
    for (const auto& p : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.size(), 0.0);
    }
  }
  double worst = 0.0;
  Rng rng(options.sample_seed);
  NoGradScope<double> no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto values = p.data();
    std::vector<std::size_t> elements(values.size());
    for (std::size_t i = 0; i < elements.size(); ++i) elements[i] = i;
    if (options.max_per_tensor > 0 && elements.size() > options.max_per_tensor) {
      for (std::size_t i = 0; i < options.max_per_tensor; ++i)
        std::swap(elements[i], elements[i + rng.below(elements.size() - i)]);
      elements.resize(options.max_per_tensor);
    }
    for (std::size_t i : elements) {
      const double saved = values[i];
      const double a = analytic[k][i];
      double best = std::numeric_limits<double>::infinity();
      for (double eps : options.steps) {
        values[i] = saved + eps;
        const double up = f().item();
        values[i] = saved - eps;
        const double down = f().item();
        values[i] = saved;
        const double numeric = (up - down) / (2 * eps);
        const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
        best = std::min(best, std::abs(a - numeric) / denom);
        if (best < 1e-7) break;
      }
      worst = std::max(worst, best);
    }
  }
  return worst;
}

// ---- explicit instantiations ---------------------------------------------

#define DIALECT_AD_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                    \
  template class Tape<T>;                                                                      \
  template class TapeScope<T>;                                                                 \
  template Tape<T>* active_tape<T>();                                                          \
  template void backward<T>(const Tensor<T>&);                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&, bool);              \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                           \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                        \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const std::int32_t>);            \
  template Tensor<T> concat<T>(const Tensor<T>&, const Tensor<T>&, int);                       \
  template Tensor<T> narrow<T>(const Tensor<T>&, int, std::size_t, std::size_t);               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);            \
  template Tensor<T> dropout<T>(const Tensor<T>&, T, Rng&);                                    \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::int32_t>,         \
                                      std::int32_t);

DIALECT_AD_INSTANTIATE(float)
DIALECT_AD_INSTANTIATE(double)

#undef DIALECT_AD_INSTANTIATE

}  // namespace dialect::ad
