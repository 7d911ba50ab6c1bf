#pragma once

#include <cmath>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include "dialect/autodiff.hpp"
#include "dialect/rng.hpp"

namespace testutil {

using dialect::Rng;
using dialect::ad::Shape;
using dialect::ad::Tensor;

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
  std::vector<T> v(dialect::ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

// Values bounded away from zero, for kinked functions.
inline Tensor<double> random_away_from_zero(const Shape& shape, Rng& rng, double gap = 0.05) {
  std::vector<double> v(dialect::ad::numel(shape));
  for (auto& x : v) {
    const double m = rng.uniform(gap, 1.0);
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor<double>(shape, std::move(v), true);
}

// Scalar loss sum(out * w) with fixed random weights w.
inline Tensor<double> project(const Tensor<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return dialect::ad::sum(dialect::ad::mul(out, w));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(reinterpret_cast<std::uintptr_t>(this) ^ static_cast<std::uint64_t>(::time(nullptr)));
    path_ = std::filesystem::temp_directory_path() /
            ("dialectmt-" + tag + "-" + std::to_string(rng.next() % 1000000000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
