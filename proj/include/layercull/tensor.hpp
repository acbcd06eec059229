#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layercull/error.hpp"

namespace layercull {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array. The element count always equals the product of the
// shape; a rank-0 tensor holds one element.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw Error(ErrorKind::kDimension, "buffer of " + std::to_string(data_.size()) +
                                             " elements does not fill shape " +
                                             shape_to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  T& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Contiguous slice along the leading axis.
  std::span<T> row(std::size_t i) noexcept {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * stride, stride);
  }
  std::span<const T> row(std::size_t i) const noexcept {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * stride, stride);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  Tensor& operator+=(const Tensor& other) {
    check_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool operator==(const Tensor& other) const = default;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape_ != b.shape_) {
      throw Error(ErrorKind::kDimension, std::string(op) + ": shapes " +
                                             shape_to_string(a.shape_) + " and " +
                                             shape_to_string(b.shape_) + " differ");
    }
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T>::check_same_shape(a, b, "max_abs_diff");
  T out{};
  for (std::size_t i = 0; i < a.size(); ++i) out = std::max(out, std::abs(a[i] - b[i]));
  return out;
}

namespace detail {

inline void require_matrix(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw Error(ErrorKind::kDimension,
                std::string(op) + ": expected a matrix, got shape " + shape_to_string(s));
  }
}

inline void require_inner(std::size_t lhs, std::size_t rhs, const Shape& a, const Shape& b,
                          const char* op) {
  if (lhs != rhs) {
    throw Error(ErrorKind::kDimension, std::string(op) + ": inner dimensions differ for " +
                                           shape_to_string(a) + " and " + shape_to_string(b));
  }
}

}  // namespace detail

// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul");
  detail::require_matrix(b.shape(), "matmul");
  detail::require_inner(a.dim(1), b.dim(0), a.shape(), b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* o = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* br = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a^T * b for a[k x m], b[k x n]
template <typename T>
Tensor<T> matmul_at_b(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul_at_b");
  detail::require_matrix(b.shape(), "matmul_at_b");
  detail::require_inner(a.dim(0), b.dim(0), a.shape(), b.shape(), "matmul_at_b");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T* br = &b[p * n];
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* o = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a * b^T for a[m x k], b[n x k]
template <typename T>
Tensor<T> matmul_a_bt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul_a_bt");
  detail::require_matrix(b.shape(), "matmul_a_bt");
  detail::require_inner(a.dim(1), b.dim(1), a.shape(), b.shape(), "matmul_a_bt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = &a[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = &b[j * k];
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out[i * n + j] = acc;
    }
  }
  return out;
}

// Normalizes every vector along the last axis: x / sqrt(mean(x^2) + eps) * gamma.
// If inv_rms is given it receives one reciprocal RMS per vector (for the
// reverse pass).
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gamma, double eps,
                  std::vector<T>* inv_rms = nullptr) {
  if (x.rank() == 0 || gamma.rank() != 1 || x.shape().back() != gamma.dim(0)) {
    throw Error(ErrorKind::kDimension, "rmsnorm: input " + shape_to_string(x.shape()) +
                                           " incompatible with gamma " +
                                           shape_to_string(gamma.shape()));
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::kConfig, "rmsnorm: eps must be positive");
  if (!all_finite(x.data())) throw Error(ErrorKind::kNumeric, "rmsnorm: non-finite input");
  const std::size_t c = gamma.dim(0);
  const std::size_t rows = x.size() / c;
  Tensor<T> out(x.shape());
  if (inv_rms) inv_rms->assign(rows, T{});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * c];
    double sq = 0.0;
    for (std::size_t i = 0; i < c; ++i) sq += static_cast<double>(xr[i]) * xr[i];
    const T inv = static_cast<T>(1.0 / std::sqrt(sq / static_cast<double>(c) + eps));
    if (inv_rms) (*inv_rms)[r] = inv;
    T* o = &out[r * c];
    for (std::size_t i = 0; i < c; ++i) o[i] = xr[i] * inv * gamma[i];
  }
  return out;
}

// Rotates consecutive pairs (2i, 2i+1) inside each head of a [T x (H*head_dim)]
// matrix by angle position * theta_base^(-2i/head_dim). inverse rotates by the
// negated angle, which is the transpose used when back-propagating.
template <typename T>
void rope_rotate_inplace(Tensor<T>& x, std::span<const std::size_t> positions,
                         std::size_t head_dim, double theta_base, bool inverse = false) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw Error(ErrorKind::kConfig,
                "rope: head dimension must be even, got " + std::to_string(head_dim));
  }
  detail::require_matrix(x.shape(), "rope");
  if (x.dim(1) % head_dim != 0) {
    throw Error(ErrorKind::kDimension, "rope: width " + std::to_string(x.dim(1)) +
                                           " is not a multiple of head dim " +
                                           std::to_string(head_dim));
  }
  if (positions.size() != x.dim(0)) {
    throw Error(ErrorKind::kDimension, "rope: " + std::to_string(positions.size()) +
                                           " positions for " + std::to_string(x.dim(0)) +
                                           " rows");
  }
  const std::size_t width = x.dim(1);
  const std::size_t half = head_dim / 2;
  std::vector<double> freq(half);
  for (std::size_t i = 0; i < half; ++i) {
    freq[i] = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    const double pos = static_cast<double>(positions[t]);
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = inverse ? -pos * freq[i] : pos * freq[i];
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(std::sin(angle));
      for (std::size_t h = 0; h < width; h += head_dim) {
        T& a = x.at(t, h + 2 * i);
        T& b = x.at(t, h + 2 * i + 1);
        const T a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> rope_apply(Tensor<T> q, Tensor<T> k,
                                           std::span<const std::size_t> positions,
                                           std::size_t head_dim, double theta_base = 10000.0) {
  rope_rotate_inplace(q, positions, head_dim, theta_base);
  rope_rotate_inplace(k, positions, head_dim, theta_base);
  return {std::move(q), std::move(k)};
}

}  // namespace layercull
