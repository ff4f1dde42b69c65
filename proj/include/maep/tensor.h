#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "maep/common.h"
#include "maep/kernels.h"

namespace maep {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor with value semantics.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
          "tensor data size does not match shape " + shape_str(shape_));
  }

  bool defined() const { return !shape_.empty() || !data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  T& at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(linear(idx))];
  }
  const T& at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(linear(idx))];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    check(shape_numel(s) == numel(), "reshape " + shape_str(shape_) + " -> " +
                                         shape_str(s) + ": element count differs");
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0);
  }

  // factories
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
  static Tensor uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }
  static Tensor trunc_normal(Shape s, Rng& rng, double stddev) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = static_cast<T>(rng.trunc_normal(stddev));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i)
      out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  std::int64_t linear(std::initializer_list<std::int64_t> idx) const {
    check(idx.size() == shape_.size(), "index rank mismatch");
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Elementwise helpers over whole tensors, dispatching to the active kernels.
namespace tops {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "add: shape mismatch");
  Tensor<T> out(a.shape());
  kernels::table<T>().add(a.data(), b.data(), out.data(),
                          static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  Tensor<T> out(a.shape());
  kernels::table<T>().sub(a.data(), b.data(), out.data(),
                          static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "mul: shape mismatch");
  Tensor<T> out(a.shape());
  kernels::table<T>().mul(a.data(), b.data(), out.data(),
                          static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  Tensor<T> out(a.shape());
  kernels::table<T>().scale(alpha, a.data(), out.data(),
                            static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
void axpy_into(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  check(x.same_shape(y), "axpy: shape mismatch");
  kernels::table<T>().axpy(alpha, x.data(), y.data(),
                           static_cast<std::size_t>(x.numel()));
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  kernels::table<T>().clamp(a.data(), lo, hi, out.data(),
                            static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
Tensor<T> sign(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  kernels::table<T>().sign(a.data(), out.data(),
                           static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  kernels::table<T>().absval(a.data(), out.data(),
                             static_cast<std::size_t>(a.numel()));
  return out;
}

template <typename T>
double sum(const Tensor<T>& a) {
  return kernels::table<T>().sum(a.data(), static_cast<std::size_t>(a.numel()));
}

template <typename T>
double asum(const Tensor<T>& a) {
  return kernels::table<T>().asum(a.data(), static_cast<std::size_t>(a.numel()));
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.numel() == b.numel(), "dot: size mismatch");
  return kernels::table<T>().dot(a.data(), b.data(),
                                 static_cast<std::size_t>(a.numel()));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace tops
}  // namespace maep
