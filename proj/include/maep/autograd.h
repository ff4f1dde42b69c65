#pragma once

// Reverse-mode autodiff over Tensor<T>. Graphs are built dynamically by the
// op functions below and freed by backward() / scope exit. Gradients of every
// op are checked against central finite differences in the test suite.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maep/tensor.h"

namespace maep::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // lazily allocated
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;
};

// When false, newly created ops record no graph (values only). Used for
// inference and evaluation loops.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  bool prev;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
    n_->is_leaf = true;
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& value() { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  std::int64_t numel() const { return n_->value.numel(); }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) {
    check(n_->is_leaf, "set_requires_grad: only leaf variables");
    n_->requires_grad = rg;
  }
  bool is_leaf() const { return n_->is_leaf; }

  Tensor<T>& grad() {
    if (!n_->grad.defined()) n_->grad = Tensor<T>::zeros(n_->value.shape());
    return n_->grad;
  }
  bool has_grad() const { return n_ && n_->grad.defined(); }
  void zero_grad() { n_->grad = Tensor<T>(); }

  T item() const {
    check(n_->value.numel() == 1, "item: tensor has more than one element");
    return n_->value[0];
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  // Backpropagate from this scalar. Frees intermediate values and grads as it
  // goes; leaf grads accumulate and persist.
  void backward() {
    check(n_->value.numel() == 1, "backward: root must be scalar");
    check(n_->requires_grad, "backward: root does not require grad");

    // topo order over the requires_grad subgraph
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx].get();
        ++idx;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // order is post-order: parents before children; walk it backwards so each
    // node has its full grad before its backward_fn runs.
    n_->grad = Tensor<T>::full({1}, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && node->grad.defined()) node->backward_fn(*node);
      if (!node->is_leaf) {
        node->grad = Tensor<T>();
        if (node != n_.get()) node->value = Tensor<T>();
        node->backward_fn = nullptr;
        node->parents.clear();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
void accumulate(Var<T> v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  Tensor<T>& dst = v.grad();
  kernels::table<T>().axpy(T(1), g.data(), dst.data(),
                           static_cast<std::size_t>(g.numel()));
}

// Create an op node. If grad is disabled or no parent requires it, the result
// is a constant leaf carrying only the value.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parents)
      if (p.requires_grad()) {
        need = true;
        break;
      }
  }
  Var<T> out(std::move(value), false);
  if (need) {
    auto n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    n->backward_fn = std::move(backward_fn);
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
  }
  return out;
}

// ---------------------------------------------------------------- basics ---

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tensor<T> v = tops::add(a.value(), b.value());
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& self) mutable {
    accumulate(a, self.grad);
    accumulate(b, self.grad);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tensor<T> v = tops::sub(a.value(), b.value());
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& self) mutable {
    accumulate(a, self.grad);
    if (b.requires_grad()) {
      Tensor<T> neg = tops::scale(self.grad, T(-1));
      accumulate(b, neg);
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tensor<T> v = tops::mul(a.value(), b.value());
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& self) mutable {
    if (a.requires_grad()) accumulate(a, tops::mul(self.grad, b.value()));
    if (b.requires_grad()) accumulate(b, tops::mul(self.grad, a.value()));
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c) {
  Tensor<T> v = tops::scale(a.value(), c);
  return make_op<T>(std::move(v), {a}, [a, c](Node<T>& self) mutable {
    if (a.requires_grad()) accumulate(a, tops::scale(self.grad, c));
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> v = a.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] += c;
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    accumulate(a, self.grad);
  });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Var<T> abs(Var<T> a) {
  Tensor<T> v = tops::abs(a.value());
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    // subgradient: sign, with sign(0) = 0
    Tensor<T> g = tops::sign(a.value());
    accumulate(a, tops::mul(self.grad, g));
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> v = tops::mul(a.value(), a.value());
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    Tensor<T> g = tops::mul(self.grad, a.value());
    accumulate(a, tops::scale(g, T(2)));
  });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Tensor<T> v = tops::clamp(a.value(), lo, hi);
  return make_op<T>(std::move(v), {a}, [a, lo, hi](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    Tensor<T> g = self.grad;
    const Tensor<T>& x = a.value();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (x[i] < lo || x[i] > hi) g[i] = T(0);
    accumulate(a, g);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> v = a.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = std::max(v[i], T(0));
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    Tensor<T> g = self.grad;
    const Tensor<T>& x = a.value();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (x[i] <= T(0)) g[i] = T(0);
    accumulate(a, g);
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  const Tensor<T>& x = a.value();
  Tensor<T> v(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double xi = static_cast<double>(x[i]);
    v[i] = static_cast<T>(0.5 * xi * (1.0 + std::erf(xi * M_SQRT1_2)));
  }
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    const Tensor<T>& x = a.value();
    Tensor<T> g(x.shape());
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double xi = static_cast<double>(x[i]);
      const double cdf = 0.5 * (1.0 + std::erf(xi * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      g[i] = static_cast<T>(self.grad[i] * static_cast<T>(cdf + xi * pdf));
    }
    accumulate(a, g);
  });
}

// ------------------------------------------------------------- reductions --

template <typename T>
Var<T> sum(Var<T> a) {
  Tensor<T> v({1});
  v[0] = static_cast<T>(tops::sum(a.value()));
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    Tensor<T> g = Tensor<T>::full(a.shape(), self.grad[0]);
    accumulate(a, g);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T inv = static_cast<T>(1.0 / static_cast<double>(a.numel()));
  Tensor<T> v({1});
  v[0] = static_cast<T>(tops::sum(a.value()) / static_cast<double>(a.numel()));
  return make_op<T>(std::move(v), {a}, [a, inv](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    Tensor<T> g = Tensor<T>::full(a.shape(), static_cast<T>(self.grad[0] * inv));
    accumulate(a, g);
  });
}

// -------------------------------------------------------------- shape ops --

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> v = a.value().reshaped(s);
  return make_op<T>(std::move(v), {a}, [a](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    accumulate(a, self.grad.reshaped(a.shape()));
  });
}

namespace detail {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  check(perm.size() == r && r <= 4, "permute: rank must match and be <= 4");
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
  Tensor<T> out(os);
  // pad to rank 4
  std::int64_t d[4] = {1, 1, 1, 1};
  int p[4] = {0, 1, 2, 3};
  const int off = static_cast<int>(4 - r);
  for (std::size_t i = 0; i < r; ++i) {
    d[off + i] = s[i];
    p[off + i] = perm[i] + off;
  }
  std::int64_t stride[4];
  stride[3] = 1;
  for (int i = 2; i >= 0; --i) stride[i] = stride[i + 1] * d[i + 1];
  std::int64_t od[4], ostride[4];
  for (int i = 0; i < 4; ++i) od[i] = d[p[i]];
  ostride[3] = 1;
  for (int i = 2; i >= 0; --i) ostride[i] = ostride[i + 1] * od[i + 1];
  const T* src = x.data();
  T* dst = out.data();
  for (std::int64_t i0 = 0; i0 < od[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < od[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < od[2]; ++i2) {
        std::int64_t idx[4] = {i0, i1, i2, 0};
        std::int64_t src_base = 0;
        for (int k = 0; k < 3; ++k) src_base += idx[k] * stride[p[k]];
        const std::int64_t src_step = stride[p[3]];
        T* drow = dst + ((i0 * od[1] + i1) * od[2] + i2) * od[3];
        for (std::int64_t i3 = 0; i3 < od[3]; ++i3)
          drow[i3] = src[src_base + i3 * src_step];
      }
  return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
  return inv;
}

}  // namespace detail

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> perm) {
  Tensor<T> v = detail::permute_tensor(a.value(), perm);
  return make_op<T>(std::move(v), {a}, [a, perm](Node<T>& self) mutable {
    if (!a.requires_grad()) return;
    accumulate(a, detail::permute_tensor(self.grad, detail::inverse_perm(perm)));
  });
}

// ------------------------------------------------------------- linear alg --

// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
        "matmul: bad shapes " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> v({sa[0], sb[1]});
  kernels::gemm<T>(false, false, m, n, k, a.value().data(), b.value().data(),
                   v.data(), false);
  return make_op<T>(std::move(v), {a, b}, [a, b, m, n, k](Node<T>& self) mutable {
    if (a.requires_grad())  // dA += G * B^T
      kernels::gemm<T>(false, true, m, k, n, self.grad.data(), b.value().data(),
                       a.grad().data(), true);
    if (b.requires_grad())  // dB += A^T * G
      kernels::gemm<T>(true, false, k, n, m, a.value().data(), self.grad.data(),
                       b.grad().data(), true);
  });
}

// x [..., in] -> [..., out] with weight [out, in], optional bias [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  check(sw.size() == 2 && !sx.empty() && sx.back() == sw[1],
        "linear: input " + shape_str(sx) + " weight " + shape_str(sw));
  const std::size_t in = sw[1], out = sw[0];
  const std::size_t rows = static_cast<std::size_t>(x.numel()) / in;
  Shape os(sx.begin(), sx.end() - 1);
  os.push_back(static_cast<std::int64_t>(out));
  Tensor<T> v(os);
  kernels::gemm<T>(false, true, rows, out, in, x.value().data(),
                   weight.value().data(), v.data(), false);
  const bool has_bias = bias.defined();
  if (has_bias) {
    check(bias.shape() == Shape{static_cast<std::int64_t>(out)},
          "linear: bias shape");
    T* vp = v.data();
    const T* bp = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r)
      kernels::table<T>().add(vp + r * out, bp, vp + r * out, out);
  }
  std::vector<Var<T>> parents = {x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op<T>(
      std::move(v), std::move(parents),
      [x, weight, bias, rows, in, out, has_bias](Node<T>& self) mutable {
        const Tensor<T>& g = self.grad;
        if (x.requires_grad())  // dX += G * W
          kernels::gemm<T>(false, false, rows, in, out, g.data(),
                           weight.value().data(), x.grad().data(), true);
        if (weight.requires_grad())  // dW += G^T * X
          kernels::gemm<T>(true, false, out, in, rows, g.data(),
                           x.value().data(), weight.grad().data(), true);
        if (has_bias && bias.requires_grad()) {
          Tensor<T>& bg = bias.grad();
          const T* gp = g.data();
          for (std::size_t r = 0; r < rows; ++r)
            kernels::table<T>().add(bg.data(), gp + r * out, bg.data(), out);
        }
      });
}

template <typename T>
Var<T> linear_nobias(Var<T> x, Var<T> weight) {
  return linear(x, weight, Var<T>());
}

// batched matmul: a [B,M,K], b [B,K,N] (or [B,N,K] with trans_b) -> [B,M,N]
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: bad ranks");
  const std::size_t bs = sa[0], m = sa[1], k = sa[2];
  const std::size_t n = trans_b ? sb[1] : sb[2];
  check(trans_b ? (sb[2] == sa[2]) : (sb[1] == sa[2]), "bmm: inner dim");
  Tensor<T> v({static_cast<std::int64_t>(bs), static_cast<std::int64_t>(m),
               static_cast<std::int64_t>(n)});
  const std::size_t an = m * k, bn = sb[1] * sb[2], vn = m * n;
  for (std::size_t i = 0; i < bs; ++i)
    kernels::gemm<T>(false, trans_b, m, n, k, a.value().data() + i * an,
                     b.value().data() + i * bn, v.data() + i * vn, false);
  return make_op<T>(
      std::move(v), {a, b},
      [a, b, bs, m, n, k, an, bn, vn, trans_b](Node<T>& self) mutable {
        const Tensor<T>& g = self.grad;
        if (a.requires_grad()) {
          // dA += G * op(B)^T : [M,N] x [N,K]
          for (std::size_t i = 0; i < bs; ++i)
            kernels::gemm<T>(false, !trans_b, m, k, n, g.data() + i * vn,
                             b.value().data() + i * bn, a.grad().data() + i * an,
                             true);
        }
        if (b.requires_grad()) {
          for (std::size_t i = 0; i < bs; ++i) {
            if (trans_b)  // dB[N,K] += G^T[N,M] * A[M,K]
              kernels::gemm<T>(true, false, n, k, m, g.data() + i * vn,
                               a.value().data() + i * an,
                               b.grad().data() + i * bn, true);
            else  // dB[K,N] += A^T[K,M] * G[M,N]
              kernels::gemm<T>(true, false, k, n, m, a.value().data() + i * an,
                               g.data() + i * vn, b.grad().data() + i * bn, true);
          }
        }
      });
}

// ---------------------------------------------------------- normalization --

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-6) {
  const auto& sx = x.shape();
  const std::int64_t d = sx.back();
  const std::int64_t rows = x.numel() / d;
  check(gamma.numel() == d && beta.numel() == d, "layer_norm: affine shape");
  Tensor<T> v(sx);
  Tensor<T> xhat(sx);          // saved for backward
  Tensor<T> inv_std({rows});
  const T* xp = x.value().data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  T* vp = v.data();
  T* hp = xhat.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    double mu = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mu += static_cast<double>(row[i]);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      const double c = static_cast<double>(row[i]) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(istd);
    for (std::int64_t i = 0; i < d; ++i) {
      const T h = static_cast<T>((static_cast<double>(row[i]) - mu) * istd);
      hp[r * d + i] = h;
      vp[r * d + i] = h * gp[i] + bp[i];
    }
  }
  auto xhat_p = std::make_shared<Tensor<T>>(std::move(xhat));
  auto istd_p = std::make_shared<Tensor<T>>(std::move(inv_std));
  return make_op<T>(
      std::move(v), {x, gamma, beta},
      [x, gamma, beta, xhat_p, istd_p, rows, d](Node<T>& self) mutable {
        const Tensor<T>& g = self.grad;
        const T* gp = gamma.value().data();
        const T* hp = xhat_p->data();
        if (x.requires_grad()) {
          Tensor<T>& xg = x.grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            const T istd = (*istd_p)[r];
            const T* grow = g.data() + r * d;
            const T* hrow = hp + r * d;
            double s1 = 0.0, s2 = 0.0;  // sum(dy*gamma), sum(dy*gamma*xhat)
            for (std::int64_t i = 0; i < d; ++i) {
              const double dg = static_cast<double>(grow[i]) * gp[i];
              s1 += dg;
              s2 += dg * hrow[i];
            }
            s1 /= static_cast<double>(d);
            s2 /= static_cast<double>(d);
            T* xrow = xg.data() + r * d;
            for (std::int64_t i = 0; i < d; ++i) {
              const double dg = static_cast<double>(grow[i]) * gp[i];
              xrow[i] += static_cast<T>((dg - s1 - hrow[i] * s2) * istd);
            }
          }
        }
        if (gamma.requires_grad()) {
          Tensor<T>& gg = gamma.grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < d; ++i)
              gg[i] += g[r * d + i] * hp[r * d + i];
        }
        if (beta.requires_grad()) {
          Tensor<T>& bg = beta.grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < d; ++i) bg[i] += g[r * d + i];
        }
      });
}

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const auto& sx = x.shape();
  const std::int64_t d = sx.back();
  const std::int64_t rows = x.numel() / d;
  Tensor<T> v(sx);
  const T* xp = x.value().data();
  T* vp = v.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    double mx = -HUGE_VAL;
    for (std::int64_t i = 0; i < d; ++i)
      mx = std::max(mx, static_cast<double>(row[i]));
    double z = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      const double e = std::exp(static_cast<double>(row[i]) - mx);
      vp[r * d + i] = static_cast<T>(e);
      z += e;
    }
    const double iz = 1.0 / z;
    for (std::int64_t i = 0; i < d; ++i)
      vp[r * d + i] = static_cast<T>(static_cast<double>(vp[r * d + i]) * iz);
  }
  return make_op<T>(std::move(v), {x}, [x, rows, d](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    const Tensor<T>& y = self.value;
    const Tensor<T>& g = self.grad;
    Tensor<T>& xg = x.grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* yrow = y.data() + r * d;
      const T* grow = g.data() + r * d;
      double s = 0.0;
      for (std::int64_t i = 0; i < d; ++i)
        s += static_cast<double>(grow[i]) * yrow[i];
      T* xrow = xg.data() + r * d;
      for (std::int64_t i = 0; i < d; ++i)
        xrow[i] += static_cast<T>(yrow[i] * (static_cast<double>(grow[i]) - s));
    }
  });
}

// -------------------------------------------------------- token gather ops --

// x [B,N,D], idx [B,K] -> [B,K,D]
template <typename T>
Var<T> gather_tokens(Var<T> x, std::shared_ptr<const Tensor<std::int64_t>> idx) {
  const auto& sx = x.shape();
  check(sx.size() == 3, "gather_tokens: input rank");
  const std::int64_t b = sx[0], n = sx[1], d = sx[2];
  const std::int64_t kk = idx->dim(1);
  check(idx->dim(0) == b, "gather_tokens: batch mismatch");
  Tensor<T> v({b, kk, d});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ki = 0; ki < kk; ++ki) {
      const std::int64_t src = (*idx)[bi * kk + ki];
      std::memcpy(v.data() + (bi * kk + ki) * d,
                  x.value().data() + (bi * n + src) * d,
                  static_cast<std::size_t>(d) * sizeof(T));
    }
  return make_op<T>(std::move(v), {x}, [x, idx, b, n, kk, d](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    Tensor<T>& xg = x.grad();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ki = 0; ki < kk; ++ki) {
        const std::int64_t dst = (*idx)[bi * kk + ki];
        kernels::table<T>().add(xg.data() + (bi * n + dst) * d,
                                self.grad.data() + (bi * kk + ki) * d,
                                xg.data() + (bi * n + dst) * d,
                                static_cast<std::size_t>(d));
      }
  });
}

// visible [B,K,D] scattered to [B,N,D]; all other positions get mask_token [D].
template <typename T>
Var<T> scatter_tokens(Var<T> visible,
                      std::shared_ptr<const Tensor<std::int64_t>> idx,
                      std::int64_t n, Var<T> mask_token) {
  const auto& sv = visible.shape();
  check(sv.size() == 3, "scatter_tokens: input rank");
  const std::int64_t b = sv[0], kk = sv[1], d = sv[2];
  check(mask_token.numel() == d, "scatter_tokens: mask token dim");
  Tensor<T> v({b, n, d});
  const T* mt = mask_token.value().data();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ni = 0; ni < n; ++ni)
      std::memcpy(v.data() + (bi * n + ni) * d, mt,
                  static_cast<std::size_t>(d) * sizeof(T));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ki = 0; ki < kk; ++ki) {
      const std::int64_t dst = (*idx)[bi * kk + ki];
      std::memcpy(v.data() + (bi * n + dst) * d,
                  visible.value().data() + (bi * kk + ki) * d,
                  static_cast<std::size_t>(d) * sizeof(T));
    }
  return make_op<T>(
      std::move(v), {visible, mask_token},
      [visible, mask_token, idx, b, n, kk, d](Node<T>& self) mutable {
        if (visible.requires_grad()) {
          Tensor<T>& vg = visible.grad();
          for (std::int64_t bi = 0; bi < b; ++bi)
            for (std::int64_t ki = 0; ki < kk; ++ki) {
              const std::int64_t src = (*idx)[bi * kk + ki];
              kernels::table<T>().add(vg.data() + (bi * kk + ki) * d,
                                      self.grad.data() + (bi * n + src) * d,
                                      vg.data() + (bi * kk + ki) * d,
                                      static_cast<std::size_t>(d));
            }
        }
        if (mask_token.requires_grad()) {
          // grad over all non-visible positions
          std::vector<char> visible_pos(static_cast<std::size_t>(n));
          Tensor<T>& mg = mask_token.grad();
          for (std::int64_t bi = 0; bi < b; ++bi) {
            std::fill(visible_pos.begin(), visible_pos.end(), 0);
            for (std::int64_t ki = 0; ki < kk; ++ki)
              visible_pos[static_cast<std::size_t>((*idx)[bi * kk + ki])] = 1;
            for (std::int64_t ni = 0; ni < n; ++ni)
              if (!visible_pos[static_cast<std::size_t>(ni)])
                kernels::table<T>().add(mg.data(),
                                        self.grad.data() + (bi * n + ni) * d,
                                        mg.data(), static_cast<std::size_t>(d));
          }
        }
      });
}

// x [B,N,D] + table [N,D] broadcast over batch
template <typename T>
Var<T> add_rows(Var<T> x, Var<T> table) {
  const auto& sx = x.shape();
  check(sx.size() == 3 && table.shape().size() == 2 &&
            table.shape()[0] == sx[1] && table.shape()[1] == sx[2],
        "add_rows: shape mismatch");
  const std::int64_t b = sx[0];
  const std::size_t nd = static_cast<std::size_t>(sx[1] * sx[2]);
  Tensor<T> v(sx);
  for (std::int64_t bi = 0; bi < b; ++bi)
    kernels::table<T>().add(x.value().data() + bi * nd, table.value().data(),
                            v.data() + bi * nd, nd);
  return make_op<T>(std::move(v), {x, table}, [x, table, b, nd](Node<T>& self) mutable {
    if (x.requires_grad()) accumulate(x, self.grad);
    if (table.requires_grad()) {
      Tensor<T>& tg = table.grad();
      for (std::int64_t bi = 0; bi < b; ++bi)
        kernels::table<T>().add(tg.data(), self.grad.data() + bi * nd, tg.data(),
                                nd);
    }
  });
}

// ------------------------------------------------------------------ convs --

// x [B,Ci,H,W], w [Co,Ci,kh,kw], bias [Co]; zero padding, square stride.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  check(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1], "conv2d: shapes");
  const std::int64_t B = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
  const std::int64_t Co = sw[0], kh = sw[2], kw = sw[3];
  const std::int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - kw) / stride + 1;
  const std::int64_t ck = Ci * kh * kw, ohw = OH * OW;

  auto im2col = [=](const T* img, T* cols) {
    for (std::int64_t c = 0; c < Ci; ++c)
      for (std::int64_t ky = 0; ky < kh; ++ky)
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          T* crow = cols + ((c * kh + ky) * kw + kx) * ohw;
          for (std::int64_t oy = 0; oy < OH; ++oy) {
            const std::int64_t iy = oy * stride - pad + ky;
            for (std::int64_t ox = 0; ox < OW; ++ox) {
              const std::int64_t ix = ox * stride - pad + kx;
              crow[oy * OW + ox] =
                  (iy >= 0 && iy < H && ix >= 0 && ix < W)
                      ? img[(c * H + iy) * W + ix]
                      : T(0);
            }
          }
        }
  };

  Tensor<T> v({B, Co, OH, OW});
  std::vector<T> cols(static_cast<std::size_t>(ck * ohw));
  const bool has_bias = bias.defined();
  for (std::int64_t bi = 0; bi < B; ++bi) {
    im2col(x.value().data() + bi * Ci * H * W, cols.data());
    kernels::gemm<T>(false, false, Co, ohw, ck, w.value().data(), cols.data(),
                     v.data() + bi * Co * ohw, false);
    if (has_bias) {
      T* out = v.data() + bi * Co * ohw;
      for (std::int64_t co = 0; co < Co; ++co) {
        const T bv = bias.value()[co];
        for (std::int64_t i = 0; i < ohw; ++i) out[co * ohw + i] += bv;
      }
    }
  }
  std::vector<Var<T>> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return make_op<T>(
      std::move(v), std::move(parents),
      [x, w, bias, im2col, B, Ci, H, W, Co, kh, kw, OH, OW, ck, ohw, stride,
       pad, has_bias](Node<T>& self) mutable {
        const Tensor<T>& g = self.grad;
        std::vector<T> cols(static_cast<std::size_t>(ck * ohw));
        std::vector<T> dcols(static_cast<std::size_t>(ck * ohw));
        for (std::int64_t bi = 0; bi < B; ++bi) {
          const T* gb = g.data() + bi * Co * ohw;
          if (w.requires_grad() || x.requires_grad())
            im2col(x.value().data() + bi * Ci * H * W, cols.data());
          if (w.requires_grad())  // dW += G * cols^T
            kernels::gemm<T>(false, true, Co, ck, ohw, gb, cols.data(),
                             w.grad().data(), true);
          if (has_bias && bias.requires_grad()) {
            Tensor<T>& bg = bias.grad();
            for (std::int64_t co = 0; co < Co; ++co) {
              double s = 0.0;
              for (std::int64_t i = 0; i < ohw; ++i)
                s += static_cast<double>(gb[co * ohw + i]);
              bg[co] += static_cast<T>(s);
            }
          }
          if (x.requires_grad()) {  // dcols = W^T * G, then col2im
            kernels::gemm<T>(true, false, ck, ohw, Co, w.value().data(), gb,
                             dcols.data(), false);
            T* xg = x.grad().data() + bi * Ci * H * W;
            for (std::int64_t c = 0; c < Ci; ++c)
              for (std::int64_t ky = 0; ky < kh; ++ky)
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                  const T* crow = dcols.data() + ((c * kh + ky) * kw + kx) * ohw;
                  for (std::int64_t oy = 0; oy < OH; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                      const std::int64_t ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      xg[(c * H + iy) * W + ix] += crow[oy * OW + ox];
                    }
                  }
                }
          }
        }
      });
}

template <typename T>
Var<T> avg_pool2d(Var<T> x, int k) {
  const auto& sx = x.shape();
  check(sx.size() == 4 && sx[2] % k == 0 && sx[3] % k == 0, "avg_pool2d: shape");
  const std::int64_t B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const std::int64_t OH = H / k, OW = W / k;
  const T inv = static_cast<T>(1.0 / (k * k));
  Tensor<T> v({B, C, OH, OW});
  const T* xp = x.value().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t oy = 0; oy < OH; ++oy)
      for (std::int64_t ox = 0; ox < OW; ++ox) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            s += static_cast<double>(
                xp[(bc * H + oy * k + dy) * W + ox * k + dx]);
        v[(bc * OH + oy) * OW + ox] = static_cast<T>(s) * inv;
      }
  return make_op<T>(std::move(v), {x}, [x, B, C, H, W, OH, OW, k, inv](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    Tensor<T>& xg = x.grad();
    const Tensor<T>& g = self.grad;
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t oy = 0; oy < OH; ++oy)
        for (std::int64_t ox = 0; ox < OW; ++ox) {
          const T gv = g[(bc * OH + oy) * OW + ox] * inv;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              xg[(bc * H + oy * k + dy) * W + ox * k + dx] += gv;
        }
  });
}

// global average over spatial dims: [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& sx = x.shape();
  check(sx.size() == 4, "global_avg_pool: rank");
  const std::int64_t B = sx[0], C = sx[1], hw = sx[2] * sx[3];
  const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
  Tensor<T> v({B, C});
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    v[bc] = static_cast<T>(kernels::table<T>().sum(
                x.value().data() + bc * hw, static_cast<std::size_t>(hw))) *
            inv;
  return make_op<T>(std::move(v), {x}, [x, B, C, hw, inv](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    Tensor<T>& xg = x.grad();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const T gv = self.grad[bc] * inv;
      T* row = xg.data() + bc * hw;
      for (std::int64_t i = 0; i < hw; ++i) row[i] += gv;
    }
  });
}

// ------------------------------------------------------------------ losses --

// mean cross entropy from logits [B,C] and labels [B]
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::shared_ptr<const std::vector<std::int64_t>> labels) {
  const auto& s = logits.shape();
  check(s.size() == 2, "cross_entropy: logits rank");
  const std::int64_t B = s[0], C = s[1];
  check(static_cast<std::int64_t>(labels->size()) == B, "cross_entropy: labels");
  Tensor<T> probs(s);
  double loss = 0.0;
  const T* zp = logits.value().data();
  for (std::int64_t b = 0; b < B; ++b) {
    const T* row = zp + b * C;
    double mx = -HUGE_VAL;
    for (std::int64_t c = 0; c < C; ++c)
      mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c)
      z += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(z);
    loss += lse - static_cast<double>(row[(*labels)[b]]);
    for (std::int64_t c = 0; c < C; ++c)
      probs[b * C + c] =
          static_cast<T>(std::exp(static_cast<double>(row[c]) - lse));
  }
  Tensor<T> v({1});
  v[0] = static_cast<T>(loss / static_cast<double>(B));
  auto probs_p = std::make_shared<Tensor<T>>(std::move(probs));
  return make_op<T>(std::move(v), {logits},
                    [logits, labels, probs_p, B, C](Node<T>& self) mutable {
                      if (!logits.requires_grad()) return;
                      const T gscale = self.grad[0] / static_cast<T>(B);
                      Tensor<T>& lg = logits.grad();
                      for (std::int64_t b = 0; b < B; ++b) {
                        for (std::int64_t c = 0; c < C; ++c)
                          lg[b * C + c] += gscale * (*probs_p)[b * C + c];
                        lg[b * C + (*labels)[b]] -= gscale;
                      }
                    });
}

// operator sugar
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace maep::ag
