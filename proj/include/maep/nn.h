#pragma once

// Small module layer over the autograd ops: linear maps (optionally wrapped
// with low-rank adapters), layer norm, multi-head attention and pre-norm
// transformer blocks.

#include <cmath>
#include <string>
#include <vector>

#include "maep/autograd.h"

namespace maep::nn {

template <typename T>
struct NamedParam {
  std::string name;
  ag::Var<T> var;
};

template <typename T>
struct Linear {
  ag::Var<T> w;  // [out, in]
  ag::Var<T> b;  // [out]
  // low-rank adapter, delta = scale * B(Ax)
  bool has_lora = false;
  ag::Var<T> lora_a;  // [rank, in]
  ag::Var<T> lora_b;  // [out, rank]
  T lora_scale = T(0);

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng) {
    w = ag::Var<T>(Tensor<T>::trunc_normal({out, in}, rng, 0.02), true);
    b = ag::Var<T>(Tensor<T>::zeros({out}), true);
  }

  std::int64_t in_features() const { return w.shape()[1]; }
  std::int64_t out_features() const { return w.shape()[0]; }

  void attach_lora(int rank, double alpha, Rng& rng) {
    check(!has_lora, "adapter already attached to this linear map");
    check(rank >= 1, "adapter rank must be >= 1");
    lora_a = ag::Var<T>(
        Tensor<T>::randn({rank, in_features()}, rng, 0.02), true);
    lora_b = ag::Var<T>(Tensor<T>::zeros({out_features(), rank}), true);
    lora_scale = static_cast<T>(alpha / rank);
    has_lora = true;
  }

  bool lora_is_zero() const {
    if (!has_lora) return true;
    const Tensor<T>& t = lora_b.value();
    for (std::int64_t i = 0; i < t.numel(); ++i)
      if (t[i] != T(0)) return false;
    return true;
  }

  ag::Var<T> forward(ag::Var<T> x) const {
    ag::Var<T> y = ag::linear(x, w, b);
    if (has_lora) {
      // In no-grad mode an all-zero B contributes exactly nothing; skip it so
      // inference outputs are bit-identical to the unadapted map. Under grad
      // the branch must stay in the graph for B to receive gradient.
      if (ag::grad_enabled() || !lora_is_zero()) {
        ag::Var<T> h = ag::linear_nobias(x, lora_a);
        ag::Var<T> d = ag::linear_nobias(h, lora_b);
        y = ag::add(y, ag::mul_scalar(d, lora_scale));
      }
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out,
               bool base, bool lora) const {
    if (base) {
      out.push_back({prefix + ".w", w});
      out.push_back({prefix + ".b", b});
    }
    if (lora && has_lora) {
      out.push_back({prefix + ".lora_a", lora_a});
      out.push_back({prefix + ".lora_b", lora_b});
    }
  }
};

template <typename T>
struct LayerNorm {
  ag::Var<T> g, b;
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim) {
    g = ag::Var<T>(Tensor<T>::full({dim}, T(1)), true);
    b = ag::Var<T>(Tensor<T>::zeros({dim}), true);
  }
  ag::Var<T> forward(ag::Var<T> x) const { return ag::layer_norm(x, g, b); }
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + ".g", g});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct MultiheadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  MultiheadAttention() = default;
  MultiheadAttention(std::int64_t dim, int heads_, Rng& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng),
        heads(heads_) {
    check(dim % heads_ == 0, "embed dim must be divisible by head count");
  }

  ag::Var<T> forward(ag::Var<T> x) const {
    const auto& s = x.shape();  // [B,T,D]
    const std::int64_t B = s[0], t = s[1], d = s[2];
    const std::int64_t dh = d / heads;
    auto split = [&](ag::Var<T> y) {
      y = ag::reshape(y, {B, t, heads, dh});
      y = ag::permute(y, {0, 2, 1, 3});
      return ag::reshape(y, {B * heads, t, dh});
    };
    ag::Var<T> qh = split(q.forward(x));
    ag::Var<T> kh = split(k.forward(x));
    ag::Var<T> vh = split(v.forward(x));
    ag::Var<T> scores = ag::mul_scalar(
        ag::bmm(qh, kh, /*trans_b=*/true),
        static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    ag::Var<T> attn = ag::softmax_lastdim(scores);
    ag::Var<T> ctx = ag::bmm(attn, vh);
    ctx = ag::reshape(ctx, {B, heads, t, dh});
    ctx = ag::permute(ctx, {0, 2, 1, 3});
    ctx = ag::reshape(ctx, {B, t, d});
    return o.forward(ctx);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out,
               bool base, bool lora) const {
    q.collect(prefix + ".q", out, base, lora);
    k.collect(prefix + ".k", out, base, lora);
    v.collect(prefix + ".v", out, base, lora);
    o.collect(prefix + ".o", out, base, lora);
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;
  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng)
      : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}
  ag::Var<T> forward(ag::Var<T> x) const {
    return fc2.forward(ag::gelu(fc1.forward(x)));
  }
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out,
               bool base, bool lora) const {
    fc1.collect(prefix + ".fc1", out, base, lora);
    fc2.collect(prefix + ".fc2", out, base, lora);
  }
};

// pre-norm block: x + attn(ln1(x)); x + mlp(ln2(x))
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiheadAttention<T> attn;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(std::int64_t dim, int heads, std::int64_t mlp_hidden, Rng& rng)
      : ln1(dim), ln2(dim), attn(dim, heads, rng), mlp(dim, mlp_hidden, rng) {}

  ag::Var<T> forward(ag::Var<T> x) const {
    x = ag::add(x, attn.forward(ln1.forward(x)));
    x = ag::add(x, mlp.forward(ln2.forward(x)));
    return x;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out,
               bool base, bool lora) const {
    if (base) {
      ln1.collect(prefix + ".ln1", out);
      ln2.collect(prefix + ".ln2", out);
    }
    attn.collect(prefix + ".attn", out, base, lora);
    mlp.collect(prefix + ".mlp", out, base, lora);
  }
};

}  // namespace maep::nn
