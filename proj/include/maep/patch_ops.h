#pragma once

// Patchification, mask sampling/application and fixed 2-D sinusoidal position
// tables. Everything here is a pure function of its arguments; randomness
// enters only through explicit seeds.

#include <algorithm>
#include <memory>
#include <numeric>

#include "maep/autograd.h"
#include "maep/tensor.h"

namespace maep {

// Per-image binary patch mask with exactly floor(r*N) masked entries.
struct MaskSpec {
  std::int64_t batch = 0;
  std::int64_t n_patches = 0;
  double ratio = 0.0;
  // sorted, unique per image; visible positions
  std::shared_ptr<Tensor<std::int64_t>> keep_indices;  // [B, N_keep]
  Tensor<std::uint8_t> bitmap;                         // [B, N], 1 = visible

  std::int64_t n_keep() const { return keep_indices->dim(1); }
  std::int64_t n_masked() const { return n_patches - n_keep(); }
  bool full_visibility() const { return n_masked() == 0; }
};

inline std::int64_t masked_count(std::int64_t n, double r) {
  return static_cast<std::int64_t>(std::floor(r * static_cast<double>(n)));
}

// Uniform without replacement, reproducible from (seed, image index).
inline MaskSpec sample_mask(std::int64_t batch, std::int64_t n, double r,
                            std::uint64_t seed) {
  check(batch >= 1 && n >= 1, "sample_mask: batch and N must be positive");
  check(r >= 0.0 && r < 1.0, "sample_mask: masking ratio must be in [0,1)");
  const std::int64_t n_mask = masked_count(n, r);
  const std::int64_t n_keep = n - n_mask;
  MaskSpec m;
  m.batch = batch;
  m.n_patches = n;
  m.ratio = r;
  m.keep_indices = std::make_shared<Tensor<std::int64_t>>(Shape{batch, n_keep});
  m.bitmap = Tensor<std::uint8_t>({batch, n}, std::uint8_t(1));
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t b = 0; b < batch; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::iota(perm.begin(), perm.end(), 0);
    // partial Fisher-Yates: first n_mask entries become the masked patches
    for (std::int64_t i = 0; i < n_mask; ++i) {
      const std::int64_t j =
          i + static_cast<std::int64_t>(
                  rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(perm[i], perm[j]);
      m.bitmap[b * n + perm[i]] = 0;
    }
    std::int64_t k = 0;
    for (std::int64_t p = 0; p < n; ++p)
      if (m.bitmap[b * n + p]) (*m.keep_indices)[b * n_keep + k++] = p;
  }
  return m;
}

// All-visible mask (r = 0).
inline MaskSpec full_mask(std::int64_t batch, std::int64_t n) {
  return sample_mask(batch, n, 0.0, 0);
}

inline MaskSpec complement(const MaskSpec& m) {
  MaskSpec c;
  c.batch = m.batch;
  c.n_patches = m.n_patches;
  c.ratio = static_cast<double>(m.n_keep()) / static_cast<double>(m.n_patches);
  c.bitmap = Tensor<std::uint8_t>({m.batch, m.n_patches});
  c.keep_indices =
      std::make_shared<Tensor<std::int64_t>>(Shape{m.batch, m.n_masked()});
  for (std::int64_t b = 0; b < m.batch; ++b) {
    std::int64_t k = 0;
    for (std::int64_t p = 0; p < m.n_patches; ++p) {
      const std::uint8_t inv = m.bitmap[b * m.n_patches + p] ? 0 : 1;
      c.bitmap[b * m.n_patches + p] = inv;
      if (inv) (*c.keep_indices)[b * m.n_masked() + k++] = p;
    }
  }
  return c;
}

// ---------------------------------------------------------------- patchify --

inline void check_patchable(const Shape& s, int ps) {
  check(s.size() == 4, "patchify: expected [B,C,H,W], got " + shape_str(s));
  check(ps >= 1, "patchify: patch size must be >= 1");
  check(s[2] % ps == 0 && s[3] % ps == 0,
        "patchify: H and W must be divisible by patch size " +
            std::to_string(ps) + ", got " + shape_str(s));
}

// [B,C,H,W] -> [B, N, ps*ps*C]; token layout: pixel raster order (py,px),
// channel minor. Lossless.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int ps) {
  check_patchable(x.shape(), ps);
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t gh = H / ps, gw = W / ps, n = gh * gw;
  const std::int64_t td = static_cast<std::int64_t>(ps) * ps * C;
  Tensor<T> out({B, n, td});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        T* tok = out.data() + ((b * n) + gy * gw + gx) * td;
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            for (std::int64_t c = 0; c < C; ++c)
              tok[(py * ps + px) * C + c] =
                  x[((b * C + c) * H + gy * ps + py) * W + gx * ps + px];
      }
  return out;
}

// exact inverse of patchify
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& g, int ps, std::int64_t channels,
                     std::int64_t grid_h, std::int64_t grid_w) {
  check(g.rank() == 3, "unpatchify: expected [B,N,D]");
  const std::int64_t B = g.dim(0), n = g.dim(1), td = g.dim(2);
  check(n == grid_h * grid_w, "unpatchify: N != grid_h*grid_w");
  check(td == static_cast<std::int64_t>(ps) * ps * channels,
        "unpatchify: token dim " + std::to_string(td) +
            " inconsistent with ps*ps*C");
  const std::int64_t H = grid_h * ps, W = grid_w * ps;
  Tensor<T> out({B, channels, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t gy = 0; gy < grid_h; ++gy)
      for (std::int64_t gx = 0; gx < grid_w; ++gx) {
        const T* tok = g.data() + ((b * n) + gy * grid_w + gx) * td;
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            for (std::int64_t c = 0; c < channels; ++c)
              out[((b * channels + c) * H + gy * ps + py) * W + gx * ps + px] =
                  tok[(py * ps + px) * channels + c];
      }
  return out;
}

// autograd wrappers; both are permutations, so backward is the inverse copy
namespace ag_ops {

template <typename T>
ag::Var<T> patchify(ag::Var<T> x, int ps) {
  const std::int64_t C = x.shape()[1];
  const std::int64_t gh = x.shape()[2] / ps, gw = x.shape()[3] / ps;
  Tensor<T> v = maep::patchify(x.value(), ps);
  return ag::make_op<T>(std::move(v), {x},
                        [x, ps, C, gh, gw](ag::Node<T>& self) mutable {
                          if (!x.requires_grad()) return;
                          ag::accumulate(
                              x, maep::unpatchify(self.grad, ps, C, gh, gw));
                        });
}

template <typename T>
ag::Var<T> unpatchify(ag::Var<T> g, int ps, std::int64_t channels,
                      std::int64_t grid_h, std::int64_t grid_w) {
  Tensor<T> v = maep::unpatchify(g.value(), ps, channels, grid_h, grid_w);
  return ag::make_op<T>(std::move(v), {g}, [g, ps](ag::Node<T>& self) mutable {
    if (!g.requires_grad()) return;
    ag::accumulate(g, maep::patchify(self.grad, ps));
  });
}

}  // namespace ag_ops

// ------------------------------------------------------------ mask on image --

// Patch-level mask broadcast to pixels, as multiplicative 0/1 weights.
template <typename T>
Tensor<T> pixel_mask(const MaskSpec& m, int ps, std::int64_t channels,
                     std::int64_t grid_h, std::int64_t grid_w) {
  check(m.n_patches == grid_h * grid_w,
        "pixel_mask: mask does not match the patch grid");
  const std::int64_t H = grid_h * ps, W = grid_w * ps;
  Tensor<T> out({m.batch, channels, H, W});
  for (std::int64_t b = 0; b < m.batch; ++b)
    for (std::int64_t gy = 0; gy < grid_h; ++gy)
      for (std::int64_t gx = 0; gx < grid_w; ++gx) {
        if (!m.bitmap[b * m.n_patches + gy * grid_w + gx]) continue;
        for (std::int64_t c = 0; c < channels; ++c)
          for (int py = 0; py < ps; ++py) {
            T* row = out.data() +
                     (((b * channels + c) * H + gy * ps + py) * W + gx * ps);
            std::fill(row, row + ps, T(1));
          }
      }
  return out;
}

// M (.) x: masked patches zero-filled, visible patches bit-identical.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& x, const MaskSpec& m, int ps) {
  check_patchable(x.shape(), ps);
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t gh = H / ps, gw = W / ps;
  check(m.batch == B && m.n_patches == gh * gw,
        "apply_mask: mask grid mismatch, mask N=" + std::to_string(m.n_patches) +
            " image grid " + std::to_string(gh * gw));
  Tensor<T> out = x;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        if (m.bitmap[b * m.n_patches + gy * gw + gx]) continue;
        for (std::int64_t c = 0; c < C; ++c)
          for (int py = 0; py < ps; ++py) {
            T* row =
                out.data() + (((b * C + c) * H + gy * ps + py) * W + gx * ps);
            std::fill(row, row + ps, T(0));
          }
      }
  return out;
}

// ---------------------------------------------------------- position tables --

// Fixed 2-D sine/cosine table [grid_h*grid_w, dim]; first half encodes the
// row coordinate, second half the column. dim must be divisible by 4.
template <typename T>
Tensor<T> sincos_pos_embed_2d(std::int64_t grid_h, std::int64_t grid_w,
                              std::int64_t dim) {
  check(dim % 4 == 0, "position embedding dim must be divisible by 4");
  const std::int64_t half = dim / 2, quarter = dim / 4;
  Tensor<T> out({grid_h * grid_w, dim});
  std::vector<double> omega(static_cast<std::size_t>(quarter));
  for (std::int64_t i = 0; i < quarter; ++i)
    omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) /
                                           static_cast<double>(quarter));
  for (std::int64_t gy = 0; gy < grid_h; ++gy)
    for (std::int64_t gx = 0; gx < grid_w; ++gx) {
      T* row = out.data() + (gy * grid_w + gx) * dim;
      for (std::int64_t i = 0; i < quarter; ++i) {
        const double ay = static_cast<double>(gy) * omega[i];
        const double ax = static_cast<double>(gx) * omega[i];
        row[i] = static_cast<T>(std::sin(ay));
        row[quarter + i] = static_cast<T>(std::cos(ay));
        row[half + i] = static_cast<T>(std::sin(ax));
        row[half + quarter + i] = static_cast<T>(std::cos(ax));
      }
    }
  return out;
}

// Rows of the position table at each image's kept positions: [B, K, dim].
template <typename T>
Tensor<T> gather_pos_rows(const Tensor<T>& table, const MaskSpec& m) {
  const std::int64_t dim = table.dim(1);
  const std::int64_t kk = m.n_keep();
  Tensor<T> out({m.batch, kk, dim});
  for (std::int64_t b = 0; b < m.batch; ++b)
    for (std::int64_t k = 0; k < kk; ++k) {
      const std::int64_t src = (*m.keep_indices)[b * kk + k];
      std::memcpy(out.data() + (b * kk + k) * dim, table.data() + src * dim,
                  static_cast<std::size_t>(dim) * sizeof(T));
    }
  return out;
}

}  // namespace maep
