#pragma once

// Training objectives. Each loss has a graph-building form over ag::Var (used
// by the trainers and the gradient checks) and a scalar convenience overload
// that evaluates without recording a graph.
//
// Region-restricted terms are per-pixel means over their own region; the
// combined masked objective recombines them with pixel-count weights so that
// for the L1 distance the sum of the two weighted terms equals the plain
// full-image L1 mean.

#include "maep/purifier.h"

namespace maep {

enum class DistanceKind { L1_MEAN, MSE };

inline const char* distance_name(DistanceKind k) {
  return k == DistanceKind::L1_MEAN ? "l1" : "mse";
}

template <typename T>
ag::Var<T> distance(ag::Var<T> a, ag::Var<T> b, DistanceKind kind) {
  check(a.shape() == b.shape(), "distance: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  ag::Var<T> d = ag::sub(a, b);
  return kind == DistanceKind::L1_MEAN ? ag::mean(ag::abs(d))
                                       : ag::mean(ag::square(d));
}

template <typename T>
T distance(const Tensor<T>& a, const Tensor<T>& b, DistanceKind kind) {
  ag::NoGradGuard ng;
  return distance(ag::Var<T>(a), ag::Var<T>(b), kind).item();
}

template <typename T>
struct LossTerms {
  ag::Var<T> total;
  ag::Var<T> purify_term;  // area-weighted, total == purify + recon
  ag::Var<T> recon_term;
  bool recon_empty = false;  // true when the masked region is empty (r = 0)
};

struct LossBreakdown {
  double total = 0.0;
  double purify_term = 0.0;
  double recon_term = 0.0;
  bool recon_empty = false;
};

template <typename T>
LossBreakdown to_breakdown(const LossTerms<T>& t) {
  return {static_cast<double>(t.total.item()),
          static_cast<double>(t.purify_term.item()),
          static_cast<double>(t.recon_term.item()), t.recon_empty};
}

namespace detail {

// mean of |pred-target| (or squared) over the pixels selected by `weights`
// (a 0/1 tensor); `count` is the number of selected pixels.
template <typename T>
ag::Var<T> region_mean(ag::Var<T> pred, ag::Var<T> target,
                       const Tensor<T>& weights, std::int64_t count,
                       DistanceKind kind) {
  ag::Var<T> d = ag::sub(pred, target);
  ag::Var<T> a = kind == DistanceKind::L1_MEAN ? ag::abs(d) : ag::square(d);
  ag::Var<T> w = ag::mul(a, ag::Var<T>(weights));
  return ag::mul_scalar(ag::sum(w), static_cast<T>(1.0 / static_cast<double>(count)));
}

template <typename T>
ag::Var<T> const_scalar(T v) {
  return ag::Var<T>(Tensor<T>::full({1}, v));
}

}  // namespace detail

// Reconstruction loss over the masked region only: model sees x_in through
// the mask, prediction compared to x_target where patches were dropped.
// Empty masked region (r = 0) yields 0 with the empty flag set.
template <typename T>
LossTerms<T> mae_recon_loss_g(const Purifier<T>& model, ag::Var<T> x_in,
                              ag::Var<T> x_target, const MaskSpec& m,
                              DistanceKind kind) {
  check(x_in.shape() == x_target.shape(), "mae_recon_loss: shape mismatch");
  LossTerms<T> out;
  out.purify_term = detail::const_scalar<T>(T(0));
  if (m.full_visibility()) {
    out.total = detail::const_scalar<T>(T(0));
    out.recon_term = out.total;
    out.recon_empty = true;
    return out;
  }
  const auto& cfg = model.config();
  const std::int64_t gh = x_in.shape()[2] / cfg.ps,
                     gw = x_in.shape()[3] / cfg.ps;
  ag::Var<T> pred = model.forward_masked(x_in, m);
  Tensor<T> w = pixel_mask<T>(complement(m), cfg.ps, cfg.channels, gh, gw);
  const std::int64_t count =
      m.batch * m.n_masked() * cfg.ps * cfg.ps * cfg.channels;
  out.recon_term = detail::region_mean(pred, x_target, w, count, kind);
  out.total = out.recon_term;
  return out;
}

// Purification loss over the visible region: target is the clean image, input
// is the (masked) adversarial image.
template <typename T>
ag::Var<T> masked_purify_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                                ag::Var<T> x, const MaskSpec& m,
                                DistanceKind kind) {
  check(x_a.shape() == x.shape(), "masked_purify_loss: shape mismatch");
  check(m.n_keep() > 0, "masked_purify_loss: no visible patches");
  const auto& cfg = model.config();
  const std::int64_t gh = x.shape()[2] / cfg.ps, gw = x.shape()[3] / cfg.ps;
  ag::Var<T> pred = model.forward_masked(x_a, m);
  Tensor<T> w = pixel_mask<T>(m, cfg.ps, cfg.channels, gh, gw);
  const std::int64_t count = m.batch * m.n_keep() * cfg.ps * cfg.ps * cfg.channels;
  return detail::region_mean(pred, x, w, count, kind);
}

// Combined masked objective: area-weighted purification term over visible
// pixels plus area-weighted reconstruction term over masked pixels, sharing
// one forward pass. For L1 the sum equals the full-image L1 mean exactly.
template <typename T>
LossTerms<T> maep_total_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                               ag::Var<T> x, const MaskSpec& m,
                               DistanceKind kind) {
  check(x_a.shape() == x.shape(), "maep_total_loss: shape mismatch");
  check(m.n_keep() > 0, "maep_total_loss: no visible patches");
  const auto& cfg = model.config();
  const std::int64_t gh = x.shape()[2] / cfg.ps, gw = x.shape()[3] / cfg.ps;
  const std::int64_t px_per_patch = cfg.ps * cfg.ps * cfg.channels;

  ag::Var<T> pred = model.forward_masked(x_a, m);

  LossTerms<T> out;
  {
    Tensor<T> wv = pixel_mask<T>(m, cfg.ps, cfg.channels, gh, gw);
    ag::Var<T> vis_mean = detail::region_mean(
        pred, x, wv, m.batch * m.n_keep() * px_per_patch, kind);
    const T w_vis = static_cast<T>(
        static_cast<double>(m.n_keep()) / static_cast<double>(m.n_patches));
    out.purify_term = ag::mul_scalar(vis_mean, w_vis);
  }
  if (m.full_visibility()) {
    out.recon_term = detail::const_scalar<T>(T(0));
    out.recon_empty = true;
    out.total = out.purify_term;
  } else {
    Tensor<T> wm =
        pixel_mask<T>(complement(m), cfg.ps, cfg.channels, gh, gw);
    ag::Var<T> mask_mean = detail::region_mean(
        pred, x, wm, m.batch * m.n_masked() * px_per_patch, kind);
    const T w_mask = static_cast<T>(
        static_cast<double>(m.n_masked()) / static_cast<double>(m.n_patches));
    out.recon_term = ag::mul_scalar(mask_mean, w_mask);
    out.total = ag::add(out.purify_term, out.recon_term);
  }
  return out;
}

// Full-forward purification loss (r = 0), fixed L1.
template <typename T>
ag::Var<T> disco_purify_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                               ag::Var<T> x) {
  MaskSpec m = full_mask(x.shape()[0], (x.shape()[2] / model.config().ps) *
                                           (x.shape()[3] / model.config().ps));
  ag::Var<T> pred = model.forward_masked(x_a, m);
  return distance(pred, x, DistanceKind::L1_MEAN);
}

// Full-forward purification loss with selectable distance.
template <typename T>
ag::Var<T> mlm_finetune_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                               ag::Var<T> x, DistanceKind kind) {
  MaskSpec m = full_mask(x.shape()[0], (x.shape()[2] / model.config().ps) *
                                           (x.shape()[3] / model.config().ps));
  ag::Var<T> pred = model.forward_masked(x_a, m);
  return distance(pred, x, kind);
}

// D(P(x_a), x) + D(P(x), x)
template <typename T>
ag::Var<T> recon_baseline_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                                 ag::Var<T> x, DistanceKind kind) {
  return ag::add(mlm_finetune_loss_g(model, x_a, x, kind),
                 mlm_finetune_loss_g(model, x, x, kind));
}

// D(P(x), x) + D(P(x), P(x_a)) / lambda
template <typename T>
ag::Var<T> trades_pixel_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                               ag::Var<T> x, double lambda, DistanceKind kind) {
  check(lambda > 0.0, "trades loss: lambda must be > 0");
  MaskSpec m = full_mask(x.shape()[0], (x.shape()[2] / model.config().ps) *
                                           (x.shape()[3] / model.config().ps));
  ag::Var<T> px = model.forward_masked(x, m);
  ag::Var<T> pxa = model.forward_masked(x_a, m);
  ag::Var<T> first = distance(px, x, kind);
  ag::Var<T> second = distance(px, pxa, kind);
  return ag::add(first, ag::mul_scalar(second, static_cast<T>(1.0 / lambda)));
}

// D(P(x), x) + D(f(x), f(x_a)) / lambda, latent term on encoder tokens
template <typename T>
ag::Var<T> trades_latent_loss_g(const Purifier<T>& model, ag::Var<T> x_a,
                                ag::Var<T> x, double lambda,
                                DistanceKind kind) {
  check(lambda > 0.0, "trades loss: lambda must be > 0");
  MaskSpec m = full_mask(x.shape()[0], (x.shape()[2] / model.config().ps) *
                                           (x.shape()[3] / model.config().ps));
  ag::Var<T> zx = model.encode_visible(x, m);
  ag::Var<T> zxa = model.encode_visible(x_a, m);
  ag::Var<T> px = model.decode_full(zx, m, x.shape()[2] / model.config().ps,
                                    x.shape()[3] / model.config().ps);
  ag::Var<T> first = distance(px, x, kind);
  ag::Var<T> second = distance(zx, zxa, kind);
  return ag::add(first, ag::mul_scalar(second, static_cast<T>(1.0 / lambda)));
}

// --------------------------------------------------- scalar conveniences ---

template <typename T>
LossBreakdown mae_recon_loss(const Purifier<T>& model, const Tensor<T>& x_in,
                             const Tensor<T>& x_target, const MaskSpec& m,
                             DistanceKind kind) {
  ag::NoGradGuard ng;
  return to_breakdown(
      mae_recon_loss_g(model, ag::Var<T>(x_in), ag::Var<T>(x_target), m, kind));
}

template <typename T>
T masked_purify_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                     const Tensor<T>& x, const MaskSpec& m, DistanceKind kind) {
  ag::NoGradGuard ng;
  return masked_purify_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), m, kind)
      .item();
}

template <typename T>
LossBreakdown maep_total_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                              const Tensor<T>& x, const MaskSpec& m,
                              DistanceKind kind) {
  ag::NoGradGuard ng;
  return to_breakdown(
      maep_total_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), m, kind));
}

template <typename T>
T disco_purify_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                    const Tensor<T>& x) {
  ag::NoGradGuard ng;
  return disco_purify_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x)).item();
}

template <typename T>
T mlm_finetune_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                    const Tensor<T>& x, DistanceKind kind) {
  ag::NoGradGuard ng;
  return mlm_finetune_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), kind).item();
}

template <typename T>
T recon_baseline_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                      const Tensor<T>& x, DistanceKind kind) {
  ag::NoGradGuard ng;
  return recon_baseline_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), kind)
      .item();
}

template <typename T>
T trades_pixel_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                    const Tensor<T>& x, double lambda, DistanceKind kind) {
  ag::NoGradGuard ng;
  return trades_pixel_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), lambda, kind)
      .item();
}

template <typename T>
T trades_latent_loss(const Purifier<T>& model, const Tensor<T>& x_a,
                     const Tensor<T>& x, double lambda, DistanceKind kind) {
  ag::NoGradGuard ng;
  return trades_latent_loss_g(model, ag::Var<T>(x_a), ag::Var<T>(x), lambda,
                              kind)
      .item();
}

}  // namespace maep
