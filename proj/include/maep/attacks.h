#pragma once

// White-box attack generation against a frozen classifier, optionally through
// the purifier. Attacks track the perturbation delta explicitly, so ball
// projection is exact and a single unprojected step reduces to the one-shot
// sign-gradient attack bit for bit.

#include <memory>
#include <sstream>
#include <vector>

#include "maep/classifiers.h"
#include "maep/purifier.h"

namespace maep {

enum class AttackNorm { LINF, L2 };
enum class AttackDirection { ASCEND, DESCEND };

struct AttackConfig {
  AttackNorm norm = AttackNorm::LINF;
  double epsilon = 8.0 / 255.0;
  int steps = 10;
  double step_size = 2.0 / 255.0;
  bool random_start = false;
  AttackDirection direction = AttackDirection::ASCEND;

  void validate() const {
    check(epsilon >= 0.0, "attack: epsilon must be >= 0");
    check(steps >= 1, "attack: steps must be >= 1");
    check(step_size > 0.0, "attack: step size must be > 0");
  }

  std::string fingerprint_string() const {
    std::ostringstream os;
    os << "norm=" << (norm == AttackNorm::LINF ? "linf" : "l2")
       << ";eps=" << epsilon << ";steps=" << steps << ";alpha=" << step_size
       << ";rs=" << (random_start ? 1 : 0)
       << ";dir=" << (direction == AttackDirection::ASCEND ? "asc" : "desc");
    return os.str();
  }
};

// LINF: elementwise clip to [-eps, eps]. L2: per-image rescale onto the
// sphere iff outside, tightened until the recomputed norm is within eps.
template <typename T>
Tensor<T> project_ball(const Tensor<T>& delta, AttackNorm norm, double eps) {
  check(eps >= 0.0, "project_ball: epsilon must be >= 0");
  if (norm == AttackNorm::LINF)
    return tops::clamp(delta, static_cast<T>(-eps), static_cast<T>(eps));
  check(delta.rank() >= 1, "project_ball: rank");
  Tensor<T> out = delta;
  const std::int64_t b = delta.dim(0);
  const std::int64_t per = delta.numel() / b;
  for (std::int64_t i = 0; i < b; ++i) {
    T* d = out.data() + i * per;
    const auto norm2 = [&] {
      return std::sqrt(
          kernels::table<T>().dot(d, d, static_cast<std::size_t>(per)));
    };
    const double r = norm2();
    if (r <= eps || r == 0.0) continue;
    kernels::table<T>().scale(static_cast<T>(eps / r), d, d,
                              static_cast<std::size_t>(per));
    // shave rounding excess so membership holds under recomputation
    if (norm2() > eps)
      kernels::table<T>().scale(static_cast<T>(1.0 - 4e-7), d, d,
                                static_cast<std::size_t>(per));
  }
  return out;
}

namespace detail {

// gradient of mean cross-entropy wrt the input pixels
template <typename T>
Tensor<T> input_gradient(const ClassifierHandle<T>& c, const Tensor<T>& x,
                         const std::vector<std::int64_t>& y) {
  ag::Var<T> xv(x, /*requires_grad=*/true);
  auto labels = std::make_shared<const std::vector<std::int64_t>>(y);
  ag::Var<T> loss = ag::cross_entropy(c.logits(xv), labels);
  loss.backward();
  Tensor<T> g = xv.grad();
  if (!std::isfinite(tops::asum(g)))
    throw RuntimeFailure("attack: non-finite input gradient");
  return g;
}

template <typename T>
Tensor<T> step_direction(const Tensor<T>& grad, AttackNorm norm) {
  if (norm == AttackNorm::LINF) return tops::sign(grad);
  Tensor<T> dir = grad;
  const std::int64_t b = grad.dim(0);
  const std::int64_t per = grad.numel() / b;
  for (std::int64_t i = 0; i < b; ++i) {
    T* d = dir.data() + i * per;
    const double r = std::sqrt(
        kernels::table<T>().dot(d, d, static_cast<std::size_t>(per)));
    if (r > 0.0)
      kernels::table<T>().scale(static_cast<T>(1.0 / r), d, d,
                                static_cast<std::size_t>(per));
  }
  return dir;
}

template <typename T>
Tensor<T> random_delta(const Shape& s, AttackNorm norm, double eps,
                       std::uint64_t seed) {
  Rng rng(derive_seed(seed, 31));
  if (norm == AttackNorm::LINF) {
    Tensor<T> d(s);
    for (std::int64_t i = 0; i < d.numel(); ++i)
      d[i] = static_cast<T>(rng.uniform(-eps, eps));
    return d;
  }
  // gaussian direction scaled to a radius with uniform volume density
  Tensor<T> d = Tensor<T>::randn(s, rng);
  const std::int64_t b = s[0];
  const std::int64_t per = d.numel() / b;
  for (std::int64_t i = 0; i < b; ++i) {
    T* p = d.data() + i * per;
    const double r = std::sqrt(
        kernels::table<T>().dot(p, p, static_cast<std::size_t>(per)));
    const double target =
        eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(per));
    if (r > 0.0)
      kernels::table<T>().scale(static_cast<T>(target / r), p, p,
                                static_cast<std::size_t>(per));
  }
  return project_ball(d, norm, eps);
}

}  // namespace detail

// Iterative projected attack. Returns clamp(x + delta, 0, 1) with delta kept
// inside the epsilon ball after every step.
template <typename T>
Tensor<T> pgd(const ClassifierHandle<T>& c, const Tensor<T>& x,
              const std::vector<std::int64_t>& y, const AttackConfig& cfg,
              std::uint64_t seed = 0) {
  cfg.validate();
  check(x.rank() == 4, "pgd: expected [B,C,H,W]");
  check(static_cast<std::int64_t>(y.size()) == x.dim(0), "pgd: label count");
  const T sgn = cfg.direction == AttackDirection::ASCEND ? T(1) : T(-1);
  Tensor<T> delta =
      cfg.random_start
          ? detail::random_delta<T>(x.shape(), cfg.norm, cfg.epsilon, seed)
          : Tensor<T>::zeros(x.shape());
  Tensor<T> x_cur = tops::clamp(tops::add(x, delta), T(0), T(1));
  for (int s = 0; s < cfg.steps; ++s) {
    Tensor<T> g = detail::input_gradient(c, x_cur, y);
    Tensor<T> dir = detail::step_direction(g, cfg.norm);
    tops::axpy_into(sgn * static_cast<T>(cfg.step_size), dir, delta);
    delta = project_ball(delta, cfg.norm, cfg.epsilon);
    x_cur = tops::clamp(tops::add(x, delta), T(0), T(1));
  }
  return x_cur;
}

// Single sign-gradient step of size epsilon.
template <typename T>
Tensor<T> fgsm(const ClassifierHandle<T>& c, const Tensor<T>& x,
               const std::vector<std::int64_t>& y, const AttackConfig& cfg) {
  cfg.validate();
  check(x.rank() == 4, "fgsm: expected [B,C,H,W]");
  check(static_cast<std::int64_t>(y.size()) == x.dim(0), "fgsm: label count");
  const T sgn = cfg.direction == AttackDirection::ASCEND ? T(1) : T(-1);
  Tensor<T> g = detail::input_gradient(c, x, y);
  Tensor<T> delta = Tensor<T>::zeros(x.shape());
  tops::axpy_into(sgn * static_cast<T>(cfg.epsilon), tops::sign(g), delta);
  delta = project_ball(delta, AttackNorm::LINF, cfg.epsilon);
  return tops::clamp(tops::add(x, delta), T(0), T(1));
}

// Defended system c(P(.)) as a classifier handle; gradients flow through the
// purifier forward including the output clamp.
template <typename T>
class PurifiedClassifier : public ClassifierHandle<T> {
 public:
  PurifiedClassifier(const ClassifierHandle<T>& c, const Purifier<T>& p)
      : c_(c), p_(p) {}
  ag::Var<T> logits(ag::Var<T> x) const override {
    return c_.logits(p_.purify_var(x));
  }
  std::int64_t num_classes() const override { return c_.num_classes(); }
  std::string id() const override { return c_.id() + "+purifier"; }

 private:
  const ClassifierHandle<T>& c_;
  const Purifier<T>& p_;
};

// White-box PGD through the full defense.
template <typename T>
Tensor<T> attack_through_purifier(const ClassifierHandle<T>& c,
                                  const Purifier<T>& p, const Tensor<T>& x,
                                  const std::vector<std::int64_t>& y,
                                  const AttackConfig& cfg,
                                  std::uint64_t seed = 0) {
  PurifiedClassifier<T> defended(c, p);
  return pgd(defended, x, y, cfg, seed);
}

}  // namespace maep
