#pragma once

// Frozen classifier handles the attacks and the evaluation harness run
// against. Attacks operate in raw [0,1] pixel space; any input normalization
// lives inside the handle.

#include <memory>
#include <string>
#include <vector>

#include "maep/autograd.h"
#include "maep/nn.h"

namespace maep {

template <typename T>
class ClassifierHandle {
 public:
  virtual ~ClassifierHandle() = default;
  // x: [B,C,H,W] in [0,1]; returns logits [B, num_classes]
  virtual ag::Var<T> logits(ag::Var<T> x) const = 0;
  virtual std::int64_t num_classes() const = 0;
  virtual std::string id() const = 0;

  std::vector<std::int64_t> predict(const Tensor<T>& x) const {
    ag::NoGradGuard ng;
    Tensor<T> z = logits(ag::Var<T>(x)).value();
    const std::int64_t b = z.dim(0), c = z.dim(1);
    std::vector<std::int64_t> out(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < c; ++j)
        if (z[i * c + j] > z[i * c + best]) best = j;
      out[static_cast<std::size_t>(i)] = best;
    }
    return out;
  }
};

// Plain linear softmax classifier on flattened pixels; its input gradient has
// a closed form, used as the analytic oracle for attack tests.
template <typename T>
class LinearClassifier : public ClassifierHandle<T> {
 public:
  LinearClassifier(std::int64_t in_features, std::int64_t classes, Rng& rng)
      : in_(in_features) {
    w_ = ag::Var<T>(Tensor<T>::randn({classes, in_features}, rng, 0.05), false);
    b_ = ag::Var<T>(Tensor<T>::zeros({classes}), false);
  }

  ag::Var<T> logits(ag::Var<T> x) const override {
    check(x.numel() % in_ == 0, "linear classifier: input size mismatch");
    const std::int64_t batch = x.numel() / in_;
    return ag::linear(ag::reshape(x, {batch, in_}), w_, b_);
  }
  std::int64_t num_classes() const override { return w_.shape()[0]; }
  std::string id() const override { return "linear"; }

  const Tensor<T>& weight() const { return w_.value(); }
  const Tensor<T>& bias() const { return b_.value(); }

 private:
  std::int64_t in_;
  ag::Var<T> w_, b_;
};

// Small convnet with global average pooling, so it accepts any resolution the
// pooling stack divides. Used as the frozen surrogate/eval classifier at desk
// scale.
struct ToyConvConfig {
  std::int64_t channels = 3;
  std::int64_t classes = 4;
  std::int64_t width = 24;  // first conv width, doubled per stage
  bool operator==(const ToyConvConfig&) const = default;
};

template <typename T>
class ToyConvClassifier : public ClassifierHandle<T> {
 public:
  ToyConvClassifier(ToyConvConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, 21));
    const std::int64_t c1 = cfg.width, c2 = cfg.width * 2, c3 = cfg.width * 2;
    conv1_w_ = make_conv(c1, cfg.channels, rng);
    conv1_b_ = ag::Var<T>(Tensor<T>::zeros({c1}), true);
    conv2_w_ = make_conv(c2, c1, rng);
    conv2_b_ = ag::Var<T>(Tensor<T>::zeros({c2}), true);
    conv3_w_ = make_conv(c3, c2, rng);
    conv3_b_ = ag::Var<T>(Tensor<T>::zeros({c3}), true);
    fc_w_ = ag::Var<T>(Tensor<T>::trunc_normal({cfg.classes, c3}, rng, 0.05), true);
    fc_b_ = ag::Var<T>(Tensor<T>::zeros({cfg.classes}), true);
  }

  ag::Var<T> logits(ag::Var<T> x) const override {
    ag::Var<T> h = ag::relu(ag::conv2d(x, conv1_w_, conv1_b_, 1, 1));
    h = ag::avg_pool2d(h, 2);
    h = ag::relu(ag::conv2d(h, conv2_w_, conv2_b_, 1, 1));
    h = ag::avg_pool2d(h, 2);
    h = ag::relu(ag::conv2d(h, conv3_w_, conv3_b_, 1, 1));
    h = ag::global_avg_pool(h);
    return ag::linear(h, fc_w_, fc_b_);
  }
  std::int64_t num_classes() const override { return cfg_.classes; }
  std::string id() const override {
    return "toyconv-w" + std::to_string(cfg_.width) + "-c" +
           std::to_string(cfg_.classes) + "-" + hex64(weight_hash());
  }

  const ToyConvConfig& config() const { return cfg_; }

  std::vector<nn::NamedParam<T>> named_params() const {
    return {{"conv1.w", conv1_w_}, {"conv1.b", conv1_b_},
            {"conv2.w", conv2_w_}, {"conv2.b", conv2_b_},
            {"conv3.w", conv3_w_}, {"conv3.b", conv3_b_},
            {"fc.w", fc_w_},       {"fc.b", fc_b_}};
  }

  std::vector<ag::Var<T>> trainable_params() const {
    std::vector<ag::Var<T>> out;
    for (auto& p : named_params()) out.push_back(p.var);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& p : named_params()) p.var.set_requires_grad(trainable);
  }

  std::uint64_t weight_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : named_params()) {
      const Tensor<T>& t = p.var.value();
      h = fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(T), h);
    }
    return h;
  }

 private:
  static ag::Var<T> make_conv(std::int64_t out, std::int64_t in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / (9.0 * static_cast<double>(in)));
    return ag::Var<T>(Tensor<T>::randn({out, in, 3, 3}, rng, stddev), true);
  }

  ToyConvConfig cfg_;
  ag::Var<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_, conv3_w_, conv3_b_;
  ag::Var<T> fc_w_, fc_b_;
};

}  // namespace maep
