#pragma once

// Dataset adapters and adversarial pair generation. The synthetic dataset is
// the desk-scale default: class-conditioned structured textures, separable by
// a small convnet within minutes, no downloads. CIFAR adapters read the
// standard binary files from a local root; the imagenet-val adapter reads
// preprocessed tensor shards (see README).

#include <memory>
#include <string>
#include <vector>

#include "maep/attacks.h"
#include "maep/classifiers.h"
#include "maep/tensor.h"

namespace maep {

struct DatasetSplit {
  Tensor<float> x;               // [N,C,H,W] in [0,1]
  std::vector<std::int64_t> y;   // labels

  std::int64_t size() const { return x.defined() ? x.dim(0) : 0; }
  DatasetSplit take(std::int64_t n) const;  // first n samples
};

struct DatasetHandle {
  std::string tag;
  std::int64_t channels = 3, height = 32, width = 32;
  std::int64_t n_classes = 0;
  DatasetSplit train, val, test;
};

struct SyntheticSpec {
  std::int64_t n_classes = 4;
  std::int64_t n_train = 2048;
  std::int64_t n_val = 256;
  std::int64_t n_test = 512;
  std::int64_t resolution = 32;
  double noise = 0.06;
  std::uint64_t seed = 7;
};

DatasetHandle make_synthetic(const SyntheticSpec& spec);

// tag in {synthetic, cifar10, cifar100, imagenet-val}; external tags require
// local files under root and never download.
DatasetHandle load_dataset(const std::string& tag, const std::string& root,
                           std::uint64_t seed);

// gather rows by index
DatasetSplit gather_split(const DatasetSplit& s,
                          const std::vector<std::int64_t>& idx);

std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed);

// ------------------------------------------------------ adversarial pairs --

struct PairBatch {
  Tensor<float> x, x_a;
  std::vector<std::int64_t> y;
  std::int64_t size() const { return x.defined() ? x.dim(0) : 0; }
};

// Deterministic (x, x_a, y) pairs: x_a is generated chunk-wise with seeds
// derived from (seed, chunk), so cached and on-the-fly generation produce
// bit-identical pairs. With a cache_dir, shards are persisted and verified by
// fingerprint before reuse.
class PairProvider {
 public:
  PairProvider(DatasetSplit split, std::string dataset_tag,
               const ClassifierHandle<float>& classifier, AttackConfig attack,
               std::uint64_t seed, std::string cache_dir = "",
               std::int64_t chunk = 256);

  std::int64_t size() const { return split_.size(); }
  std::uint64_t fingerprint() const { return fingerprint_; }
  const AttackConfig& attack() const { return attack_; }

  // Materializes all pairs (generating or loading shards as needed).
  const Tensor<float>& adversarial();  // [N,C,H,W]
  const DatasetSplit& clean() const { return split_; }

  PairBatch batch(const std::vector<std::int64_t>& idx);

  // batches for one epoch, shuffled deterministically by (seed, epoch)
  std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t epoch,
                                                       std::int64_t batch_size);

 private:
  void ensure_materialized();
  std::string shard_path(std::int64_t shard) const;

  DatasetSplit split_;
  const ClassifierHandle<float>& classifier_;
  AttackConfig attack_;
  std::uint64_t seed_;
  std::string cache_dir_;
  std::int64_t chunk_;
  std::uint64_t fingerprint_ = 0;
  std::string dataset_tag_;
  Tensor<float> adv_;
  bool materialized_ = false;
};

}  // namespace maep
