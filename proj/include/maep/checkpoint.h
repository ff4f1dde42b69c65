#pragma once

// Named-tensor container with a flat string metadata record. One format backs
// model checkpoints, classifier checkpoints, training state and cached
// adversarial pair shards. Round-trips are bit-exact.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "maep/classifiers.h"
#include "maep/purifier.h"
#include "maep/tensor.h"

namespace maep {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

struct TensorEntry {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<unsigned char> bytes;
};

class Container {
 public:
  std::map<std::string, std::string> meta;

  void add(const std::string& name, const Tensor<float>& t);
  void add(const std::string& name, const Tensor<double>& t);
  void add(const std::string& name, const Tensor<std::int64_t>& t);
  void add(const std::string& name, const Tensor<std::uint8_t>& t);

  bool has(const std::string& name) const;
  Tensor<float> get_f32(const std::string& name) const;
  Tensor<double> get_f64(const std::string& name) const;
  Tensor<std::int64_t> get_i64(const std::string& name) const;
  Tensor<std::uint8_t> get_u8(const std::string& name) const;

  const std::vector<TensorEntry>& tensors() const { return tensors_; }

  std::string meta_at(const std::string& key) const;
  std::int64_t meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;

  // atomic write: temp file in the same directory, then rename
  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  const TensorEntry& entry(const std::string& name, DType want) const;
  std::vector<TensorEntry> tensors_;
};

// ------------------------------------------------------- model checkpoints --

struct CheckpointMeta {
  double mask_ratio = 0.0;
  std::string dataset;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string loss_kind;  // "l1" or "mse"
};

void save_purifier(const Purifier<float>& model, const CheckpointMeta& meta,
                   const std::string& path);

// Rejects files whose config hash differs from `expect` when provided.
std::pair<std::shared_ptr<Purifier<float>>, CheckpointMeta> load_purifier(
    const std::string& path,
    const std::optional<PurifierConfig>& expect = std::nullopt);

void save_toy_classifier(const ToyConvClassifier<float>& c,
                         const std::string& dataset, const std::string& path);
std::shared_ptr<ToyConvClassifier<float>> load_toy_classifier(
    const std::string& path);

}  // namespace maep
