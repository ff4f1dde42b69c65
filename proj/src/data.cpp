#include "maep/data.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "maep/checkpoint.h"

namespace maep {
namespace fs = std::filesystem;

DatasetSplit DatasetSplit::take(std::int64_t n) const {
  check(n >= 0 && n <= size(), "take: n out of range");
  const std::int64_t per = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = n;
  Tensor<float> out(s);
  std::memcpy(out.data(), x.data(),
              static_cast<std::size_t>(n * per) * sizeof(float));
  return {std::move(out), std::vector<std::int64_t>(y.begin(), y.begin() + n)};
}

DatasetSplit gather_split(const DatasetSplit& s,
                          const std::vector<std::int64_t>& idx) {
  const std::int64_t per = s.x.numel() / s.x.dim(0);
  Shape shape = s.x.shape();
  shape[0] = static_cast<std::int64_t>(idx.size());
  DatasetSplit out;
  out.x = Tensor<float>(shape);
  out.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(out.x.data() + static_cast<std::int64_t>(i) * per,
                s.x.data() + idx[i] * per,
                static_cast<std::size_t>(per) * sizeof(float));
    out.y[i] = s.y[static_cast<std::size_t>(idx[i])];
  }
  return out;
}

std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(
        rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

// ------------------------------------------------------------- synthetic ---

namespace {

constexpr double kTwoPi = 6.283185307179586;

void render_synthetic(float* img, std::int64_t cls, std::int64_t res,
                      std::int64_t channels, double noise, Rng& rng) {
  const double freq = rng.uniform(2.5, 4.5);
  const double phase1 = rng.uniform(0.0, kTwoPi);
  const double phase2 = rng.uniform(0.0, kTwoPi);
  const double cy = rng.uniform(0.3, 0.7), cx = rng.uniform(0.3, 0.7);
  const double sigma = rng.uniform(0.12, 0.2);
  double col[8];
  for (std::int64_t c = 0; c < channels; ++c) col[c] = rng.uniform(0.55, 1.0);
  for (std::int64_t yy = 0; yy < res; ++yy)
    for (std::int64_t xx = 0; xx < res; ++xx) {
      const double u = static_cast<double>(yy) / static_cast<double>(res);
      const double v = static_cast<double>(xx) / static_cast<double>(res);
      double t = 0.0;
      switch (cls % 4) {
        case 0: t = std::sin(kTwoPi * freq * u + phase1); break;
        case 1: t = std::sin(kTwoPi * freq * v + phase1); break;
        case 2:
          t = std::sin(kTwoPi * freq * u + phase1) *
              std::sin(kTwoPi * freq * v + phase2);
          break;
        default: {
          const double d2 = (u - cy) * (u - cy) + (v - cx) * (v - cx);
          t = 2.0 * std::exp(-d2 / (2.0 * sigma * sigma)) - 1.0;
          break;
        }
      }
      for (std::int64_t c = 0; c < channels; ++c) {
        const double val =
            0.5 + 0.4 * col[c] * t + noise * rng.uniform(-1.0, 1.0);
        img[(c * res + yy) * res + xx] =
            static_cast<float>(std::min(1.0, std::max(0.0, val)));
      }
    }
}

DatasetSplit synth_split(const SyntheticSpec& spec, std::int64_t n,
                         std::uint64_t stream) {
  const std::int64_t C = 3, res = spec.resolution;
  DatasetSplit out;
  out.x = Tensor<float>({n, C, res, res});
  out.y.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(spec.seed, stream), static_cast<std::uint64_t>(i)));
    const std::int64_t cls = i % spec.n_classes;
    out.y[static_cast<std::size_t>(i)] = cls;
    render_synthetic(out.x.data() + i * C * res * res, cls, res, C, spec.noise,
                     rng);
  }
  return out;
}

}  // namespace

DatasetHandle make_synthetic(const SyntheticSpec& spec) {
  check(spec.n_classes >= 2 && spec.n_classes <= 8,
        "synthetic: n_classes must be in [2,8]");
  check(spec.resolution >= 8, "synthetic: resolution too small");
  DatasetHandle h;
  h.tag = "synthetic";
  h.channels = 3;
  h.height = h.width = spec.resolution;
  h.n_classes = spec.n_classes;
  // disjoint streams per split
  h.train = synth_split(spec, spec.n_train, 1);
  h.val = synth_split(spec, spec.n_val, 2);
  h.test = synth_split(spec, spec.n_test, 3);
  return h;
}

// ----------------------------------------------------------------- cifar ---

namespace {

DatasetSplit read_cifar_bin(const std::vector<std::string>& files,
                            int label_bytes, int label_offset) {
  constexpr std::int64_t kImgBytes = 3072;
  std::vector<unsigned char> raw;
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    if (!is.good())
      throw ValueError(
          "dataset: missing file " + f +
          " (download the binary-version archive and unpack it under the "
          "dataset root; no automatic download)");
    raw.insert(raw.end(), std::istreambuf_iterator<char>(is),
               std::istreambuf_iterator<char>());
  }
  const std::int64_t rec = label_bytes + kImgBytes;
  check(static_cast<std::int64_t>(raw.size()) % rec == 0,
        "dataset: corrupt cifar binary (size not a record multiple)");
  const std::int64_t n = static_cast<std::int64_t>(raw.size()) / rec;
  DatasetSplit out;
  out.x = Tensor<float>({n, 3, 32, 32});
  out.y.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const unsigned char* r = raw.data() + i * rec;
    out.y[static_cast<std::size_t>(i)] = r[label_offset];
    const unsigned char* px = r + label_bytes;
    float* dst = out.x.data() + i * kImgBytes;
    for (std::int64_t j = 0; j < kImgBytes; ++j)
      dst[j] = static_cast<float>(px[j]) / 255.0f;
  }
  return out;
}

DatasetSplit split_off(DatasetSplit& from, std::int64_t n_tail) {
  const std::int64_t n = from.size() - n_tail;
  DatasetSplit head = gather_split(from, [&] {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
  }());
  DatasetSplit tail = gather_split(from, [&] {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n_tail));
    for (std::int64_t i = 0; i < n_tail; ++i)
      idx[static_cast<std::size_t>(i)] = n + i;
    return idx;
  }());
  from = std::move(head);
  return tail;
}

// imagenet-val: a directory of container shards (shard_*.bin) produced by
// offline preprocessing, each holding x [n,C,H,W] f32 in [0,1] and y [n] i64.
DatasetHandle read_shard_dir(const std::string& root) {
  std::vector<std::string> shards;
  if (fs::is_directory(root))
    for (const auto& e : fs::directory_iterator(root))
      if (e.path().filename().string().rfind("shard_", 0) == 0 &&
          e.path().extension() == ".bin")
        shards.push_back(e.path().string());
  if (shards.empty())
    throw ValueError("dataset: no shard_*.bin files under '" + root +
                     "' (preprocess images into tensor shards first; see "
                     "README, section data roots)");
  std::sort(shards.begin(), shards.end());
  std::vector<Tensor<float>> xs;
  std::vector<std::int64_t> ys;
  std::int64_t classes = 0;
  for (const auto& s : shards) {
    Container c = Container::load(s);
    xs.push_back(c.get_f32("x"));
    Tensor<std::int64_t> y = c.get_i64("y");
    for (std::int64_t i = 0; i < y.numel(); ++i) ys.push_back(y[i]);
    classes = std::max(classes, c.meta_int("n_classes"));
  }
  std::int64_t total = 0;
  for (const auto& t : xs) total += t.dim(0);
  Shape s = xs[0].shape();
  const std::int64_t per = xs[0].numel() / xs[0].dim(0);
  s[0] = total;
  DatasetHandle h;
  h.tag = "imagenet-val";
  h.channels = xs[0].dim(1);
  h.height = xs[0].dim(2);
  h.width = xs[0].dim(3);
  h.n_classes = classes;
  h.test.x = Tensor<float>(s);
  std::int64_t off = 0;
  for (const auto& t : xs) {
    std::memcpy(h.test.x.data() + off * per, t.data(),
                static_cast<std::size_t>(t.numel()) * sizeof(float));
    off += t.dim(0);
  }
  h.test.y = std::move(ys);
  return h;
}

}  // namespace

DatasetHandle load_dataset(const std::string& tag, const std::string& root,
                           std::uint64_t seed) {
  if (tag == "synthetic") {
    SyntheticSpec spec;
    spec.seed = seed;
    return make_synthetic(spec);
  }
  if (tag == "cifar10") {
    const std::string d = root + "/cifar-10-batches-bin/";
    DatasetHandle h;
    h.tag = tag;
    h.n_classes = 10;
    h.train = read_cifar_bin({d + "data_batch_1.bin", d + "data_batch_2.bin",
                              d + "data_batch_3.bin", d + "data_batch_4.bin",
                              d + "data_batch_5.bin"},
                             1, 0);
    h.val = split_off(h.train, 2000);
    h.test = read_cifar_bin({d + "test_batch.bin"}, 1, 0);
    return h;
  }
  if (tag == "cifar100") {
    const std::string d = root + "/cifar-100-binary/";
    DatasetHandle h;
    h.tag = tag;
    h.n_classes = 100;
    h.train = read_cifar_bin({d + "train.bin"}, 2, 1);  // fine label
    h.val = split_off(h.train, 2000);
    h.test = read_cifar_bin({d + "test.bin"}, 2, 1);
    return h;
  }
  if (tag == "imagenet-val") return read_shard_dir(root);
  throw ValueError("dataset: unknown tag '" + tag +
                   "' (expected synthetic, cifar10, cifar100, imagenet-val)");
}

// ------------------------------------------------------------------ pairs --

PairProvider::PairProvider(DatasetSplit split, std::string dataset_tag,
                           const ClassifierHandle<float>& classifier,
                           AttackConfig attack, std::uint64_t seed,
                           std::string cache_dir, std::int64_t chunk)
    : split_(std::move(split)),
      classifier_(classifier),
      attack_(attack),
      seed_(seed),
      cache_dir_(std::move(cache_dir)),
      chunk_(chunk),
      dataset_tag_(std::move(dataset_tag)) {
  attack_.validate();
  check(chunk_ >= 1, "pair provider: chunk must be >= 1");
  std::string fp = attack_.fingerprint_string() + "|" + classifier_.id() + "|" +
                   dataset_tag_ + "|n=" + std::to_string(split_.size()) +
                   "|seed=" + std::to_string(seed_) +
                   "|chunk=" + std::to_string(chunk_);
  fingerprint_ = fnv1a64(fp);
}

std::string PairProvider::shard_path(std::int64_t shard) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard_%05lld.bin",
                static_cast<long long>(shard));
  return cache_dir_ + "/pairs_" + hex64(fingerprint_) + "/" + buf;
}

void PairProvider::ensure_materialized() {
  if (materialized_) return;
  adv_ = Tensor<float>(split_.x.shape());
  const std::int64_t n = split_.size();
  const std::int64_t per = split_.x.numel() / n;
  const std::int64_t n_chunks = (n + chunk_ - 1) / chunk_;
  for (std::int64_t ci = 0; ci < n_chunks; ++ci) {
    const std::int64_t lo = ci * chunk_;
    const std::int64_t hi = std::min(n, lo + chunk_);
    const std::int64_t cnt = hi - lo;
    bool loaded = false;
    if (!cache_dir_.empty() && fs::exists(shard_path(ci))) {
      Container c = Container::load(shard_path(ci));
      if (c.meta_at("fingerprint") != hex64(fingerprint_))
        throw ValueError("pair cache: fingerprint mismatch in " +
                         shard_path(ci) + " (stale cache; delete it)");
      Tensor<float> xa = c.get_f32("x_a");
      check(xa.dim(0) == cnt, "pair cache: shard size mismatch");
      std::memcpy(adv_.data() + lo * per, xa.data(),
                  static_cast<std::size_t>(cnt * per) * sizeof(float));
      loaded = true;
    }
    if (!loaded) {
      // chunk tensors
      Shape s = split_.x.shape();
      s[0] = cnt;
      Tensor<float> x(s);
      std::memcpy(x.data(), split_.x.data() + lo * per,
                  static_cast<std::size_t>(cnt * per) * sizeof(float));
      std::vector<std::int64_t> y(split_.y.begin() + lo, split_.y.begin() + hi);
      Tensor<float> xa =
          attack_.epsilon == 0.0
              ? x
              : pgd(classifier_, x, y, attack_,
                    derive_seed(seed_, static_cast<std::uint64_t>(ci)));
      std::memcpy(adv_.data() + lo * per, xa.data(),
                  static_cast<std::size_t>(cnt * per) * sizeof(float));
      if (!cache_dir_.empty()) {
        Container c;
        c.meta["fingerprint"] = hex64(fingerprint_);
        c.meta["chunk"] = std::to_string(ci);
        c.meta["first_index"] = std::to_string(lo);
        c.meta["attack"] = attack_.fingerprint_string();
        c.meta["classifier"] = classifier_.id();
        c.meta["dataset"] = dataset_tag_;
        Tensor<std::int64_t> yt({cnt});
        for (std::int64_t i = 0; i < cnt; ++i) yt[i] = y[static_cast<std::size_t>(i)];
        c.add("x", x);
        c.add("x_a", xa);
        c.add("y", yt);
        c.save(shard_path(ci));
      }
    }
  }
  materialized_ = true;
}

const Tensor<float>& PairProvider::adversarial() {
  ensure_materialized();
  return adv_;
}

PairBatch PairProvider::batch(const std::vector<std::int64_t>& idx) {
  ensure_materialized();
  const std::int64_t per = split_.x.numel() / split_.size();
  Shape s = split_.x.shape();
  s[0] = static_cast<std::int64_t>(idx.size());
  PairBatch out;
  out.x = Tensor<float>(s);
  out.x_a = Tensor<float>(s);
  out.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(out.x.data() + static_cast<std::int64_t>(i) * per,
                split_.x.data() + idx[i] * per,
                static_cast<std::size_t>(per) * sizeof(float));
    std::memcpy(out.x_a.data() + static_cast<std::int64_t>(i) * per,
                adv_.data() + idx[i] * per,
                static_cast<std::size_t>(per) * sizeof(float));
    out.y[i] = split_.y[static_cast<std::size_t>(idx[i])];
  }
  return out;
}

std::vector<std::vector<std::int64_t>> PairProvider::epoch_batches(
    std::int64_t epoch, std::int64_t batch_size) {
  check(batch_size >= 1, "epoch_batches: batch size must be >= 1");
  auto order = shuffled_indices(
      size(), derive_seed(seed_, 0x9000 + static_cast<std::uint64_t>(epoch)));
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t lo = 0; lo + batch_size <= size(); lo += batch_size)
    out.emplace_back(order.begin() + lo, order.begin() + lo + batch_size);
  if (out.empty() && size() > 0) out.emplace_back(order);  // tiny dataset
  return out;
}

}  // namespace maep
