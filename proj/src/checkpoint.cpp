#include "maep/checkpoint.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace maep {
namespace {

constexpr char kMagic[8] = {'M', 'A', 'E', 'P', 'T', 'E', 'N', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw RuntimeFailure("checkpoint: truncated file");
  return v;
}

void write_str(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw RuntimeFailure("checkpoint: truncated string");
  return s;
}

template <typename T>
DType dtype_of();
template <>
DType dtype_of<float>() { return DType::F32; }
template <>
DType dtype_of<double>() { return DType::F64; }
template <>
DType dtype_of<std::int64_t>() { return DType::I64; }
template <>
DType dtype_of<std::uint8_t>() { return DType::U8; }

template <typename T>
TensorEntry make_entry(const std::string& name, const Tensor<T>& t) {
  TensorEntry e;
  e.name = name;
  e.dtype = dtype_of<T>();
  e.shape = t.shape();
  e.bytes.resize(static_cast<std::size_t>(t.numel()) * sizeof(T));
  std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
  return e;
}

template <typename T>
Tensor<T> entry_tensor(const TensorEntry& e) {
  Tensor<T> t(e.shape);
  check(e.bytes.size() == static_cast<std::size_t>(t.numel()) * sizeof(T),
        "checkpoint: tensor byte size mismatch for " + e.name);
  std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
  return t;
}

}  // namespace

void Container::add(const std::string& name, const Tensor<float>& t) {
  tensors_.push_back(make_entry(name, t));
}
void Container::add(const std::string& name, const Tensor<double>& t) {
  tensors_.push_back(make_entry(name, t));
}
void Container::add(const std::string& name, const Tensor<std::int64_t>& t) {
  tensors_.push_back(make_entry(name, t));
}
void Container::add(const std::string& name, const Tensor<std::uint8_t>& t) {
  tensors_.push_back(make_entry(name, t));
}

bool Container::has(const std::string& name) const {
  for (const auto& e : tensors_)
    if (e.name == name) return true;
  return false;
}

const TensorEntry& Container::entry(const std::string& name, DType want) const {
  for (const auto& e : tensors_) {
    if (e.name != name) continue;
    check(e.dtype == want, "checkpoint: dtype mismatch for tensor " + name);
    return e;
  }
  throw ValueError("checkpoint: missing tensor " + name);
}

Tensor<float> Container::get_f32(const std::string& name) const {
  return entry_tensor<float>(entry(name, DType::F32));
}
Tensor<double> Container::get_f64(const std::string& name) const {
  return entry_tensor<double>(entry(name, DType::F64));
}
Tensor<std::int64_t> Container::get_i64(const std::string& name) const {
  return entry_tensor<std::int64_t>(entry(name, DType::I64));
}
Tensor<std::uint8_t> Container::get_u8(const std::string& name) const {
  return entry_tensor<std::uint8_t>(entry(name, DType::U8));
}

std::string Container::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  check(it != meta.end(), "checkpoint: missing metadata key " + key);
  return it->second;
}
std::int64_t Container::meta_int(const std::string& key) const {
  return std::stoll(meta_at(key));
}
double Container::meta_double(const std::string& key) const {
  return std::stod(meta_at(key));
}

void Container::save(const std::string& path) const {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    check(os.good(), "checkpoint: cannot open for write: " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      write_str(os, k);
      write_str(os, v);
    }
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& e : tensors_) {
      write_str(os, e.name);
      write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
      write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
      for (auto d : e.shape) write_pod<std::int64_t>(os, d);
      write_pod<std::uint64_t>(os, e.bytes.size());
      os.write(reinterpret_cast<const char*>(e.bytes.data()),
               static_cast<std::streamsize>(e.bytes.size()));
    }
    check(os.good(), "checkpoint: write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

Container Container::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is.good()) throw ValueError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ValueError("checkpoint: bad magic in " + path);
  Container c;
  const auto n_meta = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = read_str(is);
    std::string v = read_str(is);
    c.meta.emplace(std::move(k), std::move(v));
  }
  const auto n_tensors = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorEntry e;
    e.name = read_str(is);
    e.dtype = static_cast<DType>(read_pod<std::uint8_t>(is));
    const auto rank = read_pod<std::uint8_t>(is);
    e.shape.resize(rank);
    for (auto& d : e.shape) d = read_pod<std::int64_t>(is);
    const auto nbytes = read_pod<std::uint64_t>(is);
    e.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(e.bytes.data()),
            static_cast<std::streamsize>(nbytes));
    if (!is) throw RuntimeFailure("checkpoint: truncated tensor payload");
    c.tensors_.push_back(std::move(e));
  }
  return c;
}

// --------------------------------------------------------------- purifier --

namespace {

void put_config(Container& c, const PurifierConfig& cfg) {
  c.meta["cfg.ps"] = std::to_string(cfg.ps);
  c.meta["cfg.channels"] = std::to_string(cfg.channels);
  c.meta["cfg.input_h"] = std::to_string(cfg.input_h);
  c.meta["cfg.input_w"] = std::to_string(cfg.input_w);
  c.meta["cfg.d_enc"] = std::to_string(cfg.d_enc);
  c.meta["cfg.d_dec"] = std::to_string(cfg.d_dec);
  c.meta["cfg.l_enc"] = std::to_string(cfg.l_enc);
  c.meta["cfg.l_dec"] = std::to_string(cfg.l_dec);
  c.meta["cfg.heads_enc"] = std::to_string(cfg.heads_enc);
  c.meta["cfg.heads_dec"] = std::to_string(cfg.heads_dec);
  c.meta["cfg.mlp_ratio"] = std::to_string(cfg.mlp_ratio);
  c.meta["config"] = cfg.fingerprint_string();
  c.meta["config_hash"] = hex64(cfg.fingerprint());
}

PurifierConfig get_config(const Container& c) {
  PurifierConfig cfg;
  cfg.ps = static_cast<int>(c.meta_int("cfg.ps"));
  cfg.channels = c.meta_int("cfg.channels");
  cfg.input_h = c.meta_int("cfg.input_h");
  cfg.input_w = c.meta_int("cfg.input_w");
  cfg.d_enc = c.meta_int("cfg.d_enc");
  cfg.d_dec = c.meta_int("cfg.d_dec");
  cfg.l_enc = static_cast<int>(c.meta_int("cfg.l_enc"));
  cfg.l_dec = static_cast<int>(c.meta_int("cfg.l_dec"));
  cfg.heads_enc = static_cast<int>(c.meta_int("cfg.heads_enc"));
  cfg.heads_dec = static_cast<int>(c.meta_int("cfg.heads_dec"));
  cfg.mlp_ratio = c.meta_int("cfg.mlp_ratio");
  return cfg;
}

}  // namespace

void save_purifier(const Purifier<float>& model, const CheckpointMeta& meta,
                   const std::string& path) {
  Container c;
  c.meta["kind"] = "purifier";
  put_config(c, model.config());
  c.meta["mask_ratio"] = std::to_string(meta.mask_ratio);
  c.meta["dataset"] = meta.dataset;
  c.meta["seed"] = std::to_string(meta.seed);
  c.meta["step"] = std::to_string(meta.step);
  c.meta["loss_kind"] = meta.loss_kind;
  c.meta["lora"] = model.has_lora() ? "1" : "0";
  if (model.has_lora()) {
    c.meta["lora.rank"] = std::to_string(model.lora_rank());
    c.meta["lora.alpha"] = std::to_string(model.lora_alpha());
  }
  for (const auto& p : model.named_params()) c.add(p.name, p.var.value());
  c.save(path);
}

std::pair<std::shared_ptr<Purifier<float>>, CheckpointMeta> load_purifier(
    const std::string& path, const std::optional<PurifierConfig>& expect) {
  Container c = Container::load(path);
  check(c.meta_at("kind") == "purifier",
        "checkpoint: not a purifier checkpoint: " + path);
  PurifierConfig cfg = get_config(c);
  if (expect) {
    check(cfg.fingerprint() == expect->fingerprint(),
          "checkpoint: config hash mismatch (file " + cfg.fingerprint_string() +
              " vs expected " + expect->fingerprint_string() + ")");
  }
  check(c.meta_at("config_hash") == hex64(cfg.fingerprint()),
        "checkpoint: stored config hash corrupt");
  auto model = std::make_shared<Purifier<float>>(cfg, /*seed=*/0);
  if (c.meta_at("lora") == "1")
    model->attach_lora(static_cast<int>(c.meta_int("lora.rank")),
                       c.meta_double("lora.alpha"), /*seed=*/0);
  for (auto& p : model->named_params()) {
    p.var.value() = c.get_f32(p.name);
    p.var.set_requires_grad(false);
  }
  CheckpointMeta meta;
  meta.mask_ratio = c.meta_double("mask_ratio");
  meta.dataset = c.meta_at("dataset");
  meta.seed = static_cast<std::uint64_t>(c.meta_int("seed"));
  meta.step = c.meta_int("step");
  meta.loss_kind = c.meta_at("loss_kind");
  return {model, meta};
}

void save_toy_classifier(const ToyConvClassifier<float>& cls,
                         const std::string& dataset, const std::string& path) {
  Container c;
  c.meta["kind"] = "toyconv";
  c.meta["channels"] = std::to_string(cls.config().channels);
  c.meta["classes"] = std::to_string(cls.config().classes);
  c.meta["width"] = std::to_string(cls.config().width);
  c.meta["dataset"] = dataset;
  for (const auto& p : cls.named_params()) c.add(p.name, p.var.value());
  c.save(path);
}

std::shared_ptr<ToyConvClassifier<float>> load_toy_classifier(
    const std::string& path) {
  Container c = Container::load(path);
  check(c.meta_at("kind") == "toyconv",
        "checkpoint: not a classifier checkpoint: " + path);
  ToyConvConfig cfg;
  cfg.channels = c.meta_int("channels");
  cfg.classes = c.meta_int("classes");
  cfg.width = c.meta_int("width");
  auto cls = std::make_shared<ToyConvClassifier<float>>(cfg, 0);
  for (auto& p : cls->named_params()) {
    p.var.value() = c.get_f32(p.name);
    p.var.set_requires_grad(false);
  }
  return cls;
}

}  // namespace maep
