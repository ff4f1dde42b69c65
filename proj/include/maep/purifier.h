#pragma once

// The masked-autoencoder purifier: a transformer encoder over visible patch
// tokens and a transformer decoder over the full token grid with a learned
// mask token. Inference always runs with full visibility; masking only
// appears during training. Position tables are fixed 2-D sinusoids, so they
// can be regenerated for any grid at inference time.

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "maep/nn.h"
#include "maep/patch_ops.h"

namespace maep {

struct PurifierConfig {
  int ps = 2;
  std::int64_t channels = 3;
  std::int64_t input_h = 32;
  std::int64_t input_w = 32;
  std::int64_t d_enc = 128;
  std::int64_t d_dec = 96;
  int l_enc = 4;
  int l_dec = 2;
  int heads_enc = 4;
  int heads_dec = 4;
  std::int64_t mlp_ratio = 4;

  std::int64_t grid_h() const { return input_h / ps; }
  std::int64_t grid_w() const { return input_w / ps; }
  std::int64_t n_patches() const { return grid_h() * grid_w(); }
  std::int64_t token_dim() const {
    return static_cast<std::int64_t>(ps) * ps * channels;
  }

  void validate() const {
    check(ps >= 1, "patch size must be >= 1");
    check(input_h % ps == 0 && input_w % ps == 0,
          "input resolution must be divisible by the patch size");
    check(d_enc % heads_enc == 0, "d_enc must be divisible by heads_enc");
    check(d_dec % heads_dec == 0, "d_dec must be divisible by heads_dec");
    check(d_enc % 4 == 0 && d_dec % 4 == 0,
          "embed widths must be divisible by 4 (sinusoidal tables)");
    check(l_enc >= 1 && l_dec >= 1, "layer counts must be >= 1");
  }

  // canonical string; hashed into checkpoints to reject config mismatches
  std::string fingerprint_string() const {
    std::ostringstream os;
    os << "ps=" << ps << ";c=" << channels << ";h=" << input_h
       << ";w=" << input_w << ";de=" << d_enc << ";dd=" << d_dec
       << ";le=" << l_enc << ";ld=" << l_dec << ";he=" << heads_enc
       << ";hd=" << heads_dec << ";mr=" << mlp_ratio;
    return os.str();
  }
  std::uint64_t fingerprint() const { return fnv1a64(fingerprint_string()); }

  bool operator==(const PurifierConfig&) const = default;
};

// closed-form parameter count (base model, no adapters)
inline std::int64_t purifier_param_count(const PurifierConfig& c) {
  auto lin = [](std::int64_t in, std::int64_t out) { return in * out + out; };
  auto block = [&](std::int64_t d, std::int64_t hidden) {
    return 2 * (2 * d)                    // two layer norms
           + 4 * lin(d, d)                // q,k,v,o
           + lin(d, hidden) + lin(hidden, d);
  };
  std::int64_t n = 0;
  n += lin(c.token_dim(), c.d_enc);                       // patch embed
  n += c.l_enc * block(c.d_enc, c.d_enc * c.mlp_ratio);   // encoder blocks
  n += 2 * c.d_enc;                                       // encoder final norm
  n += lin(c.d_enc, c.d_dec);                             // decoder embed
  n += c.d_dec;                                           // mask token
  n += c.l_dec * block(c.d_dec, c.d_dec * c.mlp_ratio);   // decoder blocks
  n += 2 * c.d_dec;                                       // decoder final norm
  n += lin(c.d_dec, c.token_dim());                       // output projection
  return n;
}

template <typename T>
class Purifier {
 public:
  Purifier(PurifierConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, kInitStream));
    patch_embed_ = nn::Linear<T>(cfg_.token_dim(), cfg_.d_enc, rng);
    for (int i = 0; i < cfg_.l_enc; ++i)
      enc_blocks_.emplace_back(cfg_.d_enc, cfg_.heads_enc,
                               cfg_.d_enc * cfg_.mlp_ratio, rng);
    enc_ln_ = nn::LayerNorm<T>(cfg_.d_enc);
    dec_embed_ = nn::Linear<T>(cfg_.d_enc, cfg_.d_dec, rng);
    mask_token_ =
        ag::Var<T>(Tensor<T>::randn({cfg_.d_dec}, rng, 0.02), true);
    for (int i = 0; i < cfg_.l_dec; ++i)
      dec_blocks_.emplace_back(cfg_.d_dec, cfg_.heads_dec,
                               cfg_.d_dec * cfg_.mlp_ratio, rng);
    dec_ln_ = nn::LayerNorm<T>(cfg_.d_dec);
    out_proj_ = nn::Linear<T>(cfg_.d_dec, cfg_.token_dim(), rng);
    enc_pos_ = sincos_pos_embed_2d<T>(cfg_.grid_h(), cfg_.grid_w(), cfg_.d_enc);
    dec_pos_ = sincos_pos_embed_2d<T>(cfg_.grid_h(), cfg_.grid_w(), cfg_.d_dec);
  }

  const PurifierConfig& config() const { return cfg_; }

  // Embed and encode visible tokens only; masked patches never enter.
  ag::Var<T> encode_visible(ag::Var<T> x, const MaskSpec& m) const {
    const auto& s = x.shape();
    check_patchable(s, cfg_.ps);
    const std::int64_t gh = s[2] / cfg_.ps, gw = s[3] / cfg_.ps;
    check(m.n_patches == gh * gw && m.batch == s[0],
          "encode_visible: mask inconsistent with the image grid");
    ag::Var<T> tokens = ag_ops::patchify(x, cfg_.ps);  // [B,N,td]
    ag::Var<T> vis = ag::gather_tokens(tokens, m.keep_indices);
    ag::Var<T> z = patch_embed_.forward(vis);  // [B,K,D]
    // fixed table rows at the kept grid positions
    ag::Var<T> pos(gather_pos_rows(pos_table_enc(gh, gw), m), false);
    z = ag::add(z, pos);
    for (const auto& blk : enc_blocks_) z = blk.forward(z);
    z = enc_ln_.forward(z);
    if (!std::isfinite(tops::asum(z.value())))
      throw RuntimeFailure(
          "non-finite encoder activations (training divergence?)");
    return z;
  }

  // Scatter encoded tokens back to the grid, fill masked slots with the mask
  // token, decode every position and project to pixels. Output is unclamped.
  ag::Var<T> decode_full(ag::Var<T> latents, const MaskSpec& m,
                         std::int64_t gh = 0, std::int64_t gw = 0) const {
    if (gh == 0) gh = cfg_.grid_h();
    if (gw == 0) gw = cfg_.grid_w();
    check(m.n_patches == gh * gw,
          "decode_full: mask does not match the patch grid");
    check(latents.shape().size() == 3 && latents.shape()[1] == m.n_keep(),
          "decode_full: latents do not match the mask");
    ag::Var<T> y = dec_embed_.forward(latents);  // [B,K,Dd]
    ag::Var<T> grid =
        ag::scatter_tokens(y, m.keep_indices, m.n_patches, mask_token_);
    ag::Var<T> pos(pos_table_dec(gh, gw), false);
    grid = ag::add_rows(grid, pos);
    for (const auto& blk : dec_blocks_) grid = blk.forward(grid);
    grid = dec_ln_.forward(grid);
    ag::Var<T> pix = out_proj_.forward(grid);  // [B,N,td]
    return ag_ops::unpatchify(pix, cfg_.ps, cfg_.channels, gh, gw);
  }

  // Full train-style forward: decode(encode(x_in, m), m). Unclamped.
  ag::Var<T> forward_masked(ag::Var<T> x_in, const MaskSpec& m) const {
    const auto& s = x_in.shape();
    return decode_full(encode_visible(x_in, m), m, s[2] / cfg_.ps,
                       s[3] / cfg_.ps);
  }

  // Inference forward with full visibility, graph-recording (for white-box
  // attacks through the defense).
  ag::Var<T> purify_var(ag::Var<T> x, bool clamp_output = true) const {
    const auto& s = x.shape();
    check_patchable(s, cfg_.ps);
    MaskSpec m = full_mask(s[0], (s[2] / cfg_.ps) * (s[3] / cfg_.ps));
    ag::Var<T> y = forward_masked(x, m);
    return clamp_output ? ag::clamp(y, T(0), T(1)) : y;
  }

  // Deterministic inference entry point; output clamped to [0,1].
  Tensor<T> purify(const Tensor<T>& x) const {
    ag::NoGradGuard ng;
    return purify_var(ag::Var<T>(x)).value();
  }

  // ------------------------------------------------------------ adapters --

  void attach_lora(int rank, double alpha, std::uint64_t seed) {
    check(!has_lora_, "adapters already attached");
    Rng rng(derive_seed(seed, kLoraStream));
    dec_embed_.attach_lora(rank, alpha, rng);
    for (auto& blk : dec_blocks_) {
      blk.attn.q.attach_lora(rank, alpha, rng);
      blk.attn.k.attach_lora(rank, alpha, rng);
      blk.attn.v.attach_lora(rank, alpha, rng);
      blk.attn.o.attach_lora(rank, alpha, rng);
      blk.mlp.fc1.attach_lora(rank, alpha, rng);
      blk.mlp.fc2.attach_lora(rank, alpha, rng);
    }
    out_proj_.attach_lora(rank, alpha, rng);
    has_lora_ = true;
    lora_rank_ = rank;
    lora_alpha_ = alpha;
    // only adapter tensors are trainable from here on
    for (auto& p : base_params()) p.var.set_requires_grad(false);
    for (auto& p : lora_params()) p.var.set_requires_grad(true);
  }

  bool has_lora() const { return has_lora_; }
  int lora_rank() const { return lora_rank_; }
  double lora_alpha() const { return lora_alpha_; }

  std::int64_t lora_param_count() const {
    std::int64_t n = 0;
    for (const auto& p : lora_params()) n += p.var.numel();
    return n;
  }

  // -------------------------------------------------------------- params --

  std::vector<nn::NamedParam<T>> base_params() const {
    std::vector<nn::NamedParam<T>> out;
    collect(out, true, false);
    return out;
  }
  std::vector<nn::NamedParam<T>> lora_params() const {
    std::vector<nn::NamedParam<T>> out;
    collect(out, false, true);
    return out;
  }
  std::vector<nn::NamedParam<T>> named_params() const {
    std::vector<nn::NamedParam<T>> out;
    collect(out, true, true);
    return out;
  }

  std::vector<ag::Var<T>> trainable_params() const {
    std::vector<ag::Var<T>> out;
    for (const auto& p : named_params())
      if (p.var.requires_grad()) out.push_back(p.var);
    return out;
  }

  void set_all_trainable(bool trainable) {
    for (auto& p : named_params()) p.var.set_requires_grad(trainable);
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& p : base_params()) n += p.var.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : named_params())
      if (!p.var.value().all_finite()) return false;
    return true;
  }

  const Tensor<T>& enc_pos_table() const { return enc_pos_; }
  const Tensor<T>& dec_pos_table() const { return dec_pos_; }

 private:
  static constexpr std::uint64_t kInitStream = 11;
  static constexpr std::uint64_t kLoraStream = 12;

  Tensor<T> pos_table_enc(std::int64_t gh, std::int64_t gw) const {
    if (gh == cfg_.grid_h() && gw == cfg_.grid_w()) return enc_pos_;
    return sincos_pos_embed_2d<T>(gh, gw, cfg_.d_enc);
  }
  Tensor<T> pos_table_dec(std::int64_t gh, std::int64_t gw) const {
    if (gh == cfg_.grid_h() && gw == cfg_.grid_w()) return dec_pos_;
    return sincos_pos_embed_2d<T>(gh, gw, cfg_.d_dec);
  }

  void collect(std::vector<nn::NamedParam<T>>& out, bool base, bool lora) const {
    patch_embed_.collect("enc.patch_embed", out, base, lora);
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
      enc_blocks_[i].collect("enc.blk" + std::to_string(i), out, base, lora);
    if (base) enc_ln_.collect("enc.ln", out);
    dec_embed_.collect("dec.embed", out, base, lora);
    if (base) out.push_back({"dec.mask_token", mask_token_});
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
      dec_blocks_[i].collect("dec.blk" + std::to_string(i), out, base, lora);
    if (base) dec_ln_.collect("dec.ln", out);
    out_proj_.collect("dec.out", out, base, lora);
  }

  PurifierConfig cfg_;
  nn::Linear<T> patch_embed_;
  std::vector<nn::TransformerBlock<T>> enc_blocks_;
  nn::LayerNorm<T> enc_ln_;
  nn::Linear<T> dec_embed_;
  ag::Var<T> mask_token_;
  std::vector<nn::TransformerBlock<T>> dec_blocks_;
  nn::LayerNorm<T> dec_ln_;
  nn::Linear<T> out_proj_;
  Tensor<T> enc_pos_, dec_pos_;
  bool has_lora_ = false;
  int lora_rank_ = 0;
  double lora_alpha_ = 0.0;
};

}  // namespace maep
