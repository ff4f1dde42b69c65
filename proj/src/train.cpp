#include "maep/train.h"

#include <chrono>
#include <cmath>

namespace maep {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::MAEP: return "maep";
    case Objective::MLM_PRETRAIN: return "mlm_pretrain";
    case Objective::MLM_FINETUNE: return "mlm_finetune";
    case Objective::DISCO_STYLE: return "disco";
    case Objective::RECON_BASELINE: return "recon";
    case Objective::TRADES_PIXEL: return "trades_pixel";
    case Objective::TRADES_LATENT: return "trades_latent";
  }
  return "?";
}

Objective objective_from_name(const std::string& s) {
  for (Objective o : {Objective::MAEP, Objective::MLM_PRETRAIN,
                      Objective::MLM_FINETUNE, Objective::DISCO_STYLE,
                      Objective::RECON_BASELINE, Objective::TRADES_PIXEL,
                      Objective::TRADES_LATENT})
    if (s == objective_name(o)) return o;
  throw ValueError("unknown objective '" + s + "'");
}

void TrainConfig::validate() const {
  check(mask_ratio >= 0.0 && mask_ratio < 1.0,
        "train: mask_ratio must be in [0,1)");
  check(epochs >= 0 && batch_size >= 1 && lr > 0.0, "train: bad budget/lr");
  check(lambda > 0.0, "train: lambda must be > 0");
  attack.validate();
  const bool masked_objective =
      objective == Objective::MAEP || objective == Objective::MLM_PRETRAIN;
  if (!masked_objective)
    check(mask_ratio == 0.0, std::string("train: objective ") +
                                 objective_name(objective) +
                                 " requires mask_ratio == 0");
  if (objective == Objective::MLM_PRETRAIN)
    check(mask_ratio > 0.0, "train: mlm_pretrain requires mask_ratio > 0");
  if (mlm_finetune_epochs > 0)
    check(objective == Objective::MLM_PRETRAIN,
          "train: mlm_finetune_epochs applies to mlm_pretrain only");
}

TrainState TrainState::fresh(const PurifierConfig& mc, const TrainConfig& tc) {
  tc.validate();
  TrainState st;
  st.cfg = tc;
  st.model = std::make_shared<Purifier<float>>(mc, tc.seed);
  AdamWConfig oc;
  oc.lr = tc.lr;
  oc.weight_decay = tc.weight_decay;
  std::vector<ag::Var<float>> params;
  for (auto& p : st.model->named_params()) params.push_back(p.var);
  st.opt = AdamW<float>(std::move(params), oc);
  return st;
}

namespace {

ag::Var<float> objective_loss(const TrainState& st, const Purifier<float>& m,
                              ag::Var<float> xa, ag::Var<float> x,
                              const MaskSpec& mask, LossBreakdown* breakdown) {
  const TrainConfig& c = st.cfg;
  switch (c.objective) {
    case Objective::MAEP: {
      LossTerms<float> t = maep_total_loss_g(m, xa, x, mask, c.kind);
      if (breakdown) *breakdown = to_breakdown(t);
      return t.total;
    }
    case Objective::MLM_PRETRAIN: {
      LossTerms<float> t = mae_recon_loss_g(m, xa, x, mask, c.kind);
      if (breakdown) *breakdown = to_breakdown(t);
      return t.total;
    }
    case Objective::MLM_FINETUNE:
      return mlm_finetune_loss_g(m, xa, x, c.kind);
    case Objective::DISCO_STYLE:
      return disco_purify_loss_g(m, xa, x);
    case Objective::RECON_BASELINE:
      return recon_baseline_loss_g(m, xa, x, c.kind);
    case Objective::TRADES_PIXEL:
      return trades_pixel_loss_g(m, xa, x, c.lambda, c.kind);
    case Objective::TRADES_LATENT:
      return trades_latent_loss_g(m, xa, x, c.lambda, c.kind);
  }
  throw ValueError("objective_loss: unreachable");
}

std::int64_t total_steps_of(const TrainState& st, std::int64_t steps_per_epoch) {
  return static_cast<std::int64_t>(st.cfg.epochs) * steps_per_epoch;
}

LossBreakdown step_impl(TrainState& st, const PairBatch& batch,
                        std::int64_t total_steps, StepRecord* rec) {
  const auto t0 = std::chrono::steady_clock::now();
  Purifier<float>& model = *st.model;
  const PurifierConfig& mc = model.config();
  const std::int64_t n =
      (batch.x.dim(2) / mc.ps) * (batch.x.dim(3) / mc.ps);
  const bool masked = st.cfg.objective == Objective::MAEP ||
                      st.cfg.objective == Objective::MLM_PRETRAIN;
  MaskSpec mask =
      masked && st.cfg.mask_ratio > 0.0
          ? sample_mask(batch.x.dim(0), n, st.cfg.mask_ratio,
                        derive_seed(st.cfg.seed,
                                    0x5000 + static_cast<std::uint64_t>(st.step)))
          : full_mask(batch.x.dim(0), n);

  LossBreakdown bd;
  ag::Var<float> xa(batch.x_a), x(batch.x);
  ag::Var<float> loss = objective_loss(st, model, xa, x, mask, &bd);
  const double loss_v = static_cast<double>(loss.item());
  if (bd.total == 0.0 && bd.purify_term == 0.0 && bd.recon_term == 0.0)
    bd.total = loss_v;  // single-term objectives
  if (!std::isfinite(loss_v)) {
    throw RuntimeFailure(
        "training diverged: non-finite loss at step " + std::to_string(st.step) +
        " (last lr " + std::to_string(scheduled_lr(st.cfg.lr, st.cfg.schedule,
                                                   st.step, total_steps,
                                                   st.cfg.warmup_steps)) +
        ", smoothed loss " + std::to_string(st.running_loss) + ")");
  }
  st.opt.zero_grad();
  loss.backward();
  const double gnorm = st.opt.clip_grad_norm(st.cfg.max_grad_norm);
  if (!std::isfinite(gnorm))
    throw RuntimeFailure("training diverged: non-finite gradient at step " +
                         std::to_string(st.step));
  const double lr = scheduled_lr(st.cfg.lr, st.cfg.schedule, st.step,
                                 total_steps, st.cfg.warmup_steps);
  st.opt.step(lr);
  st.step += 1;
  st.running_loss = st.running_loss == 0.0
                        ? bd.total
                        : 0.98 * st.running_loss + 0.02 * bd.total;
  if (rec) {
    rec->step = st.step;
    rec->loss = bd;
    rec->lr = lr;
    rec->grad_norm = gnorm;
    rec->wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t0)
                       .count();
  }
  return bd;
}

}  // namespace

LossBreakdown objective_step(TrainState& st, const PairBatch& batch) {
  return step_impl(st, batch, total_steps_of(st, 64), nullptr);
}

LossBreakdown pretrain_step(TrainState& st, const PairBatch& batch) {
  check(st.cfg.objective == Objective::MAEP,
        "pretrain_step: objective must be maep");
  return objective_step(st, batch);
}

void run_training(TrainState& st, PairProvider& pairs, const MetricsSink& sink) {
  const std::int64_t spe = std::max<std::int64_t>(
      1, pairs.size() / st.cfg.batch_size);
  const std::int64_t total = total_steps_of(st, spe);
  for (; st.epoch < st.cfg.epochs; ++st.epoch) {
    for (const auto& idx : pairs.epoch_batches(st.epoch, st.cfg.batch_size)) {
      StepRecord rec;
      step_impl(st, pairs.batch(idx), total, &rec);
      if (sink) sink(rec);
    }
  }
}

void finetune_lora(TrainState& st, PairProvider& pairs, const MetricsSink& sink) {
  Purifier<float>& model = *st.model;
  check(model.has_lora(), "finetune: attach adapters first");
  for (const auto& p : model.base_params())
    check(!p.var.requires_grad(),
          "finetune: base tensor '" + p.name + "' is trainable; refuse to run");
  std::vector<ag::Var<float>> params;
  for (auto& p : model.lora_params()) params.push_back(p.var);
  AdamWConfig oc;
  oc.lr = st.cfg.lora.lr;
  oc.weight_decay = 0.0;
  AdamW<float> opt(std::move(params), oc);

  const std::int64_t spe =
      std::max<std::int64_t>(1, pairs.size() / st.cfg.batch_size);
  const std::int64_t total = static_cast<std::int64_t>(st.cfg.lora.epochs) * spe;
  std::int64_t step = 0;
  for (int e = 0; e < st.cfg.lora.epochs; ++e) {
    for (const auto& idx : pairs.epoch_batches(0x70000 + e, st.cfg.batch_size)) {
      const auto t0 = std::chrono::steady_clock::now();
      PairBatch b = pairs.batch(idx);
      // r forced to 0: the masked objective degenerates to the plain
      // purification loss over the whole image
      MaskSpec m = full_mask(b.x.dim(0), model.config().n_patches());
      ag::Var<float> loss = masked_purify_loss_g(
          model, ag::Var<float>(b.x_a), ag::Var<float>(b.x), m, st.cfg.kind);
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw RuntimeFailure("finetune diverged: non-finite loss");
      opt.zero_grad();
      loss.backward();
      const double gnorm = opt.clip_grad_norm(st.cfg.max_grad_norm);
      const double lr = scheduled_lr(st.cfg.lora.lr, LrSchedule::COSINE, step,
                                     total, /*warmup=*/0);
      opt.step(lr);
      ++step;
      if (sink) {
        StepRecord rec;
        rec.step = step;
        rec.loss.total = lv;
        rec.loss.purify_term = lv;
        rec.lr = lr;
        rec.grad_norm = gnorm;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        sink(rec);
      }
    }
  }
}

std::shared_ptr<Purifier<float>> train_objective(const PurifierConfig& mc,
                                                 const TrainConfig& tc,
                                                 PairProvider& pairs,
                                                 const std::string& out_path,
                                                 const MetricsSink& sink) {
  tc.validate();
  TrainState st = TrainState::fresh(mc, tc);
  run_training(st, pairs, sink);
  if (tc.objective == Objective::MLM_PRETRAIN && tc.mlm_finetune_epochs > 0) {
    TrainConfig ft = tc;
    ft.objective = Objective::MLM_FINETUNE;
    ft.mask_ratio = 0.0;
    ft.epochs = tc.mlm_finetune_epochs;
    ft.mlm_finetune_epochs = 0;
    TrainState st2;
    st2.cfg = ft;
    st2.model = st.model;
    AdamWConfig oc;
    oc.lr = ft.lr;
    oc.weight_decay = ft.weight_decay;
    std::vector<ag::Var<float>> params;
    for (auto& p : st2.model->named_params()) params.push_back(p.var);
    st2.opt = AdamW<float>(std::move(params), oc);
    run_training(st2, pairs, sink);
    st.step += st2.step;
  }
  if (!out_path.empty()) {
    CheckpointMeta meta;
    meta.mask_ratio = tc.mask_ratio;
    meta.dataset = "";
    meta.seed = tc.seed;
    meta.step = st.step;
    meta.loss_kind = distance_name(tc.kind);
    save_purifier(*st.model, meta, out_path);
  }
  return st.model;
}

// ------------------------------------------------------------ train state --

void save_train_state(const TrainState& st, const std::string& path) {
  Container c;
  c.meta["kind"] = "train_state";
  c.meta["step"] = std::to_string(st.step);
  c.meta["epoch"] = std::to_string(st.epoch);
  c.meta["opt_step"] = std::to_string(st.opt.step_count());
  c.meta["seed"] = std::to_string(st.cfg.seed);
  c.meta["objective"] = objective_name(st.cfg.objective);
  c.meta["mask_ratio"] = std::to_string(st.cfg.mask_ratio);
  c.meta["running_loss"] = std::to_string(st.running_loss);
  c.meta["config"] = st.model->config().fingerprint_string();
  c.meta["config_hash"] = hex64(st.model->config().fingerprint());
  for (const auto& p : st.model->named_params()) c.add(p.name, p.var.value());
  const auto& params = const_cast<TrainState&>(st).opt.params();
  auto& m = const_cast<TrainState&>(st).opt.moments_m();
  auto& v = const_cast<TrainState&>(st).opt.moments_v();
  const auto named = st.model->named_params();
  check(params.size() == named.size(), "train state: optimizer out of sync");
  for (std::size_t i = 0; i < named.size(); ++i) {
    c.add("adam.m." + named[i].name, m[i]);
    c.add("adam.v." + named[i].name, v[i]);
  }
  c.save(path);
}

TrainState load_train_state_with(const std::string& path,
                                 const PurifierConfig& mc,
                                 const TrainConfig& tc) {
  Container c = Container::load(path);
  check(c.meta_at("kind") == "train_state", "not a training state file");
  check(c.meta_at("config_hash") == hex64(mc.fingerprint()),
        "train state: config hash mismatch");
  TrainState st = TrainState::fresh(mc, tc);
  for (auto& p : st.model->named_params()) p.var.value() = c.get_f32(p.name);
  auto& m = st.opt.moments_m();
  auto& v = st.opt.moments_v();
  const auto named = st.model->named_params();
  for (std::size_t i = 0; i < named.size(); ++i) {
    m[i] = c.get_f32("adam.m." + named[i].name);
    v[i] = c.get_f32("adam.v." + named[i].name);
  }
  st.step = c.meta_int("step");
  st.epoch = c.meta_int("epoch");
  st.opt.set_step_count(c.meta_int("opt_step"));
  st.running_loss = c.meta_double("running_loss");
  return st;
}

std::uint64_t base_weight_hash(const Purifier<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.base_params()) {
    const Tensor<float>& t = p.var.value();
    h = fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float), h);
  }
  return h;
}

// -------------------------------------------------------- toy classifier ---

std::shared_ptr<ToyConvClassifier<float>> fit_toy_classifier(
    const DatasetHandle& data, const FitConfig& cfg) {
  ToyConvConfig cc;
  cc.channels = data.channels;
  cc.classes = data.n_classes;
  auto cls = std::make_shared<ToyConvClassifier<float>>(cc, cfg.seed);
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW<float> opt(cls->trainable_params(), oc);
  const std::int64_t n = data.train.size();
  const std::int64_t spe = std::max<std::int64_t>(1, n / cfg.batch_size);
  const std::int64_t total = cfg.epochs * spe;
  std::int64_t step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    auto order = shuffled_indices(
        n, derive_seed(cfg.seed, 0x100 + static_cast<std::uint64_t>(e)));
    for (std::int64_t lo = 0; lo + cfg.batch_size <= n; lo += cfg.batch_size) {
      std::vector<std::int64_t> idx(order.begin() + lo,
                                    order.begin() + lo + cfg.batch_size);
      DatasetSplit b = gather_split(data.train, idx);
      auto labels = std::make_shared<const std::vector<std::int64_t>>(b.y);
      ag::Var<float> loss =
          ag::cross_entropy(cls->logits(ag::Var<float>(b.x)), labels);
      opt.zero_grad();
      loss.backward();
      opt.step(scheduled_lr(cfg.lr, LrSchedule::COSINE, step, total, 20));
      ++step;
    }
  }
  cls->set_trainable(false);
  return cls;
}

double accuracy(const ClassifierHandle<float>& c, const DatasetSplit& split,
                std::int64_t batch) {
  const std::int64_t n = split.size();
  std::int64_t correct = 0;
  for (std::int64_t lo = 0; lo < n; lo += batch) {
    const std::int64_t hi = std::min(n, lo + batch);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = lo; i < hi; ++i) idx.push_back(i);
    DatasetSplit b = gather_split(split, idx);
    auto pred = c.predict(b.x);
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.y[i]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace maep
