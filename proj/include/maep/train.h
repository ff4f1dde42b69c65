#pragma once

// The two-stage training protocol (masked pretraining, then decoder-only
// low-rank finetuning at full visibility) plus trainers for every baseline
// objective, with deterministic seeding, per-step metrics and resumable
// state.

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "maep/checkpoint.h"
#include "maep/data.h"
#include "maep/losses.h"
#include "maep/optim.h"

namespace maep {

enum class Objective {
  MAEP,
  MLM_PRETRAIN,
  MLM_FINETUNE,
  DISCO_STYLE,
  RECON_BASELINE,
  TRADES_PIXEL,
  TRADES_LATENT,
};

const char* objective_name(Objective o);
Objective objective_from_name(const std::string& s);

struct LoraConfig {
  int rank = 4;
  double alpha = 8.0;
  double lr = 3e-4;
  int epochs = 3;
};

struct TrainConfig {
  Objective objective = Objective::MAEP;
  double mask_ratio = 0.5;
  DistanceKind kind = DistanceKind::L1_MEAN;
  int epochs = 20;
  int mlm_finetune_epochs = 0;  // optional second stage for MLM_PRETRAIN
  std::int64_t batch_size = 32;
  double lr = 1.5e-3;
  double weight_decay = 0.01;
  std::int64_t warmup_steps = 50;
  LrSchedule schedule = LrSchedule::COSINE;
  std::uint64_t seed = 0;
  AttackConfig attack;  // training pair generation
  double lambda = 1.0;
  double max_grad_norm = 1.0;  // 0 disables clipping
  LoraConfig lora;

  void validate() const;
};

struct StepRecord {
  std::int64_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

using MetricsSink = std::function<void(const StepRecord&)>;

struct TrainState {
  std::shared_ptr<Purifier<float>> model;
  AdamW<float> opt;
  TrainConfig cfg;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double running_loss = 0.0;  // EMA of total loss

  static TrainState fresh(const PurifierConfig& mc, const TrainConfig& tc);
};

// One optimizer update with the configured objective. A fresh mask is sampled
// from the step-derived seed when the objective masks.
LossBreakdown objective_step(TrainState& st, const PairBatch& batch);

// MAEP pretraining step (asserts the objective).
LossBreakdown pretrain_step(TrainState& st, const PairBatch& batch);

// Runs cfg.epochs over the provider. Returns the final state.
void run_training(TrainState& st, PairProvider& pairs,
                  const MetricsSink& sink = nullptr);

// Decoder-only low-rank finetuning at full visibility. Adapters must already
// be attached; refuses to run if any base tensor is trainable.
void finetune_lora(TrainState& st, PairProvider& pairs,
                   const MetricsSink& sink = nullptr);

// Full objective run: fresh model, training, checkpoint written to out_path.
// For MLM_PRETRAIN with mlm_finetune_epochs > 0 the finetuning stage (full
// purification loss at r=0) follows the pretraining stage.
std::shared_ptr<Purifier<float>> train_objective(
    const PurifierConfig& mc, const TrainConfig& tc, PairProvider& pairs,
    const std::string& out_path = "", const MetricsSink& sink = nullptr);

// training-state serialization (bit-exact resume)
void save_train_state(const TrainState& st, const std::string& path);
TrainState load_train_state_with(const std::string& path,
                                 const PurifierConfig& mc,
                                 const TrainConfig& tc);

// hash of all base (non-adapter) weights, for freeze-contract checks
std::uint64_t base_weight_hash(const Purifier<float>& model);

// ----------------------------------------------------- toy classifier fit --

struct FitConfig {
  int epochs = 6;
  std::int64_t batch_size = 64;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 5;
};

std::shared_ptr<ToyConvClassifier<float>> fit_toy_classifier(
    const DatasetHandle& data, const FitConfig& cfg);

double accuracy(const ClassifierHandle<float>& c, const DatasetSplit& split,
                std::int64_t batch = 256);

}  // namespace maep
