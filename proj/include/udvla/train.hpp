#pragma once

#include <string>
#include <vector>

#include "udvla/model.hpp"
#include "udvla/optim.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// Which objective terms are active; the lambdas of the unified objective
// weight them independently.
struct LossFlags {
  bool ar = false;
  bool per = false;
  bool act = false;
  bool motion = false;  // the motion term inside the perception loss
};

struct StagePlan {
  int stage = 1;
  int epochs = 1;
  double base_lr = 2e-4;
  double lr_mult_und = 1.0;
  bool train_und = true, train_per = true, train_act = true;
  bool lora = false;
  bool ema = false;
  LossFlags losses;
};

StagePlan make_stage_plan(int stage, const Config& cfg);

struct LossBreakdown {
  Tensor total;
  double ar = 0, per = 0, act = 0, motion = 0;  // pre-lambda term values
};

// Mean loss over a batch of scenes. For scenes drawn into the general text
// slice (stage 1 mixture), pass the sentence in `general` and an empty
// scene pointer at the same position. Deterministic given step_seed, which
// drives flow time and noise draws. Throws when no term is enabled.
LossBreakdown batch_loss(Model& m, const std::vector<const Scene*>& scenes,
                         const std::vector<std::string>& general,
                         const LossFlags& flags, std::uint64_t step_seed);

struct EpochLog {
  int stage = 0, epoch = 0;
  double ar = 0, per = 0, act = 0, motion = 0, total = 0;
  double lr_und = 0, lr_per = 0, lr_act = 0;
};

std::string csv_header();
std::string csv_row(const EpochLog& log);

// Owns the optimizer, LoRA adapters, and EMA shadow across stages. Stages
// must run in order; `resume_after` marks stages already completed by a
// loaded checkpoint.
class TrainSession {
 public:
  TrainSession(Model& m, const Dataset& data, int resume_after = 0,
               std::vector<LoraAdapter> adapters = {});

  // Runs one stage over the training split and returns per-epoch logs.
  // Throws a stage-order error when called out of sequence.
  std::vector<EpochLog> run_stage(int stage);

  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  int completed_stage() const { return completed_; }

 private:
  std::vector<NamedParam> trainable_params(const StagePlan& plan);

  Model& model_;
  const Dataset& data_;
  std::vector<LoraAdapter> adapters_;
  int completed_ = 0;
};

// Stage checkpoints hold the model table plus any LoRA adapter tensors
// under a "lora." prefix.
void save_checkpoint(const std::string& path, Model& m,
                     const std::vector<LoraAdapter>& adapters);
std::vector<LoraAdapter> load_checkpoint(const std::string& path, Model& m);

// Convenience wrapper for the CLI: runs stages [first, last] in order,
// loading the preceding stage's checkpoint when resuming, and writes
// train_log.csv and stage{N}.ckpt under out_dir. Throws a stage-order
// error when the required checkpoint is missing.
void run_training(const Config& cfg, const Dataset& data, Model& m,
                  int first_stage, int last_stage, const std::string& out_dir);

}  // namespace udvla
