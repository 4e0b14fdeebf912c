#pragma once

#include <map>
#include <string>
#include <vector>

#include "udvla/model.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"

namespace udvla {

// One optimizer-visible parameter: the shared tensor handle plus its
// per-group learning-rate multiplier.
struct NamedParam {
  std::string name;
  Tensor tensor;
  double lr_mult = 1.0;
};

double global_grad_norm(const std::vector<NamedParam>& params);
// Scales every gradient by max_norm / norm when the global norm exceeds it.
void clip_global_norm(std::vector<NamedParam>& params, double max_norm);
void zero_grads(std::vector<NamedParam>& params);

// AdamW with decoupled weight decay; per-parameter state is keyed by name.
class AdamW {
 public:
  explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8, double weight_decay = 0.01);

  void step(std::vector<NamedParam>& params);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct Slot {
    std::vector<double> m, v;
    long t = 0;
  };
  std::map<std::string, Slot> slots_;
  double lr_, b1_, b2_, eps_, wd_;
};

// Low-rank adapter on one attention projection of the understanding expert:
// effective weight = W + (alpha/r) * A * B, with B zero-initialized so the
// wrapped model starts bit-identical.
struct LoraAdapter {
  std::string target;  // e.g. "mot.layer0.und.w_q"
  int layer = 0;
  int matrix = 0;  // 0..3 = w_q, w_k, w_v, w_o
  Tensor a, b;     // [d x r], [r x d]
  double scale = 0;
};

std::vector<LoraAdapter> make_lora_adapters(Model& m, int rank, double alpha,
                                            Rng& rng);
// base + scale * A * B as a differentiable composition.
Tensor lora_effective(const Tensor& base, const LoraAdapter& adapter);
// Replaces the adapted projection handles of a model copy with composed
// tensors; aliased (shared-arch) slots stay aliased.
void apply_lora(Model& view, const std::vector<LoraAdapter>& adapters);
// Writes each composition into the base weights and zeroes the adapters.
void lora_merge(Model& m, std::vector<LoraAdapter>& adapters);

// Exponential moving average over named parameter values.
struct EmaState {
  std::map<std::string, std::vector<double>> shadow;
  double decay = 0.999;
};

EmaState make_ema(std::vector<NamedParam>& params, double decay);
// shadow <- decay * shadow + (1 - decay) * params
void ema_update(EmaState& ema, std::vector<NamedParam>& params);
// Exchanges shadow and live values; calling twice restores both exactly.
void ema_swap(EmaState& ema, std::vector<NamedParam>& params);

}  // namespace udvla
