#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udvla/config.hpp"
#include "udvla/encoding.hpp"
#include "udvla/flow.hpp"
#include "udvla/mot.hpp"
#include "udvla/perception.hpp"
#include "udvla/vocab.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// The full three-expert model: encoders into each token group, the MoT
// stack, the sparse perception decoder wrapped around it, the language
// head over understanding outputs, and the flow velocity head.
struct Model {
  Config cfg;
  Vocabulary vocab;
  EncodingParams enc;
  MoTStack mot;
  PerceptionParams perc;
  FlowParams flow;
  Tensor lm_w, lm_b;  // [d x vocab], [vocab]
};

// bank_scenes seed the perception instance banks via clustering; pass an
// empty list for random anchors (tests).
Model make_model(const Config& cfg, const Vocabulary& vocab,
                 const std::vector<const Scene*>& bank_scenes, Rng& rng);

// Deterministic order; names are "enc.*", "mot.*", "perc.*", "flow.*",
// "lm.w", "lm.b". Aliased tensors (shared arch) are visited once.
void for_each_param(Model& m,
                    const std::function<void(const std::string&, Tensor&)>& fn);

// Parameter-group partition used for staged freezing and lr multipliers.
enum class ParamGroup { und, per, act };
ParamGroup param_group(const std::string& name);

struct ForwardOptions {
  bool with_perception = true;
  bool with_action = true;
  double flow_t = 0.0;
  std::uint64_t noise_seed = 0;
  // When set, action tokens are built directly from this [T x 2] state
  // instead of the noise/target interpolant (ODE sampling).
  const Tensor* x_t_override = nullptr;
  std::vector<TokenGroups>* snapshots = nullptr;  // per-layer probe capture
};

struct ForwardResult {
  UndTokens und;
  Tensor o_und, o_per, o_act;
  Tensor lm_logits;            // [N_u x vocab]
  BankState first_bank;        // pre-block perception state
  Tensor occ_latent;           // attended occupancy latent grid
  PerceptionOutputs perc;      // post-block (second pass) outputs
  Tensor v_hat;                // [T x 2] predicted velocity field
  Tensor u_target;             // [T x 2] flow-matching target
};

// Full joint forward over one scene. Perception runs its pre blocks, lifts
// into the perception group, and refines the MoT output through the post
// blocks; occupancy is scored from the first-pass attended latent.
ForwardResult model_forward(Model& m, const Scene& scene,
                            const ForwardOptions& opts = {});

// Mean next-token NLL over the caption region of an understanding forward.
Tensor caption_nll(const Model& m, const ForwardResult& fwd);
// Understanding-only forward (N_p = N_a = 0) on a text-only sequence.
Tensor text_nll(Model& m, const std::string& sentence);

// Euler sampling with the full model as the velocity field.
Trajectory sample_plan(Model& m, const Scene& scene, int n_euler,
                       std::uint64_t seed);

// UDVLA01 tensor-table checkpoints keyed by parameter name. Loading
// requires an exact name/shape match with the current architecture.
void save_model(const std::string& path, Model& m);
void load_model(const std::string& path, Model& m);

}  // namespace udvla
