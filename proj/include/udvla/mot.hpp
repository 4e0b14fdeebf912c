#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udvla/mask.hpp"
#include "udvla/ops.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"

namespace udvla {

inline constexpr double kLayerNormEps = 1e-5;

// Token matrices of the three groups; any group may be empty (0 x d).
struct TokenGroups {
  Tensor und, per, act;
  TokenLayout layout() const {
    return {und.defined() ? und.rows() : 0, per.defined() ? per.rows() : 0,
            act.defined() ? act.rows() : 0};
  }
};

// One expert's share of a layer: Q/K/V/O projections, the two branch
// LayerNorms, and a d -> 4d -> 4d -> d feed-forward with GELU activations.
struct MoTExpertParams {
  Tensor w_q, w_k, w_v, w_o;          // [d x d]
  Tensor ln_attn_gain, ln_attn_bias;  // [d]
  Tensor ffn_w1, ffn_b1;              // [d x 4d], [4d]
  Tensor ffn_w2, ffn_b2;              // [4d x 4d], [4d]
  Tensor ffn_w3, ffn_b3;              // [4d x d], [d]
  Tensor ln_ffn_gain, ln_ffn_bias;    // [d]
};

struct MoTLayerParams {
  MoTExpertParams und, per, act;
  int heads = 1;
};

struct MoTStack {
  std::vector<MoTLayerParams> layers;
  // final per-group LayerNorm
  Tensor ln_final_gain_und, ln_final_bias_und;
  Tensor ln_final_gain_per, ln_final_bias_per;
  Tensor ln_final_gain_act, ln_final_bias_act;
};

MoTExpertParams make_expert_params(int d, Rng& rng);
MoTLayerParams make_mot_layer(int d, int heads, Rng& rng);
// arch "mot": three independent expert parameter sets per layer.
// arch "shared": one parameter set aliased into all three expert slots, so
// the same weights (and accumulated gradients) serve every group.
MoTStack make_mot_stack(int d, int heads, int layers, const std::string& arch,
                        Rng& rng);

void for_each_param(MoTExpertParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn);
// Visits "layer{i}.{und|per|act}.{tensor}" plus the final LayerNorms. For the
// shared arch, aliased experts are visited once under the "und" slot name.
void for_each_param(MoTStack& s,
                    const std::function<void(const std::string&, Tensor&)>& fn);

// Q^g = T_g W_Q^g (and likewise K, V) for one group.
struct ProjectedQKV {
  Tensor q, k, v;
};
ProjectedQKV expert_project(const Tensor& tokens, const MoTExpertParams& p);

// One MoT layer: expert projections, concatenation in the fixed group order,
// masked joint attention, split, then per-expert output/LN/FFN residuals.
TokenGroups mot_layer_forward(const TokenGroups& tokens,
                              const MoTLayerParams& params,
                              const AttnMask& mask);

// Sequential layers plus final per-group LayerNorm. When snapshots is
// non-null it receives the post-layer token groups, one entry per layer.
TokenGroups stack_forward(const TokenGroups& tokens, const MoTStack& stack,
                          const AttnMask& mask,
                          std::vector<TokenGroups>* snapshots = nullptr);

// Oracle: a standard transformer layer with one parameter set over the
// whole concatenated sequence and an arbitrary mask.
Tensor monolithic_layer_forward(const Tensor& tokens,
                                const MoTExpertParams& params,
                                const AttnMask& mask, int heads);

}  // namespace udvla
