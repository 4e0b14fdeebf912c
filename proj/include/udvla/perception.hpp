#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "udvla/config.hpp"
#include "udvla/kmeans.hpp"
#include "udvla/ops.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// Single-head attention block operating at query width; residual is added
// by the callers.
struct CrossAttnParams {
  Tensor w_q, w_k, w_v, w_o;
};

// One decoder block: temporal/intra/inter interaction, deformable
// aggregation over the feature pyramid, and per-task refinement heads.
struct DeformableParams {
  Tensor offset_w, offset_b;  // [d_q x L*V*P*2] meters
  Tensor weight_w, weight_b;  // [d_q x L*V*P]
  Tensor value_w, value_b;    // [C x d_q]
};

struct RefineHeads {
  Tensor det_w, det_b;        // [d_q x 9]: dcenter2 dlogsize2 dyaw1 class3 conf1
  Tensor map_w, map_b;        // [d_q x (2*map_points + 3)]
  Tensor ego_w, ego_b;        // [d_q x 2]: speed, yaw-rate
  Tensor motion_w, motion_b;  // [d_q x (M*T*2 + M)] on detection queries
};

struct DecoderBlockParams {
  CrossAttnParams temporal, intra, inter;
  Tensor task_emb;  // [3 x d_q] det/map/ego ids for inter-task attention
  DeformableParams deform;
  RefineHeads heads;
};

struct PerceptionParams {
  Tensor det_feat, det_anchor;  // [n_det x d_q], [n_det x 5] (cx cy w l yaw)
  Tensor map_feat, map_anchor;  // [n_map x d_q], [n_map x 2*map_points]
  Tensor ego_feat;              // [1 x d_q]
  Tensor occ_latent;            // [G*G x d_occ]
  std::vector<DecoderBlockParams> blocks;  // pre_blocks then post_blocks
  // occupancy branch
  Tensor occ_kv_w, occ_kv_b;      // [C x d_occ]
  CrossAttnParams occ_attn;       // width d_occ
  Tensor occ_head_w, occ_head_b;  // [d_occ x 1]
  // hidden-space lift (d_q + decoded vector -> d) and projection back
  Tensor lift_det_w, lift_det_b;
  Tensor lift_map_w, lift_map_b;
  Tensor lift_ego_w, lift_ego_b;
  Tensor lift_occ_w, lift_occ_b;  // [d_occ x d]
  Tensor proj_det_w, proj_det_b;  // [d x d_q]
  Tensor proj_map_w, proj_map_b;
  Tensor proj_ego_w, proj_ego_b;
};

// Mutable query-bank state threaded through decoder blocks.
struct BankState {
  Tensor det_feat, map_feat, ego_feat;
  Tensor det_anchor, map_anchor;
};

struct PerceptionOutputs {
  Tensor det_center;     // [n_det x 2]
  Tensor det_size;       // [n_det x 2]
  Tensor det_yaw;        // [n_det x 1]
  Tensor det_logits;     // [n_det x 3]
  Tensor det_conf;       // [n_det x 1] foreground logit
  Tensor map_points;     // [n_map x 2*map_points]
  Tensor map_logits;     // [n_map x 3]
  Tensor ego_status;     // [1 x 2]
  Tensor motion_disp;    // [n_det x M*T*2]
  Tensor motion_logits;  // [n_det x M]
  Tensor occupancy;      // [G*G x 1] logits
};

// Lloyd's algorithm over anchor sample rows; returns [k x a] centroids.
Tensor kmeans_init(const Tensor& samples, int k, int iters, std::uint64_t seed);

// Parameter construction. When scenes are supplied, detection and map
// anchors are K-Means centroids of the ground-truth anchor vectors;
// otherwise anchors are seeded randomly (tests).
PerceptionParams make_perception_params(const Config& cfg,
                                        const std::vector<const Scene*>& scenes,
                                        Rng& rng);
void for_each_param(PerceptionParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn);

BankState initial_bank(const PerceptionParams& p);

// x + attention(x over kv); zero weights leave x unchanged.
Tensor cross_attention(const Tensor& x, const Tensor& kv,
                       const CrossAttnParams& p);

// Temporal (optional carry), intra-task, inter-task; all residual.
BankState query_interaction(const BankState& bank,
                            const DecoderBlockParams& block,
                            const BankState* temporal_carry);

// Deformable aggregation for one task's features around reference points.
Tensor deformable_aggregate(const Tensor& features, const Tensor& ref_points,
                            const FeaturePyramid& pyramid,
                            const DeformableParams& p, const Config& cfg);

// Decodes every head against the current anchors and writes the refreshed
// anchors back into the returned state.
BankState task_refine(const BankState& bank, const RefineHeads& heads,
                      const Config& cfg, PerceptionOutputs* out);

// interaction -> per-task deformable aggregation -> refinement
BankState run_decoder_block(const BankState& bank,
                            const DecoderBlockParams& block,
                            const FeaturePyramid& pyramid, const Config& cfg,
                            const BankState* temporal_carry,
                            PerceptionOutputs* out);

// Latent grid after cross-attending to the pooled pyramid features.
Tensor occupancy_attended(const FeaturePyramid& pyramid,
                          const PerceptionParams& p);
Tensor occupancy_branch(const FeaturePyramid& pyramid,
                        const PerceptionParams& p, const Config& cfg);

// [N_p x d] in the fixed order det, map, ego, occupancy. occ_latent is the
// attended latent grid shared with occupancy_branch.
Tensor lift_to_expert(const BankState& bank, const PerceptionOutputs& outputs,
                      const Tensor& occ_latent, const PerceptionParams& p,
                      const Config& cfg);

// Inverse affine of the per-expert MoT output, residual-fused into the
// first-pass bank. Throws if o_per rows do not match the lift layout.
BankState project_back(const Tensor& o_per, const BankState& first_pass,
                       const PerceptionParams& p, const Config& cfg);

struct PerceptionLoss {
  Tensor total, det, map, ego, motion, occ;
  std::vector<int> det_match;  // query index per agent, -1 if none
};

// Hungarian-matched set losses; see module docs for per-task terms.
PerceptionLoss perception_loss(const PerceptionOutputs& outputs,
                               const Scene& scene, const Config& cfg);

}  // namespace udvla
