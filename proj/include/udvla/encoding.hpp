#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udvla/config.hpp"
#include "udvla/mot.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"
#include "udvla/vocab.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// Learned maps from raw scene data into the understanding and action groups.
struct EncodingParams {
  Tensor embed_table;      // [vocab x d]
  Tensor vis_w, vis_b;     // [C x d], [d]: pooled visual patch lift
  Tensor ego_w, ego_b;     // [(t_hist*2+3) x d], [d]
  Tensor act_w, act_b;     // [(2 + 2*kTimeFreqs) x d], [d]
};

inline constexpr int kTimeFreqs = 8;

EncodingParams make_encoding_params(const Config& cfg, int vocab_size, Rng& rng);
void for_each_param(EncodingParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn);

// Constant [n x d] table of absolute sinusoidal positions.
Tensor sinusoidal_positions(int n, int d);
// [1 x 2*kTimeFreqs] sinusoidal embedding of a scalar flow time (constant).
Tensor time_embedding(double t);

struct UndTokens {
  Tensor embeddings;      // [N_u x d]
  std::vector<int> ids;   // N_u entries; non-text positions carry PAD
};

// [K_vis pooled visual tokens][BOS, command, caption..., EOS, PAD...][ego token]
// with sinusoidal positions added across the whole prefix.
UndTokens encode_understanding(const Scene& scene, const Vocabulary& vocab,
                               const EncodingParams& params, const Config& cfg);

// Text-only sequence of length n_text: [BOS, words..., EOS, PAD...].
UndTokens encode_text_only(const std::string& sentence, const Vocabulary& vocab,
                           const EncodingParams& params, const Config& cfg);

// Flattened history + one-hot command through a learned affine map; the
// final understanding token.
Tensor encode_ego_and_nav(const EgoHistory& hist, int nav,
                          const EncodingParams& params, const Config& cfg);

// Next-token targets for the autoregressive loss: position i predicts the
// text token at i+1; -1 everywhere outside the text region and on PAD.
std::vector<int> next_token_targets(const std::vector<int>& ids, int text_start,
                                    int text_len, int pad_id);

struct ActionTokens {
  Tensor tokens;    // [T x d]
  Tensor x_t;       // [T x 2] interpolated state
  Tensor u_target;  // [T x 2] velocity target x1 - x0
  double t = 0;
};

// x_t = (1-t) x0 + t x1, u = x1 - x0; one token per step from an affine
// lift of (x_t step, time embedding). x1 is the (normalized) ground-truth
// velocity sequence. Throws if t is outside [0,1].
ActionTokens make_action_tokens(const Tensor& x1, const Tensor& x0, double t,
                                const EncodingParams& params);
// Convenience: draws x0 ~ N(0, I) from the supplied generator.
ActionTokens make_action_tokens(const Tensor& x1, double t, Rng& rng,
                                const EncodingParams& params);

}  // namespace udvla
