#include "udvla/mot.hpp"

#include <stdexcept>

namespace udvla {

namespace {

Tensor randn(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(shape, /*requires_grad=*/true);
  for (auto& v : t.data()) v = rng.normal() * stddev;
  return t;
}

Tensor ones_param(int n) {
  Tensor t = Tensor::full({n}, 1.0);
  t.set_requires_grad(true);
  return t;
}

Tensor zeros_param(std::vector<int> shape) {
  return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
}

Tensor ffn_forward(const Tensor& x, const MoTExpertParams& p) {
  Tensor h = gelu(affine(x, p.ffn_w1, p.ffn_b1));
  h = gelu(affine(h, p.ffn_w2, p.ffn_b2));
  return affine(h, p.ffn_w3, p.ffn_b3);
}

// H = T + LN_attn(Z W_O); O = H + LN_ffn(FFN(H))
Tensor expert_update(const Tensor& tokens, const Tensor& z,
                     const MoTExpertParams& p) {
  const Tensor h = add(
      tokens, layer_norm(matmul(z, p.w_o), p.ln_attn_gain, p.ln_attn_bias,
                         kLayerNormEps));
  return add(h, layer_norm(ffn_forward(h, p), p.ln_ffn_gain, p.ln_ffn_bias,
                           kLayerNormEps));
}

bool aliased(const MoTExpertParams& a, const MoTExpertParams& b) {
  return a.w_q.impl() == b.w_q.impl();
}

}  // namespace

MoTExpertParams make_expert_params(int d, Rng& rng) {
  MoTExpertParams p;
  const double s = 0.02;
  p.w_q = randn({d, d}, s, rng);
  p.w_k = randn({d, d}, s, rng);
  p.w_v = randn({d, d}, s, rng);
  p.w_o = randn({d, d}, s, rng);
  p.ln_attn_gain = ones_param(d);
  p.ln_attn_bias = zeros_param({d});
  p.ffn_w1 = randn({d, 4 * d}, s, rng);
  p.ffn_b1 = zeros_param({4 * d});
  p.ffn_w2 = randn({4 * d, 4 * d}, s, rng);
  p.ffn_b2 = zeros_param({4 * d});
  p.ffn_w3 = randn({4 * d, d}, s, rng);
  p.ffn_b3 = zeros_param({d});
  p.ln_ffn_gain = ones_param(d);
  p.ln_ffn_bias = zeros_param({d});
  return p;
}

MoTLayerParams make_mot_layer(int d, int heads, Rng& rng) {
  MoTLayerParams layer;
  layer.heads = heads;
  layer.und = make_expert_params(d, rng);
  layer.per = make_expert_params(d, rng);
  layer.act = make_expert_params(d, rng);
  return layer;
}

MoTStack make_mot_stack(int d, int heads, int layers, const std::string& arch,
                        Rng& rng) {
  if (arch != "mot" && arch != "shared")
    throw std::runtime_error("mot: unknown arch " + arch);
  MoTStack stack;
  for (int i = 0; i < layers; ++i) {
    if (arch == "mot") {
      stack.layers.push_back(make_mot_layer(d, heads, rng));
    } else {
      MoTLayerParams layer;
      layer.heads = heads;
      layer.und = make_expert_params(d, rng);
      layer.per = layer.und;  // aliased: same tensors, shared gradients
      layer.act = layer.und;
      stack.layers.push_back(layer);
    }
  }
  stack.ln_final_gain_und = ones_param(d);
  stack.ln_final_bias_und = zeros_param({d});
  if (arch == "mot") {
    stack.ln_final_gain_per = ones_param(d);
    stack.ln_final_bias_per = zeros_param({d});
    stack.ln_final_gain_act = ones_param(d);
    stack.ln_final_bias_act = zeros_param({d});
  } else {
    stack.ln_final_gain_per = stack.ln_final_gain_und;
    stack.ln_final_bias_per = stack.ln_final_bias_und;
    stack.ln_final_gain_act = stack.ln_final_gain_und;
    stack.ln_final_bias_act = stack.ln_final_bias_und;
  }
  return stack;
}

void for_each_param(MoTExpertParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("w_q", p.w_q);
  fn("w_k", p.w_k);
  fn("w_v", p.w_v);
  fn("w_o", p.w_o);
  fn("ln_attn_gain", p.ln_attn_gain);
  fn("ln_attn_bias", p.ln_attn_bias);
  fn("ffn_w1", p.ffn_w1);
  fn("ffn_b1", p.ffn_b1);
  fn("ffn_w2", p.ffn_w2);
  fn("ffn_b2", p.ffn_b2);
  fn("ffn_w3", p.ffn_w3);
  fn("ffn_b3", p.ffn_b3);
  fn("ln_ffn_gain", p.ln_ffn_gain);
  fn("ln_ffn_bias", p.ln_ffn_bias);
}

void for_each_param(MoTStack& s,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    MoTLayerParams& layer = s.layers[i];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    auto visit = [&](const char* expert, MoTExpertParams& p) {
      for_each_param(p, [&](const std::string& name, Tensor& t) {
        fn(prefix + expert + "." + name, t);
      });
    };
    visit("und", layer.und);
    if (!aliased(layer.per, layer.und)) visit("per", layer.per);
    if (!aliased(layer.act, layer.und) && !aliased(layer.act, layer.per))
      visit("act", layer.act);
  }
  fn("ln_final.und.gain", s.ln_final_gain_und);
  fn("ln_final.und.bias", s.ln_final_bias_und);
  if (s.ln_final_gain_per.impl() != s.ln_final_gain_und.impl()) {
    fn("ln_final.per.gain", s.ln_final_gain_per);
    fn("ln_final.per.bias", s.ln_final_bias_per);
    fn("ln_final.act.gain", s.ln_final_gain_act);
    fn("ln_final.act.bias", s.ln_final_bias_act);
  }
}

ProjectedQKV expert_project(const Tensor& tokens, const MoTExpertParams& p) {
  return {matmul(tokens, p.w_q), matmul(tokens, p.w_k), matmul(tokens, p.w_v)};
}

TokenGroups mot_layer_forward(const TokenGroups& tokens,
                              const MoTLayerParams& params,
                              const AttnMask& mask) {
  const TokenLayout layout = tokens.layout();
  if (mask.n != layout.total())
    throw std::runtime_error("mot: mask size does not match token layout");

  struct GroupRef {
    const Tensor* tokens;
    const MoTExpertParams* params;
    int count;
  };
  const GroupRef groups[3] = {{&tokens.und, &params.und, layout.n_und},
                              {&tokens.per, &params.per, layout.n_per},
                              {&tokens.act, &params.act, layout.n_act}};

  std::vector<Tensor> qs, ks, vs;
  for (const auto& g : groups) {
    if (g.count == 0) continue;
    ProjectedQKV qkv = expert_project(*g.tokens, *g.params);
    qs.push_back(qkv.q);
    ks.push_back(qkv.k);
    vs.push_back(qkv.v);
  }
  const Tensor z = multi_head_attention(concat_rows(qs), concat_rows(ks),
                                        concat_rows(vs), mask, params.heads);

  TokenGroups out = tokens;
  int offset = 0;
  Tensor* slots[3] = {&out.und, &out.per, &out.act};
  for (int g = 0; g < 3; ++g) {
    if (groups[g].count == 0) continue;
    const Tensor z_g = slice_rows(z, offset, groups[g].count);
    *slots[g] = expert_update(*groups[g].tokens, z_g, *groups[g].params);
    offset += groups[g].count;
  }
  return out;
}

TokenGroups stack_forward(const TokenGroups& tokens, const MoTStack& stack,
                          const AttnMask& mask,
                          std::vector<TokenGroups>* snapshots) {
  if (stack.layers.empty()) throw std::runtime_error("mot: empty stack");
  if (snapshots) snapshots->clear();
  TokenGroups cur = tokens;
  for (const auto& layer : stack.layers) {
    cur = mot_layer_forward(cur, layer, mask);
    if (snapshots) snapshots->push_back(cur);
  }
  const TokenLayout layout = cur.layout();
  if (layout.n_und > 0)
    cur.und = layer_norm(cur.und, stack.ln_final_gain_und,
                         stack.ln_final_bias_und, kLayerNormEps);
  if (layout.n_per > 0)
    cur.per = layer_norm(cur.per, stack.ln_final_gain_per,
                         stack.ln_final_bias_per, kLayerNormEps);
  if (layout.n_act > 0)
    cur.act = layer_norm(cur.act, stack.ln_final_gain_act,
                         stack.ln_final_bias_act, kLayerNormEps);
  return cur;
}

Tensor monolithic_layer_forward(const Tensor& tokens,
                                const MoTExpertParams& params,
                                const AttnMask& mask, int heads) {
  const ProjectedQKV qkv = expert_project(tokens, params);
  const Tensor z = multi_head_attention(qkv.q, qkv.k, qkv.v, mask, heads);
  return expert_update(tokens, z, params);
}

}  // namespace udvla
