#include "udvla/model.hpp"

#include <map>
#include <stdexcept>

#include "udvla/checkpoint.hpp"
#include "udvla/ops.hpp"

namespace udvla {

Model make_model(const Config& cfg, const Vocabulary& vocab,
                 const std::vector<const Scene*>& bank_scenes, Rng& rng) {
  Model m;
  m.cfg = cfg;
  m.vocab = vocab;
  m.enc = make_encoding_params(cfg, vocab.size(), rng);
  m.mot = make_mot_stack(cfg.d, cfg.heads, cfg.layers, cfg.arch, rng);
  m.perc = make_perception_params(cfg, bank_scenes, rng);
  m.flow = make_flow_params(cfg, rng);
  m.lm_w = Tensor({cfg.d, vocab.size()}, /*requires_grad=*/true);
  for (auto& v : m.lm_w.data()) v = rng.normal() * 0.02;
  m.lm_b = Tensor::zeros({vocab.size()}, /*requires_grad=*/true);
  return m;
}

void for_each_param(Model& m,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  for_each_param(m.enc, [&](const std::string& name, Tensor& t) {
    fn("enc." + name, t);
  });
  for_each_param(m.mot, [&](const std::string& name, Tensor& t) {
    fn("mot." + name, t);
  });
  for_each_param(m.perc, [&](const std::string& name, Tensor& t) {
    fn("perc." + name, t);
  });
  for_each_param(m.flow, [&](const std::string& name, Tensor& t) {
    fn("flow." + name, t);
  });
  fn("lm.w", m.lm_w);
  fn("lm.b", m.lm_b);
}

ParamGroup param_group(const std::string& name) {
  if (name.rfind("perc.", 0) == 0) return ParamGroup::per;
  if (name.rfind("flow.", 0) == 0) return ParamGroup::act;
  if (name.rfind("enc.act", 0) == 0) return ParamGroup::act;
  if (name.rfind("mot.", 0) == 0) {
    if (name.find(".per.") != std::string::npos) return ParamGroup::per;
    if (name.find(".act.") != std::string::npos) return ParamGroup::act;
    return ParamGroup::und;
  }
  // embeddings, visual/ego lifts, and the language head belong to the
  // understanding side
  return ParamGroup::und;
}

ForwardResult model_forward(Model& m, const Scene& scene,
                            const ForwardOptions& opts) {
  const Config& cfg = m.cfg;
  ForwardResult r;
  r.und = encode_understanding(scene, m.vocab, m.enc, cfg);

  TokenGroups groups;
  groups.und = r.und.embeddings;

  PerceptionOutputs first;
  if (opts.with_perception) {
    BankState state = initial_bank(m.perc);
    for (int b = 0; b < cfg.pre_blocks; ++b)
      state = run_decoder_block(state, m.perc.blocks[b], scene.features, cfg,
                                nullptr, &first);
    r.first_bank = state;
    r.occ_latent = occupancy_attended(scene.features, m.perc);
    groups.per = lift_to_expert(state, first, r.occ_latent, m.perc, cfg);
  }

  if (opts.with_action) {
    ActionTokens act;
    if (opts.x_t_override) {
      act = make_action_tokens(*opts.x_t_override, *opts.x_t_override,
                               opts.flow_t, m.enc);
    } else {
      const Tensor x1 = velocity_target(scene.expert, cfg.velocity_scale);
      Rng noise(opts.noise_seed);
      act = make_action_tokens(x1, opts.flow_t, noise, m.enc);
    }
    groups.act = act.tokens;
    r.u_target = act.u_target;
  }

  const AttnMask mask = build_mask(groups.layout());
  const TokenGroups out = stack_forward(groups, m.mot, mask, opts.snapshots);
  r.o_und = out.und;
  r.o_per = out.per;
  r.o_act = out.act;
  r.lm_logits = affine(r.o_und, m.lm_w, m.lm_b);

  if (opts.with_perception) {
    BankState fused = project_back(r.o_per, r.first_bank, m.perc, cfg);
    for (int b = cfg.pre_blocks; b < cfg.pre_blocks + cfg.post_blocks; ++b)
      fused = run_decoder_block(fused, m.perc.blocks[b], scene.features, cfg,
                                nullptr, &r.perc);
    r.perc.occupancy = occupancy_branch(scene.features, m.perc, cfg);
  }
  if (opts.with_action) r.v_hat = velocity_head(r.o_act, m.flow, cfg.horizon);
  return r;
}

Tensor caption_nll(const Model& m, const ForwardResult& fwd) {
  const std::vector<int> targets = next_token_targets(
      fwd.und.ids, m.cfg.k_vis, m.cfg.n_text, m.vocab.pad());
  return cross_entropy_rows(fwd.lm_logits, targets);
}

Tensor text_nll(Model& m, const std::string& sentence) {
  const UndTokens tok = encode_text_only(sentence, m.vocab, m.enc, m.cfg);
  TokenGroups groups;
  groups.und = tok.embeddings;
  const AttnMask mask = build_mask(groups.layout());
  const TokenGroups out = stack_forward(groups, m.mot, mask);
  const Tensor logits = affine(out.und, m.lm_w, m.lm_b);
  const std::vector<int> targets =
      next_token_targets(tok.ids, 0, m.cfg.n_text, m.vocab.pad());
  return cross_entropy_rows(logits, targets);
}

Trajectory sample_plan(Model& m, const Scene& scene, int n_euler,
                       std::uint64_t seed) {
  auto field = [&](const Tensor& x, double t) {
    ForwardOptions opts;
    opts.flow_t = t;
    opts.x_t_override = &x;
    return model_forward(m, scene, opts).v_hat;
  };
  return sample_trajectory(field, m.cfg.horizon, m.cfg.dt, n_euler, seed,
                           m.cfg.velocity_scale);
}

void save_model(const std::string& path, Model& m) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    entries.emplace_back(name, t);
  });
  save_tensor_table(path, entries);
}

void load_model(const std::string& path, Model& m) {
  std::map<std::string, Tensor> table;
  for (auto& [name, t] : load_tensor_table(path)) table.emplace(name, t);
  std::size_t used = 0;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    auto it = table.find(name);
    if (it == table.end() || it->second.shape() != t.shape())
      throw std::runtime_error("model: checkpoint parameter mismatch: " + name);
    t.data() = it->second.data();
    ++used;
  });
  if (used != table.size())
    throw std::runtime_error("model: checkpoint parameter mismatch: extra entries");
}

}  // namespace udvla
