#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "udvla/gradcheck.hpp"
#include "udvla/hungarian.hpp"
#include "udvla/perception.hpp"

using namespace udvla;

namespace {

Config small_config() {
  Config cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.d_q = 4;
  cfg.d_occ = 2;
  cfg.n_det = 2;
  cfg.n_map = 4;
  cfg.n_occ = 16;
  cfg.map_points = 2;
  cfg.motion_modes = 3;
  cfg.sample_points = 2;
  cfg.horizon = 2;
  cfg.grid = 8;
  return cfg;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

void zero_all(Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

void zero_attn(CrossAttnParams& a) {
  zero_all(a.w_q);
  zero_all(a.w_k);
  zero_all(a.w_v);
  zero_all(a.w_o);
}

void zero_block(DecoderBlockParams& b) {
  zero_attn(b.temporal);
  zero_attn(b.intra);
  zero_attn(b.inter);
  zero_all(b.task_emb);
  zero_all(b.deform.offset_w);
  zero_all(b.deform.offset_b);
  zero_all(b.deform.weight_w);
  zero_all(b.deform.weight_b);
  zero_all(b.deform.value_w);
  zero_all(b.deform.value_b);
  zero_all(b.heads.det_w);
  zero_all(b.heads.det_b);
  zero_all(b.heads.map_w);
  zero_all(b.heads.map_b);
  zero_all(b.heads.ego_w);
  zero_all(b.heads.ego_b);
  zero_all(b.heads.motion_w);
  zero_all(b.heads.motion_b);
}

PerceptionOutputs first_pass(const PerceptionParams& p, const Scene& scene,
                             const Config& cfg, BankState* state_out) {
  BankState state = initial_bank(p);
  PerceptionOutputs out;
  for (int b = 0; b < cfg.pre_blocks; ++b)
    state = run_decoder_block(state, p.blocks[b], scene.features, cfg, nullptr,
                              &out);
  out.occupancy = occupancy_branch(scene.features, p, cfg);
  if (state_out) *state_out = state;
  return out;
}

}  // namespace

TEST_CASE("kmeans_init wraps clustering into anchor tensors") {
  const Tensor samples = Tensor::from({4, 1}, {0, 1, 10, 11});
  const Tensor c = kmeans_init(samples, 2, 20, 0);
  REQUIRE(c.shape() == std::vector<int>{2, 1});
  const double lo = std::min(c.at(0, 0), c.at(1, 0));
  const double hi = std::max(c.at(0, 0), c.at(1, 0));
  CHECK(lo == doctest::Approx(0.5));
  CHECK(hi == doctest::Approx(10.5));
}

TEST_CASE("deformable aggregation samples the reference point") {
  Config cfg = small_config();
  Rng rng(0);
  const Scene scene = generate_scene(0, cfg);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  DeformableParams d = p.blocks[0].deform;
  zero_all(d.offset_w);
  zero_all(d.offset_b);
  zero_all(d.weight_w);
  zero_all(d.weight_b);

  // with zero offsets every sample sits on the reference point; uniform
  // softmax weights average identical samples, so the aggregate equals the
  // bilinear value at the reference in each view/level
  const auto views = world_views();
  const Tensor ref = Tensor::from({1, 2}, {10.0, 3.0});
  const Tensor feat = Tensor::from({1, cfg.d_q}, {0.1, -0.2, 0.3, 0.4});
  const Tensor out = deformable_aggregate(feat, ref, scene.features, d, cfg);
  REQUIRE(out.shape() == std::vector<int>{1, cfg.d_q});

  Tensor expected({1, kFeatureChannels});
  int n_lv = 0;
  for (std::size_t l = 0; l < scene.features.levels.size(); ++l)
    for (std::size_t v = 0; v < scene.features.levels[l].size(); ++v) {
      const Tensor& map = scene.features.levels[l][v];
      const auto g = world_to_grid(views[v], map.shape()[0], map.shape()[1],
                                   10.0, 3.0);
      const Tensor s =
          bilinear_sample(map, Tensor::from({1, 2}, {g[0], g[1]}));
      for (int ch = 0; ch < kFeatureChannels; ++ch)
        expected.at(0, ch) += s.at(0, ch);
      ++n_lv;
    }
  // uniform weights: each (level, view) contributes its sample mean = value
  const Tensor agg_expect = affine(scale(expected, 1.0 / n_lv),
                                   d.value_w, d.value_b);
  for (int j = 0; j < cfg.d_q; ++j)
    CHECK(out.at(0, j) ==
          doctest::Approx(feat.at(0, j) + agg_expect.at(0, j) * n_lv / n_lv)
              .epsilon(1e-12));

  // a reference far outside every view contributes only zeros
  const Tensor far_ref = Tensor::from({1, 2}, {-200.0, -200.0});
  const Tensor far_out =
      deformable_aggregate(feat, far_ref, scene.features, d, cfg);
  for (int j = 0; j < cfg.d_q; ++j)
    CHECK(far_out.at(0, j) ==
          doctest::Approx(feat.at(0, j) + d.value_b.at(j)).epsilon(1e-12));
}

TEST_CASE("query interaction: identity, equivariance, temporal carry") {
  Config cfg = small_config();
  cfg.n_det = 4;
  Rng rng(1);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  BankState bank = initial_bank(p);

  // zero-weight interaction leaves the bank unchanged
  DecoderBlockParams zero = p.blocks[0];
  zero_attn(zero.temporal);
  zero_attn(zero.intra);
  zero_attn(zero.inter);
  zero_all(zero.task_emb);
  const BankState same = query_interaction(bank, zero, nullptr);
  CHECK(bit_equal(same.det_feat, bank.det_feat));
  CHECK(bit_equal(same.map_feat, bank.map_feat));
  CHECK(bit_equal(same.ego_feat, bank.ego_feat));

  // temporal carry with zero temporal weights changes nothing either
  const BankState carried = query_interaction(bank, zero, &bank);
  CHECK(bit_equal(carried.det_feat, bank.det_feat));

  // permuting detection queries permutes outputs identically
  const BankState out = query_interaction(bank, p.blocks[0], nullptr);
  const std::vector<int> perm = {2, 0, 3, 1};
  BankState permuted = bank;
  Tensor pf({cfg.n_det, cfg.d_q});
  Tensor pa({cfg.n_det, 5});
  for (int i = 0; i < cfg.n_det; ++i) {
    for (int j = 0; j < cfg.d_q; ++j) pf.at(i, j) = bank.det_feat.at(perm[i], j);
    for (int j = 0; j < 5; ++j) pa.at(i, j) = bank.det_anchor.at(perm[i], j);
  }
  permuted.det_feat = pf;
  permuted.det_anchor = pa;
  const BankState out_p = query_interaction(permuted, p.blocks[0], nullptr);
  for (int i = 0; i < cfg.n_det; ++i)
    for (int j = 0; j < cfg.d_q; ++j)
      CHECK(out_p.det_feat.at(i, j) ==
            doctest::Approx(out.det_feat.at(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("task refinement is a delta on the anchors") {
  Config cfg = small_config();
  Rng rng(2);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  BankState bank = initial_bank(p);
  bank.det_anchor = Tensor::from({2, 5}, {1, 2, 2, 5, 0.1, -3, 4, 2.2, 6.0, -0.2});

  RefineHeads zero = p.blocks[0].heads;
  zero_all(zero.det_w);
  zero_all(zero.det_b);
  zero_all(zero.map_w);
  zero_all(zero.map_b);
  PerceptionOutputs out;
  const BankState next = task_refine(bank, zero, cfg, &out);

  // zero heads: decoded boxes equal anchors exactly, sizes via exp(0)=1
  for (int i = 0; i < 2; ++i) {
    CHECK(out.det_center.at(i, 0) == bank.det_anchor.at(i, 0));
    CHECK(out.det_center.at(i, 1) == bank.det_anchor.at(i, 1));
    CHECK(out.det_size.at(i, 0) == bank.det_anchor.at(i, 2));
    CHECK(out.det_size.at(i, 1) == bank.det_anchor.at(i, 3));
    CHECK(out.det_yaw.at(i, 0) == bank.det_anchor.at(i, 4));
  }
  CHECK(bit_equal(out.map_points, bank.map_anchor));

  // decoded centers become the next reference points / anchors
  const BankState moved = task_refine(bank, p.blocks[0].heads, cfg, &out);
  for (int i = 0; i < 2; ++i) {
    CHECK(moved.det_anchor.at(i, 0) == out.det_center.at(i, 0));
    CHECK(moved.det_anchor.at(i, 1) == out.det_center.at(i, 1));
  }
}

TEST_CASE("occupancy branch shape, zero-weight bias, gradients") {
  Config cfg = small_config();
  Rng rng(3);
  const Scene scene = generate_scene(1, cfg);
  PerceptionParams p = make_perception_params(cfg, {}, rng);

  const Tensor logits = occupancy_branch(scene.features, p, cfg);
  CHECK(logits.shape() == std::vector<int>{cfg.grid * cfg.grid, 1});

  PerceptionParams z = p;
  z.occ_head_w = Tensor::zeros({cfg.d_occ, 1}, true);
  z.occ_head_b = Tensor::from({1}, {0.37}, true);
  const Tensor flat = occupancy_branch(scene.features, z, cfg);
  for (int i = 0; i < flat.rows(); ++i) CHECK(flat.at(i, 0) == 0.37);

  std::vector<std::pair<std::string, Tensor>> params = {
      {"latent", p.occ_latent},   {"kv_w", p.occ_kv_w},
      {"kv_b", p.occ_kv_b},       {"attn.q", p.occ_attn.w_q},
      {"attn.k", p.occ_attn.w_k}, {"attn.v", p.occ_attn.w_v},
      {"attn.o", p.occ_attn.w_o}, {"head_w", p.occ_head_w},
      {"head_b", p.occ_head_b}};
  const auto report = finite_diff_check(
      [&]() { return mean(occupancy_branch(scene.features, p, cfg)); }, params,
      1e-5, 1e-4);
  INFO(report.worst_name, " rel ", report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("lift accounting and zero-feature bias") {
  // default config: 16 det + 8 map + 1 ego + 16 occ = 41 tokens
  Config def;
  CHECK(def.n_per() == 41);

  Config cfg = small_config();
  Rng rng(4);
  const Scene scene = generate_scene(2, cfg);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  BankState state;
  const PerceptionOutputs out = first_pass(p, scene, cfg, &state);
  const Tensor lat = occupancy_attended(scene.features, p);
  const Tensor tokens = lift_to_expert(state, out, lat, p, cfg);
  CHECK(tokens.shape() == std::vector<int>{cfg.n_per(), cfg.d});

  const Tensor again = lift_to_expert(state, out, lat, p, cfg);
  CHECK(bit_equal(tokens, again));

  // zero features and outputs: each token row is its task's lift bias
  PerceptionParams zp = p;
  zp.lift_det_b = Tensor::from({cfg.d}, std::vector<double>(cfg.d, 0.5), true);
  BankState zs = state;
  zs.det_feat = Tensor::zeros({cfg.n_det, cfg.d_q});
  PerceptionOutputs zo = out;
  zo.det_center = Tensor::zeros({cfg.n_det, 2});
  zo.det_size = Tensor::zeros({cfg.n_det, 2});
  zo.det_yaw = Tensor::zeros({cfg.n_det, 1});
  const Tensor zt = lift_to_expert(zs, zo, lat, zp, cfg);
  for (int i = 0; i < cfg.n_det; ++i)
    for (int j = 0; j < cfg.d; ++j) CHECK(zt.at(i, j) == 0.5);
}

TEST_CASE("second pass round-trips to the first pass with zero weights") {
  Config cfg = small_config();
  Rng rng(5);
  const Scene scene = generate_scene(3, cfg);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  // zero projection and a zero post block: identity round-trip
  zero_all(p.proj_det_w);
  zero_all(p.proj_det_b);
  zero_all(p.proj_map_w);
  zero_all(p.proj_map_b);
  zero_all(p.proj_ego_w);
  zero_all(p.proj_ego_b);
  zero_block(p.blocks[cfg.pre_blocks]);

  BankState state;
  const PerceptionOutputs first = first_pass(p, scene, cfg, &state);
  const Tensor lat = occupancy_attended(scene.features, p);
  const Tensor lifted = lift_to_expert(state, first, lat, p, cfg);
  const BankState fused = project_back(lifted, state, p, cfg);
  PerceptionOutputs second;
  run_decoder_block(fused, p.blocks[cfg.pre_blocks], scene.features, cfg,
                    nullptr, &second);
  CHECK(bit_equal(second.det_center, first.det_center));
  CHECK(bit_equal(second.det_size, first.det_size));
  CHECK(bit_equal(second.map_points, first.map_points));

  // misaligned projected sequence is rejected
  CHECK_THROWS_WITH_AS(project_back(slice_rows(lifted, 0, 3), state, p, cfg),
                       "perception: projected sequence misaligned",
                       std::runtime_error);
}

TEST_CASE("perception loss: empty scene, crossed assignment, capacity") {
  Config cfg = small_config();
  Rng rng(6);
  PerceptionParams p = make_perception_params(cfg, {}, rng);

  SceneOptions empty_opts;
  empty_opts.force_empty = true;
  Scene empty = generate_scene(0, cfg, empty_opts);
  BankState state;
  const PerceptionOutputs out = first_pass(p, empty, cfg, &state);
  const PerceptionLoss pl = perception_loss(out, empty, cfg);
  // no objects: detection reduces to the background confidence term
  const Tensor bg =
      bce_with_logits(out.det_conf, Tensor::zeros({cfg.n_det, 1}));
  CHECK(pl.det.item() == doctest::Approx(bg.item()).epsilon(1e-12));
  CHECK(pl.motion.item() == 0.0);
  CHECK(std::isfinite(pl.total.item()));

  // crossed 2 GT / 2 queries: assignment picks the cheaper pairing
  Scene crossed = empty;
  Agent a;
  a.x = 10;
  a.y = 0;
  a.width = 2;
  a.length = 4.5;
  a.cls = 0;
  Agent b = a;
  b.x = -5;
  b.y = 3;
  crossed.agents = {a, b};
  PerceptionOutputs manual = out;
  manual.det_center = Tensor::from({2, 2}, {-5.2, 3.1, 10.3, 0.2});
  const PerceptionLoss cl = perception_loss(manual, crossed, cfg);
  CHECK(cl.det_match == std::vector<int>{1, 0});

  // more ground-truth objects than queries is a capacity error
  Scene over = crossed;
  over.agents.assign(cfg.n_det + 1, a);
  CHECK_THROWS_WITH_AS(perception_loss(manual, over, cfg),
                       "perception: more objects than queries",
                       std::runtime_error);
}

TEST_CASE("near-perfect predictions drive the matched losses to zero") {
  Config cfg = small_config();
  Rng rng(7);
  PerceptionParams p = make_perception_params(cfg, {}, rng);
  SceneOptions opts;
  opts.force_empty = true;
  Scene scene = generate_scene(4, cfg, opts);
  Agent a;
  a.x = 8;
  a.y = 2;
  a.width = 2;
  a.length = 4.4;
  a.yaw = 0.1;
  a.vx = 2;
  a.vy = 0;
  a.cls = 1;
  scene.agents = {a};

  PerceptionOutputs out;
  out.det_center = Tensor::from({2, 2}, {8, 2, -20, -20});
  out.det_size = Tensor::from({2, 2}, {2, 4.4, 1, 1});
  out.det_yaw = Tensor::from({2, 1}, {0.1, 0});
  out.det_logits = Tensor::from({2, 3}, {-50, 50, -50, 0, 0, 0});
  out.det_conf = Tensor::from({2, 1}, {50, -50});
  out.map_points = Tensor({cfg.n_map, 2 * cfg.map_points});
  for (int q = 0; q < cfg.n_map; ++q)
    for (int i = 0; i < cfg.map_points; ++i) {
      const int lane = std::min(q, 3);
      if (q < static_cast<int>(scene.lanes.size()))
        for (int c = 0; c < 2; ++c)
          out.map_points.at(q, 2 * i + c) = scene.lanes[lane].points[i][c];
    }
  out.map_logits = Tensor({cfg.n_map, 3});
  for (int q = 0; q < cfg.n_map && q < static_cast<int>(scene.lanes.size()); ++q)
    out.map_logits.at(q, scene.lanes[q].cls) = 50.0;
  out.ego_status = Tensor::from(
      {1, 2}, {scene.ego_speed, scene.curvature * scene.ego_speed});
  out.motion_disp = Tensor({2, cfg.motion_modes * cfg.horizon * 2});
  for (int s = 0; s < cfg.horizon; ++s) {
    out.motion_disp.at(0, 2 * s) = a.vx * cfg.dt;
    out.motion_disp.at(0, 2 * s + 1) = a.vy * cfg.dt;
  }
  out.motion_logits = Tensor::from({2, 3}, {50, -50, -50, 0, 0, 0});
  out.occupancy = Tensor({cfg.grid * cfg.grid, 1});
  for (std::size_t i = 0; i < scene.occupancy.size(); ++i)
    out.occupancy.data()[i] = scene.occupancy[i] ? 50.0 : -50.0;

  const PerceptionLoss pl = perception_loss(out, scene, cfg);
  CHECK(pl.det.item() < 1e-6);
  CHECK(pl.map.item() < 1e-6);
  CHECK(pl.ego.item() < 1e-12);
  CHECK(pl.motion.item() < 1e-6);
  CHECK(pl.occ.item() < 1e-6);
}

TEST_CASE("gradients flow end to end through both passes") {
  Config cfg = small_config();
  Rng rng(8);
  const Scene scene = generate_scene(5, cfg);
  PerceptionParams p = make_perception_params(cfg, {}, rng);

  std::vector<std::pair<std::string, Tensor>> params;
  for_each_param(p, [&](const std::string& name, Tensor& t) {
    params.emplace_back(name, t);
  });

  auto loss_fn = [&]() {
    BankState state = initial_bank(p);
    PerceptionOutputs out;
    for (int b = 0; b < cfg.pre_blocks; ++b)
      state = run_decoder_block(state, p.blocks[b], scene.features, cfg,
                                nullptr, &out);
    const Tensor lat = occupancy_attended(scene.features, p);
    const Tensor lifted = lift_to_expert(state, out, lat, p, cfg);
    BankState fused = project_back(lifted, state, p, cfg);
    PerceptionOutputs second;
    for (int b = cfg.pre_blocks; b < cfg.pre_blocks + cfg.post_blocks; ++b)
      fused = run_decoder_block(fused, p.blocks[b], scene.features, cfg,
                                nullptr, &second);
    second.occupancy = occupancy_branch(scene.features, p, cfg);
    return perception_loss(second, scene, cfg).total;
  };
  const auto report = finite_diff_check(loss_fn, params, 1e-5, 1e-4);
  INFO(report.worst_name, "[", report.worst_index, "] rel ",
       report.max_rel_err);
  CHECK(report.pass);
  CHECK(report.checked > 2000);
}
