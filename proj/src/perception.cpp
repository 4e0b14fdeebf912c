#include "udvla/perception.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "udvla/hungarian.hpp"

namespace udvla {

namespace {

Tensor randn(std::vector<int> shape, double stddev, Rng& rng,
             bool requires_grad = true) {
  Tensor t(shape, requires_grad);
  for (auto& v : t.data()) v = rng.normal() * stddev;
  return t;
}

Tensor zeros_param(std::vector<int> shape) {
  return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
}

CrossAttnParams make_attn(int width, Rng& rng) {
  const double s = 0.02;
  return {randn({width, width}, s, rng), randn({width, width}, s, rng),
          randn({width, width}, s, rng), randn({width, width}, s, rng)};
}

// attention output without the residual
Tensor attn_branch(const Tensor& x_q, const Tensor& x_kv,
                   const CrossAttnParams& p) {
  const int width = x_q.cols();
  const Tensor q = matmul(x_q, p.w_q);
  const Tensor k = matmul(x_kv, p.w_k);
  const Tensor v = matmul(x_kv, p.w_v);
  const Tensor a =
      softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(width)));
  return matmul(matmul(a, v), p.w_o);
}

// constant matrices used as differentiable selectors
Tensor selector(const std::vector<int>& rows, int n_cols) {
  Tensor s({static_cast<int>(rows.size()), n_cols});
  for (std::size_t i = 0; i < rows.size(); ++i)
    s.at(static_cast<int>(i), rows[i]) = 1.0;
  return s;
}

Tensor repeat_rows_matrix(int n, int p) {
  Tensor r({n * p, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) r.at(i * p + j, i) = 1.0;
  return r;
}

Tensor pool_rows_matrix(int n, int p) {
  Tensor r({n, n * p});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) r.at(i, i * p + j) = 1.0;
  return r;
}

Tensor anchor_mean_point_matrix(int points) {
  Tensor m({2 * points, 2});
  for (int i = 0; i < points; ++i) {
    m.at(2 * i, 0) = 1.0 / points;
    m.at(2 * i + 1, 1) = 1.0 / points;
  }
  return m;
}

// flattened level-1 maps of both views as a constant [V*h*w x C] matrix
Tensor pooled_pyramid_rows(const FeaturePyramid& pyramid) {
  const auto& level = pyramid.levels.at(1);
  const int h = level.at(0).shape()[0];
  const int w = level.at(0).shape()[1];
  const int c = level.at(0).shape()[2];
  Tensor out({static_cast<int>(level.size()) * h * w, c});
  int row = 0;
  for (const Tensor& map : level) {
    for (int i = 0; i < h * w; ++i) {
      for (int ch = 0; ch < c; ++ch)
        out.at(row, ch) = map.data()[static_cast<std::size_t>(i) * c + ch];
      ++row;
    }
  }
  return out;
}

// 4x4 region mean pooling of the [G*G x d] latent into n_occ tokens
Tensor region_pool_matrix(int grid, int n_occ) {
  const int side = static_cast<int>(std::round(std::sqrt(double(n_occ))));
  if (side * side != n_occ || grid % side != 0)
    throw std::runtime_error("perception: n_occ must tile the latent grid");
  const int cell = grid / side;
  Tensor m({n_occ, grid * grid});
  for (int ri = 0; ri < side; ++ri)
    for (int rj = 0; rj < side; ++rj)
      for (int i = 0; i < cell; ++i)
        for (int j = 0; j < cell; ++j)
          m.at(ri * side + rj, (ri * cell + i) * grid + rj * cell + j) =
              1.0 / (cell * cell);
  return m;
}

double value_l1(const Tensor& a, std::size_t off_a, const Tensor& b,
                std::size_t off_b, std::size_t count) {
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i)
    acc += std::abs(a.data()[off_a + i] - b.data()[off_b + i]);
  return acc;
}

std::vector<double> softmax_values(const Tensor& logits, int row) {
  const int n = logits.cols();
  std::vector<double> out(n);
  double mx = -1e300;
  for (int j = 0; j < n; ++j) mx = std::max(mx, logits.at(row, j));
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += out[j] = std::exp(logits.at(row, j) - mx);
  for (double& v : out) v /= z;
  return out;
}

// symmetric mean-L1 chamfer between two flattened point lists, on values
double chamfer_value(const Tensor& a, int row_a, const Tensor& b, int row_b,
                     int points) {
  auto side = [&](const Tensor& x, int rx, const Tensor& y, int ry) {
    double acc = 0.0;
    for (int i = 0; i < points; ++i) {
      double best = 1e300;
      for (int j = 0; j < points; ++j)
        best = std::min(best, std::abs(x.at(rx, 2 * i) - y.at(ry, 2 * j)) +
                                  std::abs(x.at(rx, 2 * i + 1) -
                                           y.at(ry, 2 * j + 1)));
      acc += best;
    }
    return acc / points;
  };
  return 0.5 * (side(a, row_a, b, row_b) + side(b, row_b, a, row_a));
}

}  // namespace

Tensor kmeans_init(const Tensor& samples, int k, int iters, std::uint64_t seed) {
  std::vector<std::vector<double>> points(samples.rows());
  for (int i = 0; i < samples.rows(); ++i)
    for (int j = 0; j < samples.cols(); ++j)
      points[i].push_back(samples.at(i, j));
  const KMeansResult result = kmeans(points, k, iters, seed);
  Tensor out({k, samples.cols()});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < samples.cols(); ++j) out.at(i, j) = result.centroids[i][j];
  return out;
}

PerceptionParams make_perception_params(const Config& cfg,
                                        const std::vector<const Scene*>& scenes,
                                        Rng& rng) {
  PerceptionParams p;
  const double s = 0.02;
  const int dq = cfg.d_q;
  p.det_feat = randn({cfg.n_det, dq}, s, rng);
  p.map_feat = randn({cfg.n_map, dq}, s, rng);
  p.ego_feat = randn({1, dq}, s, rng);

  // anchors: K-Means instance banks over ground-truth vectors when a
  // dataset is available, random draws otherwise
  std::vector<double> det_rows, map_rows;
  int n_det_samples = 0, n_map_samples = 0;
  for (const Scene* scene : scenes) {
    for (const auto& a : scene->agents) {
      det_rows.insert(det_rows.end(), {a.x, a.y, a.width, a.length, a.yaw});
      ++n_det_samples;
    }
    for (const auto& line : scene->lanes) {
      if (static_cast<int>(line.points.size()) != cfg.map_points) continue;
      for (const auto& pt : line.points) {
        map_rows.push_back(pt[0]);
        map_rows.push_back(pt[1]);
      }
      ++n_map_samples;
    }
  }
  if (n_det_samples >= cfg.n_det) {
    p.det_anchor = kmeans_init(
        Tensor::from({n_det_samples, 5}, det_rows), cfg.n_det, 20, cfg.seed);
    p.det_anchor.set_requires_grad(true);
  } else {
    p.det_anchor = Tensor({cfg.n_det, 5}, true);
    for (int i = 0; i < cfg.n_det; ++i) {
      p.det_anchor.at(i, 0) = rng.uniform(-5.0, 20.0);
      p.det_anchor.at(i, 1) = rng.uniform(-10.0, 10.0);
      p.det_anchor.at(i, 2) = 2.0;
      p.det_anchor.at(i, 3) = 4.5;
      p.det_anchor.at(i, 4) = 0.0;
    }
  }
  if (n_map_samples >= cfg.n_map) {
    p.map_anchor =
        kmeans_init(Tensor::from({n_map_samples, 2 * cfg.map_points}, map_rows),
                    cfg.n_map, 20, cfg.seed + 1);
    p.map_anchor.set_requires_grad(true);
  } else {
    p.map_anchor = Tensor({cfg.n_map, 2 * cfg.map_points}, true);
    for (int i = 0; i < cfg.n_map; ++i)
      for (int j = 0; j < cfg.map_points; ++j) {
        p.map_anchor.at(i, 2 * j) = -8.0 + 29.0 * j / (cfg.map_points - 1);
        p.map_anchor.at(i, 2 * j + 1) = rng.uniform(-8.0, 8.0);
      }
  }

  p.occ_latent = randn({cfg.grid * cfg.grid, cfg.d_occ}, s, rng);

  const int n_blocks = cfg.pre_blocks + cfg.post_blocks;
  const int lvp = 2 * 2 * cfg.sample_points;  // levels x views x P
  for (int b = 0; b < n_blocks; ++b) {
    DecoderBlockParams block;
    block.temporal = make_attn(dq, rng);
    block.intra = make_attn(dq, rng);
    block.inter = make_attn(dq, rng);
    block.task_emb = randn({3, dq}, s, rng);
    block.deform.offset_w = randn({dq, lvp * 2}, s, rng);
    block.deform.offset_b = zeros_param({lvp * 2});
    block.deform.weight_w = randn({dq, lvp}, s, rng);
    block.deform.weight_b = zeros_param({lvp});
    block.deform.value_w = randn({kFeatureChannels, dq}, s, rng);
    block.deform.value_b = zeros_param({dq});
    block.heads.det_w = randn({dq, 9}, s, rng);
    block.heads.det_b = zeros_param({9});
    block.heads.map_w = randn({dq, 2 * cfg.map_points + 3}, s, rng);
    block.heads.map_b = zeros_param({2 * cfg.map_points + 3});
    block.heads.ego_w = randn({dq, 2}, s, rng);
    block.heads.ego_b = zeros_param({2});
    const int mcols = cfg.motion_modes * (cfg.horizon * 2) + cfg.motion_modes;
    block.heads.motion_w = randn({dq, mcols}, s, rng);
    block.heads.motion_b = zeros_param({mcols});
    p.blocks.push_back(block);
  }

  p.occ_kv_w = randn({kFeatureChannels, cfg.d_occ}, s, rng);
  p.occ_kv_b = zeros_param({cfg.d_occ});
  p.occ_attn = make_attn(cfg.d_occ, rng);
  p.occ_head_w = randn({cfg.d_occ, 1}, s, rng);
  p.occ_head_b = zeros_param({1});

  p.lift_det_w = randn({dq + 5, cfg.d}, s, rng);
  p.lift_det_b = zeros_param({cfg.d});
  p.lift_map_w = randn({dq + 2 * cfg.map_points, cfg.d}, s, rng);
  p.lift_map_b = zeros_param({cfg.d});
  p.lift_ego_w = randn({dq + 2, cfg.d}, s, rng);
  p.lift_ego_b = zeros_param({cfg.d});
  p.lift_occ_w = randn({cfg.d_occ, cfg.d}, s, rng);
  p.lift_occ_b = zeros_param({cfg.d});
  p.proj_det_w = randn({cfg.d, dq}, s, rng);
  p.proj_det_b = zeros_param({dq});
  p.proj_map_w = randn({cfg.d, dq}, s, rng);
  p.proj_map_b = zeros_param({dq});
  p.proj_ego_w = randn({cfg.d, dq}, s, rng);
  p.proj_ego_b = zeros_param({dq});
  return p;
}

void for_each_param(PerceptionParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("bank.det.features", p.det_feat);
  fn("bank.det.anchors", p.det_anchor);
  fn("bank.map.features", p.map_feat);
  fn("bank.map.anchors", p.map_anchor);
  fn("bank.ego.features", p.ego_feat);
  fn("bank.occ.latent", p.occ_latent);
  auto attn = [&](const std::string& prefix, CrossAttnParams& a) {
    fn(prefix + ".w_q", a.w_q);
    fn(prefix + ".w_k", a.w_k);
    fn(prefix + ".w_v", a.w_v);
    fn(prefix + ".w_o", a.w_o);
  };
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    DecoderBlockParams& block = p.blocks[b];
    const std::string pre = "block" + std::to_string(b) + ".";
    attn(pre + "temporal", block.temporal);
    attn(pre + "intra", block.intra);
    attn(pre + "inter", block.inter);
    fn(pre + "task_emb", block.task_emb);
    fn(pre + "deform.offset_w", block.deform.offset_w);
    fn(pre + "deform.offset_b", block.deform.offset_b);
    fn(pre + "deform.weight_w", block.deform.weight_w);
    fn(pre + "deform.weight_b", block.deform.weight_b);
    fn(pre + "deform.value_w", block.deform.value_w);
    fn(pre + "deform.value_b", block.deform.value_b);
    fn(pre + "heads.det_w", block.heads.det_w);
    fn(pre + "heads.det_b", block.heads.det_b);
    fn(pre + "heads.map_w", block.heads.map_w);
    fn(pre + "heads.map_b", block.heads.map_b);
    fn(pre + "heads.ego_w", block.heads.ego_w);
    fn(pre + "heads.ego_b", block.heads.ego_b);
    fn(pre + "heads.motion_w", block.heads.motion_w);
    fn(pre + "heads.motion_b", block.heads.motion_b);
  }
  fn("occ.kv_w", p.occ_kv_w);
  fn("occ.kv_b", p.occ_kv_b);
  attn("occ.attn", p.occ_attn);
  fn("occ.head_w", p.occ_head_w);
  fn("occ.head_b", p.occ_head_b);
  fn("lift.det_w", p.lift_det_w);
  fn("lift.det_b", p.lift_det_b);
  fn("lift.map_w", p.lift_map_w);
  fn("lift.map_b", p.lift_map_b);
  fn("lift.ego_w", p.lift_ego_w);
  fn("lift.ego_b", p.lift_ego_b);
  fn("lift.occ_w", p.lift_occ_w);
  fn("lift.occ_b", p.lift_occ_b);
  fn("proj.det_w", p.proj_det_w);
  fn("proj.det_b", p.proj_det_b);
  fn("proj.map_w", p.proj_map_w);
  fn("proj.map_b", p.proj_map_b);
  fn("proj.ego_w", p.proj_ego_w);
  fn("proj.ego_b", p.proj_ego_b);
}

BankState initial_bank(const PerceptionParams& p) {
  return {p.det_feat, p.map_feat, p.ego_feat, p.det_anchor, p.map_anchor};
}

Tensor cross_attention(const Tensor& x, const Tensor& kv,
                       const CrossAttnParams& p) {
  return add(x, attn_branch(x, kv, p));
}

BankState query_interaction(const BankState& bank,
                            const DecoderBlockParams& block,
                            const BankState* temporal_carry) {
  BankState out = bank;
  if (temporal_carry) {
    out.det_feat = cross_attention(out.det_feat, temporal_carry->det_feat,
                                   block.temporal);
    out.map_feat = cross_attention(out.map_feat, temporal_carry->map_feat,
                                   block.temporal);
    out.ego_feat = cross_attention(out.ego_feat, temporal_carry->ego_feat,
                                   block.temporal);
  }
  out.det_feat = cross_attention(out.det_feat, out.det_feat, block.intra);
  out.map_feat = cross_attention(out.map_feat, out.map_feat, block.intra);
  out.ego_feat = cross_attention(out.ego_feat, out.ego_feat, block.intra);

  const int n_det = out.det_feat.rows();
  const int n_map = out.map_feat.rows();
  const Tensor cat = concat_rows({out.det_feat, out.map_feat, out.ego_feat});
  std::vector<int> task_of;
  task_of.insert(task_of.end(), n_det, 0);
  task_of.insert(task_of.end(), n_map, 1);
  task_of.push_back(2);
  const Tensor tagged =
      add(cat, matmul(selector(task_of, 3), block.task_emb));
  const Tensor fused = add(cat, attn_branch(tagged, tagged, block.inter));
  out.det_feat = slice_rows(fused, 0, n_det);
  out.map_feat = slice_rows(fused, n_det, n_map);
  out.ego_feat = slice_rows(fused, n_det + n_map, 1);
  return out;
}

Tensor deformable_aggregate(const Tensor& features, const Tensor& ref_points,
                            const FeaturePyramid& pyramid,
                            const DeformableParams& p, const Config& cfg) {
  const int n = features.rows();
  const int levels = static_cast<int>(pyramid.levels.size());
  const int views = static_cast<int>(pyramid.levels.at(0).size());
  const int pts = cfg.sample_points;

  const Tensor offsets = affine(features, p.offset_w, p.offset_b);
  const Tensor weights = softmax_rows(affine(features, p.weight_w, p.weight_b));
  const Tensor rep = repeat_rows_matrix(n, pts);
  const Tensor pool = pool_rows_matrix(n, pts);
  const Tensor ref_rep = matmul(rep, ref_points);
  const Tensor ones_row = Tensor::full({1, kFeatureChannels}, 1.0);

  Tensor agg;
  const auto view_windows = world_views();
  for (int l = 0; l < levels; ++l)
    for (int v = 0; v < views; ++v) {
      const Tensor& map = pyramid.levels[l][v];
      const ViewWindow& win = view_windows[v];
      const int h = map.shape()[0], w = map.shape()[1];
      const double sx = h / (win.x1 - win.x0);
      const double sy = w / (win.y1 - win.y0);
      const Tensor to_grid = Tensor::from({2, 2}, {sx, 0.0, 0.0, sy});
      const Tensor shift =
          Tensor::from({2}, {-win.x0 * sx - 0.5, -win.y0 * sy - 0.5});

      const int idx = (l * views + v) * pts;
      const Tensor off =
          reshape(slice_cols(offsets, idx * 2, pts * 2), {n * pts, 2});
      const Tensor world = add(ref_rep, off);
      const Tensor grid = add_rowvec(matmul(world, to_grid), shift);
      const Tensor sampled = bilinear_sample(map, grid);

      const Tensor w_col =
          reshape(slice_cols(weights, idx, pts), {n * pts, 1});
      const Tensor weighted = mul(sampled, matmul(w_col, ones_row));
      const Tensor pooled = matmul(pool, weighted);
      agg = agg.defined() ? add(agg, pooled) : pooled;
    }
  return add(features, affine(agg, p.value_w, p.value_b));
}

BankState task_refine(const BankState& bank, const RefineHeads& heads,
                      const Config& cfg, PerceptionOutputs* out) {
  BankState next = bank;

  const Tensor det_raw = affine(bank.det_feat, heads.det_w, heads.det_b);
  const Tensor center =
      add(slice_cols(bank.det_anchor, 0, 2), slice_cols(det_raw, 0, 2));
  const Tensor size =
      mul(slice_cols(bank.det_anchor, 2, 2), exp_op(slice_cols(det_raw, 2, 2)));
  const Tensor yaw =
      add(slice_cols(bank.det_anchor, 4, 1), slice_cols(det_raw, 4, 1));
  next.det_anchor = concat_cols(concat_cols(center, size), yaw);

  const Tensor map_raw = affine(bank.map_feat, heads.map_w, heads.map_b);
  const Tensor points =
      add(bank.map_anchor, slice_cols(map_raw, 0, 2 * cfg.map_points));
  next.map_anchor = points;

  if (out) {
    out->det_center = center;
    out->det_size = size;
    out->det_yaw = yaw;
    out->det_logits = slice_cols(det_raw, 5, 3);
    out->det_conf = slice_cols(det_raw, 8, 1);
    out->map_points = points;
    out->map_logits = slice_cols(map_raw, 2 * cfg.map_points, 3);
    out->ego_status = affine(bank.ego_feat, heads.ego_w, heads.ego_b);
    const Tensor motion_raw =
        affine(bank.det_feat, heads.motion_w, heads.motion_b);
    const int disp_cols = cfg.motion_modes * cfg.horizon * 2;
    out->motion_disp = slice_cols(motion_raw, 0, disp_cols);
    out->motion_logits = slice_cols(motion_raw, disp_cols, cfg.motion_modes);
  }
  return next;
}

BankState run_decoder_block(const BankState& bank,
                            const DecoderBlockParams& block,
                            const FeaturePyramid& pyramid, const Config& cfg,
                            const BankState* temporal_carry,
                            PerceptionOutputs* out) {
  BankState state = query_interaction(bank, block, temporal_carry);
  const Tensor det_ref = slice_cols(state.det_anchor, 0, 2);
  const Tensor map_ref =
      matmul(state.map_anchor, anchor_mean_point_matrix(cfg.map_points));
  const Tensor ego_ref = Tensor::zeros({1, 2});
  state.det_feat =
      deformable_aggregate(state.det_feat, det_ref, pyramid, block.deform, cfg);
  state.map_feat =
      deformable_aggregate(state.map_feat, map_ref, pyramid, block.deform, cfg);
  state.ego_feat =
      deformable_aggregate(state.ego_feat, ego_ref, pyramid, block.deform, cfg);
  return task_refine(state, block.heads, cfg, out);
}

Tensor occupancy_attended(const FeaturePyramid& pyramid,
                          const PerceptionParams& p) {
  const Tensor kv = affine(pooled_pyramid_rows(pyramid), p.occ_kv_w, p.occ_kv_b);
  return cross_attention(p.occ_latent, kv, p.occ_attn);
}

Tensor occupancy_branch(const FeaturePyramid& pyramid,
                        const PerceptionParams& p, const Config& cfg) {
  const Tensor logits =
      affine(occupancy_attended(pyramid, p), p.occ_head_w, p.occ_head_b);
  if (logits.rows() != cfg.grid * cfg.grid)
    throw std::runtime_error("perception: occupancy grid size mismatch");
  return logits;
}

Tensor lift_to_expert(const BankState& bank, const PerceptionOutputs& outputs,
                      const Tensor& occ_latent, const PerceptionParams& p,
                      const Config& cfg) {
  const Tensor det_vec = concat_cols(
      bank.det_feat,
      concat_cols(concat_cols(outputs.det_center, outputs.det_size),
                  outputs.det_yaw));
  const Tensor det_tok = affine(det_vec, p.lift_det_w, p.lift_det_b);
  const Tensor map_tok = affine(concat_cols(bank.map_feat, outputs.map_points),
                                p.lift_map_w, p.lift_map_b);
  const Tensor ego_tok = affine(concat_cols(bank.ego_feat, outputs.ego_status),
                                p.lift_ego_w, p.lift_ego_b);
  const Tensor occ_pool =
      matmul(region_pool_matrix(cfg.grid, cfg.n_occ), occ_latent);
  const Tensor occ_tok = affine(occ_pool, p.lift_occ_w, p.lift_occ_b);
  const Tensor tokens = concat_rows({det_tok, map_tok, ego_tok, occ_tok});
  if (tokens.rows() != cfg.n_per())
    throw std::runtime_error("perception: lift token count mismatch");
  return tokens;
}

BankState project_back(const Tensor& o_per, const BankState& first_pass,
                       const PerceptionParams& p, const Config& cfg) {
  if (o_per.rows() != cfg.n_per())
    throw std::runtime_error("perception: projected sequence misaligned");
  BankState out = first_pass;
  const Tensor det = slice_rows(o_per, 0, cfg.n_det);
  const Tensor map = slice_rows(o_per, cfg.n_det, cfg.n_map);
  const Tensor ego = slice_rows(o_per, cfg.n_det + cfg.n_map, 1);
  out.det_feat =
      add(first_pass.det_feat, affine(det, p.proj_det_w, p.proj_det_b));
  out.map_feat =
      add(first_pass.map_feat, affine(map, p.proj_map_w, p.proj_map_b));
  out.ego_feat =
      add(first_pass.ego_feat, affine(ego, p.proj_ego_w, p.proj_ego_b));
  return out;
}

PerceptionLoss perception_loss(const PerceptionOutputs& outputs,
                               const Scene& scene, const Config& cfg) {
  PerceptionLoss loss;
  const int n_det = outputs.det_center.rows();
  const int n_map = outputs.map_points.rows();
  const int n_gt = static_cast<int>(scene.agents.size());
  if (n_gt > n_det)
    throw std::runtime_error("perception: more objects than queries");

  // ---- detection: Hungarian on center L1 + class NLL ----
  loss.det_match.assign(n_gt, -1);
  Tensor conf_target({n_det, 1});
  Tensor det_term;
  if (n_gt > 0) {
    std::vector<std::vector<double>> cost(n_gt, std::vector<double>(n_det));
    for (int g = 0; g < n_gt; ++g) {
      const Agent& a = scene.agents[g];
      for (int q = 0; q < n_det; ++q) {
        const double center = std::abs(outputs.det_center.at(q, 0) - a.x) +
                              std::abs(outputs.det_center.at(q, 1) - a.y);
        const auto probs = softmax_values(outputs.det_logits, q);
        cost[g][q] = center - std::log(std::max(probs[a.cls], 1e-300));
      }
    }
    const AssignmentResult assign = hungarian(cost);
    loss.det_match = assign.col_of_row;
    Tensor gt_box({n_gt, 5});
    std::vector<int> cls(n_gt);
    for (int g = 0; g < n_gt; ++g) {
      const Agent& a = scene.agents[g];
      gt_box.at(g, 0) = a.x;
      gt_box.at(g, 1) = a.y;
      gt_box.at(g, 2) = a.width;
      gt_box.at(g, 3) = a.length;
      gt_box.at(g, 4) = a.yaw;
      cls[g] = a.cls;
      conf_target.at(assign.col_of_row[g], 0) = 1.0;
    }
    const Tensor sel = selector(assign.col_of_row, n_det);
    const Tensor pred_box = concat_cols(
        concat_cols(matmul(sel, outputs.det_center), matmul(sel, outputs.det_size)),
        matmul(sel, outputs.det_yaw));
    det_term = add(add(l1(pred_box, gt_box),
                       cross_entropy_rows(matmul(sel, outputs.det_logits), cls)),
                   bce_with_logits(outputs.det_conf, conf_target));
  } else {
    det_term = bce_with_logits(outputs.det_conf, conf_target);
  }
  loss.det = det_term;

  // ---- map: Hungarian on chamfer + class NLL ----
  const int n_lanes = static_cast<int>(scene.lanes.size());
  if (n_lanes > n_map)
    throw std::runtime_error("perception: more polylines than queries");
  Tensor map_term = Tensor::scalar(0.0);
  if (n_lanes > 0) {
    Tensor gt_pts({n_lanes, 2 * cfg.map_points});
    std::vector<int> lane_cls(n_lanes);
    for (int g = 0; g < n_lanes; ++g) {
      lane_cls[g] = scene.lanes[g].cls;
      for (int i = 0; i < cfg.map_points; ++i) {
        gt_pts.at(g, 2 * i) = scene.lanes[g].points[i][0];
        gt_pts.at(g, 2 * i + 1) = scene.lanes[g].points[i][1];
      }
    }
    std::vector<std::vector<double>> cost(n_lanes, std::vector<double>(n_map));
    for (int g = 0; g < n_lanes; ++g)
      for (int q = 0; q < n_map; ++q) {
        const auto probs = softmax_values(outputs.map_logits, q);
        cost[g][q] = chamfer_value(outputs.map_points, q, gt_pts, g,
                                   cfg.map_points) -
                     std::log(std::max(probs[lane_cls[g]], 1e-300));
      }
    const AssignmentResult assign = hungarian(cost);
    // differentiable chamfer: nearest-neighbor indices frozen from values
    std::vector<Tensor> pair_losses;
    for (int g = 0; g < n_lanes; ++g) {
      const int q = assign.col_of_row[g];
      const Tensor pred =
          reshape(slice_rows(outputs.map_points, q, 1), {cfg.map_points, 2});
      Tensor gt({cfg.map_points, 2});
      std::vector<int> nn_pred(cfg.map_points), nn_gt(cfg.map_points);
      for (int i = 0; i < cfg.map_points; ++i) {
        gt.at(i, 0) = gt_pts.at(g, 2 * i);
        gt.at(i, 1) = gt_pts.at(g, 2 * i + 1);
      }
      for (int i = 0; i < cfg.map_points; ++i) {
        double bp = 1e300, bg = 1e300;
        for (int j = 0; j < cfg.map_points; ++j) {
          const double dp = std::abs(pred.at(i, 0) - gt.at(j, 0)) +
                            std::abs(pred.at(i, 1) - gt.at(j, 1));
          if (dp < bp) bp = dp, nn_pred[i] = j;
          const double dg = std::abs(gt.at(i, 0) - pred.at(j, 0)) +
                            std::abs(gt.at(i, 1) - pred.at(j, 1));
          if (dg < bg) bg = dg, nn_gt[i] = j;
        }
      }
      const Tensor fwd = l1(pred, matmul(selector(nn_pred, cfg.map_points), gt));
      const Tensor bwd =
          l1(matmul(selector(nn_gt, cfg.map_points), pred), gt);
      pair_losses.push_back(scale(add(fwd, bwd), 0.5));
    }
    std::vector<double> w(pair_losses.size(), 1.0 / pair_losses.size());
    std::vector<int> matched_q(n_lanes);
    for (int g = 0; g < n_lanes; ++g) matched_q[g] = assign.col_of_row[g];
    map_term = add(weighted_sum(pair_losses, w),
                   cross_entropy_rows(matmul(selector(matched_q, n_map),
                                             outputs.map_logits),
                                      lane_cls));
  }
  loss.map = map_term;

  // ---- ego status ----
  const Tensor gt_ego = Tensor::from(
      {1, 2}, {scene.ego_speed, scene.curvature * scene.ego_speed});
  loss.ego = l1(outputs.ego_status, gt_ego);

  // ---- motion: winner-take-all over modes on matched agents ----
  Tensor motion_term = Tensor::scalar(0.0);
  if (n_gt > 0) {
    std::vector<Tensor> mode_losses;
    std::vector<int> best_modes(n_gt);
    const int tcols = cfg.horizon * 2;
    for (int g = 0; g < n_gt; ++g) {
      const Agent& a = scene.agents[g];
      Tensor gt_disp({1, tcols});
      for (int s = 0; s < cfg.horizon; ++s) {
        gt_disp.at(0, 2 * s) = a.vx * cfg.dt;
        gt_disp.at(0, 2 * s + 1) = a.vy * cfg.dt;
      }
      const int q = loss.det_match[g];
      int best = 0;
      double best_val = 1e300;
      for (int m = 0; m < cfg.motion_modes; ++m) {
        const double v = value_l1(outputs.motion_disp,
                                  static_cast<std::size_t>(q) *
                                          outputs.motion_disp.cols() +
                                      m * tcols,
                                  gt_disp, 0, tcols) / tcols;
        if (v < best_val) best_val = v, best = m;
      }
      best_modes[g] = best;
      const Tensor row = slice_rows(outputs.motion_disp, q, 1);
      mode_losses.push_back(l1(slice_cols(row, best * tcols, tcols), gt_disp));
    }
    std::vector<double> w(mode_losses.size(), 1.0 / mode_losses.size());
    std::vector<int> matched_q(loss.det_match.begin(), loss.det_match.end());
    motion_term =
        add(weighted_sum(mode_losses, w),
            cross_entropy_rows(matmul(selector(matched_q, n_det),
                                      outputs.motion_logits),
                               best_modes));
  }
  loss.motion = motion_term;

  // ---- occupancy ----
  Tensor gt_occ({cfg.grid * cfg.grid, 1});
  for (std::size_t i = 0; i < scene.occupancy.size(); ++i)
    gt_occ.data()[i] = scene.occupancy[i];
  loss.occ = bce_with_logits(outputs.occupancy, gt_occ);

  loss.total = add(add(add(add(loss.det, loss.map), loss.ego), loss.motion),
                   loss.occ);
  return loss;
}

}  // namespace udvla
