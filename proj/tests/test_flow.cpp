#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "udvla/flow.hpp"
#include "udvla/gradcheck.hpp"
#include "udvla/ops.hpp"

using namespace udvla;

namespace {

Tensor noise_for_seed(std::uint64_t seed, int horizon) {
  Rng rng(seed);
  Tensor x({horizon, 2});
  for (auto& v : x.data()) v = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("velocity head shape, bias, and gradients") {
  Config cfg;
  Rng rng(0);
  FlowParams p = make_flow_params(cfg, rng);
  Tensor o_act({cfg.horizon, cfg.d});
  for (auto& v : o_act.data()) v = rng.normal();

  const Tensor v = velocity_head(o_act, p, cfg.horizon);
  CHECK(v.shape() == std::vector<int>{6, 2});

  FlowParams zero = p;
  zero.head_w = Tensor::zeros({cfg.d, 2}, true);
  zero.head_b = Tensor::from({2}, {0.3, -0.7}, true);
  const Tensor vb = velocity_head(o_act, zero, cfg.horizon);
  for (int i = 0; i < cfg.horizon; ++i) {
    CHECK(vb.at(i, 0) == 0.3);
    CHECK(vb.at(i, 1) == -0.7);
  }

  CHECK_THROWS_WITH_AS(velocity_head(o_act, p, cfg.horizon + 1),
                       "flow: action token count does not match horizon",
                       std::runtime_error);

  Tensor u({cfg.horizon, 2});
  for (auto& x : u.data()) x = rng.normal();
  const auto report = finite_diff_check(
      [&]() { return flow_loss(velocity_head(o_act, p, cfg.horizon), u); },
      {{"head_w", p.head_w}, {"head_b", p.head_b}}, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("flow loss values") {
  const Tensor u = Tensor::from({1, 2}, {3, 4});
  CHECK(flow_loss(u, u).item() == 0.0);
  const Tensor off = Tensor::from({1, 2}, {4, 5});
  CHECK(flow_loss(off, u).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(flow_loss(Tensor::zeros({1, 2}), u).item() ==
        doctest::Approx(12.5).epsilon(1e-15));
  // non-negative on random inputs
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    Tensor a({3, 2}), b({3, 2});
    for (auto& v : a.data()) v = rng.normal();
    for (auto& v : b.data()) v = rng.normal();
    CHECK(flow_loss(a, b).item() >= 0.0);
  }
}

TEST_CASE("constant oracle field integrates exactly for any step count") {
  const int horizon = 6;
  const Tensor x1 = Tensor::from(
      {horizon, 2}, {1, 0, 1.2, 0.1, 0.9, -0.2, 1.1, 0, 1, 0.3, 0.8, -0.1});
  for (int n_euler : {1, 10, 100}) {
    const std::uint64_t seed = 42;
    const Tensor x0 = noise_for_seed(seed, horizon);
    auto oracle = [&](const Tensor&, double) { return sub(x1, x0); };
    const Trajectory traj = sample_trajectory(oracle, horizon, 0.5, n_euler,
                                              seed, 1.0);
    // invert the cumulative sum and compare the recovered velocities to x1
    double px = 0, py = 0;
    double max_err = 0.0;
    for (int s = 0; s < horizon; ++s) {
      const double vx = (traj.waypoints[s][0] - px) / 0.5;
      const double vy = (traj.waypoints[s][1] - py) / 0.5;
      max_err = std::max(max_err, std::abs(vx - x1.at(s, 0)));
      max_err = std::max(max_err, std::abs(vy - x1.at(s, 1)));
      px = traj.waypoints[s][0];
      py = traj.waypoints[s][1];
    }
    INFO("n_euler ", n_euler);
    CHECK(max_err <= 1e-12);
  }
}

TEST_CASE("cumulative-sum decoding and stochasticity") {
  const int horizon = 4;
  // a field that drives x to all-ones velocities at t=1 in one step
  auto to_ones = [&](const Tensor& x, double) {
    Tensor ones = Tensor::full(x.shape(), 1.0);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
      out.data()[i] = ones.data()[i] - x.data()[i];
    return out;
  };
  Trajectory traj = sample_trajectory(to_ones, horizon, 0.5, 1, 7, 1.0);
  for (int s = 0; s < horizon; ++s) {
    CHECK(traj.waypoints[s][0] == doctest::Approx(0.5 * (s + 1)).epsilon(1e-12));
    CHECK(traj.waypoints[s][1] == doctest::Approx(0.5 * (s + 1)).epsilon(1e-12));
  }

  auto zero_field = [](const Tensor& x, double) {
    return Tensor::zeros(x.shape());
  };
  const Trajectory a = sample_trajectory(zero_field, horizon, 0.5, 2, 1, 1.0);
  const Trajectory b = sample_trajectory(zero_field, horizon, 0.5, 2, 2, 1.0);
  const Trajectory a2 = sample_trajectory(zero_field, horizon, 0.5, 2, 1, 1.0);
  CHECK(a.waypoints == a2.waypoints);
  CHECK(a.waypoints != b.waypoints);

  // velocity_scale stretches the decoded waypoints linearly
  const Trajectory s1 = sample_trajectory(to_ones, horizon, 0.5, 1, 7, 5.0);
  for (int s = 0; s < horizon; ++s)
    CHECK(s1.waypoints[s][0] == doctest::Approx(5.0 * traj.waypoints[s][0]));

  auto diverge = [](const Tensor& x, double t) {
    return Tensor::full(
        x.shape(), t > 0 ? std::numeric_limits<double>::infinity() : 0.0);
  };
  CHECK_THROWS_WITH_AS(sample_trajectory(diverge, horizon, 0.5, 4, 0, 1.0),
                       "flow: divergence at step 1", std::runtime_error);
}

TEST_CASE("velocity targets invert the cumulative decoding") {
  Trajectory traj;
  traj.dt = 0.5;
  traj.waypoints = {{1, 0}, {2.5, 0.5}, {3, 1.5}};
  const Tensor x1 = velocity_target(traj, 2.0);
  CHECK(x1.at(0, 0) == doctest::Approx(1.0));   // 1m / 0.5s / 2
  CHECK(x1.at(1, 0) == doctest::Approx(1.5));
  CHECK(x1.at(1, 1) == doctest::Approx(0.5));
  CHECK(x1.at(2, 1) == doctest::Approx(1.0));
}

TEST_CASE("trajectory metrics: distances and collision") {
  Config cfg;
  Trajectory gt;
  gt.dt = 0.5;
  for (int s = 1; s <= cfg.horizon; ++s)
    gt.waypoints.push_back({s * 1.0, 0.0});
  std::vector<std::uint8_t> empty_occ(
      static_cast<std::size_t>(cfg.grid) * cfg.grid, 0);

  const TrajectoryMetrics zero =
      trajectory_metrics(gt, gt, empty_occ, cfg.grid, cfg.bev_extent);
  CHECK(zero.l2_1s == 0.0);
  CHECK(zero.l2_2s == 0.0);
  CHECK(zero.l2_3s == 0.0);
  CHECK(zero.avg_l2 == 0.0);
  CHECK(zero.collision == 0);

  Trajectory shifted = gt;
  for (auto& w : shifted.waypoints) w[0] += 1.0;
  const TrajectoryMetrics one =
      trajectory_metrics(shifted, gt, empty_occ, cfg.grid, cfg.bev_extent);
  CHECK(one.l2_1s == doctest::Approx(1.0));
  CHECK(one.l2_2s == doctest::Approx(1.0));
  CHECK(one.l2_3s == doctest::Approx(1.0));
  CHECK(one.avg_l2 == doctest::Approx(1.0));

  // rigid offset applied to both leaves the distances unchanged
  Trajectory gt_off = gt, pred_off = shifted;
  for (auto& w : gt_off.waypoints) w[1] += 3.0;
  for (auto& w : pred_off.waypoints) w[1] += 3.0;
  const TrajectoryMetrics still =
      trajectory_metrics(pred_off, gt_off, empty_occ, cfg.grid, cfg.bev_extent);
  CHECK(still.avg_l2 == doctest::Approx(1.0));

  // wall of occupied cells across the path
  std::vector<std::uint8_t> wall = empty_occ;
  const double cell = 2.0 * cfg.bev_extent / cfg.grid;
  const int wall_i = static_cast<int>((3.0 + cfg.bev_extent) / cell);
  for (int j = 0; j < cfg.grid; ++j)
    wall[static_cast<std::size_t>(wall_i) * cfg.grid + j] = 1;
  const TrajectoryMetrics hit =
      trajectory_metrics(gt, gt, wall, cfg.grid, cfg.bev_extent);
  CHECK(hit.collision == 1);

  Trajectory wrong = gt;
  wrong.waypoints.pop_back();
  CHECK_THROWS_WITH_AS(
      trajectory_metrics(wrong, gt, empty_occ, cfg.grid, cfg.bev_extent),
      "flow: trajectory layout mismatch", std::runtime_error);
}
