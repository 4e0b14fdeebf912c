#include "udvla/flow.hpp"

#include <cmath>
#include <stdexcept>

#include "udvla/ops.hpp"

namespace udvla {

FlowParams make_flow_params(const Config& cfg, Rng& rng) {
  FlowParams p;
  p.head_w = Tensor({cfg.d, 2}, /*requires_grad=*/true);
  for (auto& v : p.head_w.data()) v = rng.normal() * 0.02;
  p.head_b = Tensor::zeros({2}, /*requires_grad=*/true);
  return p;
}

void for_each_param(FlowParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("head_w", p.head_w);
  fn("head_b", p.head_b);
}

Tensor velocity_head(const Tensor& o_act, const FlowParams& p, int horizon) {
  if (o_act.rows() != horizon)
    throw std::runtime_error("flow: action token count does not match horizon");
  return affine(o_act, p.head_w, p.head_b);
}

Tensor flow_loss(const Tensor& v_hat, const Tensor& u) {
  return mse(v_hat, u);
}

Trajectory sample_trajectory(const VelocityField& field, int horizon, double dt,
                             int n_euler, std::uint64_t seed,
                             double velocity_scale) {
  if (n_euler < 1) throw std::runtime_error("flow: n_euler must be >= 1");
  NoGradScope no_grad;
  Rng rng(seed);
  Tensor x({horizon, 2});
  for (auto& v : x.data()) v = rng.normal();

  for (int i = 0; i < n_euler; ++i) {
    const double t = static_cast<double>(i) / n_euler;
    const Tensor v = field(x, t);
    if (v.shape() != x.shape())
      throw std::runtime_error("flow: field output shape mismatch");
    for (std::size_t j = 0; j < x.numel(); ++j) {
      x.data()[j] += v.data()[j] / n_euler;
      if (!std::isfinite(x.data()[j]))
        throw std::runtime_error("flow: divergence at step " +
                                 std::to_string(i));
    }
  }

  Trajectory out;
  out.dt = dt;
  double px = 0.0, py = 0.0;
  for (int s = 0; s < horizon; ++s) {
    px += velocity_scale * x.at(s, 0) * dt;
    py += velocity_scale * x.at(s, 1) * dt;
    out.waypoints.push_back({px, py});
  }
  return out;
}

Tensor velocity_target(const Trajectory& traj, double velocity_scale) {
  const int steps = static_cast<int>(traj.waypoints.size());
  Tensor x1({steps, 2});
  double px = 0.0, py = 0.0;
  for (int s = 0; s < steps; ++s) {
    x1.at(s, 0) = (traj.waypoints[s][0] - px) / traj.dt / velocity_scale;
    x1.at(s, 1) = (traj.waypoints[s][1] - py) / traj.dt / velocity_scale;
    px = traj.waypoints[s][0];
    py = traj.waypoints[s][1];
  }
  return x1;
}

TrajectoryMetrics trajectory_metrics(const Trajectory& pred,
                                     const Trajectory& gt,
                                     const std::vector<std::uint8_t>& occupancy,
                                     int grid, double extent) {
  if (pred.waypoints.size() != gt.waypoints.size() || pred.dt != gt.dt)
    throw std::runtime_error("flow: trajectory layout mismatch");
  auto l2_at = [&](double seconds) {
    int idx = static_cast<int>(std::lround(seconds / pred.dt)) - 1;
    idx = std::max(0, std::min(idx, static_cast<int>(pred.waypoints.size()) - 1));
    const double dx = pred.waypoints[idx][0] - gt.waypoints[idx][0];
    const double dy = pred.waypoints[idx][1] - gt.waypoints[idx][1];
    return std::hypot(dx, dy);
  };
  TrajectoryMetrics m;
  m.l2_1s = l2_at(1.0);
  m.l2_2s = l2_at(2.0);
  m.l2_3s = l2_at(3.0);
  m.avg_l2 = (m.l2_1s + m.l2_2s + m.l2_3s) / 3.0;
  m.collision =
      trajectory_hits_occupancy(pred, occupancy, grid, extent) ? 1 : 0;
  return m;
}

}  // namespace udvla
