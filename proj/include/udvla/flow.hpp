#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "udvla/config.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// Per-token affine head from the action expert's width to a 2-D velocity.
struct FlowParams {
  Tensor head_w, head_b;  // [d x 2], [2]
};

FlowParams make_flow_params(const Config& cfg, Rng& rng);
void for_each_param(FlowParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn);

// Predicted velocity field at (x_t, t) from the action-expert outputs;
// throws if the token count does not equal the horizon.
Tensor velocity_head(const Tensor& o_act, const FlowParams& p, int horizon);

// Mean squared error over all T x 2 entries.
Tensor flow_loss(const Tensor& v_hat, const Tensor& u);

// Euler integration of the learned field from x0 ~ N(0, I): for each of
// n_euler steps at t = i/n_euler, x += field(x, t)/n_euler. The integrated
// state is the normalized velocity sequence; waypoints are the cumulative
// sum of velocity_scale * x * dt. Throws with the step index on divergence.
using VelocityField = std::function<Tensor(const Tensor& x_t, double t)>;
Trajectory sample_trajectory(const VelocityField& field, int horizon, double dt,
                             int n_euler, std::uint64_t seed,
                             double velocity_scale = 1.0);

// Ground-truth normalized velocity target x1 for a scene's expert
// trajectory: per-step displacement / dt / velocity_scale.
Tensor velocity_target(const Trajectory& traj, double velocity_scale);

struct TrajectoryMetrics {
  double l2_1s = 0, l2_2s = 0, l2_3s = 0, avg_l2 = 0;
  int collision = 0;
};

TrajectoryMetrics trajectory_metrics(const Trajectory& pred,
                                     const Trajectory& gt,
                                     const std::vector<std::uint8_t>& occupancy,
                                     int grid, double extent);

}  // namespace udvla
