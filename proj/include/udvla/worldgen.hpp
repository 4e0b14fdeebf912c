#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "udvla/config.hpp"
#include "udvla/rng.hpp"
#include "udvla/tensor.hpp"

namespace udvla {

enum class AgentClass { car = 0, truck = 1, pedestrian = 2 };
enum class LaneClass { divider = 0, boundary = 1, crossing = 2 };
enum NavCommand { nav_left = 0, nav_straight = 1, nav_right = 2 };

struct Agent {
  double x = 0, y = 0;      // center, ego frame, meters
  double width = 0, length = 0;
  double yaw = 0;           // radians, 0 = +x
  double vx = 0, vy = 0;    // m/s
  int cls = 0;              // AgentClass
};

struct Polyline {
  std::vector<std::array<double, 2>> points;
  int cls = 0;  // LaneClass
};

struct EgoHistory {
  std::vector<std::array<double, 2>> positions;  // t_hist entries, last is origin
};

struct Trajectory {
  std::vector<std::array<double, 2>> waypoints;
  double dt = 0.5;
};

// Two pseudo-views x two scales of splatted class-channel features.
struct ViewWindow {
  double x0, x1, y0, y1;
};

struct FeaturePyramid {
  // levels[level][view] is an [h x w x c] tensor
  std::vector<std::vector<Tensor>> levels;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<Agent> agents;
  std::vector<Polyline> lanes;
  std::vector<std::uint8_t> occupancy;  // grid*grid, row = x index
  EgoHistory history;
  int nav = nav_straight;
  double ego_speed = 0;
  double curvature = 0;  // 1/m, >0 turns left
  Trajectory expert;
  std::string caption;
  FeaturePyramid features;
};

inline constexpr double kEgoWidth = 2.0;
inline constexpr double kEgoLength = 4.5;
inline constexpr int kFeatureChannels = 6;
inline constexpr int kFeatureRes = 16;

std::array<ViewWindow, 2> world_views();
// Continuous grid coordinates (row from x, col from y) for bilinear sampling.
std::array<double, 2> world_to_grid(const ViewWindow& view, int h, int w,
                                    double x, double y);

// Exact overlap between an oriented box and one occupancy cell.
bool box_overlaps_cell(double cx, double cy, double half_w, double half_l,
                       double yaw, double cell_cx, double cell_cy,
                       double half_cell);
// True if any occupied cell center falls inside the ego footprint at some
// waypoint. Heading comes from consecutive waypoints; the first step uses
// initial_heading.
bool trajectory_hits_occupancy(const Trajectory& traj,
                               const std::vector<std::uint8_t>& occupancy,
                               int grid, double extent,
                               double initial_heading = 0.0);

struct SceneOptions {
  bool force_empty = false;     // sub-generator with 0 agents
  bool force_straight = false;  // restrict to zero-curvature roads
};
Scene generate_scene(std::uint64_t seed, const Config& cfg,
                     const SceneOptions& opts = {});

struct Dataset {
  std::vector<Scene> scenes;
  std::vector<int> train, val, test;  // indices into scenes
};
Dataset make_dataset(int n, std::uint64_t seed, const Config& cfg);

// Template sentence from the general (non-driving) slice; vocabulary-closed.
std::string general_sentence(Rng& rng);

// Dataset cache: one binary tensor table + one JSON sidecar per scene.
void save_scene(const Scene& scene, const std::string& dir, int index);
Scene load_scene(const std::string& dir, int index, const Config& cfg);

}  // namespace udvla
