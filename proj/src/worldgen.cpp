#include "udvla/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "udvla/checkpoint.hpp"

namespace udvla {

namespace {

constexpr double kLaneWidth = 5.0;
constexpr double kPi = 3.141592653589793238462643;

// centerline of the ego lane, arc-length parameterized
struct RoadPoint {
  double x, y, heading;
};

RoadPoint road_point(double curvature, double s) {
  if (std::abs(curvature) < 1e-9) return {s, 0.0, 0.0};
  return {std::sin(curvature * s) / curvature,
          (1.0 - std::cos(curvature * s)) / curvature, curvature * s};
}

std::array<double, 2> lateral_point(double curvature, double s, double off) {
  const RoadPoint p = road_point(curvature, s);
  return {p.x - off * std::sin(p.heading), p.y + off * std::cos(p.heading)};
}

Polyline road_polyline(double curvature, double off, int n_points, int cls) {
  Polyline line;
  line.cls = cls;
  const double s0 = -8.0, s1 = 21.0;
  for (int i = 0; i < n_points; ++i) {
    const double s = s0 + (s1 - s0) * i / (n_points - 1);
    line.points.push_back(lateral_point(curvature, s, off));
  }
  return line;
}

void project_onto_axis(const std::vector<std::array<double, 2>>& pts, double ax,
                       double ay, double& lo, double& hi) {
  lo = 1e300;
  hi = -1e300;
  for (const auto& p : pts) {
    const double v = p[0] * ax + p[1] * ay;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
}

std::vector<std::array<double, 2>> box_corners(double cx, double cy, double hw,
                                               double hl, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  std::vector<std::array<double, 2>> out;
  for (int i = 0; i < 4; ++i) {
    const double dl = (i == 0 || i == 3) ? hl : -hl;
    const double dw = (i < 2) ? hw : -hw;
    out.push_back({cx + dl * c - dw * s, cy + dl * s + dw * c});
  }
  return out;
}

int cell_index(double v, double extent, int grid) {
  return static_cast<int>(std::floor((v + extent) / (2.0 * extent / grid)));
}

double cell_center(int i, double extent, int grid) {
  return -extent + (i + 0.5) * (2.0 * extent / grid);
}

const char* kNumberWords[] = {"one", "two", "three", "four", "five", "six"};
const char* kSingular[] = {"car", "truck", "pedestrian"};
const char* kPlural[] = {"cars", "trucks", "pedestrians"};

std::string position_word(double x, double y) {
  if (x >= std::abs(y)) return "ahead";
  if (x <= -std::abs(y)) return "behind";
  return y > 0 ? "left" : "right";
}

std::string render_caption(const std::vector<Agent>& agents) {
  if (agents.empty()) return "empty road ahead";
  std::string caption;
  for (int cls = 0; cls < 3; ++cls) {
    int count = 0;
    double best_d = 1e300, bx = 0, by = 0;
    for (const auto& a : agents) {
      if (a.cls != cls) continue;
      ++count;
      const double d = a.x * a.x + a.y * a.y;
      if (d < best_d) {
        best_d = d;
        bx = a.x;
        by = a.y;
      }
    }
    if (count == 0) continue;
    if (!caption.empty()) caption += " ";
    caption += kNumberWords[count - 1];
    caption += " ";
    caption += count == 1 ? kSingular[cls] : kPlural[cls];
    caption += " ";
    caption += position_word(bx, by);
  }
  return caption;
}

void splat(Tensor& map, const ViewWindow& view, double x, double y, int channel,
           double sigma, double weight) {
  const int h = map.shape()[0], w = map.shape()[1], c = map.shape()[2];
  const double cell_x = (view.x1 - view.x0) / h;
  const double cell_y = (view.y1 - view.y0) / w;
  for (int r = 0; r < h; ++r) {
    const double nx = view.x0 + (r + 0.5) * cell_x;
    for (int col = 0; col < w; ++col) {
      const double ny = view.y0 + (col + 0.5) * cell_y;
      const double d2 = (nx - x) * (nx - x) + (ny - y) * (ny - y);
      if (d2 > 9.0 * sigma * sigma) continue;
      map.data()[(static_cast<std::size_t>(r) * w + col) * c + channel] +=
          weight * std::exp(-0.5 * d2 / (sigma * sigma));
    }
  }
}

FeaturePyramid render_features(const Scene& scene) {
  FeaturePyramid pyr;
  const auto views = world_views();
  std::vector<Tensor> level0;
  for (const auto& view : views) {
    Tensor map({kFeatureRes, kFeatureRes, kFeatureChannels});
    for (const auto& a : scene.agents)
      splat(map, view, a.x, a.y, a.cls, (a.width + a.length) / 4.0, 1.0);
    for (const auto& line : scene.lanes) {
      for (std::size_t i = 0; i + 1 < line.points.size(); ++i) {
        const auto& p0 = line.points[i];
        const auto& p1 = line.points[i + 1];
        const double len = std::hypot(p1[0] - p0[0], p1[1] - p0[1]);
        const int steps = std::max(1, static_cast<int>(len));
        for (int t = 0; t <= steps; ++t) {
          const double f = static_cast<double>(t) / steps;
          splat(map, view, p0[0] + f * (p1[0] - p0[0]), p0[1] + f * (p1[1] - p0[1]),
                3 + line.cls, 0.8, 0.3);
        }
      }
    }
    level0.push_back(map);
  }
  pyr.levels.push_back(level0);
  // level 1: 2x average pooling
  std::vector<Tensor> level1;
  for (const auto& map : level0) {
    const int h = map.shape()[0] / 2, w = map.shape()[1] / 2, c = map.shape()[2];
    Tensor small({h, w, c});
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int dr = 0; dr < 2; ++dr)
            for (int dc = 0; dc < 2; ++dc)
              acc += map.data()[((static_cast<std::size_t>(2 * r + dr)) * map.shape()[1] +
                                 (2 * col + dc)) * c + ch];
          small.data()[(static_cast<std::size_t>(r) * w + col) * c + ch] = acc / 4.0;
        }
    level1.push_back(small);
  }
  pyr.levels.push_back(level1);
  return pyr;
}

void rasterize(Scene& scene, const Config& cfg) {
  const int g = cfg.grid;
  const double extent = cfg.bev_extent;
  const double half_cell = extent / g;
  scene.occupancy.assign(static_cast<std::size_t>(g) * g, 0);
  for (const auto& a : scene.agents) {
    const double reach = std::hypot(a.width, a.length) / 2.0 + half_cell * 1.5;
    const int i0 = std::max(0, cell_index(a.x - reach, extent, g));
    const int i1 = std::min(g - 1, cell_index(a.x + reach, extent, g));
    const int j0 = std::max(0, cell_index(a.y - reach, extent, g));
    const int j1 = std::min(g - 1, cell_index(a.y + reach, extent, g));
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j)
        if (box_overlaps_cell(a.x, a.y, a.width / 2, a.length / 2, a.yaw,
                              cell_center(i, extent, g), cell_center(j, extent, g),
                              half_cell))
          scene.occupancy[static_cast<std::size_t>(i) * g + j] = 1;
  }
  for (const auto& line : scene.lanes) {
    if (line.cls != static_cast<int>(LaneClass::boundary)) continue;
    for (std::size_t i = 0; i + 1 < line.points.size(); ++i) {
      const auto& p0 = line.points[i];
      const auto& p1 = line.points[i + 1];
      const double len = std::hypot(p1[0] - p0[0], p1[1] - p0[1]);
      const int steps = std::max(1, static_cast<int>(len / 0.25));
      for (int t = 0; t <= steps; ++t) {
        const double f = static_cast<double>(t) / steps;
        const double x = p0[0] + f * (p1[0] - p0[0]);
        const double y = p0[1] + f * (p1[1] - p0[1]);
        const int ci = cell_index(x, extent, g), cj = cell_index(y, extent, g);
        if (ci >= 0 && ci < g && cj >= 0 && cj < g)
          scene.occupancy[static_cast<std::size_t>(ci) * g + cj] = 1;
      }
    }
  }
}

// Attempts one scene draw; returns false if no collision-free expert
// trajectory was found within 20 speed reductions.
bool try_generate(std::uint64_t mixed_seed, const Config& cfg,
                  const SceneOptions& opts, Scene& scene) {
  Rng rng(mixed_seed);
  scene = Scene{};
  scene.seed = mixed_seed;

  // road topology and matching command
  const int shape = opts.force_straight ? 0 : rng.uniform_int(0, 2);
  if (shape == 0) {
    scene.curvature = 0.0;
    scene.nav = nav_straight;
  } else {
    const double radius = rng.uniform(15.0, 30.0);
    scene.curvature = (shape == 1 ? 1.0 : -1.0) / radius;
    scene.nav = shape == 1 ? nav_left : nav_right;
  }

  scene.lanes.push_back(road_polyline(scene.curvature, -kLaneWidth / 2,
                                      cfg.map_points,
                                      static_cast<int>(LaneClass::boundary)));
  scene.lanes.push_back(road_polyline(scene.curvature, kLaneWidth / 2,
                                      cfg.map_points,
                                      static_cast<int>(LaneClass::divider)));
  scene.lanes.push_back(road_polyline(scene.curvature, 1.5 * kLaneWidth,
                                      cfg.map_points,
                                      static_cast<int>(LaneClass::boundary)));
  if (rng.uniform() < 0.3) {
    Polyline crossing;
    crossing.cls = static_cast<int>(LaneClass::crossing);
    const double s_c = rng.uniform(8.0, 20.0);
    for (int i = 0; i < cfg.map_points; ++i) {
      const double off = -3.5 + 12.0 * i / (cfg.map_points - 1);
      crossing.points.push_back(lateral_point(scene.curvature, s_c, off));
    }
    scene.lanes.push_back(crossing);
  }

  const int n_agents = opts.force_empty ? 0 : rng.uniform_int(1, 6);
  for (int i = 0; i < n_agents; ++i) {
    Agent a;
    const double u = rng.uniform();
    a.cls = u < 0.5 ? 0 : (u < 0.7 ? 1 : 2);
    if (a.cls == static_cast<int>(AgentClass::pedestrian)) {
      a.width = a.length = 0.6;
      const double s = rng.uniform(-5.0, 20.0);
      const double off = rng.uniform() < 0.5 ? rng.uniform(-7.0, -4.5)
                                             : rng.uniform(9.0, 11.5);
      const auto p = lateral_point(scene.curvature, s, off);
      a.x = p[0];
      a.y = p[1];
      a.yaw = rng.uniform(-kPi, kPi);
      const double speed = rng.uniform(0.0, 1.5);
      a.vx = speed * std::cos(a.yaw);
      a.vy = speed * std::sin(a.yaw);
    } else {
      if (a.cls == static_cast<int>(AgentClass::car)) {
        a.width = rng.uniform(1.8, 2.0);
        a.length = rng.uniform(4.2, 4.8);
      } else {
        a.width = rng.uniform(2.2, 2.5);
        a.length = rng.uniform(6.0, 8.0);
      }
      const int lane = rng.uniform_int(0, 1);
      const double s = lane == 0 ? rng.uniform(8.0, 21.0) : rng.uniform(-10.0, 21.0);
      const double off = lane * kLaneWidth + rng.uniform(-0.4, 0.4);
      const auto p = lateral_point(scene.curvature, s, off);
      a.x = p[0];
      a.y = p[1];
      const double heading = road_point(scene.curvature, s).heading;
      a.yaw = lane == 0 ? heading : heading + kPi;
      const double speed = rng.uniform() < 0.3 ? 0.0 : rng.uniform(1.0, 4.0);
      a.vx = speed * std::cos(a.yaw);
      a.vy = speed * std::sin(a.yaw);
    }
    scene.agents.push_back(a);
  }

  scene.caption = render_caption(scene.agents);
  rasterize(scene, cfg);

  // ego history at constant speed along the lane, ending at the origin
  const double v0 = rng.uniform(2.0, 6.0);
  scene.ego_speed = v0;
  scene.history.positions.clear();
  for (int k = cfg.t_hist - 1; k >= 0; --k) {
    const auto p = lateral_point(scene.curvature, -v0 * cfg.dt * k, 0.0);
    scene.history.positions.push_back(p);
  }

  // rule-based expert: lane follow, brake for corridor obstacles
  double stop_s = 1e300;
  for (const auto& a : scene.agents) {
    // approximate corridor test in arc-length coordinates via nearest s
    double best_s = 0, best_off = 1e300;
    for (double s = 0.0; s <= 25.0; s += 0.25) {
      const auto p = lateral_point(scene.curvature, s, 0.0);
      const double d = std::hypot(p[0] - a.x, p[1] - a.y);
      if (d < best_off) {
        best_off = d;
        best_s = s;
      }
    }
    if (best_off < (kEgoWidth + a.width) / 2.0 + 1.2 && best_s > 0.5)
      stop_s = std::min(stop_s, best_s - a.length / 2 - kEgoLength / 2 - 0.8);
  }
  stop_s = std::max(stop_s, 0.0);

  for (int attempt = 0; attempt < 20; ++attempt) {
    const double v = v0 * std::pow(0.8, attempt);
    Trajectory traj;
    traj.dt = cfg.dt;
    double s = 0.0;
    for (int i = 0; i < cfg.horizon; ++i) {
      s = std::min(s + v * cfg.dt, stop_s);
      traj.waypoints.push_back(lateral_point(scene.curvature, s, 0.0));
    }
    if (!trajectory_hits_occupancy(traj, scene.occupancy, cfg.grid,
                                   cfg.bev_extent)) {
      scene.expert = traj;
      scene.features = render_features(scene);
      return true;
    }
  }
  return false;
}

}  // namespace

std::array<ViewWindow, 2> world_views() {
  return {ViewWindow{-5.0, 25.0, -5.0, 25.0}, ViewWindow{-5.0, 25.0, -25.0, 5.0}};
}

std::array<double, 2> world_to_grid(const ViewWindow& view, int h, int w,
                                    double x, double y) {
  return {(x - view.x0) / (view.x1 - view.x0) * h - 0.5,
          (y - view.y0) / (view.y1 - view.y0) * w - 0.5};
}

bool box_overlaps_cell(double cx, double cy, double half_w, double half_l,
                       double yaw, double cell_cx, double cell_cy,
                       double half_cell) {
  const auto box = box_corners(cx, cy, half_w, half_l, yaw);
  const std::vector<std::array<double, 2>> cell = {
      {cell_cx - half_cell, cell_cy - half_cell},
      {cell_cx - half_cell, cell_cy + half_cell},
      {cell_cx + half_cell, cell_cy + half_cell},
      {cell_cx + half_cell, cell_cy - half_cell}};
  const double axes[4][2] = {{1, 0},
                             {0, 1},
                             {std::cos(yaw), std::sin(yaw)},
                             {-std::sin(yaw), std::cos(yaw)}};
  for (const auto& axis : axes) {
    double alo, ahi, blo, bhi;
    project_onto_axis(box, axis[0], axis[1], alo, ahi);
    project_onto_axis(cell, axis[0], axis[1], blo, bhi);
    if (ahi < blo || bhi < alo) return false;
  }
  return true;
}

bool trajectory_hits_occupancy(const Trajectory& traj,
                               const std::vector<std::uint8_t>& occupancy,
                               int grid, double extent, double initial_heading) {
  const double half_cell = extent / grid;
  double heading = initial_heading;
  for (std::size_t i = 0; i < traj.waypoints.size(); ++i) {
    const auto& p = traj.waypoints[i];
    if (i > 0) {
      const auto& q = traj.waypoints[i - 1];
      const double dx = p[0] - q[0], dy = p[1] - q[1];
      if (std::hypot(dx, dy) > 1e-9) heading = std::atan2(dy, dx);
    } else if (std::hypot(p[0], p[1]) > 1e-9) {
      heading = std::atan2(p[1], p[0]);
    }
    const double reach = std::hypot(kEgoWidth, kEgoLength) / 2.0 + half_cell;
    const int i0 = std::max(0, cell_index(p[0] - reach, extent, grid));
    const int i1 = std::min(grid - 1, cell_index(p[0] + reach, extent, grid));
    const int j0 = std::max(0, cell_index(p[1] - reach, extent, grid));
    const int j1 = std::min(grid - 1, cell_index(p[1] + reach, extent, grid));
    const double ch = std::cos(heading), sh = std::sin(heading);
    for (int ci = i0; ci <= i1; ++ci)
      for (int cj = j0; cj <= j1; ++cj) {
        if (!occupancy[static_cast<std::size_t>(ci) * grid + cj]) continue;
        // occupied cell center inside the oriented ego footprint
        const double dx = cell_center(ci, extent, grid) - p[0];
        const double dy = cell_center(cj, extent, grid) - p[1];
        const double along = dx * ch + dy * sh;
        const double across = -dx * sh + dy * ch;
        if (std::abs(along) <= kEgoLength / 2 && std::abs(across) <= kEgoWidth / 2)
          return true;
      }
  }
  return false;
}

Scene generate_scene(std::uint64_t seed, const Config& cfg,
                     const SceneOptions& opts) {
  for (std::uint64_t salt = 0;; ++salt) {
    Scene scene;
    const std::uint64_t mixed = seed * 0x9E3779B97F4A7C15ull + salt + 1;
    if (try_generate(mixed, cfg, opts, scene)) {
      scene.seed = seed;
      return scene;
    }
    if (salt > 1000)
      throw std::runtime_error("worldgen: failed to build scene for seed " +
                               std::to_string(seed));
  }
}

Dataset make_dataset(int n, std::uint64_t seed, const Config& cfg) {
  if (n < 10) throw std::runtime_error("worldgen: dataset needs n >= 10");
  Dataset ds;
  for (int i = 0; i < n; ++i) {
    ds.scenes.push_back(generate_scene(seed + static_cast<std::uint64_t>(i), cfg));
    const int h = i % 10;
    if (h == 8)
      ds.val.push_back(i);
    else if (h == 9)
      ds.test.push_back(i);
    else
      ds.train.push_back(i);
  }
  return ds;
}

std::string general_sentence(Rng& rng) {
  static const std::vector<std::vector<std::string>> templates = {
      {"the weather is clear", "the weather is cloudy", "the weather is rainy",
       "the weather is sunny", "the weather is foggy"},
      {"please keep a safe distance", "please keep a steady speed"},
      {"the signal turns green", "the signal turns red", "the signal turns yellow"},
      {"traffic is light", "traffic is heavy", "traffic is calm", "traffic is quiet"},
      {"check the mirror before turning"},
      {"the journey continues over the bridge"},
      {"birds fly south before winter"},
      {"rain falls gently over the valley"},
      {"the sun rises over the hill"},
      {"music plays softly and the engine hums"},
      {"the map shows the route home"},
      {"every driver should rest well"},
      {"stars shine above the quiet city"},
      {"the story begins here and ends there"},
      {"wind blows over the hill and the river"},
      {"autumn brings rain and winter brings snow"},
      {"the night is calm and the road is open"},
  };
  const auto& group = templates[rng.uniform_int(0, static_cast<int>(templates.size()) - 1)];
  return group[rng.uniform_int(0, static_cast<int>(group.size()) - 1)];
}

namespace {
std::string scene_base(const std::string& dir, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d", index);
  return dir + "/" + buf;
}
}  // namespace

void save_scene(const Scene& scene, const std::string& dir, int index) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, Tensor>> entries;
  const int g = static_cast<int>(std::sqrt(static_cast<double>(scene.occupancy.size())));
  {
    Tensor occ({g, g});
    for (std::size_t i = 0; i < scene.occupancy.size(); ++i)
      occ.data()[i] = scene.occupancy[i];
    entries.emplace_back("occupancy", occ);
  }
  {
    Tensor hist({static_cast<int>(scene.history.positions.size()), 2});
    for (std::size_t i = 0; i < scene.history.positions.size(); ++i) {
      hist.at(static_cast<int>(i), 0) = scene.history.positions[i][0];
      hist.at(static_cast<int>(i), 1) = scene.history.positions[i][1];
    }
    entries.emplace_back("history", hist);
  }
  {
    Tensor exp({static_cast<int>(scene.expert.waypoints.size()), 2});
    for (std::size_t i = 0; i < scene.expert.waypoints.size(); ++i) {
      exp.at(static_cast<int>(i), 0) = scene.expert.waypoints[i][0];
      exp.at(static_cast<int>(i), 1) = scene.expert.waypoints[i][1];
    }
    entries.emplace_back("expert", exp);
  }
  {
    Tensor ag({static_cast<int>(scene.agents.size()), 8});
    for (std::size_t i = 0; i < scene.agents.size(); ++i) {
      const auto& a = scene.agents[i];
      const int r = static_cast<int>(i);
      ag.at(r, 0) = a.x;
      ag.at(r, 1) = a.y;
      ag.at(r, 2) = a.width;
      ag.at(r, 3) = a.length;
      ag.at(r, 4) = a.yaw;
      ag.at(r, 5) = a.vx;
      ag.at(r, 6) = a.vy;
      ag.at(r, 7) = a.cls;
    }
    entries.emplace_back("agents", ag);
  }
  for (std::size_t li = 0; li < scene.lanes.size(); ++li) {
    Tensor pts({static_cast<int>(scene.lanes[li].points.size()), 2});
    for (std::size_t i = 0; i < scene.lanes[li].points.size(); ++i) {
      pts.at(static_cast<int>(i), 0) = scene.lanes[li].points[i][0];
      pts.at(static_cast<int>(i), 1) = scene.lanes[li].points[i][1];
    }
    entries.emplace_back("lane" + std::to_string(li), pts);
  }
  for (std::size_t l = 0; l < scene.features.levels.size(); ++l)
    for (std::size_t v = 0; v < scene.features.levels[l].size(); ++v)
      entries.emplace_back("feat" + std::to_string(l) + "v" + std::to_string(v),
                           scene.features.levels[l][v]);
  entries.emplace_back("meta",
                       Tensor::from({4}, {scene.ego_speed, scene.curvature,
                                          static_cast<double>(scene.nav),
                                          static_cast<double>(scene.seed)}));
  save_tensor_table(scene_base(dir, index) + ".bin", entries);

  nlohmann::json j;
  j["caption"] = scene.caption;
  j["nav"] = scene.nav;
  j["dt"] = scene.expert.dt;
  std::vector<int> lane_cls;
  for (const auto& l : scene.lanes) lane_cls.push_back(l.cls);
  j["lane_classes"] = lane_cls;
  std::ofstream out(scene_base(dir, index) + ".json");
  out << j.dump(2) << "\n";
}

Scene load_scene(const std::string& dir, int index, const Config& cfg) {
  auto entries = load_tensor_table(scene_base(dir, index) + ".bin");
  auto find = [&](const std::string& name) -> Tensor {
    for (auto& [n, t] : entries)
      if (n == name) return t;
    throw std::runtime_error("scene cache: missing entry " + name);
  };
  std::ifstream in(scene_base(dir, index) + ".json");
  if (!in) throw std::runtime_error("scene cache: missing sidecar for index " +
                                    std::to_string(index));
  nlohmann::json j;
  in >> j;

  Scene scene;
  scene.caption = j["caption"].get<std::string>();
  scene.nav = j["nav"].get<int>();
  Tensor occ = find("occupancy");
  scene.occupancy.resize(occ.numel());
  for (std::size_t i = 0; i < occ.numel(); ++i)
    scene.occupancy[i] = occ.data()[i] != 0.0 ? 1 : 0;
  Tensor hist = find("history");
  for (int i = 0; i < hist.rows(); ++i)
    scene.history.positions.push_back({hist.at(i, 0), hist.at(i, 1)});
  Tensor exp = find("expert");
  scene.expert.dt = j["dt"].get<double>();
  for (int i = 0; i < exp.rows(); ++i)
    scene.expert.waypoints.push_back({exp.at(i, 0), exp.at(i, 1)});
  Tensor ag = find("agents");
  for (int i = 0; i < ag.rows(); ++i) {
    Agent a;
    a.x = ag.at(i, 0);
    a.y = ag.at(i, 1);
    a.width = ag.at(i, 2);
    a.length = ag.at(i, 3);
    a.yaw = ag.at(i, 4);
    a.vx = ag.at(i, 5);
    a.vy = ag.at(i, 6);
    a.cls = static_cast<int>(ag.at(i, 7));
    scene.agents.push_back(a);
  }
  const auto lane_cls = j["lane_classes"].get<std::vector<int>>();
  for (std::size_t li = 0; li < lane_cls.size(); ++li) {
    Polyline line;
    line.cls = lane_cls[li];
    Tensor pts = find("lane" + std::to_string(li));
    for (int i = 0; i < pts.rows(); ++i)
      line.points.push_back({pts.at(i, 0), pts.at(i, 1)});
    scene.lanes.push_back(line);
  }
  scene.features.levels.resize(2);
  for (int l = 0; l < 2; ++l)
    for (int v = 0; v < 2; ++v)
      scene.features.levels[l].push_back(
          find("feat" + std::to_string(l) + "v" + std::to_string(v)));
  Tensor meta = find("meta");
  scene.ego_speed = meta.data()[0];
  scene.curvature = meta.data()[1];
  scene.seed = static_cast<std::uint64_t>(meta.data()[3]);
  (void)cfg;
  return scene;
}

}  // namespace udvla
