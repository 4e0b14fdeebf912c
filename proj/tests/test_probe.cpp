#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "udvla/probe.hpp"
#include "udvla/train.hpp"

using namespace udvla;

namespace {

Config micro_config() {
  Config cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.d_q = 4;
  cfg.d_occ = 2;
  cfg.n_det = 6;
  cfg.n_map = 4;
  cfg.n_occ = 16;
  cfg.map_points = 2;
  cfg.motion_modes = 3;
  cfg.sample_points = 2;
  cfg.pre_blocks = 1;
  cfg.post_blocks = 1;
  cfg.grid = 8;
  cfg.batch = 2;
  cfg.steps_per_epoch = 1;
  cfg.epochs = {1, 1, 1};
  cfg.euler_steps = 2;
  return cfg;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Scene two_object_scene(const Config& cfg) {
  Scene scene;
  Agent a;
  a.x = 0.0;
  a.y = 0.0;
  a.cls = 0;
  scene.agents.push_back(a);
  Agent b;
  b.x = 5.0;
  b.y = 0.0;
  b.cls = 1;
  scene.agents.push_back(b);
  scene.occupancy.assign(
      static_cast<std::size_t>(cfg.grid) * cfg.grid, 0);
  return scene;
}

PerceptionOutputs stub_outputs(const std::vector<std::array<double, 3>>& preds,
                               const std::vector<int>& classes,
                               const Config& cfg) {
  // preds: (x, y, confidence); classes: predicted class id per row
  const int n = static_cast<int>(preds.size());
  PerceptionOutputs out;
  out.det_center = Tensor({n, 2});
  out.det_logits = Tensor::full({n, 3}, -10.0);
  out.det_conf = Tensor({n, 1});
  for (int i = 0; i < n; ++i) {
    out.det_center.at(i, 0) = preds[i][0];
    out.det_center.at(i, 1) = preds[i][1];
    out.det_conf.at(i, 0) = preds[i][2];
    out.det_logits.at(i, classes[i]) = 10.0;
  }
  out.occupancy = Tensor::zeros({cfg.grid * cfg.grid, 1});
  return out;
}

}  // namespace

TEST_CASE("cosine: reference values, symmetry, scale invariance, guards") {
  CHECK(cosine({1, 0}, {1, 0}) == 1.0);
  CHECK(cosine({1, 0}, {0, 1}) == 0.0);
  CHECK(cosine({1, 0}, {1, 1}) ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(cosine({1, 1}, {1, 0}) == cosine({1, 0}, {1, 1}));
  CHECK(cosine({3, 0}, {1, 1}) == cosine({1, 0}, {1, 1}));  // alpha > 0
  CHECK(cosine({0, 0}, {1, 1}) == 0.0);  // degenerate zero vector
  CHECK_THROWS_AS(cosine({1}, {1, 2}), std::runtime_error);
}

TEST_CASE("group cosine over layer snapshots") {
  TokenGroups layer;
  layer.und = Tensor::from({2, 2}, {2, 0, 0, 0});  // pools to (1, 0)
  layer.per = Tensor::from({1, 2}, {1, 1});
  layer.act = Tensor::from({1, 2}, {0, 3});
  const auto cos = group_cosine({layer});
  REQUIRE(cos.size() == 1);
  CHECK(cos[0].layer == 0);
  CHECK(cos[0].cos_und_per ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(cos[0].cos_und_act == doctest::Approx(0.0));

  TokenGroups no_act;
  no_act.und = layer.und;
  no_act.per = layer.per;
  const auto cos2 = group_cosine({no_act, no_act});
  CHECK(cos2.size() == 2);
  CHECK(cos2[1].cos_und_act == 0.0);

  CHECK_THROWS_WITH_AS(group_cosine({}),
                       "probe: snapshots missing; probe mode disabled",
                       std::runtime_error);
}

TEST_CASE("detection AP matches a brute-force match enumeration") {
  Config cfg = micro_config();
  const Scene scene = two_object_scene(cfg);

  // ranked: TP@0.2m cls0, FP cls1, TP@0.3m cls1
  const PerceptionOutputs out = stub_outputs(
      {{0.2, 0.0, 0.9}, {10.0, 10.0, 0.8}, {5.3, 0.0, 0.7}}, {0, 1, 1}, cfg);

  // threshold 0.5: both true positives match -> AP = (1/1 + 2/3) / 2
  CHECK(detection_ap(out, scene, cfg, {0.5}) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  // threshold 0.25: only the first matches -> AP = 1/2
  CHECK(detection_ap(out, scene, cfg, {0.25}) ==
        doctest::Approx(0.5).epsilon(1e-12));
  // mean over both thresholds
  CHECK(detection_ap(out, scene, cfg, {0.25, 0.5}) ==
        doctest::Approx(0.5 * (0.5 + 5.0 / 6.0)).epsilon(1e-12));

  // perfect predictions (plus trailing background) score exactly 1
  const PerceptionOutputs perfect = stub_outputs(
      {{0.0, 0.0, 5.0}, {5.0, 0.0, 4.0}, {20.0, 20.0, -5.0}}, {0, 1, 2}, cfg);
  CHECK(detection_ap(perfect, scene, cfg, {0.5, 1.0, 2.0}) == 1.0);

  // wrong class never matches
  const PerceptionOutputs wrong = stub_outputs(
      {{0.0, 0.0, 5.0}, {5.0, 0.0, 4.0}}, {1, 0}, cfg);
  CHECK(detection_ap(wrong, scene, cfg, {2.0}) == 0.0);

  Scene empty = scene;
  empty.agents.clear();
  CHECK_THROWS_AS(detection_ap(out, empty, cfg, {0.5}), std::runtime_error);
}

TEST_CASE("map chamfer AP and occupancy accuracy oracles") {
  Config cfg = micro_config();
  Scene scene;
  Polyline lane;
  lane.cls = 1;
  lane.points = {{0.0, -2.5}, {10.0, -2.5}};
  scene.lanes.push_back(lane);
  scene.occupancy.assign(static_cast<std::size_t>(cfg.grid) * cfg.grid, 0);

  PerceptionOutputs out;
  out.map_points = Tensor::from({1, 4}, {0.0, -2.5, 10.0, -2.5});
  out.map_logits = Tensor::full({1, 3}, -10.0);
  out.map_logits.at(0, 1) = 10.0;
  CHECK(map_chamfer_ap(out, scene, cfg, {0.5, 1.0}) == 1.0);

  // a 2 m lateral shift exceeds both thresholds
  PerceptionOutputs shifted = out;
  shifted.map_points = Tensor::from({1, 4}, {0.0, -4.5, 10.0, -4.5});
  CHECK(map_chamfer_ap(shifted, scene, cfg, {0.5, 1.0}) == 0.0);

  // occupancy: sign of the logit against the boolean grid
  scene.occupancy[3] = 1;
  PerceptionOutputs occ;
  occ.occupancy = Tensor::full({cfg.grid * cfg.grid, 1}, -1.0);
  occ.occupancy.at(3, 0) = 1.0;
  CHECK(occupancy_accuracy(occ, scene) == 1.0);
  occ.occupancy.at(3, 0) = -1.0;
  occ.occupancy.at(4, 0) = 1.0;
  CHECK(occupancy_accuracy(occ, scene) ==
        doctest::Approx(1.0 - 2.0 / (cfg.grid * cfg.grid)).epsilon(1e-12));
}

TEST_CASE("evaluate: finite metrics and no parameter side effects") {
  Config cfg = micro_config();
  const Dataset data = make_dataset(12, 4, cfg);
  Rng rng(5);
  Model m = make_model(cfg, Vocabulary::standard(), {}, rng);

  std::map<std::string, std::vector<double>> before;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    before[name] = t.data();
  });

  const EvalMetrics em = evaluate(m, {}, data, data.test);
  CHECK(std::isfinite(em.avg_l2));
  CHECK(std::isfinite(em.det_ap));
  CHECK(std::isfinite(em.map_ap));
  CHECK(std::isfinite(em.caption_ppl));
  CHECK(em.occ_accuracy >= 0.0);
  CHECK(em.occ_accuracy <= 1.0);
  CHECK(em.collision_rate >= 0.0);
  CHECK(em.collision_rate <= 100.0);

  const double g = general_slice_nll(m, {}, 4, 17);
  const double d = driving_caption_nll(m, {}, data, data.val);
  CHECK(std::isfinite(g));
  CHECK(std::isfinite(d));
  CHECK(g > 0.0);
  CHECK(d > 0.0);

  bool unchanged = true;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    if (before.at(name) != t.data()) unchanged = false;
  });
  CHECK(unchanged);
}

TEST_CASE("svg line chart output") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "udvla_chart.svg").string();
  write_svg_lines(path, "demo", {{"a", {0.0, 0.5, 1.0}}, {"b", {1.0, 0.5, 0.0}}});
  const std::string svg = file_bytes(path);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find(">a</text>") != std::string::npos);
  CHECK(svg.find(">b</text>") != std::string::npos);

  write_svg_lines(path + "2", "demo",
                  {{"a", {0.0, 0.5, 1.0}}, {"b", {1.0, 0.5, 0.0}}});
  CHECK(file_bytes(path + "2") == svg);
}

TEST_CASE("interference experiment: artifacts, determinism, config guard") {
  namespace fs = std::filesystem;
  Config cfg = micro_config();
  const Dataset data = make_dataset(12, 9, cfg);

  Config other = cfg;
  other.d = 16;
  CHECK_THROWS_WITH_AS(interference_experiment(cfg, other, {1}, data, "/tmp"),
                       "probe: incomparable configs", std::runtime_error);

  const std::string dir1 = (fs::temp_directory_path() / "udvla_p1").string();
  const std::string dir2 = (fs::temp_directory_path() / "udvla_p2").string();
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  const InterferenceReport rep =
      interference_experiment(cfg, cfg, {1}, data, dir1);
  CHECK(rep.probe.size() == 2 * static_cast<std::size_t>(cfg.layers));
  for (const auto& r : rep.probe) {
    CHECK(r.cos_und_per >= -1.0);
    CHECK(r.cos_und_per <= 1.0);
    CHECK(r.cos_und_act >= -1.0);
    CHECK(r.cos_und_act <= 1.0);
  }
  CHECK(rep.forgetting.size() == 4);  // 2 configs x 2 stages
  for (const auto& r : rep.forgetting) CHECK(std::isfinite(r.general_nll));
  CHECK(rep.metrics.size() == 2 * 9);

  for (const char* name :
       {"/probe.csv", "/forgetting.csv", "/metrics.csv", "/probe_cosine.svg",
        "/forgetting.svg"})
    CHECK(fs::exists(dir1 + name));

  interference_experiment(cfg, cfg, {1}, data, dir2);
  for (const char* name : {"/probe.csv", "/forgetting.csv", "/metrics.csv"})
    CHECK(file_bytes(dir1 + name) == file_bytes(dir2 + name));
}
