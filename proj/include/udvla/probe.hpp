#pragma once

#include <string>
#include <vector>

#include "udvla/model.hpp"
#include "udvla/optim.hpp"
#include "udvla/worldgen.hpp"

namespace udvla {

// Cosine of two equally shaped vectors; zero vectors yield 0.
double cosine(const std::vector<double>& v, const std::vector<double>& w);

struct LayerCosines {
  int layer = 0;
  double cos_und_per = 0;
  double cos_und_act = 0;
};

// Mean-pools each group of every post-layer snapshot and reports the
// cosine between the pooled understanding vector and the other groups.
// Throws when no snapshots were captured.
std::vector<LayerCosines> group_cosine(
    const std::vector<TokenGroups>& snapshots);

// Per-layer cosines averaged over up to n_scenes forwards of the model.
std::vector<LayerCosines> model_cosines(Model& m,
                                        const std::vector<LoraAdapter>& adapters,
                                        const Dataset& data,
                                        const std::vector<int>& split,
                                        int n_scenes);

struct EvalMetrics {
  double l2_1s = 0, l2_2s = 0, l2_3s = 0, avg_l2 = 0;
  double collision_rate = 0;  // percent
  double det_ap = 0;          // mean AP over center thresholds {0.5, 1, 2} m
  double map_ap = 0;          // mean Chamfer-AP over {0.5, 1} m
  double occ_accuracy = 0;
  double caption_ppl = 0;
};

// Average-precision scores for one scene; exposed for oracle tests.
double detection_ap(const PerceptionOutputs& out, const Scene& scene,
                    const Config& cfg, const std::vector<double>& thresholds);
double map_chamfer_ap(const PerceptionOutputs& out, const Scene& scene,
                      const Config& cfg, const std::vector<double>& thresholds);
double occupancy_accuracy(const PerceptionOutputs& out, const Scene& scene);

// Full evaluation over a split; read-only on the parameters. max_scenes < 0
// evaluates the whole split.
EvalMetrics evaluate(Model& m, const std::vector<LoraAdapter>& adapters,
                     const Dataset& data, const std::vector<int>& split,
                     int max_scenes = -1);

// Mean next-token NLL over seeded general-slice sentences.
double general_slice_nll(Model& m, const std::vector<LoraAdapter>& adapters,
                         int n_sentences, std::uint64_t seed);
// Mean caption NLL over a split.
double driving_caption_nll(Model& m, const std::vector<LoraAdapter>& adapters,
                           const Dataset& data, const std::vector<int>& split,
                           int max_scenes = -1);

struct ProbeRecord {
  std::string config;
  std::uint64_t seed = 0;
  int layer = 0;
  double cos_und_per = 0, cos_und_act = 0;
};

struct ForgettingRecord {
  std::string config;
  std::uint64_t seed = 0;
  int stage = 0;
  double general_nll = 0, driving_nll = 0;
};

struct MetricRecord {
  std::string config;
  std::uint64_t seed = 0;
  std::string split;
  std::string metric;
  double value = 0;
};

struct InterferenceReport {
  std::vector<ProbeRecord> probe;
  std::vector<ForgettingRecord> forgetting;
  std::vector<MetricRecord> metrics;
};

// Trains the expert-separated and shared-weight variants through stages 1
// and 2 with identical data and budgets for each seed, then compares
// per-layer cosines, general-slice forgetting, and test-split planning.
// Writes probe.csv, forgetting.csv, metrics.csv, and SVG line charts under
// out_dir. The two configs must agree on d/heads/layers.
InterferenceReport interference_experiment(const Config& mot_cfg,
                                           const Config& shared_cfg,
                                           const std::vector<std::uint64_t>& seeds,
                                           const Dataset& data,
                                           const std::string& out_dir);

// Minimal line chart; one polyline per series over x = 0..n-1.
struct SvgSeries {
  std::string name;
  std::vector<double> values;
};
void write_svg_lines(const std::string& path, const std::string& title,
                     const std::vector<SvgSeries>& series);

}  // namespace udvla
