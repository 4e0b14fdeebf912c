#include "udvla/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "udvla/ops.hpp"
#include "udvla/train.hpp"

namespace udvla {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::vector<double> mean_pool(const Tensor& t) {
  std::vector<double> out;
  if (!t.defined() || t.rows() == 0) return out;
  out.assign(t.cols(), 0.0);
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) out[j] += t.at(i, j);
  for (double& v : out) v /= t.rows();
  return out;
}

Model adapted_view(Model& m, const std::vector<LoraAdapter>& adapters) {
  Model view = m;
  if (!adapters.empty()) apply_lora(view, adapters);
  return view;
}

// Average precision of confidence-ranked predictions against a greedy
// nearest-unmatched matcher at one distance threshold.
double ranked_ap(const std::vector<std::pair<double, int>>& conf_cls,
                 const std::vector<int>& gt_cls,
                 const std::function<double(int, int)>& distance,
                 double threshold) {
  std::vector<int> order(conf_cls.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return conf_cls[a].first > conf_cls[b].first;
  });
  std::vector<bool> taken(gt_cls.size(), false);
  double ap = 0.0;
  int tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const int pi = order[rank];
    int best = -1;
    double best_d = threshold;
    for (std::size_t g = 0; g < gt_cls.size(); ++g) {
      if (taken[g] || gt_cls[g] != conf_cls[pi].second) continue;
      const double d = distance(pi, static_cast<int>(g));
      if (d <= best_d) {
        best_d = d;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(gt_cls.size());
}

int argmax_row(const Tensor& t, int row) {
  int best = 0;
  for (int j = 1; j < t.cols(); ++j)
    if (t.at(row, j) > t.at(row, best)) best = j;
  return best;
}

}  // namespace

double cosine(const std::vector<double>& v, const std::vector<double>& w) {
  if (v.size() != w.size())
    throw std::runtime_error("probe: cosine length mismatch");
  double dot = 0, nv = 0, nw = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    dot += v[i] * w[i];
    nv += v[i] * v[i];
    nw += w[i] * w[i];
  }
  if (nv == 0.0 || nw == 0.0) return 0.0;  // degenerate: zero vector
  return dot / (std::sqrt(nv) * std::sqrt(nw));
}

std::vector<LayerCosines> group_cosine(
    const std::vector<TokenGroups>& snapshots) {
  if (snapshots.empty())
    throw std::runtime_error("probe: snapshots missing; probe mode disabled");
  std::vector<LayerCosines> out;
  for (std::size_t l = 0; l < snapshots.size(); ++l) {
    LayerCosines c;
    c.layer = static_cast<int>(l);
    const auto und = mean_pool(snapshots[l].und);
    const auto per = mean_pool(snapshots[l].per);
    const auto act = mean_pool(snapshots[l].act);
    c.cos_und_per = per.empty() ? 0.0 : cosine(und, per);
    c.cos_und_act = act.empty() ? 0.0 : cosine(und, act);
    out.push_back(c);
  }
  return out;
}

std::vector<LayerCosines> model_cosines(Model& m,
                                        const std::vector<LoraAdapter>& adapters,
                                        const Dataset& data,
                                        const std::vector<int>& split,
                                        int n_scenes) {
  NoGradScope no_grad;
  Model view = adapted_view(m, adapters);
  const int n =
      std::min<int>(n_scenes, static_cast<int>(split.size()));
  if (n == 0) throw std::runtime_error("probe: empty split");
  std::vector<LayerCosines> acc(m.cfg.layers);
  for (int i = 0; i < n; ++i) {
    const Scene& scene = data.scenes[split[i]];
    std::vector<TokenGroups> snapshots;
    ForwardOptions opts;
    opts.flow_t = 0.5;
    opts.noise_seed = scene.seed;
    opts.snapshots = &snapshots;
    model_forward(view, scene, opts);
    const auto cos = group_cosine(snapshots);
    for (std::size_t l = 0; l < cos.size(); ++l) {
      acc[l].layer = cos[l].layer;
      acc[l].cos_und_per += cos[l].cos_und_per / n;
      acc[l].cos_und_act += cos[l].cos_und_act / n;
    }
  }
  return acc;
}

double detection_ap(const PerceptionOutputs& out, const Scene& scene,
                    const Config& cfg, const std::vector<double>& thresholds) {
  (void)cfg;
  if (scene.agents.empty())
    throw std::runtime_error("probe: no ground truth objects");
  std::vector<std::pair<double, int>> conf_cls;
  for (int i = 0; i < out.det_conf.rows(); ++i)
    conf_cls.emplace_back(out.det_conf.at(i, 0), argmax_row(out.det_logits, i));
  std::vector<int> gt_cls;
  for (const Agent& a : scene.agents) gt_cls.push_back(a.cls);
  auto distance = [&](int p, int g) {
    return std::hypot(out.det_center.at(p, 0) - scene.agents[g].x,
                      out.det_center.at(p, 1) - scene.agents[g].y);
  };
  double total = 0.0;
  for (double t : thresholds)
    total += ranked_ap(conf_cls, gt_cls, distance, t);
  return total / thresholds.size();
}

double map_chamfer_ap(const PerceptionOutputs& out, const Scene& scene,
                      const Config& cfg, const std::vector<double>& thresholds) {
  if (scene.lanes.empty())
    throw std::runtime_error("probe: no ground truth polylines");
  const int pts = cfg.map_points;
  std::vector<std::pair<double, int>> conf_cls;
  for (int i = 0; i < out.map_points.rows(); ++i) {
    const int cls = argmax_row(out.map_logits, i);
    conf_cls.emplace_back(out.map_logits.at(i, cls), cls);
  }
  std::vector<int> gt_cls;
  for (const Polyline& l : scene.lanes) gt_cls.push_back(l.cls);
  auto distance = [&](int p, int g) {
    const auto& gt = scene.lanes[g].points;
    double fwd = 0.0;
    for (int k = 0; k < pts; ++k) {
      const double px = out.map_points.at(p, 2 * k);
      const double py = out.map_points.at(p, 2 * k + 1);
      double best = 1e300;
      for (const auto& q : gt)
        best = std::min(best, std::hypot(px - q[0], py - q[1]));
      fwd += best / pts;
    }
    double bwd = 0.0;
    for (const auto& q : gt) {
      double best = 1e300;
      for (int k = 0; k < pts; ++k)
        best = std::min(best, std::hypot(out.map_points.at(p, 2 * k) - q[0],
                                         out.map_points.at(p, 2 * k + 1) - q[1]));
      bwd += best / gt.size();
    }
    return 0.5 * (fwd + bwd);
  };
  double total = 0.0;
  for (double t : thresholds)
    total += ranked_ap(conf_cls, gt_cls, distance, t);
  return total / thresholds.size();
}

double occupancy_accuracy(const PerceptionOutputs& out, const Scene& scene) {
  const std::size_t n = scene.occupancy.size();
  if (static_cast<std::size_t>(out.occupancy.rows()) != n)
    throw std::runtime_error("probe: occupancy grid mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pred = out.occupancy.at(static_cast<int>(i), 0) > 0.0;
    if (pred == (scene.occupancy[i] != 0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

EvalMetrics evaluate(Model& m, const std::vector<LoraAdapter>& adapters,
                     const Dataset& data, const std::vector<int>& split,
                     int max_scenes) {
  NoGradScope no_grad;
  Model view = adapted_view(m, adapters);
  const Config& cfg = view.cfg;
  const int n = max_scenes < 0
                    ? static_cast<int>(split.size())
                    : std::min<int>(max_scenes, split.size());
  if (n == 0) throw std::runtime_error("probe: empty split");

  EvalMetrics acc;
  double nll_sum = 0.0;
  int det_scenes = 0, map_scenes = 0;
  for (int i = 0; i < n; ++i) {
    const Scene& scene = data.scenes[split[i]];
    ForwardOptions opts;
    opts.with_action = false;
    const ForwardResult fwd = model_forward(view, scene, opts);
    nll_sum += caption_nll(view, fwd).item();
    if (!scene.agents.empty()) {
      acc.det_ap += detection_ap(fwd.perc, scene, cfg, {0.5, 1.0, 2.0});
      ++det_scenes;
    }
    if (!scene.lanes.empty()) {
      acc.map_ap += map_chamfer_ap(fwd.perc, scene, cfg, {0.5, 1.0});
      ++map_scenes;
    }
    acc.occ_accuracy += occupancy_accuracy(fwd.perc, scene) / n;

    const Trajectory plan =
        sample_plan(view, scene, cfg.euler_steps, scene.seed * 2 + 1);
    const TrajectoryMetrics tm = trajectory_metrics(
        plan, scene.expert, scene.occupancy, cfg.grid, cfg.bev_extent);
    acc.l2_1s += tm.l2_1s / n;
    acc.l2_2s += tm.l2_2s / n;
    acc.l2_3s += tm.l2_3s / n;
    acc.avg_l2 += tm.avg_l2 / n;
    acc.collision_rate += 100.0 * tm.collision / n;
  }
  if (det_scenes > 0) acc.det_ap /= det_scenes;
  if (map_scenes > 0) acc.map_ap /= map_scenes;
  acc.caption_ppl = std::exp(nll_sum / n);
  return acc;
}

double general_slice_nll(Model& m, const std::vector<LoraAdapter>& adapters,
                         int n_sentences, std::uint64_t seed) {
  NoGradScope no_grad;
  Model view = adapted_view(m, adapters);
  Rng rng(seed);
  double total = 0.0;
  for (int i = 0; i < n_sentences; ++i)
    total += text_nll(view, general_sentence(rng)).item();
  return total / n_sentences;
}

double driving_caption_nll(Model& m, const std::vector<LoraAdapter>& adapters,
                           const Dataset& data, const std::vector<int>& split,
                           int max_scenes) {
  NoGradScope no_grad;
  Model view = adapted_view(m, adapters);
  const int n = max_scenes < 0
                    ? static_cast<int>(split.size())
                    : std::min<int>(max_scenes, split.size());
  if (n == 0) throw std::runtime_error("probe: empty split");
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const Scene& scene = data.scenes[split[i]];
    ForwardOptions opts;
    opts.with_perception = false;
    opts.with_action = false;
    const ForwardResult fwd = model_forward(view, scene, opts);
    total += caption_nll(view, fwd).item();
  }
  return total / n;
}

void write_svg_lines(const std::string& path, const std::string& title,
                     const std::vector<SvgSeries>& series) {
  const int width = 640, height = 420, pad = 50;
  double lo = 1e300, hi = -1e300;
  std::size_t max_n = 0;
  for (const auto& s : series) {
    max_n = std::max(max_n, s.values.size());
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (max_n == 0) {
    lo = 0;
    hi = 1;
    max_n = 1;
  }
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b"};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("probe: cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">" << title
      << "</text>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << height - pad << "\" x2=\""
      << width - pad << "\" y2=\"" << height - pad
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad
      << "\" y2=\"" << height - pad << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << pad - 6 << "\" y=\"" << pad
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt(hi) << "</text>\n";
  out << "<text x=\"" << pad - 6 << "\" y=\"" << height - pad
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt(lo) << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (s.values.empty()) continue;
    out << "<polyline fill=\"none\" stroke=\"" << colors[si % 6]
        << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double fx = max_n > 1
                            ? static_cast<double>(i) / (max_n - 1)
                            : 0.5;
      const double fy = (s.values[i] - lo) / (hi - lo);
      out << fmt(pad + fx * (width - 2 * pad)) << ","
          << fmt(height - pad - fy * (height - 2 * pad)) << " ";
    }
    out << "\"/>\n";
    out << "<text x=\"" << width - pad + 4 << "\" y=\""
        << pad + 16 * static_cast<int>(si)
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
        << colors[si % 6] << "\">" << s.name << "</text>\n";
  }
  out << "</svg>\n";
}

InterferenceReport interference_experiment(const Config& mot_cfg,
                                           const Config& shared_cfg,
                                           const std::vector<std::uint64_t>& seeds,
                                           const Dataset& data,
                                           const std::string& out_dir) {
  if (mot_cfg.d != shared_cfg.d || mot_cfg.heads != shared_cfg.heads ||
      mot_cfg.layers != shared_cfg.layers)
    throw std::runtime_error("probe: incomparable configs");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<const Scene*> bank_scenes;
  for (int idx : data.train) bank_scenes.push_back(&data.scenes[idx]);

  InterferenceReport report;
  const int kProbeScenes = 4, kEvalScenes = 16, kGeneral = 16;

  struct Variant {
    std::string tag;
    Config cfg;
  };
  std::vector<Variant> variants{{"mot", mot_cfg}, {"shared", shared_cfg}};
  variants[0].cfg.arch = "mot";
  variants[1].cfg.arch = "shared";

  for (auto& variant : variants) {
    for (std::uint64_t seed : seeds) {
      Config cfg = variant.cfg;
      cfg.seed = seed;
      Rng rng(seed);
      Model m = make_model(cfg, Vocabulary::standard(), bank_scenes, rng);
      TrainSession session(m, data);

      session.run_stage(1);
      report.forgetting.push_back(
          {variant.tag, seed, 1,
           general_slice_nll(m, session.adapters(), kGeneral, 17),
           driving_caption_nll(m, session.adapters(), data, data.val,
                               kEvalScenes)});

      session.run_stage(2);
      report.forgetting.push_back(
          {variant.tag, seed, 2,
           general_slice_nll(m, session.adapters(), kGeneral, 17),
           driving_caption_nll(m, session.adapters(), data, data.val,
                               kEvalScenes)});

      for (const LayerCosines& c :
           model_cosines(m, session.adapters(), data, data.val, kProbeScenes))
        report.probe.push_back(
            {variant.tag, seed, c.layer, c.cos_und_per, c.cos_und_act});

      const EvalMetrics em =
          evaluate(m, session.adapters(), data, data.test, kEvalScenes);
      const std::vector<std::pair<std::string, double>> rows{
          {"l2_1s", em.l2_1s},         {"l2_2s", em.l2_2s},
          {"l2_3s", em.l2_3s},         {"avg_l2", em.avg_l2},
          {"collision_rate", em.collision_rate},
          {"det_ap", em.det_ap},       {"map_ap", em.map_ap},
          {"occ_accuracy", em.occ_accuracy},
          {"caption_ppl", em.caption_ppl}};
      for (const auto& [name, value] : rows)
        report.metrics.push_back({variant.tag, seed, "test", name, value});
    }
  }

  {
    std::ofstream out(out_dir + "/probe.csv");
    out << "config,seed,layer,cos_und_per,cos_und_act\n";
    for (const auto& r : report.probe)
      out << r.config << "," << r.seed << "," << r.layer << ","
          << fmt(r.cos_und_per) << "," << fmt(r.cos_und_act) << "\n";
  }
  {
    std::ofstream out(out_dir + "/forgetting.csv");
    out << "config,seed,stage,general_nll,driving_nll\n";
    for (const auto& r : report.forgetting)
      out << r.config << "," << r.seed << "," << r.stage << ","
          << fmt(r.general_nll) << "," << fmt(r.driving_nll) << "\n";
  }
  {
    std::ofstream out(out_dir + "/metrics.csv");
    out << "config,seed,split,metric,value\n";
    for (const auto& r : report.metrics)
      out << r.config << "," << r.seed << "," << r.split << "," << r.metric
          << "," << fmt(r.value) << "\n";
  }

  // mean-over-seeds cosine curve per config
  std::vector<SvgSeries> cos_series;
  for (const auto& variant : variants) {
    SvgSeries s;
    s.name = variant.tag;
    s.values.assign(mot_cfg.layers, 0.0);
    for (const auto& r : report.probe)
      if (r.config == variant.tag)
        s.values[r.layer] += r.cos_und_per / seeds.size();
    cos_series.push_back(std::move(s));
  }
  write_svg_lines(out_dir + "/probe_cosine.svg",
                  "cosine(und, per) per layer", cos_series);

  std::vector<SvgSeries> forget_series;
  for (const auto& variant : variants) {
    SvgSeries s;
    s.name = variant.tag;
    s.values.assign(2, 0.0);
    for (const auto& r : report.forgetting)
      if (r.config == variant.tag)
        s.values[r.stage - 1] += r.general_nll / seeds.size();
    forget_series.push_back(std::move(s));
  }
  write_svg_lines(out_dir + "/forgetting.svg",
                  "general-slice NLL by stage", forget_series);

  return report;
}

}  // namespace udvla
