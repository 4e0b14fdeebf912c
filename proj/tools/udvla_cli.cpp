#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "udvla/gradcheck.hpp"
#include "udvla/mot.hpp"
#include "udvla/probe.hpp"
#include "udvla/train.hpp"

namespace fs = std::filesystem;
using namespace udvla;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitConfig = 2;

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cli: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --key.path=value leftovers are applied onto the JSON config one-to-one.
void apply_extra_flags(Config& cfg, const std::vector<std::string>& extras) {
  for (const std::string& raw : extras) {
    if (raw.rfind("--", 0) != 0)
      throw std::runtime_error("config: unexpected argument " + raw);
    const auto eq = raw.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected --key=value, got " + raw);
    apply_override(cfg, raw.substr(2, eq - 2), raw.substr(eq + 1));
  }
}

Config finalize_config(Config cfg) {
  if (const char* out = std::getenv("UDVLA_OUT"); out && *out)
    cfg.out_dir = out;
  return cfg;
}

// Scene content depends on the world geometry and the data seed; anything
// else (model widths, training schedule) may differ between runs.
nlohmann::json cache_key(const Config& cfg) {
  const auto full = nlohmann::json::parse(config_to_json_text(cfg));
  return {{"n_scenes", cfg.n_scenes},
          {"seed", cfg.data_seed},
          {"world", full.at("world")}};
}

Dataset load_or_generate_dataset(const Config& cfg, bool allow_generate) {
  const std::string manifest = cfg.data_dir + "/manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    nlohmann::json stored;
    in >> stored;
    if (stored != cache_key(cfg))
      throw std::runtime_error(
          "config: dataset cache at " + cfg.data_dir +
          " was built with a different world config; regenerate it");
    Dataset data;
    for (int i = 0; i < cfg.n_scenes; ++i)
      data.scenes.push_back(load_scene(cfg.data_dir, i, cfg));
    for (int i = 0; i < cfg.n_scenes; ++i) {
      switch (i % 10) {
        case 8: data.val.push_back(i); break;
        case 9: data.test.push_back(i); break;
        default: data.train.push_back(i);
      }
    }
    return data;
  }
  if (!allow_generate)
    throw std::runtime_error("cli: dataset cache missing at " + cfg.data_dir +
                             " (run gen-data first)");
  return make_dataset(cfg.n_scenes, cfg.data_seed, cfg);
}

int cmd_gen_data(const Config& cfg) {
  const std::string manifest = cfg.data_dir + "/manifest.json";
  const Dataset data = make_dataset(cfg.n_scenes, cfg.data_seed, cfg);
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    nlohmann::json stored;
    in >> stored;
    if (stored != cache_key(cfg)) {
      std::cerr << "gen-data: existing cache was built with a different "
                   "config\n";
      return kExitValidation;
    }
    // idempotence check: regenerate and compare byte-for-byte
    const std::string probe_dir = cfg.data_dir + "/.verify";
    fs::create_directories(probe_dir);
    for (int i = 0; i < cfg.n_scenes; ++i) {
      save_scene(data.scenes[i], probe_dir, i);
      char name[32];
      std::snprintf(name, sizeof(name), "/scene_%05d.bin", i);
      if (file_bytes(cfg.data_dir + name) != file_bytes(probe_dir + name)) {
        std::cerr << "gen-data: cache mismatch at scene " << i << "\n";
        fs::remove_all(probe_dir);
        return kExitValidation;
      }
    }
    fs::remove_all(probe_dir);
    std::cout << "gen-data: cache verified (" << cfg.n_scenes << " scenes)\n";
    return kExitOk;
  }
  fs::create_directories(cfg.data_dir);
  for (int i = 0; i < cfg.n_scenes; ++i) save_scene(data.scenes[i], cfg.data_dir, i);
  std::ofstream out(manifest);
  out << cache_key(cfg).dump(2) << "\n";
  std::cout << "gen-data: wrote " << cfg.n_scenes << " scenes to "
            << cfg.data_dir << "\n";
  return kExitOk;
}

Model build_model(const Config& cfg, const Dataset& data) {
  std::vector<const Scene*> bank;
  for (int idx : data.train) bank.push_back(&data.scenes[idx]);
  Rng rng(cfg.seed);
  return make_model(cfg, Vocabulary::standard(), bank, rng);
}

int cmd_train(const Config& cfg, int stage, bool all) {
  const Dataset data = load_or_generate_dataset(cfg, true);
  Model m = build_model(cfg, data);
  const int first = all ? 1 : stage;
  const int last = all ? 3 : stage;
  run_training(cfg, data, m, first, last, cfg.out_dir);
  std::cout << "train: stages " << first << ".." << last << " complete; logs in "
            << cfg.out_dir << "/train_log.csv\n";
  return kExitOk;
}

int cmd_eval(const Config& cfg, std::string checkpoint) {
  const Dataset data = load_or_generate_dataset(cfg, true);
  Model m = build_model(cfg, data);
  if (checkpoint.empty()) {
    for (int stage = 3; stage >= 1; --stage) {
      const std::string candidate =
          cfg.out_dir + "/stage" + std::to_string(stage) + ".ckpt";
      if (fs::exists(candidate)) {
        checkpoint = candidate;
        break;
      }
    }
    if (checkpoint.empty())
      throw std::runtime_error("cli: no checkpoint found under " + cfg.out_dir);
  }
  const auto adapters = load_checkpoint(checkpoint, m);
  const EvalMetrics em = evaluate(m, adapters, data, data.test);
  fs::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/metrics.csv";
  std::ofstream out(path);
  out << "config,seed,split,metric,value\n";
  const std::vector<std::pair<std::string, double>> rows{
      {"l2_1s", em.l2_1s},   {"l2_2s", em.l2_2s},
      {"l2_3s", em.l2_3s},   {"avg_l2", em.avg_l2},
      {"collision_rate", em.collision_rate},
      {"det_ap", em.det_ap}, {"map_ap", em.map_ap},
      {"occ_accuracy", em.occ_accuracy},
      {"caption_ppl", em.caption_ppl}};
  for (const auto& [name, value] : rows) {
    out << cfg.arch << "," << cfg.seed << ",test," << name << "," << value
        << "\n";
    std::cout << name << " = " << value << "\n";
  }
  std::cout << "eval: wrote " << path << "\n";
  return kExitOk;
}

int cmd_probe(const Config& cfg, const std::vector<std::uint64_t>& seeds) {
  const Dataset data = load_or_generate_dataset(cfg, true);
  interference_experiment(cfg, cfg, seeds, data, cfg.out_dir);
  std::cout << "probe: wrote probe.csv, forgetting.csv, metrics.csv and SVG "
            << "charts to " << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Config& cfg, double eps, double tol) {
  Config small = cfg;
  const Dataset data = make_dataset(10, cfg.data_seed, small);
  Model m = build_model(small, data);
  const Scene& s1 = data.scenes[data.train[0]];
  const Scene& s2 = data.scenes[data.train[1]];
  const LossFlags all{true, true, true, true};
  std::vector<std::pair<std::string, Tensor>> params;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    params.emplace_back(name, t);
  });
  const auto report = finite_diff_check(
      [&]() { return batch_loss(m, {&s1, &s2}, {"", ""}, all, 5).total; },
      params, eps, tol);
  std::cout << "gradcheck: " << report.checked << " entries, max rel err "
            << report.max_rel_err << " at " << report.worst_name << "["
            << report.worst_index << "]\n";
  std::cout << (report.pass ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
  return report.pass ? kExitOk : kExitValidation;
}

int cmd_selftest(const Config& cfg) {
  bool ok = true;
  auto verdict = [&](const char* name, bool pass) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << "\n";
    ok = ok && pass;
  };

  // mask construction rules on a (2,1,1) layout
  {
    const AttnMask mask = build_mask({2, 1, 1});
    const std::vector<std::uint8_t> expect{1, 0, 0, 0, 1, 1, 0, 0,
                                           1, 1, 1, 0, 1, 1, 1, 1};
    verdict("mask-construction", mask.allowed == expect);
  }

  const int d = 16, heads = 2, layers = 2;
  auto random_groups = [&](Rng& rng, int nu, int np, int na) {
    TokenGroups g;
    g.und = Tensor({nu, d});
    g.per = Tensor({np, d});
    g.act = Tensor({na, d});
    for (auto* t : {&g.und, &g.per, &g.act})
      for (auto& v : t->data()) v = rng.normal();
    return g;
  };

  // exact blindness across 10 random draws
  {
    bool pass = true;
    for (std::uint64_t seed = 0; seed < 10 && pass; ++seed) {
      Rng rng(seed);
      MoTStack stack = make_mot_stack(d, heads, layers, "mot", rng);
      TokenGroups g = random_groups(rng, 5, 4, 3);
      const AttnMask mask = build_mask(g.layout());
      const TokenGroups base = stack_forward(g, stack, mask);
      TokenGroups g2 = g;
      g2.per = Tensor({4, d});
      g2.act = Tensor({3, d});
      for (auto* t : {&g2.per, &g2.act})
        for (auto& v : t->data()) v = rng.normal();
      const TokenGroups perturbed = stack_forward(g2, stack, mask);
      pass = pass && base.und.data() == perturbed.und.data();
      TokenGroups g3 = g;
      g3.act = Tensor({3, d});
      for (auto& v : g3.act.data()) v = rng.normal();
      const TokenGroups act_only = stack_forward(g3, stack, mask);
      pass = pass && base.per.data() == act_only.per.data();
    }
    verdict("blindness-exact", pass);
  }

  // tied experts match the monolithic reference layer
  {
    bool pass = true;
    for (std::uint64_t seed = 0; seed < 5 && pass; ++seed) {
      Rng rng(seed);
      const MoTLayerParams layer = [&] {
        MoTLayerParams p;
        p.und = make_expert_params(d, rng);
        p.per = p.und;
        p.act = p.und;
        p.heads = heads;
        return p;
      }();
      TokenGroups g = random_groups(rng, 4, 3, 2);
      const AttnMask mask = build_mask(g.layout());
      const TokenGroups split = mot_layer_forward(g, layer, mask);
      const Tensor mono = monolithic_layer_forward(
          concat_rows({g.und, g.per, g.act}), layer.und, mask, heads);
      double max_diff = 0.0;
      const Tensor joined = concat_rows({split.und, split.per, split.act});
      for (std::size_t i = 0; i < joined.numel(); ++i)
        max_diff = std::max(max_diff,
                            std::abs(joined.data()[i] - mono.data()[i]));
      pass = pass && max_diff <= 1e-12;
    }
    verdict("monolithic-equivalence", pass);
  }

  // flow sampler recovers the target of a constant oracle field
  {
    Rng rng(3);
    Tensor x1({cfg.horizon, 2});
    for (auto& v : x1.data()) v = rng.normal();
    Rng noise(7);
    Tensor x0({cfg.horizon, 2});
    for (auto& v : x0.data()) v = noise.normal();
    auto field = [&](const Tensor&, double) { return sub(x1, x0); };
    const Trajectory traj = sample_trajectory(field, cfg.horizon, cfg.dt, 10,
                                              7, 1.0);
    double px = 0, py = 0, max_err = 0;
    for (int s = 0; s < cfg.horizon; ++s) {
      max_err = std::max(max_err,
                         std::abs((traj.waypoints[s][0] - px) / cfg.dt -
                                  x1.at(s, 0)));
      max_err = std::max(max_err,
                         std::abs((traj.waypoints[s][1] - py) / cfg.dt -
                                  x1.at(s, 1)));
      px = traj.waypoints[s][0];
      py = traj.waypoints[s][1];
    }
    verdict("flow-oracle", max_err <= 1e-12);
  }

  std::cout << (ok ? "selftest: PASS\n" : "selftest: FAIL\n");
  return ok ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale three-expert driving model"};
  app.allow_extras();

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  auto* gen = app.add_subcommand("gen-data", "Build the dataset cache");
  gen->allow_extras();
  int stage = 0;
  bool all_stages = false;
  auto* train = app.add_subcommand("train", "Run training stages");
  train->allow_extras();
  train->add_option("--stage", stage, "Stage to run (1|2|3)");
  train->add_flag("--all", all_stages, "Run all three stages in order");
  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate on the test split");
  eval->allow_extras();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint path");
  std::vector<std::uint64_t> seeds{1, 2, 3};
  auto* probe = app.add_subcommand("probe", "Interference experiment");
  probe->allow_extras();
  probe->add_option("--seeds", seeds, "Training seeds");
  double eps = 1e-5, tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference suite");
  gradcheck->allow_extras();
  gradcheck->add_option("--eps", eps, "Perturbation size");
  gradcheck->add_option("--tol", tol, "Relative-error tolerance");
  auto* selftest = app.add_subcommand("selftest", "Exact-property suite");
  selftest->allow_extras();
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    Config cfg = config_path.empty() ? Config{} : load_config(config_path);
    std::vector<std::string> extras = app.remaining();
    for (auto* sub : {gen, train, eval, probe, gradcheck, selftest})
      if (sub->parsed())
        for (const auto& extra : sub->remaining()) extras.push_back(extra);
    apply_extra_flags(cfg, extras);
    cfg = finalize_config(cfg);

    if (gen->parsed()) return cmd_gen_data(cfg);
    if (train->parsed()) {
      if (!all_stages && (stage < 1 || stage > 3))
        throw std::runtime_error("config: train requires --stage 1|2|3 or --all");
      return cmd_train(cfg, stage, all_stages);
    }
    if (eval->parsed()) return cmd_eval(cfg, checkpoint);
    if (probe->parsed()) return cmd_probe(cfg, seeds);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg, eps, tol);
    if (selftest->parsed()) return cmd_selftest(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    const std::string msg = e.what();
    if (msg.rfind("config:", 0) == 0 ||
        msg.find("stage order") != std::string::npos)
      return kExitConfig;
    return kExitValidation;
  }
  return kExitConfig;
}
