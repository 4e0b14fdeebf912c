#include "udvla/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace udvla {

namespace {
using nlohmann::json;

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_section(Config& cfg, const json& j) {
  if (j.contains("model")) {
    const auto& m = j["model"];
    get_if(m, "d", cfg.d);
    get_if(m, "heads", cfg.heads);
    get_if(m, "layers", cfg.layers);
    get_if(m, "arch", cfg.arch);
  }
  if (j.contains("tokens")) {
    const auto& t = j["tokens"];
    get_if(t, "k_vis", cfg.k_vis);
    get_if(t, "n_text", cfg.n_text);
    get_if(t, "n_det", cfg.n_det);
    get_if(t, "n_map", cfg.n_map);
    get_if(t, "n_occ", cfg.n_occ);
    get_if(t, "n_a", cfg.n_act);
  }
  if (j.contains("perception")) {
    const auto& p = j["perception"];
    get_if(p, "d_q", cfg.d_q);
    get_if(p, "d_occ", cfg.d_occ);
    get_if(p, "map_points", cfg.map_points);
    get_if(p, "modes", cfg.motion_modes);
    get_if(p, "sample_points", cfg.sample_points);
    get_if(p, "pre_blocks", cfg.pre_blocks);
    get_if(p, "post_blocks", cfg.post_blocks);
  }
  if (j.contains("world")) {
    const auto& w = j["world"];
    get_if(w, "t_hist", cfg.t_hist);
    get_if(w, "horizon", cfg.horizon);
    get_if(w, "dt", cfg.dt);
    get_if(w, "bev_extent", cfg.bev_extent);
    get_if(w, "grid", cfg.grid);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    get_if(t, "stage", cfg.stage);
    get_if(t, "epochs", cfg.epochs);
    get_if(t, "base_lr", cfg.base_lr);
    get_if(t, "lr_mult_und", cfg.lr_mult_und);
    get_if(t, "lambda_ar", cfg.lambda_ar);
    get_if(t, "lambda_per", cfg.lambda_per);
    get_if(t, "lambda_act", cfg.lambda_act);
    get_if(t, "ema_decay", cfg.ema_decay);
    get_if(t, "seed", cfg.seed);
    get_if(t, "batch", cfg.batch);
    get_if(t, "steps_per_epoch", cfg.steps_per_epoch);
    get_if(t, "general_ratio", cfg.general_ratio);
    get_if(t, "lora_rank", cfg.lora_rank);
    get_if(t, "lora_alpha", cfg.lora_alpha);
    get_if(t, "clip_norm", cfg.clip_norm);
    get_if(t, "velocity_scale", cfg.velocity_scale);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    get_if(d, "n_scenes", cfg.n_scenes);
    get_if(d, "seed", cfg.data_seed);
    get_if(d, "dir", cfg.data_dir);
  }
  if (j.contains("flow")) {
    get_if(j["flow"], "euler_steps", cfg.euler_steps);
  }
  get_if(j, "out_dir", cfg.out_dir);
  get_if(j, "vocab_path", cfg.vocab_path);
}
}  // namespace

Config config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
  }
  Config cfg;
  parse_section(cfg, j);
  if (cfg.d % cfg.heads != 0)
    throw std::runtime_error("config: model.d must be divisible by model.heads");
  if (cfg.arch != "mot" && cfg.arch != "shared")
    throw std::runtime_error("config: model.arch must be 'mot' or 'shared'");
  if (cfg.epochs.size() != 3)
    throw std::runtime_error("config: train.epochs must have 3 entries");
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const Config& c) {
  json j;
  j["model"] = {{"d", c.d}, {"heads", c.heads}, {"layers", c.layers}, {"arch", c.arch}};
  j["tokens"] = {{"k_vis", c.k_vis}, {"n_text", c.n_text}, {"n_det", c.n_det},
                 {"n_map", c.n_map}, {"n_occ", c.n_occ},   {"n_a", c.n_act}};
  j["perception"] = {{"d_q", c.d_q},
                     {"d_occ", c.d_occ},
                     {"map_points", c.map_points},
                     {"modes", c.motion_modes},
                     {"sample_points", c.sample_points},
                     {"pre_blocks", c.pre_blocks},
                     {"post_blocks", c.post_blocks}};
  j["world"] = {{"t_hist", c.t_hist},
                {"horizon", c.horizon},
                {"dt", c.dt},
                {"bev_extent", c.bev_extent},
                {"grid", c.grid}};
  j["train"] = {{"stage", c.stage},
                {"epochs", c.epochs},
                {"base_lr", c.base_lr},
                {"lr_mult_und", c.lr_mult_und},
                {"lambda_ar", c.lambda_ar},
                {"lambda_per", c.lambda_per},
                {"lambda_act", c.lambda_act},
                {"ema_decay", c.ema_decay},
                {"seed", c.seed},
                {"batch", c.batch},
                {"steps_per_epoch", c.steps_per_epoch},
                {"general_ratio", c.general_ratio},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"clip_norm", c.clip_norm},
                {"velocity_scale", c.velocity_scale}};
  j["data"] = {{"n_scenes", c.n_scenes}, {"seed", c.data_seed}, {"dir", c.data_dir}};
  j["flow"] = {{"euler_steps", c.euler_steps}};
  j["out_dir"] = c.out_dir;
  j["vocab_path"] = c.vocab_path;
  return j.dump(2);
}

void apply_override(Config& cfg, const std::string& key, const std::string& value) {
  json j = json::parse(config_to_json_text(cfg));
  json* node = &j;
  std::size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]))
      throw std::runtime_error("config: unknown key " + key);
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->contains(leaf)) throw std::runtime_error("config: unknown key " + key);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  (*node)[leaf] = parsed;
  cfg = config_from_json_text(j.dump());
}

}  // namespace udvla
