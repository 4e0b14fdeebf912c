#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace udvla {

// Runtime configuration, JSON-backed. Dot-path CLI overrides map one-to-one
// onto the nested keys (e.g. --train.seed=7).
struct Config {
  // model
  int d = 64;
  int heads = 4;
  int layers = 4;
  std::string arch = "mot";  // "mot" or "shared"

  // tokens
  int k_vis = 8;
  int n_text = 12;
  int n_det = 16;
  int n_map = 8;
  int n_occ = 16;
  int n_act = 6;

  // perception
  int d_q = 32;
  int d_occ = 8;
  int map_points = 8;
  int motion_modes = 3;
  int sample_points = 4;  // deformable offsets per level per view
  int pre_blocks = 2;
  int post_blocks = 1;

  // world
  int t_hist = 4;
  int horizon = 6;
  double dt = 0.5;
  double bev_extent = 25.0;
  int grid = 32;

  // train
  int stage = 0;  // 0 = all
  std::vector<int> epochs{3, 30, 15};
  double base_lr = 2e-4;
  double lr_mult_und = 0.5;
  double lambda_ar = 1.0;
  double lambda_per = 1.0;
  double lambda_act = 1.0;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  int batch = 8;
  int steps_per_epoch = 0;  // optimizer steps per mini-epoch; 0 = full pass
  double general_ratio = 0.7;  // 3:7 driving-to-general text mixture
  int lora_rank = 8;
  double lora_alpha = 16.0;
  double clip_norm = 1.0;
  double velocity_scale = 5.0;  // m/s unit used inside the flow head

  // data
  int n_scenes = 512;
  std::uint64_t data_seed = 0;
  std::string data_dir = "out/dataset";

  // flow
  int euler_steps = 10;

  std::string out_dir = "out";
  std::string vocab_path;

  int n_und() const { return k_vis + n_text + 1; }
  int n_per() const { return n_det + n_map + 1 + n_occ; }
  int total_tokens() const { return n_und() + n_per() + n_act; }
};

Config load_config(const std::string& path);
Config config_from_json_text(const std::string& text);
// key is a dot path like "train.seed"; value is parsed as JSON when possible,
// otherwise taken as a string.
void apply_override(Config& cfg, const std::string& key, const std::string& value);
std::string config_to_json_text(const Config& cfg);

}  // namespace udvla
