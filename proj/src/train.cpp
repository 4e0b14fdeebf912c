#include "udvla/train.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "udvla/checkpoint.hpp"
#include "udvla/ops.hpp"

namespace udvla {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

Tensor mean_of(const std::vector<Tensor>& terms) {
  return weighted_sum(terms,
                      std::vector<double>(terms.size(), 1.0 / terms.size()));
}

}  // namespace

StagePlan make_stage_plan(int stage, const Config& cfg) {
  StagePlan plan;
  plan.stage = stage;
  plan.base_lr = cfg.base_lr;
  switch (stage) {
    case 1:
      plan.epochs = cfg.epochs[0];
      plan.train_per = plan.train_act = false;
      plan.losses.ar = true;
      break;
    case 2:
      plan.epochs = cfg.epochs[1];
      plan.lr_mult_und = cfg.lr_mult_und;
      plan.lora = true;
      plan.ema = true;
      plan.losses.ar = plan.losses.per = plan.losses.act = true;
      break;
    case 3:
      plan.epochs = cfg.epochs[2];
      plan.train_und = false;
      plan.ema = true;
      plan.losses.per = plan.losses.act = plan.losses.motion = true;
      break;
    default:
      throw std::runtime_error("train: unknown stage " + std::to_string(stage));
  }
  return plan;
}

LossBreakdown batch_loss(Model& m, const std::vector<const Scene*>& scenes,
                         const std::vector<std::string>& general,
                         const LossFlags& flags, std::uint64_t step_seed) {
  if (!flags.ar && !flags.per && !flags.act)
    throw std::runtime_error("train: empty objective");
  if (scenes.size() != general.size())
    throw std::runtime_error("train: batch slot mismatch");
  const Config& cfg = m.cfg;

  std::vector<Tensor> ar_terms, per_terms, act_terms, motion_terms;
  Rng rng(step_seed);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const double flow_t = rng.uniform();
    const std::uint64_t noise_seed = rng.raw();
    if (!general[i].empty()) {
      if (flags.ar) ar_terms.push_back(text_nll(m, general[i]));
      continue;
    }
    ForwardOptions opts;
    opts.with_perception = flags.per;
    opts.with_action = flags.act;
    opts.flow_t = flow_t;
    opts.noise_seed = noise_seed;
    const ForwardResult fwd = model_forward(m, *scenes[i], opts);
    if (flags.ar) ar_terms.push_back(caption_nll(m, fwd));
    if (flags.per) {
      const PerceptionLoss pl = perception_loss(fwd.perc, *scenes[i], cfg);
      per_terms.push_back(
          add(add(add(pl.det, pl.map), pl.ego), pl.occ));
      if (flags.motion) motion_terms.push_back(pl.motion);
    }
    if (flags.act) act_terms.push_back(flow_loss(fwd.v_hat, fwd.u_target));
  }

  LossBreakdown out;
  std::vector<Tensor> weighted;
  std::vector<double> weights;
  if (!ar_terms.empty()) {
    const Tensor t = mean_of(ar_terms);
    out.ar = t.item();
    weighted.push_back(t);
    weights.push_back(cfg.lambda_ar);
  }
  if (!per_terms.empty()) {
    const Tensor t = mean_of(per_terms);
    out.per = t.item();
    weighted.push_back(t);
    weights.push_back(cfg.lambda_per);
  }
  if (!motion_terms.empty()) {
    const Tensor t = mean_of(motion_terms);
    out.motion = t.item();
    weighted.push_back(t);
    weights.push_back(cfg.lambda_per);
  }
  if (!act_terms.empty()) {
    const Tensor t = mean_of(act_terms);
    out.act = t.item();
    weighted.push_back(t);
    weights.push_back(cfg.lambda_act);
  }
  if (weighted.empty())
    throw std::runtime_error("train: empty objective");
  out.total = weighted_sum(weighted, weights);
  return out;
}

std::string csv_header() {
  return "stage,epoch,loss_ar,loss_per,loss_act,loss_motion,loss_total,"
         "lr_und,lr_per,lr_act";
}

std::string csv_row(const EpochLog& log) {
  return std::to_string(log.stage) + "," + std::to_string(log.epoch) + "," +
         fmt(log.ar) + "," + fmt(log.per) + "," + fmt(log.act) + "," +
         fmt(log.motion) + "," + fmt(log.total) + "," + fmt(log.lr_und) + "," +
         fmt(log.lr_per) + "," + fmt(log.lr_act);
}

TrainSession::TrainSession(Model& m, const Dataset& data, int resume_after,
                           std::vector<LoraAdapter> adapters)
    : model_(m), data_(data), adapters_(std::move(adapters)),
      completed_(resume_after) {}

std::vector<NamedParam> TrainSession::trainable_params(const StagePlan& plan) {
  std::vector<NamedParam> params;
  for_each_param(model_, [&](const std::string& name, Tensor& t) {
    // In the dense ablation the transformer trunk is shared by all three
    // groups: it trains at full rate whenever any group does, and is never
    // frozen behind adapters.
    if (model_.cfg.arch == "shared" && name.rfind("mot.", 0) == 0) {
      if (!plan.train_und && !plan.train_per && !plan.train_act) return;
      params.push_back({name, t, 1.0});
      return;
    }
    const ParamGroup group = param_group(name);
    if (group == ParamGroup::und && !plan.train_und) return;
    if (group == ParamGroup::per && !plan.train_per) return;
    if (group == ParamGroup::act && !plan.train_act) return;
    if (plan.lora) {
      // adapted base projections are frozen; their adapters train instead
      for (const auto& ad : adapters_)
        if (ad.target == name) return;
    }
    params.push_back(
        {name, t, group == ParamGroup::und ? plan.lr_mult_und : 1.0});
  });
  if (plan.lora) {
    for (auto& ad : adapters_) {
      params.push_back({"lora." + ad.target + ".a", ad.a, plan.lr_mult_und});
      params.push_back({"lora." + ad.target + ".b", ad.b, plan.lr_mult_und});
    }
  }
  return params;
}

std::vector<EpochLog> TrainSession::run_stage(int stage) {
  if (stage != completed_ + 1)
    throw std::runtime_error("train: stage order violation: stage " +
                             std::to_string(stage) + " after stage " +
                             std::to_string(completed_));
  const Config& cfg = model_.cfg;
  const StagePlan plan = make_stage_plan(stage, cfg);
  if (plan.lora && cfg.arch != "shared" && adapters_.empty()) {
    Rng lora_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 2);
    adapters_ =
        make_lora_adapters(model_, cfg.lora_rank, cfg.lora_alpha, lora_rng);
  }

  std::vector<NamedParam> params = trainable_params(plan);
  AdamW opt(plan.base_lr);
  EmaState ema;
  if (plan.ema) ema = make_ema(params, cfg.ema_decay);

  Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + stage);
  std::vector<int> order = data_.train;
  if (order.empty()) throw std::runtime_error("train: empty training split");
  std::size_t cursor = order.size();  // forces an initial shuffle
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  const int steps =
      cfg.steps_per_epoch > 0
          ? cfg.steps_per_epoch
          : static_cast<int>((order.size() + cfg.batch - 1) / cfg.batch);

  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    EpochLog log;
    log.stage = stage;
    log.epoch = epoch;
    for (int step = 0; step < steps; ++step) {
      std::vector<const Scene*> scenes;
      std::vector<std::string> general;
      for (int b = 0; b < cfg.batch; ++b) {
        if (stage == 1 && rng.uniform() < cfg.general_ratio) {
          scenes.push_back(nullptr);
          general.push_back(general_sentence(rng));
        } else {
          scenes.push_back(&data_.scenes[next_index()]);
          general.emplace_back();
        }
      }
      const std::uint64_t step_seed = rng.raw();

      Tape tape;
      Model view = model_;
      if (!adapters_.empty()) apply_lora(view, adapters_);
      LossBreakdown lb = batch_loss(view, scenes, general, plan.losses,
                                    step_seed);
      tape.backward(lb.total);
      clip_global_norm(params, cfg.clip_norm);
      opt.step(params);
      zero_grads(params);
      if (plan.ema) ema_update(ema, params);

      log.ar += lb.ar;
      log.per += lb.per;
      log.act += lb.act;
      log.motion += lb.motion;
      log.total += lb.total.item();
    }
    log.ar /= steps;
    log.per /= steps;
    log.act /= steps;
    log.motion /= steps;
    log.total /= steps;
    log.lr_und = plan.train_und ? plan.base_lr * plan.lr_mult_und : 0.0;
    log.lr_per = plan.train_per ? plan.base_lr : 0.0;
    log.lr_act = plan.train_act ? plan.base_lr : 0.0;
    logs.push_back(log);
  }

  // evaluation-time weights: bake the EMA shadow into the live parameters
  if (plan.ema)
    for (auto& p : params) p.tensor.data() = ema.shadow.at(p.name);

  completed_ = stage;
  return logs;
}

void save_checkpoint(const std::string& path, Model& m,
                     const std::vector<LoraAdapter>& adapters) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    entries.emplace_back(name, t);
  });
  for (const auto& ad : adapters) {
    entries.emplace_back("lora." + ad.target + ".a", ad.a);
    entries.emplace_back("lora." + ad.target + ".b", ad.b);
  }
  save_tensor_table(path, entries);
}

std::vector<LoraAdapter> load_checkpoint(const std::string& path, Model& m) {
  std::vector<std::pair<std::string, Tensor>> model_entries;
  std::map<std::string, Tensor> lora_entries;
  for (auto& [name, t] : load_tensor_table(path)) {
    if (name.rfind("lora.", 0) == 0)
      lora_entries.emplace(name, t);
    else
      model_entries.emplace_back(name, t);
  }

  std::map<std::string, Tensor> table(model_entries.begin(),
                                      model_entries.end());
  std::size_t used = 0;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    auto it = table.find(name);
    if (it == table.end() || it->second.shape() != t.shape())
      throw std::runtime_error("model: checkpoint parameter mismatch: " + name);
    t.data() = it->second.data();
    ++used;
  });
  if (used != table.size())
    throw std::runtime_error(
        "model: checkpoint parameter mismatch: extra entries");

  std::vector<LoraAdapter> adapters;
  if (lora_entries.empty()) return adapters;
  Rng dummy(0);
  adapters = make_lora_adapters(m, m.cfg.lora_rank, m.cfg.lora_alpha, dummy);
  for (auto& ad : adapters) {
    const Tensor& a = lora_entries.at("lora." + ad.target + ".a");
    const Tensor& b = lora_entries.at("lora." + ad.target + ".b");
    if (a.shape() != ad.a.shape() || b.shape() != ad.b.shape())
      throw std::runtime_error("model: checkpoint parameter mismatch: lora");
    ad.a.data() = a.data();
    ad.b.data() = b.data();
  }
  return adapters;
}

void run_training(const Config& cfg, const Dataset& data, Model& m,
                  int first_stage, int last_stage, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<LoraAdapter> adapters;
  if (first_stage > 1) {
    const std::string prev =
        out_dir + "/stage" + std::to_string(first_stage - 1) + ".ckpt";
    if (!fs::exists(prev))
      throw std::runtime_error("train: stage order violation: missing " + prev);
    adapters = load_checkpoint(prev, m);
  }

  TrainSession session(m, data, first_stage - 1, std::move(adapters));
  const std::string log_path = out_dir + "/train_log.csv";
  std::ofstream log(log_path,
                    first_stage > 1 ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot open " + log_path);
  if (first_stage == 1) log << csv_header() << "\n";

  for (int stage = first_stage; stage <= last_stage; ++stage) {
    for (const EpochLog& row : session.run_stage(stage))
      log << csv_row(row) << "\n";
    log.flush();
    save_checkpoint(out_dir + "/stage" + std::to_string(stage) + ".ckpt", m,
                    session.adapters());
  }
}

}  // namespace udvla
