#include "udvla/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "udvla/ops.hpp"

namespace udvla {

double global_grad_norm(const std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

void clip_global_norm(std::vector<NamedParam>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto& p : params)
    for (double& g : p.tensor.grad()) g *= s;
}

void zero_grads(std::vector<NamedParam>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

AdamW::AdamW(double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(std::vector<NamedParam>& params) {
  for (auto& p : params) {
    p.tensor.ensure_grad();
    auto& slot = slots_[p.name];
    if (slot.m.empty()) {
      slot.m.assign(p.tensor.numel(), 0.0);
      slot.v.assign(p.tensor.numel(), 0.0);
    }
    slot.t += 1;
    const double lr = lr_ * p.lr_mult;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(slot.t));
    auto& data = p.tensor.data();
    const auto& grad = p.tensor.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      slot.m[i] = b1_ * slot.m[i] + (1.0 - b1_) * grad[i];
      slot.v[i] = b2_ * slot.v[i] + (1.0 - b2_) * grad[i] * grad[i];
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      data[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) + wd_ * data[i]);
    }
  }
}

namespace {

Tensor& projection_slot(MoTExpertParams& e, int matrix) {
  switch (matrix) {
    case 0: return e.w_q;
    case 1: return e.w_k;
    case 2: return e.w_v;
    case 3: return e.w_o;
  }
  throw std::runtime_error("lora: bad projection index");
}

const char* projection_name(int matrix) {
  switch (matrix) {
    case 0: return "w_q";
    case 1: return "w_k";
    case 2: return "w_v";
    case 3: return "w_o";
  }
  return "";
}

}  // namespace

std::vector<LoraAdapter> make_lora_adapters(Model& m, int rank, double alpha,
                                            Rng& rng) {
  if (rank < 1 || rank > m.cfg.d)
    throw std::runtime_error("lora: rank out of range");
  std::vector<LoraAdapter> out;
  for (int l = 0; l < static_cast<int>(m.mot.layers.size()); ++l) {
    for (int k = 0; k < 4; ++k) {
      LoraAdapter ad;
      ad.target = "mot.layer" + std::to_string(l) + ".und." +
                  projection_name(k);
      ad.layer = l;
      ad.matrix = k;
      ad.a = Tensor({m.cfg.d, rank}, /*requires_grad=*/true);
      for (auto& v : ad.a.data()) v = rng.normal() * 0.02;
      ad.b = Tensor::zeros({rank, m.cfg.d}, /*requires_grad=*/true);
      ad.scale = alpha / rank;
      out.push_back(std::move(ad));
    }
  }
  return out;
}

Tensor lora_effective(const Tensor& base, const LoraAdapter& adapter) {
  return add(base, scale(matmul(adapter.a, adapter.b), adapter.scale));
}

void apply_lora(Model& view, const std::vector<LoraAdapter>& adapters) {
  for (const auto& ad : adapters) {
    MoTLayerParams& layer = view.mot.layers.at(ad.layer);
    Tensor& base = projection_slot(layer.und, ad.matrix);
    const bool tied_per =
        projection_slot(layer.per, ad.matrix).impl() == base.impl();
    const bool tied_act =
        projection_slot(layer.act, ad.matrix).impl() == base.impl();
    const Tensor composed = lora_effective(base, ad);
    base = composed;
    if (tied_per) projection_slot(layer.per, ad.matrix) = composed;
    if (tied_act) projection_slot(layer.act, ad.matrix) = composed;
  }
}

void lora_merge(Model& m, std::vector<LoraAdapter>& adapters) {
  NoGradScope no_grad;
  for (auto& ad : adapters) {
    Tensor& base = projection_slot(m.mot.layers.at(ad.layer).und, ad.matrix);
    const Tensor composed = lora_effective(base, ad);
    base.data() = composed.data();
    std::fill(ad.b.data().begin(), ad.b.data().end(), 0.0);
  }
}

EmaState make_ema(std::vector<NamedParam>& params, double decay) {
  EmaState ema;
  ema.decay = decay;
  for (auto& p : params) ema.shadow[p.name] = p.tensor.data();
  return ema;
}

void ema_update(EmaState& ema, std::vector<NamedParam>& params) {
  for (auto& p : params) {
    auto& shadow = ema.shadow.at(p.name);
    const auto& data = p.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i)
      shadow[i] = ema.decay * shadow[i] + (1.0 - ema.decay) * data[i];
  }
}

void ema_swap(EmaState& ema, std::vector<NamedParam>& params) {
  for (auto& p : params) std::swap(ema.shadow.at(p.name), p.tensor.data());
}

}  // namespace udvla
