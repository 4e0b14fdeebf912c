#include "udvla/encoding.hpp"

#include <cmath>
#include <stdexcept>

#include "udvla/ops.hpp"

namespace udvla {

namespace {

constexpr double kPi = 3.141592653589793238462643;

Tensor randn(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(shape, /*requires_grad=*/true);
  for (auto& v : t.data()) v = rng.normal() * stddev;
  return t;
}

// 4x4 average pooling over each view's level-1 (8x8) map, giving
// (8/4)^2 = 4 patches per view; each pooled C-vector is one visual token.
Tensor pooled_visual_patches(const Scene& scene, const Config& cfg) {
  const auto& level = scene.features.levels.at(1);
  const int pool = 4;
  const int h = level.at(0).shape()[0];
  const int c = level.at(0).shape()[2];
  const int per_view = (h / pool) * (h / pool);
  Tensor out({static_cast<int>(level.size()) * per_view, c});
  int row = 0;
  for (const Tensor& map : level) {
    const int w = map.shape()[1];
    for (int pi = 0; pi < h / pool; ++pi)
      for (int pj = 0; pj < w / pool; ++pj) {
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int dr = 0; dr < pool; ++dr)
            for (int dc = 0; dc < pool; ++dc)
              acc += map.data()[((static_cast<std::size_t>(pi * pool + dr)) * w +
                                 (pj * pool + dc)) * c + ch];
          out.at(row, ch) = acc / (pool * pool);
        }
        ++row;
      }
  }
  if (row != cfg.k_vis)
    throw std::runtime_error("encoding: visual token count mismatch");
  return out;
}

const char* nav_word(int nav) {
  switch (nav) {
    case nav_left: return "left";
    case nav_straight: return "straight";
    case nav_right: return "right";
  }
  throw std::runtime_error("encoding: invalid navigation command");
}

std::vector<int> text_region_ids(const std::string& first_word_or_empty,
                                 const std::string& sentence,
                                 const Vocabulary& vocab, int n_text) {
  std::vector<int> ids;
  ids.push_back(vocab.bos());
  if (!first_word_or_empty.empty()) ids.push_back(vocab.id(first_word_or_empty));
  for (int id : vocab.encode_words(sentence)) ids.push_back(id);
  ids.push_back(vocab.eos());
  if (static_cast<int>(ids.size()) > n_text)
    throw std::runtime_error("encoding: text overflows n_text");
  ids.resize(n_text, vocab.pad());
  return ids;
}

}  // namespace

EncodingParams make_encoding_params(const Config& cfg, int vocab_size, Rng& rng) {
  EncodingParams p;
  const double s = 0.02;
  p.embed_table = randn({vocab_size, cfg.d}, s, rng);
  p.vis_w = randn({kFeatureChannels, cfg.d}, s, rng);
  p.vis_b = Tensor::zeros({cfg.d}, true);
  p.ego_w = randn({cfg.t_hist * 2 + 3, cfg.d}, s, rng);
  p.ego_b = Tensor::zeros({cfg.d}, true);
  p.act_w = randn({2 + 2 * kTimeFreqs, cfg.d}, s, rng);
  p.act_b = Tensor::zeros({cfg.d}, true);
  return p;
}

void for_each_param(EncodingParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embed_table", p.embed_table);
  fn("vis_w", p.vis_w);
  fn("vis_b", p.vis_b);
  fn("ego_w", p.ego_w);
  fn("ego_b", p.ego_b);
  fn("act_w", p.act_w);
  fn("act_b", p.act_b);
}

Tensor sinusoidal_positions(int n, int d) {
  Tensor out({n, d});
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / d);
      out.at(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return out;
}

Tensor time_embedding(double t) {
  Tensor out({1, 2 * kTimeFreqs});
  for (int k = 0; k < kTimeFreqs; ++k) {
    const double w = std::pow(2.0, k) * kPi;
    out.at(0, 2 * k) = std::sin(w * t);
    out.at(0, 2 * k + 1) = std::cos(w * t);
  }
  return out;
}

UndTokens encode_understanding(const Scene& scene, const Vocabulary& vocab,
                               const EncodingParams& params, const Config& cfg) {
  const Tensor patches = pooled_visual_patches(scene, cfg);
  const Tensor vis = affine(patches, params.vis_w, params.vis_b);

  const std::vector<int> text_ids =
      text_region_ids(nav_word(scene.nav), scene.caption, vocab, cfg.n_text);
  const Tensor text = embedding_lookup(params.embed_table, text_ids);

  const Tensor ego = encode_ego_and_nav(scene.history, scene.nav, params, cfg);

  UndTokens out;
  out.embeddings = add(concat_rows({vis, text, ego}),
                       sinusoidal_positions(cfg.n_und(), cfg.d));
  out.ids.assign(cfg.k_vis, vocab.pad());
  out.ids.insert(out.ids.end(), text_ids.begin(), text_ids.end());
  out.ids.push_back(vocab.pad());
  return out;
}

UndTokens encode_text_only(const std::string& sentence, const Vocabulary& vocab,
                           const EncodingParams& params, const Config& cfg) {
  UndTokens out;
  out.ids = text_region_ids("", sentence, vocab, cfg.n_text);
  out.embeddings = add(embedding_lookup(params.embed_table, out.ids),
                       sinusoidal_positions(cfg.n_text, cfg.d));
  return out;
}

Tensor encode_ego_and_nav(const EgoHistory& hist, int nav,
                          const EncodingParams& params, const Config& cfg) {
  if (static_cast<int>(hist.positions.size()) != cfg.t_hist)
    throw std::runtime_error("encoding: history length mismatch");
  Tensor input({1, cfg.t_hist * 2 + 3});
  for (int i = 0; i < cfg.t_hist; ++i) {
    input.at(0, 2 * i) = hist.positions[i][0];
    input.at(0, 2 * i + 1) = hist.positions[i][1];
  }
  nav_word(nav);  // validates the command
  input.at(0, cfg.t_hist * 2 + nav) = 1.0;
  return affine(input, params.ego_w, params.ego_b);
}

std::vector<int> next_token_targets(const std::vector<int>& ids, int text_start,
                                    int text_len, int pad_id) {
  std::vector<int> targets(ids.size(), -1);
  for (int i = text_start; i + 1 < text_start + text_len; ++i) {
    const int next = ids[static_cast<std::size_t>(i) + 1];
    targets[i] = next == pad_id ? -1 : next;
  }
  return targets;
}

ActionTokens make_action_tokens(const Tensor& x1, const Tensor& x0, double t,
                                const EncodingParams& params) {
  if (t < 0.0 || t > 1.0)
    throw std::domain_error("encoding: flow time outside [0,1]");
  if (x1.shape() != x0.shape())
    shape_error("make_action_tokens", x1, x0);
  ActionTokens out;
  out.t = t;
  out.x_t = add(scale(x0, 1.0 - t), scale(x1, t));
  out.u_target = sub(x1, x0);
  const int steps = x1.rows();
  const Tensor emb = time_embedding(t);
  Tensor time_rows({steps, 2 * kTimeFreqs});
  for (int i = 0; i < steps; ++i)
    for (int j = 0; j < 2 * kTimeFreqs; ++j) time_rows.at(i, j) = emb.at(0, j);
  out.tokens = affine(concat_cols(out.x_t, time_rows), params.act_w, params.act_b);
  return out;
}

ActionTokens make_action_tokens(const Tensor& x1, double t, Rng& rng,
                                const EncodingParams& params) {
  Tensor x0(x1.shape());
  for (auto& v : x0.data()) v = rng.normal();
  return make_action_tokens(x1, x0, t, params);
}

}  // namespace udvla
