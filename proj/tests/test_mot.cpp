#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "udvla/gradcheck.hpp"
#include "udvla/mask.hpp"
#include "udvla/mot.hpp"
#include "udvla/ops.hpp"
#include "udvla/rng.hpp"

using namespace udvla;

namespace {

Tensor randn2(int r, int c, Rng& rng, double s = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.normal() * s;
  return t;
}

void zero_weights(MoTExpertParams& p) {
  for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.ffn_w1, &p.ffn_w2,
                    &p.ffn_w3})
    std::fill(t->data().begin(), t->data().end(), 0.0);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("build_mask encodes the four visibility rules") {
  const AttnMask m = build_mask({2, 1, 1});
  const int expect[4][4] = {
      {1, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(m.at(i, j) == (expect[i][j] != 0));

  const AttnMask single = build_mask({1, 0, 0});
  CHECK(single.n == 1);
  CHECK(single.at(0, 0));

  const AttnMask per_only = build_mask({0, 2, 0});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(per_only.at(i, j));

  CHECK_THROWS_WITH_AS(build_mask({0, 0, 0}), "mask: empty layout",
                       std::runtime_error);

  // every row keeps at least its diagonal
  const AttnMask big = build_mask({5, 4, 3});
  for (int i = 0; i < big.n; ++i) {
    CHECK(big.at(i, i));
    bool any = false;
    for (int j = 0; j < big.n; ++j) any = any || big.at(i, j);
    CHECK(any);
  }
}

TEST_CASE("expert projections are independent per expert") {
  Rng rng(1);
  const int d = 4;
  MoTLayerParams layer = make_mot_layer(d, 2, rng);

  // identity projection passes tokens through
  MoTExpertParams ident = make_expert_params(d, rng);
  std::fill(ident.w_q.data().begin(), ident.w_q.data().end(), 0.0);
  for (int i = 0; i < d; ++i) ident.w_q.at(i, i) = 1.0;
  const Tensor t = randn2(3, d, rng);
  CHECK(bit_equal(expert_project(t, ident).q, t));

  // empty group projects to an empty 0 x d matrix
  const Tensor empty({0, d});
  const ProjectedQKV pe = expert_project(empty, layer.und);
  CHECK(pe.q.shape() == std::vector<int>{0, d});
  CHECK(pe.q.numel() == 0);

  // identical token values, distinct experts -> distinct projections
  const ProjectedQKV a = expert_project(t, layer.und);
  const ProjectedQKV b = expert_project(t, layer.per);
  CHECK_FALSE(bit_equal(a.q, b.q));
}

TEST_CASE("joint attention hand example over two causal tokens") {
  // h=1, d=1, Q=K=[1;1], V=[[5],[7]]: row0 sees itself -> 5, row1 both -> 6
  const Tensor q = Tensor::from({2, 1}, {1, 1});
  const Tensor v = Tensor::from({2, 1}, {5, 7});
  const AttnMask mask = build_mask({2, 0, 0});
  const Tensor z = multi_head_attention(q, q, v, mask, 1);
  CHECK(z.at(0, 0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(z.at(1, 0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("zero-weight layer is the identity") {
  Rng rng(2);
  const int d = 4;
  MoTLayerParams layer = make_mot_layer(d, 2, rng);
  zero_weights(layer.und);
  zero_weights(layer.per);
  zero_weights(layer.act);
  TokenGroups t{randn2(2, d, rng), randn2(2, d, rng), randn2(1, d, rng)};
  const TokenGroups out = mot_layer_forward(t, layer, build_mask({2, 2, 1}));
  CHECK(bit_equal(out.und, t.und));
  CHECK(bit_equal(out.per, t.per));
  CHECK(bit_equal(out.act, t.act));
}

TEST_CASE("mask blindness is bit-exact through the layer") {
  Rng rng(3);
  const int d = 8;
  MoTLayerParams layer = make_mot_layer(d, 2, rng);
  const AttnMask mask = build_mask({3, 2, 2});
  TokenGroups t{randn2(3, d, rng), randn2(2, d, rng), randn2(2, d, rng)};
  const TokenGroups base = mot_layer_forward(t, layer, mask);

  // perturb action tokens arbitrarily: und and per outputs unchanged
  TokenGroups t2 = t;
  t2.act = randn2(2, d, rng, 100.0);
  const TokenGroups out2 = mot_layer_forward(t2, layer, mask);
  CHECK(bit_equal(out2.und, base.und));
  CHECK(bit_equal(out2.per, base.per));
  CHECK_FALSE(bit_equal(out2.act, base.act));

  // perturb perception tokens: und unchanged, per and act change
  TokenGroups t3 = t;
  t3.per = randn2(2, d, rng, 100.0);
  const TokenGroups out3 = mot_layer_forward(t3, layer, mask);
  CHECK(bit_equal(out3.und, base.und));
  CHECK_FALSE(bit_equal(out3.per, base.per));
  CHECK_FALSE(bit_equal(out3.act, base.act));
}

TEST_CASE("understanding causality within the layer") {
  Rng rng(4);
  const int d = 8;
  MoTLayerParams layer = make_mot_layer(d, 2, rng);
  const AttnMask mask = build_mask({4, 0, 0});
  TokenGroups t{randn2(4, d, rng), Tensor({0, d}), Tensor({0, d})};
  const TokenGroups base = mot_layer_forward(t, layer, mask);

  TokenGroups t2 = t;
  Tensor und2 = randn2(4, d, rng);
  for (int j = 0; j < d; ++j) {
    und2.at(0, j) = t.und.at(0, j);
    und2.at(1, j) = t.und.at(1, j);
  }
  t2.und = und2;  // positions 2 and 3 perturbed
  const TokenGroups out2 = mot_layer_forward(t2, layer, mask);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < d; ++j) CHECK(out2.und.at(i, j) == base.und.at(i, j));
  bool later_changed = false;
  for (int j = 0; j < d; ++j)
    later_changed = later_changed || out2.und.at(2, j) != base.und.at(2, j);
  CHECK(later_changed);
}

TEST_CASE("tied experts reduce to the monolithic reference") {
  Rng rng(5);
  const int d = 8, heads = 2;
  MoTLayerParams layer;
  layer.heads = heads;
  layer.und = make_expert_params(d, rng);
  layer.per = layer.und;
  layer.act = layer.und;
  const AttnMask mask = build_mask({3, 2, 2});
  TokenGroups t{randn2(3, d, rng), randn2(2, d, rng), randn2(2, d, rng)};
  const TokenGroups out = mot_layer_forward(t, layer, mask);
  const Tensor mono = monolithic_layer_forward(
      concat_rows({t.und, t.per, t.act}), layer.und, mask, heads);
  CHECK(max_abs_diff(concat_rows({out.und, out.per, out.act}), mono) <= 1e-12);
}

TEST_CASE("stack forward composes layers and snapshots") {
  Rng rng(6);
  const int d = 8, heads = 2;
  const AttnMask mask = build_mask({2, 2, 1});
  TokenGroups t{randn2(2, d, rng), randn2(2, d, rng), randn2(1, d, rng)};

  MoTStack one = make_mot_stack(d, heads, 1, "mot", rng);
  std::vector<TokenGroups> snaps;
  const TokenGroups out1 = stack_forward(t, one, mask, &snaps);
  CHECK(snaps.size() == 1);

  // L=1 equals layer forward + final group LayerNorm
  const TokenGroups manual = mot_layer_forward(t, one.layers[0], mask);
  CHECK(bit_equal(snaps[0].und, manual.und));
  CHECK(bit_equal(out1.und,
                  layer_norm(manual.und, one.ln_final_gain_und,
                             one.ln_final_bias_und, kLayerNormEps)));

  // appending a zero-weight second layer changes nothing
  MoTStack two = one;
  MoTLayerParams zero_layer = make_mot_layer(d, heads, rng);
  zero_weights(zero_layer.und);
  zero_weights(zero_layer.per);
  zero_weights(zero_layer.act);
  two.layers.push_back(zero_layer);
  std::vector<TokenGroups> snaps2;
  const TokenGroups out2 = stack_forward(t, two, mask, &snaps2);
  CHECK(snaps2.size() == 2);
  CHECK(bit_equal(out2.und, out1.und));
  CHECK(bit_equal(out2.per, out1.per));
  CHECK(bit_equal(out2.act, out1.act));

  // deterministic repeatability
  const TokenGroups again = stack_forward(t, two, mask);
  CHECK(bit_equal(again.und, out2.und));
}

TEST_CASE("shared stack visits one expert parameter set per layer") {
  Rng rng(7);
  MoTStack shared = make_mot_stack(8, 2, 2, "shared", rng);
  MoTStack mot = make_mot_stack(8, 2, 2, "mot", rng);
  int n_shared = 0, n_mot = 0;
  for_each_param(shared, [&](const std::string&, Tensor&) { ++n_shared; });
  for_each_param(mot, [&](const std::string&, Tensor&) { ++n_mot; });
  CHECK(n_mot == 2 * 3 * 14 + 6);
  CHECK(n_shared == 2 * 14 + 2);
  CHECK(shared.layers[0].per.w_q.impl() == shared.layers[0].und.w_q.impl());
  CHECK(mot.layers[0].per.w_q.impl() != mot.layers[0].und.w_q.impl());
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(8);
  const int d = 4, heads = 2;
  MoTLayerParams layer = make_mot_layer(d, heads, rng);
  const AttnMask mask = build_mask({2, 1, 1});
  const TokenGroups t{randn2(2, d, rng), randn2(1, d, rng), randn2(1, d, rng)};

  std::vector<std::pair<std::string, Tensor>> params;
  for_each_param(layer.und, [&](const std::string& n, Tensor& p) {
    params.emplace_back("und." + n, p);
  });
  for_each_param(layer.per, [&](const std::string& n, Tensor& p) {
    params.emplace_back("per." + n, p);
  });
  for_each_param(layer.act, [&](const std::string& n, Tensor& p) {
    params.emplace_back("act." + n, p);
  });

  auto loss_fn = [&]() {
    const TokenGroups out = mot_layer_forward(t, layer, mask);
    return add(sum(out.und), add(sum(out.per), sum(out.act)));
  };
  const GradCheckReport report = finite_diff_check(loss_fn, params, 1e-5, 1e-4);
  INFO(report.worst_name, "[", report.worst_index, "] rel ", report.max_rel_err);
  CHECK(report.pass);
  CHECK(report.checked > 0);
}
