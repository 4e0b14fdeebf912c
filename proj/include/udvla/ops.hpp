#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "udvla/tensor.hpp"

namespace udvla {

// Boolean attention visibility; the additive -inf view of a mask is kept out
// of the arithmetic entirely: blocked entries are skipped, so they contribute
// an exact zero weight.
struct AttnMask {
  int n = 0;
  std::vector<std::uint8_t> allowed;  // n*n, row-major, 1 = visible

  bool at(int i, int j) const {
    return allowed[static_cast<std::size_t>(i) * n + j] != 0;
  }
  void set(int i, int j, bool v) {
    allowed[static_cast<std::size_t>(i) * n + j] = v ? 1 : 0;
  }
  static AttnMask all(int n);
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Broadcasts a length-n vector over every row of a [m x n] tensor.
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, int start, int count);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // [m x n] -> [1 x n]
Tensor mean_pool_groups(const Tensor& a, const std::vector<std::vector<int>>& groups);
Tensor weighted_sum(const std::vector<Tensor>& scalars,
                    const std::vector<double>& weights);

Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_op(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor masked_softmax_rows(const Tensor& x, const AttnMask& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Joint attention over already-concatenated per-group projections.
// q,k,v are [n x d]; d must be divisible by heads; blocked score entries are
// never exponentiated, so their attention weight is exactly zero.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttnMask& mask, int heads);

// Mean NLL of targets under row-wise softmax; rows with target < 0 are
// ignored. Throws if every row is ignored.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets01);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor l1(const Tensor& a, const Tensor& b);

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

// Bilinear interpolation on a [h x w x c] map at fractional (row, col)
// positions, zero-padded outside the grid. Gradients flow to positions only;
// the map is treated as constant input data.
Tensor bilinear_sample(const Tensor& map, const Tensor& positions);

}  // namespace udvla
