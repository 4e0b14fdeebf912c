#pragma once

#include "udvla/ops.hpp"

namespace udvla {

// Token counts of the three groups, concatenated in the fixed order
// understanding, perception, action.
struct TokenLayout {
  int n_und = 0;
  int n_per = 0;
  int n_act = 0;
  int total() const { return n_und + n_per + n_act; }
};

// Joint-attention visibility:
//   und -> und   causal (lower-triangular inclusive), blind to per and act
//   per -> und   all; per <-> per bidirectional; blind to act
//   act -> all
// Throws on an empty layout. Every row keeps its diagonal, so no row is
// fully blocked.
AttnMask build_mask(const TokenLayout& layout);

}  // namespace udvla
