#include "udvla/mask.hpp"

#include <stdexcept>

namespace udvla {

AttnMask build_mask(const TokenLayout& layout) {
  if (layout.n_und < 0 || layout.n_per < 0 || layout.n_act < 0)
    throw std::runtime_error("mask: negative group count");
  const int n = layout.total();
  if (n == 0) throw std::runtime_error("mask: empty layout");

  const int u = layout.n_und;
  const int p = layout.n_per;
  AttnMask mask;
  mask.n = n;
  mask.allowed.assign(static_cast<std::size_t>(n) * n, 0);
  auto group = [&](int i) { return i < u ? 0 : (i < u + p ? 1 : 2); };
  for (int i = 0; i < n; ++i) {
    const int gi = group(i);
    for (int j = 0; j < n; ++j) {
      const int gj = group(j);
      bool visible = false;
      switch (gi) {
        case 0: visible = gj == 0 && j <= i; break;
        case 1: visible = gj != 2; break;
        case 2: visible = true; break;
      }
      mask.set(i, j, visible);
    }
  }
  return mask;
}

}  // namespace udvla
