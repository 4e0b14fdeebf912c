#include "udvla/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace udvla {

namespace {

void ensure_grad(const std::shared_ptr<TensorImpl>& t) {
  if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), 0.0);
}

bool want_grad(const Tensor& a) { return grad_enabled_for(a); }

void record(std::function<void()> fn) { Tape::active()->record(std::move(fn)); }

Tensor make_output(std::vector<int> shape, bool requires_grad) {
  Tensor t(std::move(shape));
  if (requires_grad && Tape::active()) t.set_requires_grad(true);
  return t;
}

// out[m x n] += a[m x k] * b[k x n], cache-friendly ikj order.
void mm_accum(const double* __restrict a, const double* __restrict b,
              double* __restrict out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* orow = out + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

AttnMask AttnMask::all(int n) {
  AttnMask m;
  m.n = n;
  m.allowed.assign(static_cast<std::size_t>(n) * n, 1);
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2)
    throw std::runtime_error("matmul: expects rank <= 2 operands");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) shape_error("matmul", a, b);
  const bool g = want_grad(a) || want_grad(b);
  Tensor out = make_output({m, n}, g);
  mm_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    record([ai, bi, oi, m, k, n, ga, gb]() {
      ensure_grad(oi);
      const double* go = oi->grad.data();
      if (ga) {
        ensure_grad(ai);
        // dA[i,p] += sum_j go[i,j] * B[p,j]
        for (int i = 0; i < m; ++i) {
          const double* grow = go + static_cast<std::size_t>(i) * n;
          double* darow = ai->grad.data() + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const double* brow = bi->data.data() + static_cast<std::size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
          }
        }
      }
      if (gb) {
        ensure_grad(bi);
        // dB[p,j] += sum_i A[i,p] * go[i,j]
        for (int i = 0; i < m; ++i) {
          const double* arow = ai->data.data() + static_cast<std::size_t>(i) * k;
          const double* grow = go + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dbrow = bi->grad.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  Tensor out = make_output({n, m}, want_grad(a));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, m, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ai->grad[static_cast<std::size_t>(i) * n + j] +=
              oi->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

namespace {
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double), int mode) {
  if (a.shape() != b.shape()) shape_error(name, a, b);
  Tensor out = make_output(a.shape(), want_grad(a) || want_grad(b));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    record([ai, bi, oi, n, ga, gb, mode]() {
      ensure_grad(oi);
      if (ga) {
        ensure_grad(ai);
        for (std::size_t i = 0; i < n; ++i)
          ai->grad[i] += oi->grad[i] * (mode == 2 ? bi->data[i] : 1.0);
      }
      if (gb) {
        ensure_grad(bi);
        for (std::size_t i = 0; i < n; ++i) {
          double d = mode == 0 ? 1.0 : (mode == 1 ? -1.0 : ai->data[i]);
          bi->grad[i] += oi->grad[i] * d;
        }
      }
    });
  }
  return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; }, 0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; }, 1);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; }, 2);
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = make_output(a.shape(), want_grad(a));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, n, s]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const int m = a.rows(), n = a.cols();
  if (v.numel() != static_cast<std::size_t>(n)) shape_error("add_rowvec", a, v);
  Tensor out = make_output(a.shape(), want_grad(a) || want_grad(v));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<std::size_t>(i) * n + j] =
          a.data()[static_cast<std::size_t>(i) * n + j] + v.data()[j];
  if (out.requires_grad()) {
    auto ai = a.impl(), vi = v.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gv = v.requires_grad();
    record([ai, vi, oi, m, n, ga, gv]() {
      ensure_grad(oi);
      if (ga) {
        ensure_grad(ai);
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i)
          ai->grad[i] += oi->grad[i];
      }
      if (gv) {
        ensure_grad(vi);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            vi->grad[j] += oi->grad[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  if (n != a.numel())
    throw std::runtime_error("reshape: element count mismatch " +
                             shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = make_output(std::move(shape), want_grad(a));
  out.data() = a.data();
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: empty input");
  int n = parts[0].cols(), m = 0;
  bool g = false;
  for (const auto& p : parts) {
    if (p.cols() != n) shape_error("concat_rows", parts[0], p);
    m += p.rows();
    g = g || want_grad(p);
  }
  Tensor out = make_output({m, n}, g);
  int r = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(),
              out.data().begin() + static_cast<std::size_t>(r) * n);
    r += p.rows();
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<int> row_counts, needs;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      row_counts.push_back(p.rows());
      needs.push_back(p.requires_grad() ? 1 : 0);
    }
    auto oi = out.impl();
    record([impls, row_counts, needs, oi, n]() {
      ensure_grad(oi);
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < impls.size(); ++pi) {
        const std::size_t cnt = static_cast<std::size_t>(row_counts[pi]) * n;
        if (needs[pi]) {
          ensure_grad(impls[pi]);
          for (std::size_t i = 0; i < cnt; ++i)
            impls[pi]->grad[i] += oi->grad[off + i];
        }
        off += cnt;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  const int m = a.rows(), n = a.cols();
  if (start < 0 || count < 0 || start + count > m)
    throw std::runtime_error("slice_rows: range out of bounds");
  Tensor out = make_output({count, n}, want_grad(a));
  std::copy(a.data().begin() + static_cast<std::size_t>(start) * n,
            a.data().begin() + static_cast<std::size_t>(start + count) * n,
            out.data().begin());
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, start, count, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      const std::size_t off = static_cast<std::size_t>(start) * n;
      for (std::size_t i = 0; i < static_cast<std::size_t>(count) * n; ++i)
        ai->grad[off + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const int m = a.rows();
  if (b.rows() != m) shape_error("concat_cols", a, b);
  const int na = a.cols(), nb = b.cols();
  Tensor out = make_output({m, na + nb}, want_grad(a) || want_grad(b));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < na; ++j) out.at(i, j) = a.at(i, j);
    for (int j = 0; j < nb; ++j) out.at(i, na + j) = b.at(i, j);
  }
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    record([ai, bi, oi, m, na, nb, ga, gb]() {
      ensure_grad(oi);
      const int n = na + nb;
      if (ga) {
        ensure_grad(ai);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < na; ++j)
            ai->grad[static_cast<std::size_t>(i) * na + j] +=
                oi->grad[static_cast<std::size_t>(i) * n + j];
      }
      if (gb) {
        ensure_grad(bi);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nb; ++j)
            bi->grad[static_cast<std::size_t>(i) * nb + j] +=
                oi->grad[static_cast<std::size_t>(i) * n + na + j];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  const int m = a.rows(), n = a.cols();
  if (start < 0 || count < 0 || start + count > n)
    throw std::runtime_error("slice_cols: range out of bounds");
  Tensor out = make_output({m, count}, want_grad(a));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = a.at(i, start + j);
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, m, n, start, count]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
          ai->grad[static_cast<std::size_t>(i) * n + start + j] +=
              oi->grad[static_cast<std::size_t>(i) * count + j];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_output({1}, want_grad(a));
  double acc = 0.0;
  for (double v : a.data()) acc += v;  // fixed left-to-right order
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (auto& g : ai->grad) g += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  Tensor out = make_output({1, n}, want_grad(a));
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += a.at(i, j);
    out.at(0, j) = acc / m;
  }
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, m, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ai->grad[static_cast<std::size_t>(i) * n + j] += oi->grad[j] / m;
    });
  }
  return out;
}

Tensor mean_pool_groups(const Tensor& a, const std::vector<std::vector<int>>& groups) {
  const int n = a.cols();
  Tensor out = make_output({static_cast<int>(groups.size()), n}, want_grad(a));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw std::runtime_error("mean_pool_groups: empty group");
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int r : groups[g]) acc += a.at(r, j);
      out.at(static_cast<int>(g), j) = acc / groups[g].size();
    }
  }
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, groups, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const double inv = 1.0 / groups[g].size();
        for (int j = 0; j < n; ++j) {
          const double go = oi->grad[g * n + j] * inv;
          for (int r : groups[g])
            ai->grad[static_cast<std::size_t>(r) * n + j] += go;
        }
      }
    });
  }
  return out;
}

Tensor weighted_sum(const std::vector<Tensor>& scalars,
                    const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw std::runtime_error("weighted_sum: empty or mismatched inputs");
  Tensor out = scale(scalars[0], weights[0]);
  for (std::size_t i = 1; i < scalars.size(); ++i)
    out = add(out, scale(scalars[i], weights[i]));
  return out;
}

Tensor gelu(const Tensor& a) {
  static const double inv_sqrt2 = 0.7071067811865476;
  static const double inv_sqrt2pi = 0.3989422804014327;
  Tensor out = make_output(a.shape(), want_grad(a));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = ai->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_output(a.shape(), want_grad(a));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t i = 0; i < n; ++i) {
        const double s = oi->data[i];
        ai->grad[i] += oi->grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Tensor exp_op(const Tensor& a) {
  Tensor out = make_output(a.shape(), want_grad(a));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, n]() {
      ensure_grad(oi);
      ensure_grad(ai);
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * oi->data[i];
    });
  }
  return out;
}

namespace {
// Shared masked-softmax forward; mask == nullptr means all-visible.
void softmax_forward(const Tensor& x, const AttnMask* mask, Tensor& out) {
  const int m = x.rows(), n = x.cols();
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    int visible = 0;
    for (int j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      mx = std::max(mx, x.at(i, j));
      ++visible;
    }
    if (visible == 0)
      throw std::runtime_error("softmax_rows: degenerate row " +
                               std::to_string(i) + " has no visible entry");
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) {
        out.at(i, j) = 0.0;
        continue;
      }
      const double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= denom;
  }
}

void softmax_backward(const std::shared_ptr<TensorImpl>& xi,
                      const std::shared_ptr<TensorImpl>& oi, int m, int n) {
  ensure_grad(oi);
  ensure_grad(xi);
  for (int i = 0; i < m; ++i) {
    const double* srow = oi->data.data() + static_cast<std::size_t>(i) * n;
    const double* grow = oi->grad.data() + static_cast<std::size_t>(i) * n;
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += srow[j] * grow[j];
    double* dx = xi->grad.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) dx[j] += srow[j] * (grow[j] - dot);
  }
}
}  // namespace

Tensor softmax_rows(const Tensor& x) {
  Tensor out = make_output(x.shape(), want_grad(x));
  softmax_forward(x, nullptr, out);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    const int m = x.rows(), n = x.cols();
    record([xi, oi, m, n]() { softmax_backward(xi, oi, m, n); });
  }
  return out;
}

Tensor masked_softmax_rows(const Tensor& x, const AttnMask& mask) {
  if (x.rows() != mask.n || x.cols() != mask.n)
    throw std::runtime_error("masked_softmax_rows: mask size mismatch");
  Tensor out = make_output(x.shape(), want_grad(x));
  softmax_forward(x, &mask, out);
  if (out.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    const int m = x.rows(), n = x.cols();
    // masked entries hold exact zeros in out, so the plain rule yields zero
    // gradient there automatically
    record([xi, oi, m, n]() { softmax_backward(xi, oi, m, n); });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int m = x.rows(), d = x.cols();
  if (gain.numel() != static_cast<std::size_t>(d) ||
      bias.numel() != static_cast<std::size_t>(d))
    throw std::runtime_error("layer_norm: gain/bias width mismatch");
  const bool g = want_grad(x) || want_grad(gain) || want_grad(bias);
  Tensor out = make_output(x.shape(), g);
  std::vector<double> mus(m), invs(m);
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x.at(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    mus[i] = mu;
    invs[i] = inv;
    for (int j = 0; j < d; ++j)
      out.at(i, j) = (x.at(i, j) - mu) * inv * gain.data()[j] + bias.data()[j];
  }
  if (out.requires_grad()) {
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    const bool gx = x.requires_grad(), gg = gain.requires_grad(),
               gb = bias.requires_grad();
    record([xi, gi, bi, oi, mus, invs, m, d, gx, gg, gb]() {
      ensure_grad(oi);
      if (gx) ensure_grad(xi);
      if (gg) ensure_grad(gi);
      if (gb) ensure_grad(bi);
      for (int i = 0; i < m; ++i) {
        const double mu = mus[i], inv = invs[i];
        const double* xrow = xi->data.data() + static_cast<std::size_t>(i) * d;
        const double* go = oi->grad.data() + static_cast<std::size_t>(i) * d;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int j = 0; j < d; ++j) {
          const double xh = (xrow[j] - mu) * inv;
          const double dxh = go[j] * gi->data[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
          if (gg) gi->grad[j] += go[j] * xh;
          if (gb) bi->grad[j] += go[j];
        }
        if (gx) {
          double* dx = xi->grad.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            const double xh = (xrow[j] - mu) * inv;
            const double dxh = go[j] * gi->data[j];
            dx[j] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / d);
          }
        }
      }
    });
  }
  return out;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttnMask& mask, int heads) {
  const int n = q.rows(), d = q.cols();
  if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d)
    throw std::runtime_error("attention: q/k/v shapes disagree");
  if (mask.n != n) throw std::runtime_error("attention: mask size mismatch");
  if (heads < 1 || d % heads != 0)
    throw std::runtime_error("attention: width " + std::to_string(d) +
                             " not divisible by heads " + std::to_string(heads));
  const int dk = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool g = want_grad(q) || want_grad(k) || want_grad(v);
  Tensor out = make_output({n, d}, g);

  // attention weights saved per head for backward
  auto attn = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(heads) * n * n, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  double* od = out.data().data();
  const std::uint8_t* md = mask.allowed.data();
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dk;
    double* a_h = attn->data() + static_cast<std::size_t>(h) * n * n;
    for (int i = 0; i < n; ++i) {
      double* arow = a_h + static_cast<std::size_t>(i) * n;
      const std::uint8_t* mrow = md + static_cast<std::size_t>(i) * n;
      const double* qrow = qd + static_cast<std::size_t>(i) * d + c0;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int j = 0; j < n; ++j) {
        if (!mrow[j]) continue;
        const double* krow = kd + static_cast<std::size_t>(j) * d + c0;
        double s = 0.0;
        for (int c = 0; c < dk; ++c) s += qrow[c] * krow[c];
        arow[j] = s * sc;
        mx = std::max(mx, arow[j]);
        any = true;
      }
      if (!any)
        throw std::runtime_error("attention: row " + std::to_string(i) +
                                 " has every entry blocked");
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        if (!mrow[j]) {
          arow[j] = 0.0;
          continue;
        }
        arow[j] = std::exp(arow[j] - mx);
        denom += arow[j];
      }
      for (int j = 0; j < n; ++j) arow[j] /= denom;
      double* orow = od + static_cast<std::size_t>(i) * d + c0;
      for (int c = 0; c < dk; ++c) {
        double acc = 0.0;
        const double* vcol = vd + c0 + c;
        for (int j = 0; j < n; ++j)
          if (arow[j] != 0.0) acc += arow[j] * vcol[static_cast<std::size_t>(j) * d];
        orow[c] = acc;
      }
    }
  }

  if (out.requires_grad()) {
    auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
    const bool gq = q.requires_grad(), gk = k.requires_grad(),
               gv = v.requires_grad();
    record([qi, ki, vi, oi, attn, n, d, dk, heads, sc, gq, gk, gv]() {
      ensure_grad(oi);
      if (gq) ensure_grad(qi);
      if (gk) ensure_grad(ki);
      if (gv) ensure_grad(vi);
      std::vector<double> ds(static_cast<std::size_t>(n));
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * dk;
        const double* a_h = attn->data() + static_cast<std::size_t>(h) * n * n;
        for (int i = 0; i < n; ++i) {
          const double* arow = a_h + static_cast<std::size_t>(i) * n;
          const double* go = oi->grad.data() + static_cast<std::size_t>(i) * d + c0;
          // dA[i,j] = go . V[j]; dS = A * (dA - sum_j A dA)
          double dot = 0.0;
          for (int j = 0; j < n; ++j) {
            if (arow[j] == 0.0) {
              ds[j] = 0.0;
              continue;
            }
            double da = 0.0;
            const double* vrow = vi->data.data() + static_cast<std::size_t>(j) * d + c0;
            for (int c = 0; c < dk; ++c) da += go[c] * vrow[c];
            ds[j] = da;
            dot += arow[j] * da;
          }
          for (int j = 0; j < n; ++j) {
            if (arow[j] == 0.0) continue;
            const double dsij = arow[j] * (ds[j] - dot);
            if (gv) {
              double* dv = vi->grad.data() + static_cast<std::size_t>(j) * d + c0;
              for (int c = 0; c < dk; ++c) dv[c] += arow[j] * go[c];
            }
            if (gq) {
              double* dq = qi->grad.data() + static_cast<std::size_t>(i) * d + c0;
              const double* krow = ki->data.data() + static_cast<std::size_t>(j) * d + c0;
              for (int c = 0; c < dk; ++c) dq[c] += dsij * sc * krow[c];
            }
            if (gk) {
              double* dkr = ki->grad.data() + static_cast<std::size_t>(j) * d + c0;
              const double* qrow = qi->data.data() + static_cast<std::size_t>(i) * d + c0;
              for (int c = 0; c < dk; ++c) dkr[c] += dsij * sc * qrow[c];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  const int m = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != m)
    throw std::runtime_error("cross_entropy_rows: target count mismatch");
  int counted = 0;
  auto probs = std::make_shared<std::vector<double>>(logits.data());
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    double* row = probs->data() + static_cast<std::size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (int j = 0; j < v; ++j) row[j] /= denom;
    if (targets[i] >= 0) {
      if (targets[i] >= v)
        throw std::runtime_error("cross_entropy_rows: target out of range");
      total -= std::log(row[targets[i]]);
      ++counted;
    }
  }
  if (counted == 0)
    throw std::runtime_error("cross_entropy_rows: every row ignored");
  Tensor out = make_output({1}, want_grad(logits));
  out.data()[0] = total / counted;
  if (out.requires_grad()) {
    auto li = logits.impl(), oi = out.impl();
    record([li, oi, probs, targets, m, v, counted]() {
      ensure_grad(oi);
      ensure_grad(li);
      const double go = oi->grad[0] / counted;
      for (int i = 0; i < m; ++i) {
        if (targets[i] < 0) continue;
        const double* row = probs->data() + static_cast<std::size_t>(i) * v;
        double* dl = li->grad.data() + static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j)
          dl[j] += go * (row[j] - (j == targets[i] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets01) {
  if (logits.shape() != targets01.shape())
    shape_error("bce_with_logits", logits, targets01);
  const std::size_t n = logits.numel();
  Tensor out = make_output({1}, want_grad(logits));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i], y = targets01.data()[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  out.data()[0] = total / n;
  if (out.requires_grad()) {
    auto li = logits.impl(), ti = targets01.impl(), oi = out.impl();
    record([li, ti, oi, n]() {
      ensure_grad(oi);
      ensure_grad(li);
      const double go = oi->grad[0] / n;
      for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-li->data[i]));
        li->grad[i] += go * (s - ti->data[i]);
      }
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mse", a, b);
  const std::size_t n = a.numel();
  Tensor out = make_output({1}, want_grad(a) || want_grad(b));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - b.data()[i];
    total += d * d;
  }
  out.data()[0] = total / n;
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    record([ai, bi, oi, n, ga, gb]() {
      ensure_grad(oi);
      const double go = 2.0 * oi->grad[0] / n;
      if (ga) {
        ensure_grad(ai);
        for (std::size_t i = 0; i < n; ++i)
          ai->grad[i] += go * (ai->data[i] - bi->data[i]);
      }
      if (gb) {
        ensure_grad(bi);
        for (std::size_t i = 0; i < n; ++i)
          bi->grad[i] -= go * (ai->data[i] - bi->data[i]);
      }
    });
  }
  return out;
}

Tensor l1(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("l1", a, b);
  const std::size_t n = a.numel();
  Tensor out = make_output({1}, want_grad(a) || want_grad(b));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::abs(a.data()[i] - b.data()[i]);
  out.data()[0] = total / n;
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    record([ai, bi, oi, n, ga, gb]() {
      ensure_grad(oi);
      const double go = oi->grad[0] / n;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = ai->data[i] - bi->data[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (ga) {
          ensure_grad(ai);
          ai->grad[i] += go * s;
        }
        if (gb) {
          ensure_grad(bi);
          bi->grad[i] -= go * s;
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  Tensor out = make_output({static_cast<int>(ids.size()), d}, want_grad(table));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v)
      throw std::runtime_error("embedding_lookup: id out of range");
    std::copy(table.data().begin() + static_cast<std::size_t>(ids[i]) * d,
              table.data().begin() + static_cast<std::size_t>(ids[i] + 1) * d,
              out.data().begin() + i * d);
  }
  if (out.requires_grad()) {
    auto ti = table.impl(), oi = out.impl();
    record([ti, oi, ids, d]() {
      ensure_grad(oi);
      ensure_grad(ti);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int c = 0; c < d; ++c)
          ti->grad[static_cast<std::size_t>(ids[i]) * d + c] += oi->grad[i * d + c];
    });
  }
  return out;
}

Tensor bilinear_sample(const Tensor& map, const Tensor& positions) {
  if (map.rank() != 3) throw std::runtime_error("bilinear_sample: map must be h x w x c");
  if (map.requires_grad())
    throw std::runtime_error("bilinear_sample: map gradients unsupported");
  const int h = map.shape()[0], w = map.shape()[1], c = map.shape()[2];
  const int p = positions.rows();
  if (positions.cols() != 2)
    throw std::runtime_error("bilinear_sample: positions must be p x 2");
  Tensor out = make_output({p, c}, want_grad(positions));
  auto value_at = [&](int r, int col, int ch) -> double {
    if (r < 0 || r >= h || col < 0 || col >= w) return 0.0;
    return map.data()[(static_cast<std::size_t>(r) * w + col) * c + ch];
  };
  for (int i = 0; i < p; ++i) {
    const double r = positions.at(i, 0), col = positions.at(i, 1);
    const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(col));
    const double fr = r - r0, fc = col - c0;
    for (int ch = 0; ch < c; ++ch) {
      const double v00 = value_at(r0, c0, ch), v01 = value_at(r0, c0 + 1, ch);
      const double v10 = value_at(r0 + 1, c0, ch), v11 = value_at(r0 + 1, c0 + 1, ch);
      out.at(i, ch) = (1 - fr) * ((1 - fc) * v00 + fc * v01) +
                      fr * ((1 - fc) * v10 + fc * v11);
    }
  }
  if (out.requires_grad()) {
    auto mi = map.impl(), pi = positions.impl(), oi = out.impl();
    record([mi, pi, oi, h, w, c, p]() {
      ensure_grad(oi);
      ensure_grad(pi);
      auto value_at = [&](int r, int col, int ch) -> double {
        if (r < 0 || r >= h || col < 0 || col >= w) return 0.0;
        return mi->data[(static_cast<std::size_t>(r) * w + col) * c + ch];
      };
      for (int i = 0; i < p; ++i) {
        const double r = pi->data[2 * i], col = pi->data[2 * i + 1];
        const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(col));
        const double fr = r - r0, fc = col - c0;
        double dr = 0.0, dc = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double go = oi->grad[static_cast<std::size_t>(i) * c + ch];
          if (go == 0.0) continue;
          const double v00 = value_at(r0, c0, ch), v01 = value_at(r0, c0 + 1, ch);
          const double v10 = value_at(r0 + 1, c0, ch), v11 = value_at(r0 + 1, c0 + 1, ch);
          dr += go * ((1 - fc) * (v10 - v00) + fc * (v11 - v01));
          dc += go * ((1 - fr) * (v01 - v00) + fr * (v11 - v10));
        }
        pi->grad[2 * i] += dr;
        pi->grad[2 * i + 1] += dc;
      }
    });
  }
  return out;
}

}  // namespace udvla
