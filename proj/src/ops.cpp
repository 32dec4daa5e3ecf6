#include "fern/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "fern/gemm.hpp"

namespace fern {

namespace {

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) contract_fail(std::string(who) + ": undefined tensor");
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

// forward of unary elementwise ops; backward gets (grad_out, x_val, y_val)
template <class Fwd, class Bwd>
Tensor elementwise_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  check_defined(x, name);
  Tensor y = Tensor::zeros(x.shape());
  const double* xv = x.data();
  double* yv = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yv[i] = fwd(xv[i]);
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc, bwd]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      const double* xv = xc.data();
      const double* yv = yc.data();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += bwd(g[i], xv[i], yv[i]);
    });
  }
  return y;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return elementwise_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double xv, double) { return xv > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& x) {
  return elementwise_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double g, double, double yv) { return g * yv; });
}

Tensor sqrt_eps(const Tensor& x) {
  check_defined(x, "sqrt_eps");
  for (double v : x.values())
    if (v < 0.0) contract_fail("sqrt_eps: negative input " + std::to_string(v));
  return elementwise_op(
      x, "sqrt_eps", [](double v) { return std::sqrt(v + kSqrtEps); },
      [](double g, double, double yv) { return g * 0.5 / yv; });
}

Tensor negate(const Tensor& x) {
  return elementwise_op(
      x, "negate", [](double v) { return -v; }, [](double g, double, double) { return -g; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return elementwise_op(
      x, "add_scalar", [c](double v) { return v + c; },
      [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return elementwise_op(
      x, "mul_scalar", [c](double v) { return v * c; },
      [c](double g, double, double) { return g * c; });
}

namespace {

template <class Combine, class BwdA, class BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Combine combine, BwdA bwd_a,
                 BwdB bwd_b) {
  check_defined(a, name);
  check_defined(b, name);
  if (a.shape() != b.shape())
    contract_fail(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* yv = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yv[i] = combine(av[i], bv[i]);
  if (grad_needed({&a, &b})) {
    y.set_requires_grad(true);
    Tensor ac = a, bc = b, yc = y;
    Tape::active()->record(y, [ac, bc, yc, bwd_a, bwd_b]() mutable {
      const std::vector<double>& g = yc.grad_view();
      if (ac.requires_grad()) {
        std::vector<double>& ga = ac.grad();
        const double* bv = bc.data();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += bwd_a(g[i], bv[i]);
      }
      if (bc.requires_grad()) {
        std::vector<double>& gb = bc.grad();
        const double* av = ac.data();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += bwd_b(g[i], av[i]);
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double) { return g; }, [](double g, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double) { return g; }, [](double g, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double other) { return g * other; },
      [](double g, double other) { return g * other; });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.numel())
    contract_fail("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor y = Tensor::create(std::move(shape), x.values());
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (size_t i = shape.size(); i-- > 1;)
    strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace

Tensor broadcast_to(const Tensor& x, Shape shape) {
  check_defined(x, "broadcast_to");
  if (static_cast<int>(shape.size()) != x.ndim())
    contract_fail("broadcast_to: rank mismatch " + shape_str(x.shape()) + " -> " +
                  shape_str(shape));
  for (int i = 0; i < x.ndim(); ++i)
    if (x.dim(i) != shape[static_cast<size_t>(i)] && x.dim(i) != 1)
      contract_fail("broadcast_to: dim " + std::to_string(i) + " of " + shape_str(x.shape()) +
                    " cannot expand to " + shape_str(shape));

  const auto out_strides = row_major_strides(shape);
  auto src_strides = row_major_strides(x.shape());
  for (int i = 0; i < x.ndim(); ++i)
    if (x.dim(i) == 1) src_strides[static_cast<size_t>(i)] = 0;

  Tensor y = Tensor::zeros(shape);
  const int64_t n = y.numel();
  const int nd = x.ndim();
  const double* xv = x.data();
  double* yv = y.data();
  for (int64_t idx = 0; idx < n; ++idx) {
    int64_t rem = idx, src = 0;
    for (int d = 0; d < nd; ++d) {
      int64_t c = rem / out_strides[static_cast<size_t>(d)];
      rem -= c * out_strides[static_cast<size_t>(d)];
      src += c * src_strides[static_cast<size_t>(d)];
    }
    yv[idx] = xv[src];
  }
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc, out_strides, src_strides, nd]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      for (int64_t idx = 0; idx < static_cast<int64_t>(g.size()); ++idx) {
        int64_t rem = idx, src = 0;
        for (int d = 0; d < nd; ++d) {
          int64_t c = rem / out_strides[static_cast<size_t>(d)];
          rem -= c * out_strides[static_cast<size_t>(d)];
          src += c * src_strides[static_cast<size_t>(d)];
        }
        gx[static_cast<size_t>(src)] += g[static_cast<size_t>(idx)];
      }
    });
  }
  return y;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) contract_fail("concat_channels: no inputs");
  for (const Tensor& t : xs) check_defined(t, "concat_channels");
  const Tensor& first = xs.front();
  if (first.ndim() != 4) contract_fail("concat_channels: expects [B,C,H,W] inputs");
  int B = first.dim(0), H = first.dim(2), W = first.dim(3);
  int C = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != 4 || t.dim(0) != B || t.dim(2) != H || t.dim(3) != W)
      contract_fail("concat_channels: incompatible shape " + shape_str(t.shape()));
    C += t.dim(1);
  }
  Tensor y = Tensor::zeros({B, C, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  double* yv = y.data();
  for (int b = 0; b < B; ++b) {
    int64_t coff = 0;
    for (const Tensor& t : xs) {
      const int64_t tc = t.dim(1);
      std::memcpy(yv + ((static_cast<int64_t>(b) * C + coff) * hw),
                  t.data() + static_cast<int64_t>(b) * tc * hw,
                  static_cast<size_t>(tc * hw) * sizeof(double));
      coff += tc;
    }
  }
  bool need = false;
  for (const Tensor& t : xs) need = need || wants_grad(t);
  if (need && Tape::active() != nullptr) {
    y.set_requires_grad(true);
    std::vector<Tensor> inputs = xs;
    Tensor yc = y;
    Tape::active()->record(y, [inputs, yc, B, C, hw]() mutable {
      const std::vector<double>& g = yc.grad_view();
      int64_t coff = 0;
      for (Tensor& t : inputs) {
        const int64_t tc = t.dim(1);
        if (t.requires_grad()) {
          std::vector<double>& gx = t.grad();
          for (int64_t b = 0; b < B; ++b) {
            const double* gsrc = g.data() + ((b * C + coff) * hw);
            double* gdst = gx.data() + b * tc * hw;
            for (int64_t i = 0; i < tc * hw; ++i) gdst[i] += gsrc[i];
          }
        }
        coff += tc;
      }
    });
  }
  return y;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  check_defined(x, "upsample_nearest");
  if (x.ndim() != 4) contract_fail("upsample_nearest: expects [B,C,H,W]");
  if (factor < 1) contract_fail("upsample_nearest: factor must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  Tensor y = Tensor::zeros({B, C, Ho, Wo});
  const double* xv = x.data();
  double* yv = y.data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const double* src = xv + bc * H * W;
    double* dst = yv + bc * Ho * Wo;
    for (int i = 0; i < Ho; ++i) {
      const double* srow = src + (i / factor) * W;
      double* drow = dst + static_cast<int64_t>(i) * Wo;
      for (int j = 0; j < Wo; ++j) drow[j] = srow[j / factor];
    }
  }
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc, B, C, H, W, factor]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      const int Ho = H * factor, Wo = W * factor;
      for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const double* gsrc = g.data() + bc * Ho * Wo;
        double* gdst = gx.data() + bc * H * W;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j)
            gdst[(i / factor) * W + j / factor] += gsrc[static_cast<int64_t>(i) * Wo + j];
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::vector<int> rows) {
  check_defined(x, "gather_rows");
  if (x.ndim() != 2) contract_fail("gather_rows: expects [B,F]");
  const int B = x.dim(0), F = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= B) contract_fail("gather_rows: row index out of range");
  Tensor y = Tensor::zeros({static_cast<int>(rows.size()), F});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(y.data() + i * static_cast<size_t>(F),
                x.data() + static_cast<size_t>(rows[i]) * F, sizeof(double) * F);
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc, rows, F]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      for (size_t i = 0; i < rows.size(); ++i) {
        const double* gs = g.data() + i * static_cast<size_t>(F);
        double* gd = gx.data() + static_cast<size_t>(rows[i]) * F;
        for (int f = 0; f < F; ++f) gd[f] += gs[f];
      }
    });
  }
  return y;
}

Tensor reduce_mean(const Tensor& x, std::vector<int> axes) {
  check_defined(x, "reduce_mean");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (int a : axes)
    if (a < 0 || a >= x.ndim())
      contract_fail("reduce_mean: axis " + std::to_string(a) + " invalid for " +
                    shape_str(x.shape()));
  if (axes.empty()) {
    Tensor y = Tensor::create(x.shape(), x.values());
    if (grad_needed({&x})) {
      y.set_requires_grad(true);
      Tensor xc = x, yc = y;
      Tape::active()->record(y, [xc, yc]() mutable {
        const std::vector<double>& g = yc.grad_view();
        std::vector<double>& gx = xc.grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    }
    return y;
  }

  Shape out_shape;
  std::vector<bool> reduced(static_cast<size_t>(x.ndim()), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;
  int64_t count = 1;
  for (int d = 0; d < x.ndim(); ++d) {
    if (reduced[static_cast<size_t>(d)])
      count *= x.dim(d);
    else
      out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);  // full reduction -> scalar [1]
  if (count == 0) contract_fail("reduce_mean: empty reduction extent");

  // out index of each input element, as a strided map
  const auto in_strides = row_major_strides(x.shape());
  const auto out_strides = row_major_strides(out_shape);
  std::vector<int64_t> map_strides(static_cast<size_t>(x.ndim()), 0);
  {
    size_t oi = 0;
    for (int d = 0; d < x.ndim(); ++d)
      if (!reduced[static_cast<size_t>(d)]) map_strides[static_cast<size_t>(d)] = out_strides[oi++];
  }
  // fast path: reduced axes form the trailing block -> contiguous tail means
  bool trailing = true;
  for (int d = x.ndim() - static_cast<int>(axes.size()); d < x.ndim(); ++d)
    if (d < 0 || !reduced[static_cast<size_t>(d)]) trailing = false;

  Tensor y = Tensor::zeros(out_shape);
  const double* xv = x.data();
  double* yv = y.data();
  const double inv = 1.0 / static_cast<double>(count);
  const int64_t n_out = y.numel();
  if (trailing) {
    for (int64_t o = 0; o < n_out; ++o) {
      const double* src = xv + o * count;
      double s = 0.0;
      for (int64_t i = 0; i < count; ++i) s += src[i];
      yv[o] = s * inv;
    }
  } else {
    const int nd = x.ndim();
    const int64_t n = x.numel();
    for (int64_t idx = 0; idx < n; ++idx) {
      int64_t rem = idx, o = 0;
      for (int d = 0; d < nd; ++d) {
        int64_t c = rem / in_strides[static_cast<size_t>(d)];
        rem -= c * in_strides[static_cast<size_t>(d)];
        o += c * map_strides[static_cast<size_t>(d)];
      }
      yv[o] += xv[idx] * inv;
    }
  }
  if (grad_needed({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    const int nd = x.ndim();
    Tape::active()->record(y, [xc, yc, in_strides, map_strides, inv, count, trailing, nd]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      if (trailing) {
        for (size_t o = 0; o < g.size(); ++o) {
          const double gi = g[o] * inv;
          double* dst = gx.data() + static_cast<int64_t>(o) * count;
          for (int64_t i = 0; i < count; ++i) dst[i] += gi;
        }
      } else {
        const int64_t n = static_cast<int64_t>(gx.size());
        for (int64_t idx = 0; idx < n; ++idx) {
          int64_t rem = idx, o = 0;
          for (int d = 0; d < nd; ++d) {
            int64_t c = rem / in_strides[static_cast<size_t>(d)];
            rem -= c * in_strides[static_cast<size_t>(d)];
            o += c * map_strides[static_cast<size_t>(d)];
          }
          gx[static_cast<size_t>(idx)] += g[static_cast<size_t>(o)] * inv;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d: implicit-GEMM lowering; the patch matrix is gathered on the fly by
// the GEMM packing stage.
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int B, Cin, H, W, Cout, kh, kw, Ho, Wo, groups, stride, padding;
  int cg;    // Cin per group
  int mg;    // Cout per group
  int k;     // cg*kh*kw, GEMM depth
  int n;     // Ho*Wo, spatial extent
};

ConvDims conv_check(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
                    int groups) {
  check_defined(x, "conv2d");
  check_defined(w, "conv2d");
  if (x.ndim() != 4) contract_fail("conv2d: input must be [B,Cin,H,W], got " + shape_str(x.shape()));
  if (w.ndim() != 4)
    contract_fail("conv2d: weight must be [Cout,Cin/groups,kh,kw], got " + shape_str(w.shape()));
  if (stride < 1 || padding < 0 || groups < 1) contract_fail("conv2d: bad stride/padding/groups");
  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.groups = groups;
  d.stride = stride;
  d.padding = padding;
  if (d.Cin % groups != 0 || d.Cout % groups != 0)
    contract_fail("conv2d: channels not divisible by groups");
  d.cg = d.Cin / groups;
  d.mg = d.Cout / groups;
  if (w.dim(1) != d.cg)
    contract_fail("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels/group, input has " +
                  std::to_string(d.cg));
  if (d.H + 2 * padding < d.kh || d.W + 2 * padding < d.kw)
    contract_fail("conv2d: kernel larger than padded input");
  d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d.Cout))
    contract_fail("conv2d: bias must be [Cout]");
  d.k = d.cg * d.kh * d.kw;
  d.n = d.Ho * d.Wo;
  return d;
}

// lookup tables mapping GEMM coordinates to input-tensor coordinates
struct ConvTables {
  std::vector<int> kc, kr, ks;   // k -> (channel-in-group, kernel row, kernel col)
  std::vector<int> oh, ow;       // n -> output row/col, pre-scaled by stride minus padding
  explicit ConvTables(const ConvDims& d)
      : kc(static_cast<size_t>(d.k)),
        kr(static_cast<size_t>(d.k)),
        ks(static_cast<size_t>(d.k)),
        oh(static_cast<size_t>(d.n)),
        ow(static_cast<size_t>(d.n)) {
    for (int k = 0; k < d.k; ++k) {
      kc[static_cast<size_t>(k)] = k / (d.kh * d.kw);
      kr[static_cast<size_t>(k)] = (k / d.kw) % d.kh;
      ks[static_cast<size_t>(k)] = k % d.kw;
    }
    for (int n = 0; n < d.n; ++n) {
      oh[static_cast<size_t>(n)] = (n / d.Wo) * d.stride - d.padding;
      ow[static_cast<size_t>(n)] = (n % d.Wo) * d.stride - d.padding;
    }
  }
};

// patch element (k, n) of the im2col matrix for one (sample, group) slice
struct ColFetch {
  const double* x;  // points at x[b, g*cg, 0, 0]
  const ConvDims* d;
  const ConvTables* t;
  double operator()(int k, int n) const {
    const int ih = t->oh[static_cast<size_t>(n)] + t->kr[static_cast<size_t>(k)];
    const int iw = t->ow[static_cast<size_t>(n)] + t->ks[static_cast<size_t>(k)];
    if (ih < 0 || ih >= d->H || iw < 0 || iw >= d->W) return 0.0;
    return x[(static_cast<int64_t>(t->kc[static_cast<size_t>(k)]) * d->H + ih) * d->W + iw];
  }
};

void conv_forward(const ConvDims& d, const double* xv, const double* wv, const double* bv,
                  double* yv) {
  const ConvTables tables(d);
  const bool plain = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0;
  for (int b = 0; b < d.B; ++b) {
    for (int g = 0; g < d.groups; ++g) {
      const double* xg = xv + (static_cast<int64_t>(b) * d.Cin + g * d.cg) * d.H * d.W;
      const double* wg = wv + static_cast<int64_t>(g) * d.mg * d.k;
      double* yg = yv + (static_cast<int64_t>(b) * d.Cout + g * d.mg) * d.n;
      if (plain) {
        detail::gemm(d.mg, d.n, d.k, wg, d.k, xg, d.n, yg, d.n, false);
      } else {
        ColFetch col{xg, &d, &tables};
        detail::gemm_generic(
            d.mg, d.n, d.k, [wg, &d](int i, int k) { return wg[static_cast<int64_t>(i) * d.k + k]; },
            col, yg, d.n, false);
      }
    }
  }
  if (bv != nullptr) {
    for (int b = 0; b < d.B; ++b)
      for (int c = 0; c < d.Cout; ++c) {
        double* row = yv + (static_cast<int64_t>(b) * d.Cout + c) * d.n;
        const double add = bv[c];
        for (int i = 0; i < d.n; ++i) row[i] += add;
      }
  }
}

void conv_backward(const ConvDims& d, const double* xv, const double* wv, const double* gy,
                   double* gx, double* gw, double* gb) {
  const ConvTables tables(d);
  const bool plain = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0;
  std::vector<double> dcol;
  if (gx != nullptr && !plain) dcol.resize(static_cast<size_t>(d.k) * d.n);

  for (int b = 0; b < d.B; ++b) {
    for (int g = 0; g < d.groups; ++g) {
      const double* xg = xv + (static_cast<int64_t>(b) * d.Cin + g * d.cg) * d.H * d.W;
      const double* wg = wv + static_cast<int64_t>(g) * d.mg * d.k;
      const double* gyg = gy + (static_cast<int64_t>(b) * d.Cout + g * d.mg) * d.n;

      if (gx != nullptr) {
        double* gxg = gx + (static_cast<int64_t>(b) * d.Cin + g * d.cg) * d.H * d.W;
        auto fetch_wt = [wg, &d](int k, int m) { return wg[static_cast<int64_t>(m) * d.k + k]; };
        if (plain) {
          // dcol == dx slice directly
          detail::gemm_generic(
              d.k, d.n, d.mg, fetch_wt,
              [gyg, &d](int m, int n) { return gyg[static_cast<int64_t>(m) * d.n + n]; }, gxg, d.n,
              true);
        } else {
          detail::gemm_generic(
              d.k, d.n, d.mg, fetch_wt,
              [gyg, &d](int m, int n) { return gyg[static_cast<int64_t>(m) * d.n + n]; },
              dcol.data(), d.n, false);
          // col2im scatter-add
          for (int k = 0; k < d.k; ++k) {
            const int kc = tables.kc[static_cast<size_t>(k)];
            const int kr = tables.kr[static_cast<size_t>(k)];
            const int ks = tables.ks[static_cast<size_t>(k)];
            const double* src = dcol.data() + static_cast<int64_t>(k) * d.n;
            double* plane = gxg + static_cast<int64_t>(kc) * d.H * d.W;
            for (int n = 0; n < d.n; ++n) {
              const int ih = tables.oh[static_cast<size_t>(n)] + kr;
              const int iw = tables.ow[static_cast<size_t>(n)] + ks;
              if (ih < 0 || ih >= d.H || iw < 0 || iw >= d.W) continue;
              plane[static_cast<int64_t>(ih) * d.W + iw] += src[n];
            }
          }
        }
      }

      if (gw != nullptr) {
        double* gwg = gw + static_cast<int64_t>(g) * d.mg * d.k;
        auto fetch_gy = [gyg, &d](int m, int n) { return gyg[static_cast<int64_t>(m) * d.n + n]; };
        if (plain) {
          detail::gemm_generic(
              d.mg, d.k, d.n, fetch_gy,
              [xg, &d](int n, int k) { return xg[static_cast<int64_t>(k) * d.n + n]; }, gwg, d.k,
              true);
        } else {
          ColFetch col{xg, &d, &tables};
          detail::gemm_generic(
              d.mg, d.k, d.n, fetch_gy, [&col](int n, int k) { return col(k, n); }, gwg, d.k,
              true);
        }
      }
    }
    if (gb != nullptr) {
      for (int c = 0; c < d.Cout; ++c) {
        const double* row = gy + (static_cast<int64_t>(b) * d.Cout + c) * d.n;
        double s = 0.0;
        for (int i = 0; i < d.n; ++i) s += row[i];
        gb[c] += s;
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups) {
  const ConvDims d = conv_check(x, w, bias, stride, padding, groups);
  Tensor y = Tensor::zeros({d.B, d.Cout, d.Ho, d.Wo});
  conv_forward(d, x.data(), w.data(), bias.defined() ? bias.data() : nullptr, y.data());
  const Tensor* btmp = bias.defined() ? &bias : nullptr;
  if (grad_needed({&x, &w, btmp})) {
    y.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = bias, yc = y;
    Tape::active()->record(y, [xc, wc, bc, yc, d]() mutable {
      const double* gy = yc.grad_view().data();
      double* gx = xc.requires_grad() ? xc.grad().data() : nullptr;
      double* gw = wc.requires_grad() ? wc.grad().data() : nullptr;
      double* gb = (bc.defined() && bc.requires_grad()) ? bc.grad().data() : nullptr;
      conv_backward(d, xc.data(), wc.data(), gy, gx, gw, gb);
    });
  }
  return y;
}

Tensor pool2d(const Tensor& x, PoolKind kind, int kernel, int stride) {
  check_defined(x, "pool2d");
  if (x.ndim() != 4) contract_fail("pool2d: expects [B,C,H,W]");
  if (kernel < 1 || stride < 1) contract_fail("pool2d: kernel and stride must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H || kernel > W)
    contract_fail("pool2d: kernel " + std::to_string(kernel) + " larger than input " +
                  shape_str(x.shape()));
  const int Ho = (H - kernel) / stride + 1;
  const int Wo = (W - kernel) / stride + 1;
  Tensor y = Tensor::zeros({B, C, Ho, Wo});
  const double* xv = x.data();
  double* yv = y.data();
  const int64_t planes = static_cast<int64_t>(B) * C;
  std::vector<int32_t> argmax;
  const bool need = grad_needed({&x});
  if (kind == PoolKind::max && need) argmax.resize(static_cast<size_t>(planes) * Ho * Wo);

  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = xv + p * H * W;
    double* dst = yv + p * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const int r0 = i * stride, c0 = j * stride;
        if (kind == PoolKind::avg) {
          double s = 0.0;
          for (int r = 0; r < kernel; ++r) {
            const double* row = src + static_cast<int64_t>(r0 + r) * W + c0;
            for (int c = 0; c < kernel; ++c) s += row[c];
          }
          dst[static_cast<int64_t>(i) * Wo + j] = s * inv;
        } else {
          double best = src[static_cast<int64_t>(r0) * W + c0];
          int32_t best_at = r0 * W + c0;
          for (int r = 0; r < kernel; ++r)
            for (int c = 0; c < kernel; ++c) {
              const int32_t at = (r0 + r) * W + (c0 + c);
              const double v = src[at];
              if (v > best) {  // strict: first max in scan order wins
                best = v;
                best_at = at;
              }
            }
          dst[static_cast<int64_t>(i) * Wo + j] = best;
          if (need) argmax[static_cast<size_t>(p * Ho * Wo + i * Wo + j)] = best_at;
        }
      }
  }
  if (need) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::active()->record(y, [xc, yc, kind, kernel, stride, H, W, Ho, Wo, planes, inv,
                               argmax = std::move(argmax)]() mutable {
      const std::vector<double>& g = yc.grad_view();
      std::vector<double>& gx = xc.grad();
      for (int64_t p = 0; p < planes; ++p) {
        const double* gsrc = g.data() + p * Ho * Wo;
        double* gdst = gx.data() + p * H * W;
        if (kind == PoolKind::avg) {
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
              const double gi = gsrc[static_cast<int64_t>(i) * Wo + j] * inv;
              for (int r = 0; r < kernel; ++r) {
                double* row = gdst + static_cast<int64_t>(i * stride + r) * W + j * stride;
                for (int c = 0; c < kernel; ++c) row[c] += gi;
              }
            }
        } else {
          for (int64_t o = 0; o < static_cast<int64_t>(Ho) * Wo; ++o)
            gdst[argmax[static_cast<size_t>(p * Ho * Wo + o)]] += gsrc[o];
        }
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  check_defined(bias, "linear");
  if (x.ndim() != 2 || w.ndim() != 2 || bias.ndim() != 1)
    contract_fail("linear: expects x[B,F], w[O,F], bias[O]");
  const int B = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (w.dim(1) != F || bias.dim(0) != O)
    contract_fail("linear: dimension mismatch x" + shape_str(x.shape()) + " w" +
                  shape_str(w.shape()) + " b" + shape_str(bias.shape()));
  Tensor y = Tensor::zeros({B, O});
  const double* wv = w.data();
  detail::gemm_generic(
      B, O, F, [xv = x.data(), F](int i, int k) { return xv[static_cast<int64_t>(i) * F + k]; },
      [wv, F](int k, int j) { return wv[static_cast<int64_t>(j) * F + k]; }, y.data(), O, false);
  double* yv = y.data();
  const double* bv = bias.data();
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) yv[static_cast<int64_t>(b) * O + o] += bv[o];

  if (grad_needed({&x, &w, &bias})) {
    y.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = bias, yc = y;
    Tape::active()->record(y, [xc, wc, bc, yc, B, F, O]() mutable {
      const double* g = yc.grad_view().data();
      if (xc.requires_grad()) {
        detail::gemm(B, F, O, g, O, wc.data(), F, xc.grad().data(), F, true);
      }
      if (wc.requires_grad()) {
        detail::gemm_generic(
            O, F, B, [g, O](int o, int b) { return g[static_cast<int64_t>(b) * O + o]; },
            [xv = xc.data(), F](int b, int f) { return xv[static_cast<int64_t>(b) * F + f]; },
            wc.grad().data(), F, true);
      }
      if (bc.requires_grad()) {
        std::vector<double>& gb = bc.grad();
        for (int b = 0; b < B; ++b)
          for (int o = 0; o < O; ++o) gb[static_cast<size_t>(o)] += g[static_cast<int64_t>(b) * O + o];
      }
    });
  }
  return y;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool training) {
  check_defined(x, "batch_norm2d");
  check_defined(gamma, "batch_norm2d");
  check_defined(beta, "batch_norm2d");
  if (x.ndim() != 4) contract_fail("batch_norm2d: expects [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
    contract_fail("batch_norm2d: gamma/beta must be [C]");
  if (static_cast<int>(state.running_mean.size()) != C)
    contract_fail("batch_norm2d: running stats sized for " +
                  std::to_string(state.running_mean.size()) + " channels, input has " +
                  std::to_string(C));
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t n = static_cast<int64_t>(B) * hw;
  if (n < 1) contract_fail("batch_norm2d: B*H*W must be >= 1");

  std::vector<double> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  const double* xv = x.data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xv + (static_cast<int64_t>(b) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(n);
      double v = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xv + (static_cast<int64_t>(b) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double dd = p[i] - m;
          v += dd * dd;
        }
      }
      mean[static_cast<size_t>(c)] = m;
      var[static_cast<size_t>(c)] = v / static_cast<double>(n);
      state.running_mean[static_cast<size_t>(c)] =
          (1.0 - state.momentum) * state.running_mean[static_cast<size_t>(c)] + state.momentum * m;
      state.running_var[static_cast<size_t>(c)] =
          (1.0 - state.momentum) * state.running_var[static_cast<size_t>(c)] +
          state.momentum * var[static_cast<size_t>(c)];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor y = Tensor::zeros(x.shape());
  double* yv = y.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();
  std::vector<double> inv_std(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + state.eps);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* p = xv + (static_cast<int64_t>(b) * C + c) * hw;
      double* q = yv + (static_cast<int64_t>(b) * C + c) * hw;
      const double m = mean[static_cast<size_t>(c)];
      const double is = inv_std[static_cast<size_t>(c)];
      const double ga = gv[c], be = bv[c];
      for (int64_t i = 0; i < hw; ++i) q[i] = ga * (p[i] - m) * is + be;
    }

  if (grad_needed({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, yc = y;
    Tape::active()->record(y, [xc, gc, bc, yc, mean = std::move(mean), inv_std = std::move(inv_std),
                               training, B, C, hw, n]() mutable {
      const double* g = yc.grad_view().data();
      const double* xv = xc.data();
      const double* gv = gc.data();
      double* gx = xc.requires_grad() ? xc.grad().data() : nullptr;
      double* gg = gc.requires_grad() ? gc.grad().data() : nullptr;
      double* gb = bc.requires_grad() ? bc.grad().data() : nullptr;
      for (int c = 0; c < C; ++c) {
        const double m = mean[static_cast<size_t>(c)];
        const double is = inv_std[static_cast<size_t>(c)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* gp = g + (static_cast<int64_t>(b) * C + c) * hw;
          const double* xp = xv + (static_cast<int64_t>(b) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * (xp[i] - m) * is;
          }
        }
        if (gb != nullptr) gb[c] += sum_g;
        if (gg != nullptr) gg[c] += sum_gx;
        if (gx != nullptr) {
          const double ga = gv[c];
          if (training) {
            const double mg = sum_g / static_cast<double>(n);
            const double mgx = sum_gx / static_cast<double>(n);
            for (int b = 0; b < B; ++b) {
              const double* gp = g + (static_cast<int64_t>(b) * C + c) * hw;
              const double* xp = xv + (static_cast<int64_t>(b) * C + c) * hw;
              double* out = gx + (static_cast<int64_t>(b) * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const double xhat = (xp[i] - m) * is;
                out[i] += ga * is * (gp[i] - mg - xhat * mgx);
              }
            }
          } else {
            for (int b = 0; b < B; ++b) {
              const double* gp = g + (static_cast<int64_t>(b) * C + c) * hw;
              double* out = gx + (static_cast<int64_t>(b) * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) out[i] += ga * is * gp[i];
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_defined(logits, "softmax_cross_entropy");
  if (logits.ndim() != 2) contract_fail("softmax_cross_entropy: expects [B,K]");
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    contract_fail("softmax_cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                  std::to_string(B));
  for (int lab : labels)
    if (lab < 0 || lab >= K)
      contract_fail("softmax_cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                    std::to_string(K) + ")");
  const double* z = logits.data();
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* row = z + static_cast<int64_t>(b) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(row[k] - m);
    loss += m + std::log(s) - row[labels[static_cast<size_t>(b)]];
  }
  Tensor y = Tensor::scalar_tensor(loss / B);
  if (grad_needed({&logits})) {
    y.set_requires_grad(true);
    Tensor lc = logits, yc = y;
    Tape::active()->record(y, [lc, yc, labels, B, K]() mutable {
      const double g = yc.grad_view()[0] / B;
      const double* z = lc.data();
      std::vector<double>& gx = lc.grad();
      for (int b = 0; b < B; ++b) {
        const double* row = z + static_cast<int64_t>(b) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(row[k] - m);
        double* grow = gx.data() + static_cast<int64_t>(b) * K;
        for (int k = 0; k < K; ++k) grow[k] += g * (std::exp(row[k] - m) / s);
        grow[labels[static_cast<size_t>(b)]] -= g;
      }
    });
  }
  return y;
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (t == nullptr) contract_fail("backward: no active tape");
  t->backward(loss);
}

}  // namespace fern
