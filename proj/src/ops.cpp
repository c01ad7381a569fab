#include "mus/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mus {

namespace {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.value) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
bool track_grad(const std::initializer_list<const TensorPtr<T>*>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto* p : inputs)
    if (*p && (*p)->requires_grad) return true;
  return false;
}

// Valid output positions o for one axis: 0 <= o*stride + k_off < in_size.
struct AxisRange {
  int64_t lo, hi;  // half-open
};

AxisRange valid_range(int64_t in_size, int64_t out_size, int64_t k_off,
                      int64_t stride) {
  int64_t lo = 0;
  if (k_off < 0) lo = (-k_off + stride - 1) / stride;
  int64_t hi_idx = in_size - 1 - k_off;
  if (hi_idx < 0) return {0, 0};
  int64_t hi = hi_idx / stride + 1;
  hi = std::min(hi, out_size);
  lo = std::min(lo, hi);
  return {lo, hi};
}

struct ConvGeom {
  int64_t ci, co, kd, kh, kw;
  int64_t sd, sh, sw;
  int64_t pd, ph, pw;
  Shape5 in, out;  // conv orientation: in = x, out = conv(x)
};

template <typename T>
ConvGeom conv_geometry(const Shape5& x, const Conv3dParams<T>& p, bool transposed) {
  require(p.kernel != nullptr, "conv kernel missing");
  const Shape5& k = p.kernel->shape;
  require(k.d >= 1 && k.h >= 1 && k.w >= 1, "kernel dims must be >= 1");
  ConvGeom g;
  g.co = k.b;
  g.ci = k.c;
  g.kd = k.d;
  g.kh = k.h;
  g.kw = k.w;
  g.sd = p.stride[0];
  g.sh = p.stride[1];
  g.sw = p.stride[2];
  g.pd = p.padding[0];
  g.ph = p.padding[1];
  g.pw = p.padding[2];
  require(g.sd >= 1 && g.sh >= 1 && g.sw >= 1, "conv stride must be >= 1");
  require(g.pd >= 0 && g.ph >= 0 && g.pw >= 0, "conv padding must be >= 0");
  if (!transposed) {
    require(x.c == g.ci, "conv3d: input channels " + std::to_string(x.c) +
                             " do not match kernel c_in " + std::to_string(g.ci));
    g.in = x;
    g.out.b = x.b;
    g.out.c = g.co;
    g.out.d = (x.d + 2 * g.pd - g.kd) / g.sd + 1;
    g.out.h = (x.h + 2 * g.ph - g.kh) / g.sh + 1;
    g.out.w = (x.w + 2 * g.pw - g.kw) / g.sw + 1;
    require(x.d + 2 * g.pd >= g.kd && x.h + 2 * g.ph >= g.kh &&
                x.w + 2 * g.pw >= g.kw,
            "conv3d: input smaller than kernel under padding");
  } else {
    require(x.c == g.co, "conv_transpose3d: input channels " +
                             std::to_string(x.c) + " do not match kernel c_out " +
                             std::to_string(g.co));
    g.out = x;                 // transposed input lives in conv-output space
    g.in.b = x.b;
    g.in.c = g.ci;
    g.in.d = (x.d - 1) * g.sd - 2 * g.pd + g.kd;
    g.in.h = (x.h - 1) * g.sh - 2 * g.ph + g.kh;
    g.in.w = (x.w - 1) * g.sw - 2 * g.pw + g.kw;
    require(g.in.d >= 1 && g.in.h >= 1 && g.in.w >= 1,
            "conv_transpose3d: output dims collapse to zero");
  }
  return g;
}

// out[b,co,o] += sum_{ci,k} w[co,ci,k] * x[b,ci,o*s + k - p]
template <typename T>
void conv_fwd_kernel(const T* __restrict x, const T* __restrict w,
                     T* __restrict out, const ConvGeom& g) {
  const int64_t in_sp = g.in.d * g.in.h * g.in.w;
  const int64_t out_sp = g.out.d * g.out.h * g.out.w;
  parallel_chunks(g.in.b * g.co, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / g.co, co = bc % g.co;
      T* out_base = out + (b * g.co + co) * out_sp;
      for (int64_t ci = 0; ci < g.ci; ++ci) {
        const T* x_base = x + (b * g.ci + ci) * in_sp;
        const T* w_base = w + (co * g.ci + ci) * g.kd * g.kh * g.kw;
        for (int64_t kd = 0; kd < g.kd; ++kd) {
          AxisRange rd = valid_range(g.in.d, g.out.d, kd - g.pd, g.sd);
          for (int64_t kh = 0; kh < g.kh; ++kh) {
            AxisRange rh = valid_range(g.in.h, g.out.h, kh - g.ph, g.sh);
            for (int64_t kw = 0; kw < g.kw; ++kw) {
              AxisRange rw = valid_range(g.in.w, g.out.w, kw - g.pw, g.sw);
              if (rw.lo >= rw.hi) continue;
              const T wv = w_base[(kd * g.kh + kh) * g.kw + kw];
              const int64_t woff = kw - g.pw;
              for (int64_t od = rd.lo; od < rd.hi; ++od) {
                const int64_t id = od * g.sd + kd - g.pd;
                for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                  const int64_t ih = oh * g.sh + kh - g.ph;
                  T* orow = out_base + (od * g.out.h + oh) * g.out.w;
                  const T* xrow = x_base + (id * g.in.h + ih) * g.in.w + woff;
                  if (g.sw == 1) {
                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                      orow[ow] += wv * xrow[ow];
                  } else {
                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                      orow[ow] += wv * xrow[ow * g.sw];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

// dx[b,ci,o*s + k - p] += sum_{co,k} w[co,ci,k] * g[b,co,o]  (scatter)
template <typename T>
void conv_input_grad_kernel(const T* __restrict gout, const T* __restrict w,
                            T* __restrict dx, const ConvGeom& g) {
  const int64_t in_sp = g.in.d * g.in.h * g.in.w;
  const int64_t out_sp = g.out.d * g.out.h * g.out.w;
  parallel_chunks(g.in.b * g.ci, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / g.ci, ci = bc % g.ci;
      T* dx_base = dx + (b * g.ci + ci) * in_sp;
      for (int64_t co = 0; co < g.co; ++co) {
        const T* g_base = gout + (b * g.co + co) * out_sp;
        const T* w_base = w + (co * g.ci + ci) * g.kd * g.kh * g.kw;
        for (int64_t kd = 0; kd < g.kd; ++kd) {
          AxisRange rd = valid_range(g.in.d, g.out.d, kd - g.pd, g.sd);
          for (int64_t kh = 0; kh < g.kh; ++kh) {
            AxisRange rh = valid_range(g.in.h, g.out.h, kh - g.ph, g.sh);
            for (int64_t kw = 0; kw < g.kw; ++kw) {
              AxisRange rw = valid_range(g.in.w, g.out.w, kw - g.pw, g.sw);
              if (rw.lo >= rw.hi) continue;
              const T wv = w_base[(kd * g.kh + kh) * g.kw + kw];
              const int64_t woff = kw - g.pw;
              for (int64_t od = rd.lo; od < rd.hi; ++od) {
                const int64_t id = od * g.sd + kd - g.pd;
                for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                  const int64_t ih = oh * g.sh + kh - g.ph;
                  const T* grow = g_base + (od * g.out.h + oh) * g.out.w;
                  T* xrow = dx_base + (id * g.in.h + ih) * g.in.w + woff;
                  if (g.sw == 1) {
                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                      xrow[ow] += wv * grow[ow];
                  } else {
                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                      xrow[ow * g.sw] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

// dw[co,ci,k] += sum_{b,o} x[b,ci,o*s + k - p] * g[b,co,o]
//
// The reduction runs over a fixed bank of lanes so the compiler can emit
// SIMD FMAs (a single serial accumulator would pin the loop to the FP add
// latency); lane order is fixed, so results stay deterministic.
template <typename T>
void conv_weight_grad_kernel(const T* __restrict x, const T* __restrict gout,
                             T* __restrict dw, const ConvGeom& g) {
  constexpr int kLanes = 16;
  const int64_t in_sp = g.in.d * g.in.h * g.in.w;
  const int64_t out_sp = g.out.d * g.out.h * g.out.w;
  parallel_chunks(g.co, [&](int64_t lo, int64_t hi) {
    for (int64_t co = lo; co < hi; ++co) {
      for (int64_t ci = 0; ci < g.ci; ++ci) {
        T* dw_base = dw + (co * g.ci + ci) * g.kd * g.kh * g.kw;
        for (int64_t kd = 0; kd < g.kd; ++kd) {
          AxisRange rd = valid_range(g.in.d, g.out.d, kd - g.pd, g.sd);
          for (int64_t kh = 0; kh < g.kh; ++kh) {
            AxisRange rh = valid_range(g.in.h, g.out.h, kh - g.ph, g.sh);
            for (int64_t kw = 0; kw < g.kw; ++kw) {
              AxisRange rw = valid_range(g.in.w, g.out.w, kw - g.pw, g.sw);
              T lanes[kLanes] = {};
              T tail = 0;
              const int64_t woff = kw - g.pw;
              for (int64_t b = 0; b < g.in.b; ++b) {
                const T* x_base = x + (b * g.ci + ci) * in_sp;
                const T* g_base = gout + (b * g.co + co) * out_sp;
                for (int64_t od = rd.lo; od < rd.hi; ++od) {
                  const int64_t id = od * g.sd + kd - g.pd;
                  for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                    const int64_t ih = oh * g.sh + kh - g.ph;
                    const T* grow = g_base + (od * g.out.h + oh) * g.out.w;
                    const T* xrow = x_base + (id * g.in.h + ih) * g.in.w + woff;
                    if (g.sw == 1) {
                      int64_t ow = rw.lo;
                      for (; ow + kLanes <= rw.hi; ow += kLanes)
                        for (int l = 0; l < kLanes; ++l)
                          lanes[l] += xrow[ow + l] * grow[ow + l];
                      for (; ow < rw.hi; ++ow) tail += xrow[ow] * grow[ow];
                    } else {
                      for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                        tail += xrow[ow * g.sw] * grow[ow];
                    }
                  }
                }
              }
              T acc = tail;
              for (int l = 0; l < kLanes; ++l) acc += lanes[l];
              dw_base[(kd * g.kh + kh) * g.kw + kw] += acc;
            }
          }
        }
      }
    }
  });
}

template <typename T>
void add_channel_bias(T* out, const T* bias, int64_t b_n, int64_t c_n,
                      int64_t sp) {
  for (int64_t b = 0; b < b_n; ++b)
    for (int64_t c = 0; c < c_n; ++c) {
      T* row = out + (b * c_n + c) * sp;
      const T bv = bias[c];
      for (int64_t i = 0; i < sp; ++i) row[i] += bv;
    }
}

// Per-output-channel sum of the upstream gradient, for bias grads.
template <typename T>
void channel_sum(const T* g, T* acc, int64_t b_n, int64_t c_n, int64_t sp) {
  for (int64_t b = 0; b < b_n; ++b)
    for (int64_t c = 0; c < c_n; ++c) {
      const T* row = g + (b * c_n + c) * sp;
      T s = 0;
      for (int64_t i = 0; i < sp; ++i) s += row[i];
      acc[c] += s;
    }
}

}  // namespace

template <typename T>
TensorPtr<T> conv3d(const TensorPtr<T>& x, const Conv3dParams<T>& p) {
  require(x != nullptr, "conv3d: null input");
  ConvGeom g = conv_geometry(x->shape, p, /*transposed=*/false);
  if (p.bias) {
    require(p.bias->numel() == g.co, "conv3d: bias size must equal c_out");
  }
  auto out = Tensor<T>::create(g.out);
  conv_fwd_kernel(x->value.data(), p.kernel->value.data(), out->value.data(), g);
  if (p.bias)
    add_channel_bias(out->value.data(), p.bias->value.data(), g.out.b, g.co,
                     g.out.spatial());
  check_finite(*out, "conv3d");

  if (track_grad<T>({&x, &p.kernel, &p.bias})) {
    out->requires_grad = true;
    out->parents = {x, p.kernel};
    if (p.bias) out->parents.push_back(p.bias);
    auto xp = x, wp = p.kernel, bp = p.bias;
    out->backward_fn = [xp, wp, bp, g](Tensor<T>& self) {
      if (xp->requires_grad) {
        xp->ensure_grad();
        conv_input_grad_kernel(self.grad.data(), wp->value.data(),
                               xp->grad.data(), g);
      }
      if (wp->requires_grad) {
        wp->ensure_grad();
        conv_weight_grad_kernel(xp->value.data(), self.grad.data(),
                                wp->grad.data(), g);
      }
      if (bp && bp->requires_grad) {
        bp->ensure_grad();
        channel_sum(self.grad.data(), bp->grad.data(), g.out.b, g.co,
                    g.out.spatial());
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> conv_transpose3d(const TensorPtr<T>& x, const Conv3dParams<T>& p) {
  require(x != nullptr, "conv_transpose3d: null input");
  ConvGeom g = conv_geometry(x->shape, p, /*transposed=*/true);
  if (p.bias) {
    require(p.bias->numel() == g.ci,
            "conv_transpose3d: bias size must equal c_in of the kernel");
  }
  auto out = Tensor<T>::create(g.in);
  conv_input_grad_kernel(x->value.data(), p.kernel->value.data(),
                         out->value.data(), g);
  if (p.bias)
    add_channel_bias(out->value.data(), p.bias->value.data(), g.in.b, g.ci,
                     g.in.spatial());
  check_finite(*out, "conv_transpose3d");

  if (track_grad<T>({&x, &p.kernel, &p.bias})) {
    out->requires_grad = true;
    out->parents = {x, p.kernel};
    if (p.bias) out->parents.push_back(p.bias);
    auto xp = x, wp = p.kernel, bp = p.bias;
    out->backward_fn = [xp, wp, bp, g](Tensor<T>& self) {
      if (xp->requires_grad) {
        xp->ensure_grad();
        conv_fwd_kernel(self.grad.data(), wp->value.data(), xp->grad.data(), g);
      }
      if (wp->requires_grad) {
        wp->ensure_grad();
        conv_weight_grad_kernel(self.grad.data(), xp->value.data(),
                                wp->grad.data(), g);
      }
      if (bp && bp->requires_grad) {
        bp->ensure_grad();
        channel_sum(self.grad.data(), bp->grad.data(), g.in.b, g.ci,
                    g.in.spatial());
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> instance_norm(const TensorPtr<T>& x, const TensorPtr<T>& scale,
                           const TensorPtr<T>& shift, double eps) {
  require(x != nullptr && scale != nullptr && shift != nullptr,
          "instance_norm: null input");
  const Shape5 s = x->shape;
  require(scale->numel() == s.c && shift->numel() == s.c,
          "instance_norm: scale/shift must have C elements");
  const int64_t sp = s.spatial();
  auto out = Tensor<T>::create(s);
  // Normalized values are recomputed in backward from saved statistics.
  auto mean = std::make_shared<std::vector<T>>(s.b * s.c);
  auto inv_std = std::make_shared<std::vector<T>>(s.b * s.c);

  parallel_chunks(s.b * s.c, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const T* xr = x->value.data() + bc * sp;
      T* orow = out->value.data() + bc * sp;
      double m = 0;
      for (int64_t i = 0; i < sp; ++i) m += xr[i];
      m /= sp;
      double var = 0;
      for (int64_t i = 0; i < sp; ++i) {
        double dv = xr[i] - m;
        var += dv * dv;
      }
      var /= sp;
      const double istd = 1.0 / std::sqrt(var + eps);
      (*mean)[bc] = static_cast<T>(m);
      (*inv_std)[bc] = static_cast<T>(istd);
      const int64_t c = bc % s.c;
      const T ga = scale->value[c], be = shift->value[c];
      for (int64_t i = 0; i < sp; ++i)
        orow[i] = static_cast<T>(ga * ((xr[i] - m) * istd) + be);
    }
  });
  check_finite(*out, "instance_norm");

  if (track_grad<T>({&x, &scale, &shift})) {
    out->requires_grad = true;
    out->parents = {x, scale, shift};
    auto xp = x, gp = scale, bp = shift;
    out->backward_fn = [xp, gp, bp, mean, inv_std, s, sp](Tensor<T>& self) {
      if (xp->requires_grad) xp->ensure_grad();
      if (gp->requires_grad) gp->ensure_grad();
      if (bp->requires_grad) bp->ensure_grad();
      // scale/shift grads reduce across batch; keep that loop serial.
      for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
        const int64_t c = bc % s.c;
        const T* xr = xp->value.data() + bc * sp;
        const T* gr = self.grad.data() + bc * sp;
        const T m = (*mean)[bc], istd = (*inv_std)[bc];
        double sum_g = 0, sum_gy = 0;
        for (int64_t i = 0; i < sp; ++i) {
          const double y = (xr[i] - m) * istd;
          sum_g += gr[i];
          sum_gy += gr[i] * y;
        }
        if (gp->requires_grad) gp->grad[c] += static_cast<T>(sum_gy);
        if (bp->requires_grad) bp->grad[c] += static_cast<T>(sum_g);
        if (xp->requires_grad) {
          T* dxr = xp->grad.data() + bc * sp;
          const double ga = gp->value[c];
          const double mg = sum_g / sp, mgy = sum_gy / sp;
          for (int64_t i = 0; i < sp; ++i) {
            const double y = (xr[i] - m) * istd;
            dxr[i] += static_cast<T>(ga * istd * (gr[i] - mg - y * mgy));
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> leaky_relu(const TensorPtr<T>& x, double slope) {
  require(x != nullptr, "leaky_relu: null input");
  auto out = Tensor<T>::create(x->shape);
  const T sl = static_cast<T>(slope);
  const int64_t n = x->numel();
  parallel_chunks(n, [&](int64_t lo, int64_t hi) {
    const T* xv = x->value.data();
    T* ov = out->value.data();
    for (int64_t i = lo; i < hi; ++i) ov[i] = xv[i] > 0 ? xv[i] : sl * xv[i];
  });
  check_finite(*out, "leaky_relu");

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp, sl, n](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      parallel_chunks(n, [&](int64_t lo, int64_t hi) {
        const T* xv = xp->value.data();
        const T* gv = self.grad.data();
        T* dx = xp->grad.data();
        for (int64_t i = lo; i < hi; ++i)
          dx[i] += xv[i] > 0 ? gv[i] : sl * gv[i];
      });
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> softmax_channels(const TensorPtr<T>& x) {
  require(x != nullptr, "softmax_channels: null input");
  const Shape5 s = x->shape;
  const int64_t sp = s.spatial();
  auto out = Tensor<T>::create(s);
  parallel_chunks(s.b, [&](int64_t blo, int64_t bhi) {
    for (int64_t b = blo; b < bhi; ++b) {
      const T* xb = x->value.data() + b * s.c * sp;
      T* ob = out->value.data() + b * s.c * sp;
      for (int64_t i = 0; i < sp; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t c = 0; c < s.c; ++c)
          mx = std::max(mx, static_cast<double>(xb[c * sp + i]));
        double denom = 0;
        for (int64_t c = 0; c < s.c; ++c)
          denom += std::exp(static_cast<double>(xb[c * sp + i]) - mx);
        for (int64_t c = 0; c < s.c; ++c)
          ob[c * sp + i] =
              static_cast<T>(std::exp(static_cast<double>(xb[c * sp + i]) - mx) / denom);
      }
    }
  });
  check_finite(*out, "softmax_channels");

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp, s, sp](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      parallel_chunks(s.b, [&](int64_t blo, int64_t bhi) {
        for (int64_t b = blo; b < bhi; ++b) {
          const T* pb = self.value.data() + b * s.c * sp;
          const T* gb = self.grad.data() + b * s.c * sp;
          T* dxb = xp->grad.data() + b * s.c * sp;
          for (int64_t i = 0; i < sp; ++i) {
            double dot = 0;
            for (int64_t c = 0; c < s.c; ++c)
              dot += static_cast<double>(pb[c * sp + i]) * gb[c * sp + i];
            for (int64_t c = 0; c < s.c; ++c)
              dxb[c * sp + i] += static_cast<T>(
                  pb[c * sp + i] * (gb[c * sp + i] - dot));
          }
        }
      });
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a != nullptr && b != nullptr, "concat_channels: null input");
  const Shape5 &sa = a->shape, &sb = b->shape;
  require(sa.b == sb.b && sa.d == sb.d && sa.h == sb.h && sa.w == sb.w,
          "concat_channels: non-channel dims differ: " + sa.str() + " vs " +
              sb.str());
  Shape5 so = sa;
  so.c = sa.c + sb.c;
  const int64_t sp = sa.spatial();
  auto out = Tensor<T>::create(so);
  for (int64_t bi = 0; bi < sa.b; ++bi) {
    std::copy_n(a->value.data() + bi * sa.c * sp, sa.c * sp,
                out->value.data() + bi * so.c * sp);
    std::copy_n(b->value.data() + bi * sb.c * sp, sb.c * sp,
                out->value.data() + bi * so.c * sp + sa.c * sp);
  }

  if (track_grad<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    auto ap = a, bp = b;
    out->backward_fn = [ap, bp, sa, sb, so, sp](Tensor<T>& self) {
      for (int64_t bi = 0; bi < sa.b; ++bi) {
        const T* g = self.grad.data() + bi * so.c * sp;
        if (ap->requires_grad) {
          ap->ensure_grad();
          T* da = ap->grad.data() + bi * sa.c * sp;
          for (int64_t i = 0; i < sa.c * sp; ++i) da[i] += g[i];
        }
        if (bp->requires_grad) {
          bp->ensure_grad();
          T* db = bp->grad.data() + bi * sb.c * sp;
          for (int64_t i = 0; i < sb.c * sp; ++i) db[i] += g[sa.c * sp + i];
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> elementwise_mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a != nullptr && b != nullptr, "elementwise_mul: null input");
  require(a->shape == b->shape, "elementwise_mul: shape mismatch " +
                                    a->shape.str() + " vs " + b->shape.str());
  auto out = Tensor<T>::create(a->shape);
  const int64_t n = a->numel();
  parallel_chunks(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i)
      out->value[i] = a->value[i] * b->value[i];
  });
  check_finite(*out, "elementwise_mul");

  if (track_grad<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    auto ap = a, bp = b;
    out->backward_fn = [ap, bp, n](Tensor<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          ap->grad[i] += self.grad[i] * bp->value[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          bp->grad[i] += self.grad[i] * ap->value[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a != nullptr && b != nullptr, "add: null input");
  require(a->shape == b->shape,
          "add: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
  auto out = Tensor<T>::create(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  check_finite(*out, "add");

  if (track_grad<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    auto ap = a, bp = b;
    out->backward_fn = [ap, bp, n](Tensor<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ap->grad[i] += self.grad[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bp->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, double s) {
  require(x != nullptr, "scale: null input");
  auto out = Tensor<T>::create(x->shape);
  const int64_t n = x->numel();
  const T sv = static_cast<T>(s);
  for (int64_t i = 0; i < n; ++i) out->value[i] = sv * x->value[i];
  check_finite(*out, "scale");

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp, sv, n](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      for (int64_t i = 0; i < n; ++i) xp->grad[i] += sv * self.grad[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x) {
  require(x != nullptr, "sum_all: null input");
  auto out = Tensor<T>::create({1, 1, 1, 1, 1});
  double acc = 0;
  for (T v : x->value) acc += static_cast<double>(v);
  out->value[0] = static_cast<T>(acc);
  check_finite(*out, "sum_all");

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      const T g = self.grad[0];
      for (auto& gv : xp->grad) gv += g;
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> downsample2(const TensorPtr<T>& x, Resample mode) {
  require(x != nullptr, "downsample2: null input");
  require(mode == Resample::nearest || mode == Resample::mean,
          "downsample2 supports nearest or mean");
  const Shape5 s = x->shape;
  require(s.d >= 2 && s.h >= 2 && s.w >= 2,
          "downsample2: spatial dims must be >= 2");
  Shape5 so{s.b, s.c, s.d / 2, s.h / 2, s.w / 2};
  auto out = Tensor<T>::create(so);
  const int64_t sp_in = s.spatial(), sp_out = so.spatial();

  parallel_chunks(s.b * s.c, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const T* xv = x->value.data() + bc * sp_in;
      T* ov = out->value.data() + bc * sp_out;
      for (int64_t od = 0; od < so.d; ++od)
        for (int64_t oh = 0; oh < so.h; ++oh)
          for (int64_t ow = 0; ow < so.w; ++ow) {
            const int64_t base = (2 * od * s.h + 2 * oh) * s.w + 2 * ow;
            if (mode == Resample::nearest) {
              ov[(od * so.h + oh) * so.w + ow] = xv[base];
            } else {
              double acc = 0;
              for (int64_t dd = 0; dd < 2; ++dd)
                for (int64_t dh = 0; dh < 2; ++dh)
                  for (int64_t dw = 0; dw < 2; ++dw)
                    acc += xv[base + (dd * s.h + dh) * s.w + dw];
              ov[(od * so.h + oh) * so.w + ow] = static_cast<T>(acc / 8.0);
            }
          }
    }
  });

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp, s, so, sp_in, sp_out, mode](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
        const T* gv = self.grad.data() + bc * sp_out;
        T* dx = xp->grad.data() + bc * sp_in;
        for (int64_t od = 0; od < so.d; ++od)
          for (int64_t oh = 0; oh < so.h; ++oh)
            for (int64_t ow = 0; ow < so.w; ++ow) {
              const T g = gv[(od * so.h + oh) * so.w + ow];
              const int64_t base = (2 * od * s.h + 2 * oh) * s.w + 2 * ow;
              if (mode == Resample::nearest) {
                dx[base] += g;
              } else {
                const T g8 = g / T(8);
                for (int64_t dd = 0; dd < 2; ++dd)
                  for (int64_t dh = 0; dh < 2; ++dh)
                    for (int64_t dw = 0; dw < 2; ++dw)
                      dx[base + (dd * s.h + dh) * s.w + dw] += g8;
              }
            }
      }
    };
  }
  return out;
}

namespace {

// Per-axis interpolation table for factor-2 trilinear upsampling with
// half-voxel center alignment: source coordinate (o + 0.5)/2 - 0.5, clamped.
struct LerpAxis {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;
};

LerpAxis lerp_axis(int64_t n_in) {
  LerpAxis ax;
  const int64_t n_out = 2 * n_in;
  ax.i0.resize(n_out);
  ax.i1.resize(n_out);
  ax.w1.resize(n_out);
  for (int64_t o = 0; o < n_out; ++o) {
    double q = (o + 0.5) / 2.0 - 0.5;
    if (q < 0) q = 0;
    if (q > n_in - 1) q = static_cast<double>(n_in - 1);
    int64_t i0 = static_cast<int64_t>(std::floor(q));
    if (i0 > n_in - 2) i0 = std::max<int64_t>(0, n_in - 2);
    double w1 = q - i0;
    if (n_in == 1) {
      i0 = 0;
      w1 = 0;
    }
    ax.i0[o] = i0;
    ax.i1[o] = std::min(i0 + 1, n_in - 1);
    ax.w1[o] = w1;
  }
  return ax;
}

}  // namespace

template <typename T>
TensorPtr<T> upsample2(const TensorPtr<T>& x, Resample mode) {
  require(x != nullptr, "upsample2: null input");
  require(mode == Resample::nearest || mode == Resample::trilinear,
          "upsample2 supports nearest or trilinear");
  const Shape5 s = x->shape;
  Shape5 so{s.b, s.c, s.d * 2, s.h * 2, s.w * 2};
  auto out = Tensor<T>::create(so);
  const int64_t sp_in = s.spatial(), sp_out = so.spatial();

  auto axd = std::make_shared<LerpAxis>(lerp_axis(s.d));
  auto axh = std::make_shared<LerpAxis>(lerp_axis(s.h));
  auto axw = std::make_shared<LerpAxis>(lerp_axis(s.w));

  parallel_chunks(s.b * s.c, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const T* xv = x->value.data() + bc * sp_in;
      T* ov = out->value.data() + bc * sp_out;
      for (int64_t od = 0; od < so.d; ++od)
        for (int64_t oh = 0; oh < so.h; ++oh)
          for (int64_t ow = 0; ow < so.w; ++ow) {
            if (mode == Resample::nearest) {
              ov[(od * so.h + oh) * so.w + ow] =
                  xv[((od / 2) * s.h + oh / 2) * s.w + ow / 2];
            } else {
              const double wd = axd->w1[od], wh = axh->w1[oh], ww = axw->w1[ow];
              const int64_t d0 = axd->i0[od], d1 = axd->i1[od];
              const int64_t h0 = axh->i0[oh], h1 = axh->i1[oh];
              const int64_t w0 = axw->i0[ow], w1i = axw->i1[ow];
              auto at = [&](int64_t dd, int64_t hh, int64_t wwi) {
                return static_cast<double>(xv[(dd * s.h + hh) * s.w + wwi]);
              };
              const double v =
                  (1 - wd) * ((1 - wh) * ((1 - ww) * at(d0, h0, w0) + ww * at(d0, h0, w1i)) +
                              wh * ((1 - ww) * at(d0, h1, w0) + ww * at(d0, h1, w1i))) +
                  wd * ((1 - wh) * ((1 - ww) * at(d1, h0, w0) + ww * at(d1, h0, w1i)) +
                        wh * ((1 - ww) * at(d1, h1, w0) + ww * at(d1, h1, w1i)));
              ov[(od * so.h + oh) * so.w + ow] = static_cast<T>(v);
            }
          }
    }
  });

  if (track_grad<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    auto xp = x;
    out->backward_fn = [xp, s, so, sp_in, sp_out, mode, axd, axh,
                        axw](Tensor<T>& self) {
      if (!xp->requires_grad) return;
      xp->ensure_grad();
      parallel_chunks(s.b * s.c, [&](int64_t lo, int64_t hi) {
        for (int64_t bc = lo; bc < hi; ++bc) {
          const T* gv = self.grad.data() + bc * sp_out;
          T* dx = xp->grad.data() + bc * sp_in;
          for (int64_t od = 0; od < so.d; ++od)
            for (int64_t oh = 0; oh < so.h; ++oh)
              for (int64_t ow = 0; ow < so.w; ++ow) {
                const T g = gv[(od * so.h + oh) * so.w + ow];
                if (mode == Resample::nearest) {
                  dx[((od / 2) * s.h + oh / 2) * s.w + ow / 2] += g;
                } else {
                  const double wd = axd->w1[od], wh = axh->w1[oh],
                               ww = axw->w1[ow];
                  const int64_t d0 = axd->i0[od], d1 = axd->i1[od];
                  const int64_t h0 = axh->i0[oh], h1 = axh->i1[oh];
                  const int64_t w0 = axw->i0[ow], w1i = axw->i1[ow];
                  auto sc = [&](int64_t dd, int64_t hh, int64_t wwi, double wt) {
                    dx[(dd * s.h + hh) * s.w + wwi] += static_cast<T>(wt * g);
                  };
                  sc(d0, h0, w0, (1 - wd) * (1 - wh) * (1 - ww));
                  sc(d0, h0, w1i, (1 - wd) * (1 - wh) * ww);
                  sc(d0, h1, w0, (1 - wd) * wh * (1 - ww));
                  sc(d0, h1, w1i, (1 - wd) * wh * ww);
                  sc(d1, h0, w0, wd * (1 - wh) * (1 - ww));
                  sc(d1, h0, w1i, wd * (1 - wh) * ww);
                  sc(d1, h1, w0, wd * wh * (1 - ww));
                  sc(d1, h1, w1i, wd * wh * ww);
                }
              }
        }
      });
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> foreground_channel(const TensorPtr<T>& prob) {
  require(prob != nullptr, "foreground_channel: null input");
  const Shape5 s = prob->shape;
  require(s.c >= 2, "foreground_channel: needs >= 2 channels");
  Shape5 so = s;
  so.c = 1;
  auto out = Tensor<T>::create(so);
  const int64_t sp = s.spatial();
  for (int64_t b = 0; b < s.b; ++b) {
    const T* pb = prob->value.data() + b * s.c * sp;
    T* ob = out->value.data() + b * sp;
    for (int64_t c = 1; c < s.c; ++c)
      for (int64_t i = 0; i < sp; ++i) ob[i] += pb[c * sp + i];
  }

  if (track_grad<T>({&prob})) {
    out->requires_grad = true;
    out->parents = {prob};
    auto pp = prob;
    out->backward_fn = [pp, s, sp](Tensor<T>& self) {
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      for (int64_t b = 0; b < s.b; ++b) {
        const T* g = self.grad.data() + b * sp;
        T* dp = pp->grad.data() + b * s.c * sp;
        for (int64_t c = 1; c < s.c; ++c)
          for (int64_t i = 0; i < sp; ++i) dp[c * sp + i] += g[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> dice_loss(const TensorPtr<T>& prob,
                       const TensorPtr<T>& target_one_hot, double eps) {
  require(prob != nullptr && target_one_hot != nullptr, "dice_loss: null input");
  require(prob->shape == target_one_hot->shape,
          "dice_loss: shape mismatch " + prob->shape.str() + " vs " +
              target_one_hot->shape.str());
  const Shape5 s = prob->shape;
  require(s.c >= 2, "dice_loss: needs >= 2 channels");
  const int64_t sp = s.spatial();

  // Per foreground channel, pooled over batch and spatial dims.
  auto inter = std::make_shared<std::vector<double>>(s.c, 0.0);
  auto denom = std::make_shared<std::vector<double>>(s.c, 0.0);
  for (int64_t b = 0; b < s.b; ++b)
    for (int64_t c = 1; c < s.c; ++c) {
      const T* p = prob->value.data() + (b * s.c + c) * sp;
      const T* g = target_one_hot->value.data() + (b * s.c + c) * sp;
      double pi = 0, ps = 0, gs = 0;
      for (int64_t i = 0; i < sp; ++i) {
        pi += static_cast<double>(p[i]) * g[i];
        ps += p[i];
        gs += g[i];
      }
      (*inter)[c] += pi;
      (*denom)[c] += ps + gs;
    }
  double loss = 0;
  for (int64_t c = 1; c < s.c; ++c)
    loss += 1.0 - (2.0 * (*inter)[c] + eps) / ((*denom)[c] + eps);
  loss /= (s.c - 1);

  auto out = Tensor<T>::scalar(static_cast<T>(loss));
  check_finite(*out, "dice_loss");

  if (track_grad<T>({&prob})) {
    out->requires_grad = true;
    out->parents = {prob, target_one_hot};
    auto pp = prob, gp = target_one_hot;
    out->backward_fn = [pp, gp, inter, denom, s, sp, eps](Tensor<T>& self) {
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double gl = self.grad[0] / (s.c - 1);
      for (int64_t c = 1; c < s.c; ++c) {
        const double num = 2.0 * (*inter)[c] + eps;
        const double den = (*denom)[c] + eps;
        for (int64_t b = 0; b < s.b; ++b) {
          const T* g = gp->value.data() + (b * s.c + c) * sp;
          T* dp = pp->grad.data() + (b * s.c + c) * sp;
          // d/dp of -(num/den): -(2*g*den - num) / den^2
          for (int64_t i = 0; i < sp; ++i)
            dp[i] += static_cast<T>(gl * (num - 2.0 * g[i] * den) / (den * den));
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> ce_loss(const TensorPtr<T>& prob, const LabelPatch& target) {
  require(prob != nullptr, "ce_loss: null input");
  const Shape5 s = prob->shape;
  require(target.b == s.b && target.d == s.d && target.h == s.h &&
              target.w == s.w,
          "ce_loss: target dims do not match probability map");
  const int64_t sp = s.spatial();
  const int64_t nvox = s.b * sp;
  // Guards log(0) when a probability underflows.
  const double floor_p = static_cast<double>(std::numeric_limits<T>::min());

  auto tgt = std::make_shared<std::vector<uint8_t>>(target.v);
  double loss = 0;
  for (int64_t b = 0; b < s.b; ++b) {
    const T* pb = prob->value.data() + b * s.c * sp;
    const uint8_t* tb = tgt->data() + b * sp;
    for (int64_t i = 0; i < sp; ++i) {
      const int64_t c = tb[i];
      require(c < s.c, "ce_loss: label " + std::to_string(c) +
                           " outside [0, " + std::to_string(s.c) + ")");
      loss -= std::log(std::max(static_cast<double>(pb[c * sp + i]), floor_p));
    }
  }
  loss /= nvox;

  auto out = Tensor<T>::scalar(static_cast<T>(loss));
  check_finite(*out, "ce_loss");

  if (track_grad<T>({&prob})) {
    out->requires_grad = true;
    out->parents = {prob};
    auto pp = prob;
    out->backward_fn = [pp, tgt, s, sp, nvox, floor_p](Tensor<T>& self) {
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double gl = self.grad[0] / nvox;
      for (int64_t b = 0; b < s.b; ++b) {
        const T* pb = pp->value.data() + b * s.c * sp;
        T* dp = pp->grad.data() + b * s.c * sp;
        const uint8_t* tb = tgt->data() + b * sp;
        for (int64_t i = 0; i < sp; ++i) {
          const int64_t c = tb[i];
          const double p = std::max(static_cast<double>(pb[c * sp + i]), floor_p);
          dp[c * sp + i] += static_cast<T>(-gl / p);
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> one_hot(const LabelPatch& labels, int64_t num_classes) {
  require(num_classes >= 2, "one_hot: needs >= 2 classes");
  Shape5 s{labels.b, num_classes, labels.d, labels.h, labels.w};
  auto out = Tensor<T>::create(s);
  const int64_t sp = s.spatial();
  for (int64_t b = 0; b < s.b; ++b) {
    const uint8_t* tb = labels.v.data() + b * sp;
    T* ob = out->value.data() + b * num_classes * sp;
    for (int64_t i = 0; i < sp; ++i) {
      require(tb[i] < num_classes, "one_hot: label " + std::to_string(tb[i]) +
                                       " outside [0, " +
                                       std::to_string(num_classes) + ")");
      ob[tb[i] * sp + i] = T(1);
    }
  }
  return out;
}

LabelPatch downsample2_labels(const LabelPatch& labels, LabelDownsample mode) {
  require(labels.d >= 2 && labels.h >= 2 && labels.w >= 2,
          "downsample2_labels: spatial dims must be >= 2");
  LabelPatch out;
  out.b = labels.b;
  out.d = labels.d / 2;
  out.h = labels.h / 2;
  out.w = labels.w / 2;
  out.v.resize(static_cast<size_t>(out.numel()));
  const int64_t sp_in = labels.d * labels.h * labels.w;
  const int64_t sp_out = out.d * out.h * out.w;
  for (int64_t b = 0; b < labels.b; ++b) {
    const uint8_t* iv = labels.v.data() + b * sp_in;
    uint8_t* ov = out.v.data() + b * sp_out;
    for (int64_t od = 0; od < out.d; ++od)
      for (int64_t oh = 0; oh < out.h; ++oh)
        for (int64_t ow = 0; ow < out.w; ++ow) {
          const int64_t base =
              (2 * od * labels.h + 2 * oh) * labels.w + 2 * ow;
          uint8_t v = iv[base];
          if (mode == LabelDownsample::max) {
            for (int64_t dd = 0; dd < 2; ++dd)
              for (int64_t dh = 0; dh < 2; ++dh)
                for (int64_t dw = 0; dw < 2; ++dw)
                  v = std::max(v, iv[base + (dd * labels.h + dh) * labels.w + dw]);
          }
          ov[(od * out.h + oh) * out.w + ow] = v;
        }
  }
  return out;
}

template <typename T>
LabelPatch argmax_channels(const Tensor<T>& prob) {
  const Shape5 s = prob.shape;
  LabelPatch out;
  out.b = s.b;
  out.d = s.d;
  out.h = s.h;
  out.w = s.w;
  out.v.resize(static_cast<size_t>(out.numel()));
  const int64_t sp = s.spatial();
  for (int64_t b = 0; b < s.b; ++b) {
    const T* pb = prob.value.data() + b * s.c * sp;
    uint8_t* ob = out.v.data() + b * sp;
    for (int64_t i = 0; i < sp; ++i) {
      int64_t best = 0;
      T bv = pb[i];
      for (int64_t c = 1; c < s.c; ++c)
        if (pb[c * sp + i] > bv) {
          bv = pb[c * sp + i];
          best = c;
        }
      ob[i] = static_cast<uint8_t>(best);
    }
  }
  return out;
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.value) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.value) v = static_cast<T>(dist(rng));
}

#define MUS_INSTANTIATE_OPS(T)                                                  \
  template TensorPtr<T> conv3d<T>(const TensorPtr<T>&, const Conv3dParams<T>&); \
  template TensorPtr<T> conv_transpose3d<T>(const TensorPtr<T>&,               \
                                            const Conv3dParams<T>&);           \
  template TensorPtr<T> instance_norm<T>(const TensorPtr<T>&,                  \
                                         const TensorPtr<T>&,                  \
                                         const TensorPtr<T>&, double);         \
  template TensorPtr<T> leaky_relu<T>(const TensorPtr<T>&, double);            \
  template TensorPtr<T> softmax_channels<T>(const TensorPtr<T>&);              \
  template TensorPtr<T> concat_channels<T>(const TensorPtr<T>&,                \
                                           const TensorPtr<T>&);               \
  template TensorPtr<T> elementwise_mul<T>(const TensorPtr<T>&,                \
                                           const TensorPtr<T>&);               \
  template TensorPtr<T> add<T>(const TensorPtr<T>&, const TensorPtr<T>&);      \
  template TensorPtr<T> scale<T>(const TensorPtr<T>&, double);                 \
  template TensorPtr<T> sum_all<T>(const TensorPtr<T>&);                       \
  template TensorPtr<T> downsample2<T>(const TensorPtr<T>&, Resample);         \
  template TensorPtr<T> upsample2<T>(const TensorPtr<T>&, Resample);           \
  template TensorPtr<T> foreground_channel<T>(const TensorPtr<T>&);            \
  template TensorPtr<T> dice_loss<T>(const TensorPtr<T>&, const TensorPtr<T>&, \
                                     double);                                  \
  template TensorPtr<T> ce_loss<T>(const TensorPtr<T>&, const LabelPatch&);    \
  template TensorPtr<T> one_hot<T>(const LabelPatch&, int64_t);                \
  template LabelPatch argmax_channels<T>(const Tensor<T>&);                    \
  template void fill_normal<T>(Tensor<T>&, std::mt19937_64&, double, double);  \
  template void fill_uniform<T>(Tensor<T>&, std::mt19937_64&, double, double);

MUS_INSTANTIATE_OPS(float)
MUS_INSTANTIATE_OPS(double)

#undef MUS_INSTANTIATE_OPS

}  // namespace mus
