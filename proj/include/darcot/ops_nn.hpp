#pragma once

// Convolution/pooling/FFT ops, the generic forward_op dispatcher, and the
// finite-difference gradient checker. Included via ops.hpp.

#include <functional>
#include <optional>

namespace darcot {
namespace ops {

namespace detail {

// im2col for one sample: x[C,H,W] -> col[C*kh*kw, Ho*Wo], zero padding.
template <class S>
void im2col(const S* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, S* col) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* dst = col + ((ci * kh + ki) * kw + kj) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = S(0);
            continue;
          }
          const S* src = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kj - pad;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
}

// Scatter-add adjoint of im2col.
template <class S>
void col2im_acc(const S* col, int64_t c, int64_t h, int64_t w, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                S* x) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* src = col + ((ci * kh + ki) * kw + kj) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          S* dst = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution, NCHW, zero padding. x[N,Cin,H,W] * w[Cout,Cin,kh,kw] +
// bias[Cout] -> [N,Cout,Ho,Wo].
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int64_t stride = 1, int64_t pad = 0) {
  DARCOT_REQUIRE(x.rank() == 4 && w.rank() == 4, "conv2d: expected x[N,C,H,W], w[Co,Ci,kh,kw], got ",
                 shape_str(x.shape()), " and ", shape_str(w.shape()));
  DARCOT_REQUIRE(x.dim(1) == w.dim(1), "conv2d: channel mismatch, x ",
                 shape_str(x.shape()), " vs w ", shape_str(w.shape()));
  DARCOT_REQUIRE(stride >= 1 && pad >= 0, "conv2d: bad stride/pad ", stride, "/", pad);
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  DARCOT_REQUIRE(bias.rank() == 1 && bias.dim(0) == cout,
                 "conv2d: bias must be [", cout, "], got ", shape_str(bias.shape()));
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  DARCOT_REQUIRE(ho >= 1 && wo >= 1, "conv2d: kernel ", kh, "x", kw,
                 " does not fit input ", shape_str(x.shape()), " with pad ", pad);
  const int64_t K = cin * kh * kw, P = ho * wo;

  Tensor<S> out = Tensor<S>::zeros({n, cout, ho, wo});
  {
    auto xv = x.data();
    auto wv = w.data();
    auto bv = bias.data();
    auto ov = out.mut_data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 1)
#endif
    for (int64_t i = 0; i < n; ++i) {
      std::vector<S> col(size_t(K * P));
      detail::im2col(xv.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride,
                     pad, ho, wo, col.data());
      S* o = ov.data() + i * cout * P;
      for (int64_t co = 0; co < cout; ++co)
        std::fill(o + co * P, o + (co + 1) * P, bv[size_t(co)]);
      darcot::detail::gemm_acc(cout, P, K, wv.data(), col.data(), o);
    }
  }

  bool rec = detail::record_needed<S>({&x, &w, &bias});
  if (rec) {
    auto xi = x.impl(), wi = w.impl(), bi = bias.impl(), oi = out.impl();
    bool xrg = x.requires_grad(), wrg = w.requires_grad(), brg = bias.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      std::vector<S> dw_part;
      if (wrg) dw_part.assign(size_t(n * cout * K), S(0));
      std::vector<S> db_part;
      if (brg) db_part.assign(size_t(n * cout), S(0));
      S* dx = xrg ? xi->grad_buffer().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 1)
#endif
      for (int64_t i = 0; i < n; ++i) {
        const S* dy = g->data() + i * cout * P;
        std::vector<S> col(size_t(K * P));
        detail::im2col(xi->data.data() + i * cin * h * wd, cin, h, wd, kh, kw,
                       stride, pad, ho, wo, col.data());
        const S* col_p = col.data();
        if (wrg)
          darcot::detail::gemm_acc_tb(cout, K, P, dy, col_p,
                                      dw_part.data() + i * cout * K);
        if (brg) {
          S* db = db_part.data() + i * cout;
          for (int64_t co = 0; co < cout; ++co) {
            S acc = S(0);
            for (int64_t p = 0; p < P; ++p) acc += dy[co * P + p];
            db[co] = acc;
          }
        }
        if (dx) {
          std::vector<S> dcol(size_t(K * P), S(0));
          darcot::detail::gemm_acc_ta(K, P, cout, wi->data.data(), dy, dcol.data());
          detail::col2im_acc(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho,
                             wo, dx + i * cin * h * wd);
        }
      }
      // reduce per-sample partials in index order (deterministic)
      if (wrg) {
        auto& gw = wi->grad_buffer();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < cout * K; ++j)
            gw[size_t(j)] += dw_part[size_t(i * cout * K + j)];
      }
      if (brg) {
        auto& gb = bi->grad_buffer();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < cout; ++j) gb[size_t(j)] += db_part[size_t(i * cout + j)];
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Depthwise 3x3-style convolution, stride 1. x[N,C,H,W] * w[C,kh,kw] + bias[C].
template <class S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& w,
                           const Tensor<S>& bias, int64_t pad = 1) {
  DARCOT_REQUIRE(x.rank() == 4 && w.rank() == 3 && x.dim(1) == w.dim(0),
                 "depthwise_conv2d: expected x[N,C,H,W], w[C,kh,kw], got ",
                 shape_str(x.shape()), " and ", shape_str(w.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t kh = w.dim(1), kw = w.dim(2);
  DARCOT_REQUIRE(bias.rank() == 1 && bias.dim(0) == c,
                 "depthwise_conv2d: bias must be [", c, "], got ",
                 shape_str(bias.shape()));
  const int64_t ho = h + 2 * pad - kh + 1, wo = wd + 2 * pad - kw + 1;
  DARCOT_REQUIRE(ho >= 1 && wo >= 1, "depthwise_conv2d: kernel does not fit ",
                 shape_str(x.shape()), " with pad ", pad);
  Tensor<S> out = Tensor<S>::zeros({n, c, ho, wo});
  {
    auto xv = x.data();
    auto wv = w.data();
    auto bv = bias.data();
    auto ov = out.mut_data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 1)
#endif
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ci = 0; ci < c; ++ci) {
        const S* xp = xv.data() + (i * c + ci) * h * wd;
        const S* wp = wv.data() + ci * kh * kw;
        S* op = ov.data() + (i * c + ci) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy)
          for (int64_t ox = 0; ox < wo; ++ox) {
            S acc = bv[size_t(ci)];
            for (int64_t ki = 0; ki < kh; ++ki) {
              int64_t iy = oy + ki - pad;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t ix = ox + kj - pad;
                if (ix >= 0 && ix < wd) acc += wp[ki * kw + kj] * xp[iy * wd + ix];
              }
            }
            op[oy * wo + ox] = acc;
          }
      }
  }
  bool rec = detail::record_needed<S>({&x, &w, &bias});
  if (rec) {
    auto xi = x.impl(), wi = w.impl(), bi = bias.impl(), oi = out.impl();
    bool xrg = x.requires_grad(), wrg = w.requires_grad(), brg = bias.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      S* dx = xrg ? xi->grad_buffer().data() : nullptr;
      S* dw = wrg ? wi->grad_buffer().data() : nullptr;
      S* db = brg ? bi->grad_buffer().data() : nullptr;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ci = 0; ci < c; ++ci) {
          const S* xp = xi->data.data() + (i * c + ci) * h * wd;
          const S* wp = wi->data.data() + ci * kh * kw;
          const S* gp = g->data() + (i * c + ci) * ho * wo;
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
              S gv = gp[oy * wo + ox];
              if (gv == S(0)) continue;
              if (db) db[ci] += gv;
              for (int64_t ki = 0; ki < kh; ++ki) {
                int64_t iy = oy + ki - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kj = 0; kj < kw; ++kj) {
                  int64_t ix = ox + kj - pad;
                  if (ix < 0 || ix >= wd) continue;
                  if (dw) dw[ci * kh * kw + ki * kw + kj] += gv * xp[iy * wd + ix];
                  if (dx) dx[(i * c + ci) * h * wd + iy * wd + ix] += gv * wp[ki * kw + kj];
                }
              }
            }
        }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Nearest-neighbor 2x upsampling of [N,C,H,W].
template <class S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  DARCOT_REQUIRE(x.rank() == 4, "upsample2x: expected [N,C,H,W], got ",
                 shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> out = Tensor<S>::zeros({n, c, 2 * h, 2 * w});
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const S* xp = xv.data() + nc * h * w;
    S* op = ov.data() + nc * 4 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xcol = 0; xcol < w; ++xcol) {
        S v = xp[y * w + xcol];
        op[(2 * y) * 2 * w + 2 * xcol] = v;
        op[(2 * y) * 2 * w + 2 * xcol + 1] = v;
        op[(2 * y + 1) * 2 * w + 2 * xcol] = v;
        op[(2 * y + 1) * 2 * w + 2 * xcol + 1] = v;
      }
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t nc = 0; nc < n * c; ++nc) {
        const S* gp = g->data() + nc * 4 * h * w;
        S* dp = gb.data() + nc * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xcol = 0; xcol < w; ++xcol)
            dp[y * w + xcol] += gp[(2 * y) * 2 * w + 2 * xcol] +
                                gp[(2 * y) * 2 * w + 2 * xcol + 1] +
                                gp[(2 * y + 1) * 2 * w + 2 * xcol] +
                                gp[(2 * y + 1) * 2 * w + 2 * xcol + 1];
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// 2x2 average pooling of [N,C,H,W] with even H and W.
template <class S>
Tensor<S> avg_pool2x(const Tensor<S>& x) {
  DARCOT_REQUIRE(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                 "avg_pool2x: expected [N,C,2h,2w], got ", shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  Tensor<S> out = Tensor<S>::zeros({n, c, h, w});
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const S* xp = xv.data() + nc * 4 * h * w;
    S* op = ov.data() + nc * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xc = 0; xc < w; ++xc)
        op[y * w + xc] = (xp[(2 * y) * 2 * w + 2 * xc] + xp[(2 * y) * 2 * w + 2 * xc + 1] +
                          xp[(2 * y + 1) * 2 * w + 2 * xc] +
                          xp[(2 * y + 1) * 2 * w + 2 * xc + 1]) /
                         S(4);
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t nc = 0; nc < n * c; ++nc) {
        const S* gp = g->data() + nc * h * w;
        S* dp = gb.data() + nc * 4 * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xc = 0; xc < w; ++xc) {
            S q = gp[y * w + xc] / S(4);
            dp[(2 * y) * 2 * w + 2 * xc] += q;
            dp[(2 * y) * 2 * w + 2 * xc + 1] += q;
            dp[(2 * y + 1) * 2 * w + 2 * xc] += q;
            dp[(2 * y + 1) * 2 * w + 2 * xc + 1] += q;
          }
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Spatial mean: [N,C,H,W] -> [N,C] or [C,H,W] -> [C].
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  DARCOT_REQUIRE(x.rank() == 3 || x.rank() == 4,
                 "global_avg_pool: expected rank 3 or 4, got ", shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const int64_t rows = batched ? x.dim(0) * x.dim(1) : x.dim(0);
  const int64_t hw = x.numel() / rows;
  Tensor<S> out = batched ? Tensor<S>::zeros({x.dim(0), x.dim(1)})
                          : Tensor<S>::zeros({x.dim(0)});
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t r = 0; r < rows; ++r) {
    S acc = S(0);
    const S* p = xv.data() + r * hw;
    for (int64_t i = 0; i < hw; ++i) acc += p[i];
    ov[size_t(r)] = acc / S(double(hw));
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t r = 0; r < rows; ++r) {
        S gr = (*g)[size_t(r)] / S(double(hw));
        S* dp = gb.data() + r * hw;
        for (int64_t i = 0; i < hw; ++i) dp[i] += gr;
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Per-coefficient magnitudes of the unnormalized 2-D DFT over the trailing
// two axes, one transform per leading index (channel). Real output, same
// shape as the input. The gradient at an exactly-zero coefficient is 0.
template <class S>
Tensor<S> fft2_magnitudes(const Tensor<S>& x) {
  DARCOT_REQUIRE(x.rank() >= 2, "fft2_magnitudes: expected rank >= 2, got ",
                 shape_str(x.shape()));
  const int64_t w = x.shape().back();
  const int64_t h = x.shape()[x.shape().size() - 2];
  const int64_t planes = x.numel() / (h * w);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto re_all = std::make_shared<std::vector<S>>(size_t(x.numel()));
  auto im_all = std::make_shared<std::vector<S>>(size_t(x.numel()));
  {
    auto xv = x.data();
    auto ov = out.mut_data();
    std::vector<S> scratch(size_t(2 * h * w));
    for (int64_t pl = 0; pl < planes; ++pl) {
      const S* img = xv.data() + pl * h * w;
      S* re = re_all->data() + pl * h * w;
      S* im = im_all->data() + pl * h * w;
      darcot::detail::dft2(img, h, w, re, im, scratch.data());
      S* o = ov.data() + pl * h * w;
      for (int64_t i = 0; i < h * w; ++i)
        o[i] = S(std::sqrt(double(re[i]) * double(re[i]) +
                           double(im[i]) * double(im[i])));
    }
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      std::vector<S> gre(size_t(h * w)), gim(size_t(h * w));
      std::vector<S> scratch(size_t(2 * h * w));
      for (int64_t pl = 0; pl < planes; ++pl) {
        const S* re = re_all->data() + pl * h * w;
        const S* im = im_all->data() + pl * h * w;
        const S* m = oi->data.data() + pl * h * w;
        const S* gp = g->data() + pl * h * w;
        for (int64_t i = 0; i < h * w; ++i) {
          if (m[i] > S(0)) {
            gre[size_t(i)] = gp[i] * re[i] / m[i];
            gim[size_t(i)] = gp[i] * im[i] / m[i];
          } else {
            gre[size_t(i)] = S(0);
            gim[size_t(i)] = S(0);
          }
        }
        darcot::detail::dft2_adjoint(gre.data(), gim.data(), h, w,
                                     gb.data() + pl * h * w, scratch.data());
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generic op dispatcher: the uniform entry point used by the grad-check
// harness. Validates inputs are finite before dispatch.

struct OpAttrs {
  int64_t stride = 1;
  int64_t pad = 0;
  double eps = 1e-5;
  double slope = 0.2;
};

template <class S>
Tensor<S> forward_op(const std::string& kind, const std::vector<Tensor<S>>& in,
                     const OpAttrs& attrs = {}) {
  auto need = [&](size_t k) {
    DARCOT_REQUIRE(in.size() == k, "forward_op(", kind, "): expected ", k,
                   " inputs, got ", in.size());
  };
  for (const auto& t : in)
    for (S v : t.data())
      if (!std::isfinite(double(v)))
        fail_numeric("forward_op(", kind, "): non-finite input value");

  if (kind == "add") { need(2); return add(in[0], in[1]); }
  if (kind == "sub") { need(2); return sub(in[0], in[1]); }
  if (kind == "mul") { need(2); return mul(in[0], in[1]); }
  if (kind == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (kind == "conv2d") { need(3); return conv2d(in[0], in[1], in[2], attrs.stride, attrs.pad); }
  if (kind == "depthwise_conv2d") { need(3); return depthwise_conv2d(in[0], in[1], in[2], attrs.pad); }
  if (kind == "upsample2x" || kind == "conv_transpose_or_upsample2x") { need(1); return upsample2x(in[0]); }
  if (kind == "relu") { need(1); return relu(in[0]); }
  if (kind == "gelu") { need(1); return gelu(in[0]); }
  if (kind == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (kind == "softmax") { need(1); return softmax(in[0]); }
  if (kind == "layer_norm") { need(3); return layer_norm(in[0], in[1], in[2], S(attrs.eps)); }
  if (kind == "global_avg_pool") { need(1); return global_avg_pool(in[0]); }
  if (kind == "concat_channels") { need(2); return concat_channels(in[0], in[1]); }
  if (kind == "sum") { need(1); return sum(in[0]); }
  if (kind == "mean") { need(1); return mean(in[0]); }
  if (kind == "l1_norm") { need(1); return l1_norm(in[0]); }
  if (kind == "l2_norm") { need(1); return l2_norm(in[0]); }
  if (kind == "fft2_magnitudes") { need(1); return fft2_magnitudes(in[0]); }
  fail_contract("forward_op: unknown op kind '", kind, "'");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (central differences).
//
// Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
// `f` must produce a scalar tensor and be evaluable at perturbed inputs.
template <class S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                         const Tensor<S>& x, double step) {
  DARCOT_REQUIRE(step > 0, "finite_diff_check: step must be > 0, got ", step);
  Tensor<S> var = x.detach();
  var.set_requires_grad(true);
  std::vector<S> analytic;
  {
    Tape<S> tape;
    Tensor<S> loss = f(var);
    DARCOT_REQUIRE(loss.is_scalar(), "finite_diff_check: f must return a scalar, got ",
                   shape_str(loss.shape()));
    tape.backward(loss);
    analytic = var.grad();
  }
  double worst = 0.0;
  typename Tape<S>::Suspend suspend;  // probe evaluations are value-only
  Tensor<S> probe = x.detach();
  auto pv = probe.mut_data();
  for (size_t i = 0; i < pv.size(); ++i) {
    const S saved = pv[i];
    pv[i] = S(double(saved) + step);
    double fp = double(f(probe).item());
    pv[i] = S(double(saved) - step);
    double fm = double(f(probe).item());
    pv[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail_numeric("finite_diff_check: f non-finite at probe coordinate ", i);
    double fd = (fp - fm) / (2.0 * step);
    double an = double(analytic[i]);
    double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace ops
}  // namespace darcot
