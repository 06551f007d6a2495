#pragma once

// Op library for the tensor engine: forward kernels plus reverse-mode
// backward rules recorded on the active tape. No broadcasting beyond
// scalar-with-tensor; all other shapes must match exactly.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "darcot/fft.hpp"
#include "darcot/gemm.hpp"
#include "darcot/tensor.hpp"

namespace darcot {
namespace ops {

namespace detail {

using darcot::detail::TensorImpl;

template <class S>
bool record_needed(std::initializer_list<const Tensor<S>*> ins) {
  if (!Tape<S>::active()) return false;
  for (const Tensor<S>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
void attach(Tensor<S>& out, bool rec, std::function<void()> bw) {
  if (rec) {
    out.set_requires_grad(true);
    Tape<S>::active()->record(std::move(bw));
  }
}

// Output gradient of `impl`, or nullptr when the node never received one
// (unreachable from the loss).
template <class S>
const std::vector<S>* out_grad(const std::shared_ptr<TensorImpl<S>>& impl) {
  return impl->grad.empty() ? nullptr : &impl->grad;
}

template <class S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  DARCOT_REQUIRE(a.shape() == b.shape(), op, ": shape mismatch ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, or one side a rank-0 scalar)

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

template <class S>
Tensor<S> binary_op(const char* name, BinKind kind, const Tensor<S>& a,
                    const Tensor<S>& b) {
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  DARCOT_REQUIRE(a_scalar || b_scalar || a.shape() == b.shape(), name,
                 ": shape mismatch ", shape_str(a.shape()), " vs ",
                 shape_str(b.shape()));
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.mut_data();
  const int64_t n = out.numel();
  auto A = [&](int64_t i) { return av[a_scalar ? 0 : size_t(i)]; };
  auto B = [&](int64_t i) { return bv[b_scalar ? 0 : size_t(i)]; };
  switch (kind) {
    case BinKind::Add:
      for (int64_t i = 0; i < n; ++i) ov[size_t(i)] = A(i) + B(i);
      break;
    case BinKind::Sub:
      for (int64_t i = 0; i < n; ++i) ov[size_t(i)] = A(i) - B(i);
      break;
    case BinKind::Mul:
      for (int64_t i = 0; i < n; ++i) ov[size_t(i)] = A(i) * B(i);
      break;
    case BinKind::Div:
      for (int64_t i = 0; i < n; ++i) {
        S d = B(i);
        if (d == S(0)) fail_numeric(name, ": division by zero at index ", i);
        ov[size_t(i)] = A(i) / d;
      }
      break;
  }

  bool rec = record_needed<S>({&a, &b});
  if (rec) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = out_grad(oi);
      if (!g) return;
      const int64_t n2 = int64_t(g->size());
      auto accum = [&](const std::shared_ptr<TensorImpl<S>>& ti, bool scalar,
                       auto&& per_elem) {
        auto& gb = ti->grad_buffer();
        if (scalar) {
          S acc = S(0);
          for (int64_t i = 0; i < n2; ++i) acc += per_elem(i);
          gb[0] += acc;
        } else {
          for (int64_t i = 0; i < n2; ++i) gb[size_t(i)] += per_elem(i);
        }
      };
      auto AV = [&](int64_t i) { return ai->data[a_scalar ? 0 : size_t(i)]; };
      auto BV = [&](int64_t i) { return bi->data[b_scalar ? 0 : size_t(i)]; };
      switch (kind) {
        case BinKind::Add:
          if (arg) accum(ai, a_scalar, [&](int64_t i) { return (*g)[size_t(i)]; });
          if (brg) accum(bi, b_scalar, [&](int64_t i) { return (*g)[size_t(i)]; });
          break;
        case BinKind::Sub:
          if (arg) accum(ai, a_scalar, [&](int64_t i) { return (*g)[size_t(i)]; });
          if (brg) accum(bi, b_scalar, [&](int64_t i) { return -(*g)[size_t(i)]; });
          break;
        case BinKind::Mul:
          if (arg) accum(ai, a_scalar, [&](int64_t i) { return (*g)[size_t(i)] * BV(i); });
          if (brg) accum(bi, b_scalar, [&](int64_t i) { return (*g)[size_t(i)] * AV(i); });
          break;
        case BinKind::Div:
          if (arg) accum(ai, a_scalar, [&](int64_t i) { return (*g)[size_t(i)] / BV(i); });
          if (brg)
            accum(bi, b_scalar, [&](int64_t i) {
              S bvv = BV(i);
              return -(*g)[size_t(i)] * AV(i) / (bvv * bvv);
            });
          break;
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("add", detail::BinKind::Add, a, b);
}
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("sub", detail::BinKind::Sub, a, b);
}
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("mul", detail::BinKind::Mul, a, b);
}
template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("div", detail::BinKind::Div, a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

// fwd(x) and dfdx(x, y) where y = fwd(x).
template <class S, class F, class DF>
Tensor<S> unary_op(const Tensor<S>& x, F fwd, DF dfdx) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.mut_data();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  bool rec = record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (size_t i = 0; i < g->size(); ++i)
        gb[i] += (*g)[i] * dfdx(xi->data[i], oi->data[i]);
    });
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.2)) {
  return detail::unary_op(
      x, [slope](S v) { return v > S(0) ? v : slope * v; },
      [slope](S v, S) { return v > S(0) ? S(1) : slope; });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](S, S y) { return y * (S(1) - y); });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))). Math runs at the tensor's own
// precision; the f64 instantiation is the one gradient checks use.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](S v) { return S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2))); },
      [](S v, S) {
        S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
        S pdf = std::exp(S(-0.5) * v * v) * S(0.3989422804014326779);
        return cdf + v * pdf;
      });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  for (S v : x.data())
    if (!(v > S(0))) fail_numeric("log: non-positive input ", double(v));
  return detail::unary_op(
      x, [](S v) { return S(std::log(double(v))); },
      [](S v, S) { return S(1) / v; });
}

// ---------------------------------------------------------------------------
// Shape ops

// Copying reshape; total size must be preserved.
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  DARCOT_REQUIRE(shape_numel(shape) == x.numel(), "reshape: cannot view ",
                 shape_str(x.shape()), " as ", shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape),
                                  std::vector<S>(x.data().begin(), x.data().end()));
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      xi->accumulate({g->data(), g->size()});
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Concatenates along the channel axis: dim 1 for rank-4 [N,C,H,W], dim 0 for
// rank-3 [C,H,W], dim 1 for rank-2 [N,C].
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  DARCOT_REQUIRE(a.rank() == b.rank() && (a.rank() >= 2 && a.rank() <= 4),
                 "concat_channels: ranks ", a.rank(), " vs ", b.rank());
  int axis = a.rank() == 3 ? 0 : 1;
  Shape sa = a.shape(), sb = b.shape();
  for (int d = 0; d < a.rank(); ++d)
    if (d != axis)
      DARCOT_REQUIRE(sa[size_t(d)] == sb[size_t(d)], "concat_channels: shapes ",
                     shape_str(sa), " vs ", shape_str(sb));
  Shape so = sa;
  so[size_t(axis)] += sb[size_t(axis)];

  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= sa[size_t(d)];
  int64_t inner = 1;
  for (int d = axis + 1; d < a.rank(); ++d) inner *= sa[size_t(d)];
  const int64_t ca = sa[size_t(axis)], cb = sb[size_t(axis)];

  Tensor<S> out = Tensor<S>::zeros(so);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.mut_data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + (o * (ca + cb)) * inner, av.data() + o * ca * inner,
                size_t(ca * inner) * sizeof(S));
    std::memcpy(ov.data() + (o * (ca + cb) + ca) * inner,
                bv.data() + o * cb * inner, size_t(cb * inner) * sizeof(S));
  }
  bool rec = detail::record_needed<S>({&a, &b});
  if (rec) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      if (arg) {
        auto& gb = ai->grad_buffer();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < ca * inner; ++i)
            gb[size_t(o * ca * inner + i)] += (*g)[size_t((o * (ca + cb)) * inner + i)];
      }
      if (brg) {
        auto& gb = bi->grad_buffer();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < cb * inner; ++i)
            gb[size_t(o * cb * inner + i)] +=
                (*g)[size_t((o * (ca + cb) + ca) * inner + i)];
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

template <class S>
Tensor<S> reduce_full(const char* name, const Tensor<S>& x, bool mean_mode) {
  DARCOT_REQUIRE(x.numel() > 0, name, ": empty tensor");
  auto xv = x.data();
  S acc = S(0);
  for (S v : xv) acc += v;
  S denom = mean_mode ? S(double(x.numel())) : S(1);
  Tensor<S> out = Tensor<S>::scalar(acc / denom);
  bool rec = record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = out_grad(oi);
      if (!g) return;
      S gi = (*g)[0] / denom;
      auto& gb = xi->grad_buffer();
      for (S& v : gb) v += gi;
    });
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  return detail::reduce_full("sum", x, false);
}
template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return detail::reduce_full("mean", x, true);
}

// Sum over the last axis of a rank-2 tensor: [m,n] -> [m].
template <class S>
Tensor<S> row_sum(const Tensor<S>& x) {
  DARCOT_REQUIRE(x.rank() == 2, "row_sum: expected rank-2, got ",
                 shape_str(x.shape()));
  int64_t m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m});
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t i = 0; i < m; ++i) {
    S acc = S(0);
    for (int64_t j = 0; j < n; ++j) acc += xv[size_t(i * n + j)];
    ov[size_t(i)] = acc;
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) gb[size_t(i * n + j)] += (*g)[size_t(i)];
    });
    out.set_requires_grad(true);
  }
  return out;
}

namespace detail {

// Reduces all axes but the first when per_sample, else everything.
// kind: 1 -> l1, 2 -> l2.
template <class S>
Tensor<S> norm_op(const char* name, const Tensor<S>& x, int kind, bool per_sample) {
  DARCOT_REQUIRE(x.numel() > 0, name, ": empty tensor");
  int64_t n_samples = per_sample ? x.dim(0) : 1;
  DARCOT_REQUIRE(!per_sample || x.rank() >= 1, name, ": per-sample needs rank>=1");
  int64_t chunk = x.numel() / std::max<int64_t>(n_samples, 1);
  Tensor<S> out = per_sample ? Tensor<S>::zeros({n_samples}) : Tensor<S>::zeros(Shape{});
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t s = 0; s < n_samples; ++s) {
    S acc = S(0);
    const S* p = xv.data() + s * chunk;
    if (kind == 1) {
      for (int64_t i = 0; i < chunk; ++i) acc += S(std::abs(double(p[i])));
    } else {
      for (int64_t i = 0; i < chunk; ++i) acc += p[i] * p[i];
    }
    ov[size_t(s)] = kind == 1 ? acc : S(std::sqrt(double(acc)));
  }
  bool rec = record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t s = 0; s < n_samples; ++s) {
        S gs = (*g)[size_t(s)];
        const S* p = xi->data.data() + s * chunk;
        S* gp = gb.data() + s * chunk;
        if (kind == 1) {
          // subgradient at 0 chosen as 0
          for (int64_t i = 0; i < chunk; ++i)
            gp[i] += gs * (p[i] > S(0) ? S(1) : (p[i] < S(0) ? S(-1) : S(0)));
        } else {
          S nv = oi->data[size_t(s)];
          if (nv > S(0))
            for (int64_t i = 0; i < chunk; ++i) gp[i] += gs * p[i] / nv;
          // gradient at the origin chosen as 0
        }
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> l1_norm(const Tensor<S>& x) {
  return detail::norm_op("l1_norm", x, 1, false);
}
template <class S>
Tensor<S> l2_norm(const Tensor<S>& x) {
  return detail::norm_op("l2_norm", x, 2, false);
}
template <class S>
Tensor<S> l1_norm_per_sample(const Tensor<S>& x) {
  return detail::norm_op("l1_norm_per_sample", x, 1, true);
}
template <class S>
Tensor<S> l2_norm_per_sample(const Tensor<S>& x) {
  return detail::norm_op("l2_norm_per_sample", x, 2, true);
}

// ---------------------------------------------------------------------------
// Row-structured ops (operate over the last axis, independently per row)

namespace detail {

template <class S>
std::pair<int64_t, int64_t> rows_cols(const Tensor<S>& x, const char* name) {
  DARCOT_REQUIRE(x.rank() >= 1, name, ": needs rank >= 1, got scalar");
  int64_t n = x.shape().back();
  int64_t m = x.numel() / n;
  return {m, n};
}

}  // namespace detail

// Softmax over the last axis.
template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
  const auto mn = detail::rows_cols(x, "softmax");
  const int64_t m = mn.first, n = mn.second;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t i = 0; i < m; ++i) {
    const S* p = xv.data() + i * n;
    S* q = ov.data() + i * n;
    S mx = p[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, p[j]);
    S z = S(0);
    for (int64_t j = 0; j < n; ++j) {
      q[j] = S(std::exp(double(p[j] - mx)));
      z += q[j];
    }
    for (int64_t j = 0; j < n; ++j) q[j] /= z;
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t i = 0; i < m; ++i) {
        const S* y = oi->data.data() + i * n;
        const S* gr = g->data() + i * n;
        S dot = S(0);
        for (int64_t j = 0; j < n; ++j) dot += gr[j] * y[j];
        S* gp = gb.data() + i * n;
        for (int64_t j = 0; j < n; ++j) gp[j] += y[j] * (gr[j] - dot);
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// L2-normalizes each row (last axis). Zero rows map to zero with zero grad.
template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x) {
  const auto mn = detail::rows_cols(x, "l2_normalize_rows");
  const int64_t m = mn.first, n = mn.second;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> norms(static_cast<size_t>(m));
  auto xv = x.data();
  auto ov = out.mut_data();
  for (int64_t i = 0; i < m; ++i) {
    const S* p = xv.data() + i * n;
    S acc = S(0);
    for (int64_t j = 0; j < n; ++j) acc += p[j] * p[j];
    S r = S(std::sqrt(double(acc)));
    norms[size_t(i)] = r;
    if (r > S(0))
      for (int64_t j = 0; j < n; ++j) ov[size_t(i * n + j)] = p[j] / r;
  }
  bool rec = detail::record_needed<S>({&x});
  if (rec) {
    auto xi = x.impl(), oi = out.impl();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      auto& gb = xi->grad_buffer();
      for (int64_t i = 0; i < m; ++i) {
        S r = norms[size_t(i)];
        if (r == S(0)) continue;
        const S* y = oi->data.data() + i * n;
        const S* gr = g->data() + i * n;
        S dot = S(0);
        for (int64_t j = 0; j < n; ++j) dot += gr[j] * y[j];
        S* gp = gb.data() + i * n;
        for (int64_t j = 0; j < n; ++j) gp[j] += (gr[j] - dot * y[j]) / r;
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Layer normalization over the last axis with learnable gain/bias of shape
// [n]. Biased variance, epsilon inside the square root.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5)) {
  const auto mn = detail::rows_cols(x, "layer_norm");
  const int64_t m = mn.first, n = mn.second;
  DARCOT_REQUIRE(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 &&
                     bias.dim(0) == n,
                 "layer_norm: gain/bias must be [", n, "], got ",
                 shape_str(gain.shape()), " and ", shape_str(bias.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> xhat(size_t(m * n));
  std::vector<S> inv_sigma(static_cast<size_t>(m));
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  auto ov = out.mut_data();
  for (int64_t i = 0; i < m; ++i) {
    const S* p = xv.data() + i * n;
    S mu = S(0);
    for (int64_t j = 0; j < n; ++j) mu += p[j];
    mu /= S(double(n));
    S var = S(0);
    for (int64_t j = 0; j < n; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= S(double(n));
    S is = S(1.0 / std::sqrt(double(var) + double(eps)));
    inv_sigma[size_t(i)] = is;
    for (int64_t j = 0; j < n; ++j) {
      S xh = (p[j] - mu) * is;
      xhat[size_t(i * n + j)] = xh;
      ov[size_t(i * n + j)] = xh * gv[size_t(j)] + bv[size_t(j)];
    }
  }
  bool rec = detail::record_needed<S>({&x, &gain, &bias});
  if (rec) {
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    bool xrg = x.requires_grad(), grg = gain.requires_grad(), brg = bias.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      for (int64_t i = 0; i < m; ++i) {
        const S* gr = g->data() + i * n;
        const S* xh = xhat.data() + i * n;
        if (xrg) {
          S is = inv_sigma[size_t(i)];
          S sum_d = S(0), sum_dx = S(0);
          for (int64_t j = 0; j < n; ++j) {
            S d = gr[j] * gi->data[size_t(j)];
            sum_d += d;
            sum_dx += d * xh[j];
          }
          S invn = S(1.0 / double(n));
          auto& gb = xi->grad_buffer();
          S* gp = gb.data() + i * n;
          for (int64_t j = 0; j < n; ++j) {
            S d = gr[j] * gi->data[size_t(j)];
            gp[j] += is * (d - invn * sum_d - xh[j] * invn * sum_dx);
          }
        }
        if (grg) {
          auto& gb = gi->grad_buffer();
          for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += gr[j] * xh[j];
        }
        if (brg) {
          auto& gb = bi->grad_buffer();
          for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += gr[j];
        }
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Adds a length-n bias vector to every row of [m,n].
template <class S>
Tensor<S> add_bias_rows(const Tensor<S>& x, const Tensor<S>& b) {
  const auto mn = detail::rows_cols(x, "add_bias_rows");
  const int64_t m = mn.first, n = mn.second;
  DARCOT_REQUIRE(b.rank() == 1 && b.dim(0) == n, "add_bias_rows: bias must be [",
                 n, "], got ", shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.data();
  auto bv = b.data();
  auto ov = out.mut_data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      ov[size_t(i * n + j)] = xv[size_t(i * n + j)] + bv[size_t(j)];
  bool rec = detail::record_needed<S>({&x, &b});
  if (rec) {
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    bool xrg = x.requires_grad(), brg = b.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      if (xrg) xi->accumulate({g->data(), g->size()});
      if (brg) {
        auto& gb = bi->grad_buffer();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += (*g)[size_t(i * n + j)];
      }
    });
    out.set_requires_grad(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

// dA/dB accumulation for C = op_a(A) * op_b(B) under all transpose flags.
template <class S>
void matmul_backward_into(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                          const S* a, const S* b, const S* dc, S* da, S* db) {
  namespace g = darcot::detail;
  if (da) {
    if (!ta) {
      // dA[m,k] += dC * op_b(B)^T
      if (!tb)
        g::gemm_acc_tb(m, k, n, dc, b, da);  // B[k,n] -> dC[m,n]*B^T
      else
        g::gemm_acc(m, k, n, dc, b, da);  // B[n,k] -> dC*B
    } else {
      // A stored [k,m]; dA[k,m] += op_b(B) * dC^T
      if (!tb)
        g::gemm_acc_tb(k, m, n, b, dc, da);  // B[k,n] * dC[m,n]^T
      else
        g::gemm_dispatch(true, true, k, m, n, b, dc, da);  // B[n,k]^T * dC^T
    }
  }
  if (db) {
    if (!tb) {
      // dB[k,n] += op_a(A)^T * dC
      if (!ta)
        g::gemm_acc_ta(k, n, m, a, dc, db);  // A[m,k]^T * dC
      else
        g::gemm_acc(k, n, m, a, dc, db);  // A[k,m] * dC
    } else {
      // B stored [n,k]; dB[n,k] += dC^T * op_a(A)
      if (!ta)
        g::gemm_acc_ta(n, k, m, dc, a, db);  // dC[m,n]^T * A[m,k]
      else
        g::gemm_dispatch(true, true, n, k, m, dc, a, db);  // dC^T * A[k,m]^T
    }
  }
}

}  // namespace detail

// 2-D matrix product with optional transposes: op(a)[m,k] * op(b)[k,n].
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  DARCOT_REQUIRE(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2, got ",
                 shape_str(a.shape()), " x ", shape_str(b.shape()));
  int64_t m = trans_a ? a.dim(1) : a.dim(0);
  int64_t ka = trans_a ? a.dim(0) : a.dim(1);
  int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  int64_t n = trans_b ? b.dim(0) : b.dim(1);
  DARCOT_REQUIRE(ka == kb, "matmul: inner dims differ, ", shape_str(a.shape()),
                 (trans_a ? "^T" : ""), " x ", shape_str(b.shape()),
                 (trans_b ? "^T" : ""));
  Tensor<S> out = Tensor<S>::zeros({m, n});
  darcot::detail::gemm_dispatch(trans_a, trans_b, m, n, ka, a.data().data(),
                                b.data().data(), out.mut_data().data());
  bool rec = detail::record_needed<S>({&a, &b});
  if (rec) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      S* da = arg ? ai->grad_buffer().data() : nullptr;
      S* db = brg ? bi->grad_buffer().data() : nullptr;
      detail::matmul_backward_into(trans_a, trans_b, m, n, ka, ai->data.data(),
                                   bi->data.data(), g->data(), da, db);
    });
    out.set_requires_grad(true);
  }
  return out;
}

// Batched matrix product over matching leading batch dims: [B,m,k] x [B,k,n].
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
              bool trans_b = false) {
  DARCOT_REQUIRE(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
                 "bmm: expected matching rank-3 batches, got ",
                 shape_str(a.shape()), " x ", shape_str(b.shape()));
  int64_t nb = a.dim(0);
  int64_t m = trans_a ? a.dim(2) : a.dim(1);
  int64_t ka = trans_a ? a.dim(1) : a.dim(2);
  int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  int64_t n = trans_b ? b.dim(1) : b.dim(2);
  DARCOT_REQUIRE(ka == kb, "bmm: inner dims differ, ", shape_str(a.shape()),
                 " vs ", shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({nb, m, n});
  const int64_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), so = m * n;
  {
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mut_data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (nb > 1)
#endif
    for (int64_t i = 0; i < nb; ++i)
      darcot::detail::gemm_dispatch(trans_a, trans_b, m, n, ka, av.data() + i * sa,
                                    bv.data() + i * sb, ov.data() + i * so);
  }
  bool rec = detail::record_needed<S>({&a, &b});
  if (rec) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape<S>::active()->record([=]() {
      const std::vector<S>* g = detail::out_grad(oi);
      if (!g) return;
      S* da = arg ? ai->grad_buffer().data() : nullptr;
      S* db = brg ? bi->grad_buffer().data() : nullptr;
      for (int64_t i = 0; i < nb; ++i)
        detail::matmul_backward_into(trans_a, trans_b, m, n, ka,
                                     ai->data.data() + i * sa,
                                     bi->data.data() + i * sb, g->data() + i * so,
                                     da ? da + i * sa : nullptr,
                                     db ? db + i * sb : nullptr);
    });
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace ops
}  // namespace darcot

#include "darcot/ops_nn.hpp"
