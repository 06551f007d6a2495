#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "darcot/gemm.hpp"

namespace darcot::detail {

// Dense cos/sin tables for the unnormalized DFT of length n:
//   F[u] = sum_x f[x] * exp(-2*pi*i*u*x/n)
// Tables are computed in double and cast to S so float and double runs see
// consistent twiddles. O(n^2) transforms are plenty at patch sizes.
template <class S>
struct DftTables {
  int64_t n;
  std::vector<S> cs;  // cs[u*n+x] = cos(2 pi u x / n)
  std::vector<S> sn;  // sn[u*n+x] = sin(2 pi u x / n)

  explicit DftTables(int64_t n_) : n(n_), cs(size_t(n_ * n_)), sn(size_t(n_ * n_)) {
    for (int64_t u = 0; u < n; ++u)
      for (int64_t x = 0; x < n; ++x) {
        // reduce u*x mod n first so large arguments stay accurate
        double ang = 2.0 * M_PI * double((u * x) % n) / double(n);
        cs[size_t(u * n + x)] = S(std::cos(ang));
        sn[size_t(u * n + x)] = S(std::sin(ang));
      }
  }
};

template <class S>
const DftTables<S>& dft_tables(int64_t n) {
  thread_local std::map<int64_t, std::unique_ptr<DftTables<S>>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<DftTables<S>>(n);
  return *slot;
}

// Unnormalized 2-D DFT of a real H x W image. Row-column decomposition:
//   M = img * D_W^T, F = D_H * M, with D[u,x] = cos - i*sin.
// scratch must hold 2*h*w scalars; it is clobbered.
template <class S>
void dft2(const S* img, int64_t h, int64_t w, S* re, S* im, S* scratch) {
  const auto& tw = dft_tables<S>(w);
  const auto& th = dft_tables<S>(h);
  S* mre = scratch;
  S* mim = scratch + h * w;
  std::fill(mre, mre + 2 * h * w, S(0));
  // M[x,v] = sum_y img[x,y] * (cos(vy) - i sin(vy))
  gemm_acc_tb(h, w, w, img, tw.cs.data(), mre);
  gemm_acc_tb(h, w, w, img, tw.sn.data(), mim);
  for (int64_t i = 0; i < h * w; ++i) mim[i] = -mim[i];
  // F = (C_H*Mre + S_H*Mim) + i*(C_H*Mim - S_H*Mre)
  std::fill(re, re + h * w, S(0));
  std::fill(im, im + h * w, S(0));
  gemm_acc(h, w, h, th.cs.data(), mre, re);
  gemm_acc(h, w, h, th.sn.data(), mim, re);
  gemm_acc(h, w, h, th.cs.data(), mim, im);
  for (int64_t i = 0; i < h * w; ++i) mre[i] = -mre[i];
  gemm_acc(h, w, h, th.sn.data(), mre, im);
}

// Adjoint of dft2 for a real input: given the cotangent (gre, gim) of the
// complex spectrum, accumulates d/d(img) = Re(conj(D_H) * G * conj(D_W))
// into out. scratch must hold 2*h*w scalars; it is clobbered.
template <class S>
void dft2_adjoint(const S* gre, const S* gim, int64_t h, int64_t w, S* out,
                  S* scratch) {
  const auto& tw = dft_tables<S>(w);
  const auto& th = dft_tables<S>(h);
  S* a = scratch;          // A = C_H^T*Gre - S_H^T*Gim
  S* b = scratch + h * w;  // B = -(S_H^T*Gre + C_H^T*Gim)
  std::fill(b, b + h * w, S(0));
  gemm_acc_ta(h, w, h, th.sn.data(), gim, b);
  std::fill(a, a + h * w, S(0));
  gemm_acc_ta(h, w, h, th.cs.data(), gre, a);
  for (int64_t i = 0; i < h * w; ++i) a[i] -= b[i];
  std::fill(b, b + h * w, S(0));
  gemm_acc_ta(h, w, h, th.sn.data(), gre, b);
  gemm_acc_ta(h, w, h, th.cs.data(), gim, b);
  for (int64_t i = 0; i < h * w; ++i) b[i] = -b[i];
  gemm_acc(h, w, w, a, tw.cs.data(), out);
  gemm_acc(h, w, w, b, tw.sn.data(), out);
}

}  // namespace darcot::detail
