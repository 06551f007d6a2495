#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "darcot/ops.hpp"

using darcot::Rng;
using darcot::Tensor;
namespace ops = darcot::ops;

using T = Tensor<double>;

namespace {

// Independent O(N^2)-per-output oracle: direct unnormalized 2-D DFT.
std::vector<double> dft2_magnitudes_oracle(const std::vector<double>& img,
                                           int64_t h, int64_t w) {
  std::vector<double> out(size_t(h * w));
  for (int64_t u = 0; u < h; ++u)
    for (int64_t v = 0; v < w; ++v) {
      std::complex<double> acc = 0.0;
      for (int64_t x = 0; x < h; ++x)
        for (int64_t y = 0; y < w; ++y) {
          double ang = -2.0 * M_PI * (double(u * x) / double(h) + double(v * y) / double(w));
          acc += img[size_t(x * w + y)] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out[size_t(u * w + v)] = std::abs(acc);
    }
  return out;
}

}  // namespace

TEST_CASE("fft2_magnitudes: 2x2 impulse has flat unit spectrum") {
  T x = T::from({2, 2}, {1, 0, 0, 0});
  auto m = ops::fft2_magnitudes(x);
  for (int i = 0; i < 4; ++i) CHECK(m.data()[i] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fft2_magnitudes matches the direct DFT oracle") {
  Rng rng(99);
  for (auto [h, w] : {std::pair<int64_t, int64_t>{3, 5}, {4, 4}, {8, 6}, {7, 7}}) {
    CAPTURE(h);
    CAPTURE(w);
    std::vector<double> img(size_t(h * w));
    for (auto& v : img) v = rng.normal();
    auto expect = dft2_magnitudes_oracle(img, h, w);
    auto got = ops::fft2_magnitudes(T::from({h, w}, img));
    for (int64_t i = 0; i < h * w; ++i)
      CHECK(got.data()[size_t(i)] == doctest::Approx(expect[size_t(i)]).epsilon(1e-9));
  }
}

TEST_CASE("fft2_magnitudes: multichannel input transforms each plane") {
  Rng rng(7);
  std::vector<double> img(2 * 3 * 4);
  for (auto& v : img) v = rng.normal();
  auto got = ops::fft2_magnitudes(T::from({2, 3, 4}, img));
  for (int pl = 0; pl < 2; ++pl) {
    std::vector<double> plane(img.begin() + pl * 12, img.begin() + (pl + 1) * 12);
    auto expect = dft2_magnitudes_oracle(plane, 3, 4);
    for (int i = 0; i < 12; ++i)
      CHECK(got.data()[size_t(pl * 12 + i)] == doctest::Approx(expect[size_t(i)]).epsilon(1e-9));
  }
}

TEST_CASE("Parseval: ||F(r)||_2 == sqrt(H*W) * ||r||_2 (unnormalized DFT)") {
  Rng rng(13);
  for (auto [h, w] : {std::pair<int64_t, int64_t>{4, 4}, {5, 7}, {16, 16}}) {
    std::vector<double> img(size_t(h * w));
    for (auto& v : img) v = rng.normal();
    T r = T::from({h, w}, img);
    double lhs = ops::l2_norm(ops::fft2_magnitudes(r)).item();
    double rhs = std::sqrt(double(h * w)) * ops::l2_norm(r).item();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
  }
}

TEST_CASE("gradcheck: fft2-based losses away from zero-magnitude coefficients") {
  Rng rng(21);
  T x = T::zeros({3, 4, 4});
  for (auto& v : x.mut_data()) v = rng.normal();
  auto l1_of_fft = [](const T& v) { return ops::l1_norm(ops::fft2_magnitudes(v)); };
  auto l2_of_fft = [](const T& v) { return ops::l2_norm(ops::fft2_magnitudes(v)); };
  CHECK(ops::finite_diff_check<double>(l1_of_fft, x, 1e-6) < 1e-4);
  CHECK(ops::finite_diff_check<double>(l2_of_fft, x, 1e-6) < 1e-4);
}

TEST_CASE("fft2_magnitudes: gradient at zero input is zero by convention") {
  T x = T::zeros({4, 4});
  x.set_requires_grad(true);
  darcot::Tape<double> tape;
  tape.backward(ops::sum(ops::fft2_magnitudes(x)));
  for (double g : x.grad()) CHECK(g == 0.0);
}
