#include <doctest.h>

#include <cmath>

#include "darcot/losses.hpp"

using darcot::ContractViolation;
using darcot::Rng;
using darcot::Tape;
using darcot::Tensor;
namespace ops = darcot::ops;
namespace losses = darcot::losses;
using darcot::synth::Task;
using losses::CostConfig;
using losses::RegMode;

using T = Tensor<double>;

namespace {

T randn(darcot::Shape shape, Rng& rng, double scale = 1.0) {
  T t = T::zeros(std::move(shape));
  for (auto& v : t.mut_data()) v = scale * rng.normal();
  return t;
}

// independent scalar re-summation of the unpaired loss
double unpaired_oracle(const T& y, const T& ty, const T& phi,
                       const std::vector<Task>& tasks, const CostConfig& cfg) {
  const int64_t n = y.dim(0);
  const int64_t chunk = y.numel() / n;
  double total = 0;
  for (int64_t s = 0; s < n; ++s) {
    double c2 = 0;
    std::vector<double> res(static_cast<size_t>(chunk));
    for (int64_t i = 0; i < chunk; ++i) {
      double d = y.data()[size_t(s * chunk + i)] - ty.data()[size_t(s * chunk + i)];
      res[size_t(i)] = d;
      c2 += d * d;
    }
    double g = 0;
    RegMode mode = cfg.reg_for(tasks[size_t(s)]);
    if (mode != RegMode::off) {
      darcot::Shape img_shape(y.shape().begin() + 1, y.shape().end());
      auto mags = ops::fft2_magnitudes(T::from(img_shape, res));
      for (double m : mags.data()) g += mode == RegMode::fourier_l1 ? m : m * m;
      if (mode == RegMode::fourier_l2) g = std::sqrt(g);
    }
    total += std::sqrt(c2) + g - phi.data()[size_t(s)];
  }
  return total / double(n);
}

}  // namespace

TEST_CASE("transport_cost examples") {
  T y = T::from({1, 4}, {0.1, 0.2, 0.3, 0.4});
  CHECK(losses::transport_cost(y, y).item() == 0.0);

  T a = T::zeros({2, 3});
  T b = T::zeros({2, 3});
  b.mut_data()[4] = 1.0;  // one-hot unit difference
  CHECK(losses::transport_cost(a, b).item() == doctest::Approx(1.0).epsilon(1e-15));

  T c = T::zeros({5});
  T d = T::from({5}, {0.3, 0.4, 0, 0, 0});
  CHECK(losses::transport_cost(c, d).item() == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(losses::transport_cost(a, c), ContractViolation);
}

TEST_CASE("residual_reg examples: impulse and constant on 2x2") {
  T zero = T::zeros({2, 2});
  CHECK(losses::residual_reg(zero, RegMode::fourier_l1).item() == 0.0);
  CHECK(losses::residual_reg(zero, RegMode::fourier_l2).item() == 0.0);
  CHECK(losses::residual_reg(zero, RegMode::off).item() == 0.0);

  T impulse = T::from({2, 2}, {1, 0, 0, 0});
  CHECK(losses::residual_reg(impulse, RegMode::fourier_l1).item() == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(losses::residual_reg(impulse, RegMode::fourier_l2).item() == doctest::Approx(2.0).epsilon(1e-12));

  double cval = -0.35;
  T constant = T::full({2, 2}, cval);
  CHECK(losses::residual_reg(constant, RegMode::fourier_l1).item() ==
        doctest::Approx(4.0 * std::abs(cval)).epsilon(1e-12));
}

TEST_CASE("residual_reg Parseval identity: fourier_l2 == sqrt(HW)*||r||_2") {
  Rng rng(3);
  T r = randn({6, 5}, rng);
  double lhs = losses::residual_reg(r, RegMode::fourier_l2).item();
  double rhs = std::sqrt(30.0) * ops::l2_norm(r).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
}

TEST_CASE("loss_transport_unpaired: trivial cases") {
  CostConfig cfg = CostConfig::without_reg();
  T y = T::from({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  T phi0 = T::zeros({1});
  std::vector<Task> tasks = {Task::noise};
  CHECK(losses::loss_transport_unpaired(y, y, phi0, tasks, cfg).item() == 0.0);

  T phi5 = T::from({1}, {5.0});
  CHECK(losses::loss_transport_unpaired(y, y, phi5, tasks, cfg).item() == -5.0);
}

TEST_CASE("loss_transport_unpaired matches the re-summation oracle") {
  Rng rng(10);
  CostConfig cfg = CostConfig::defaults();
  T y = randn({3, 2, 4, 4}, rng, 0.5);
  T ty = randn({3, 2, 4, 4}, rng, 0.5);
  T phi = randn({3}, rng);
  std::vector<Task> tasks = {Task::noise, Task::rain, Task::haze};
  double got = losses::loss_transport_unpaired(y, ty, phi, tasks, cfg).item();
  double expect = unpaired_oracle(y, ty, phi, tasks, cfg);
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss_transport_unpaired rejects empty batch") {
  CostConfig cfg = CostConfig::defaults();
  T y = T::zeros({0, 2, 2});
  T phi = T::zeros({0});
  CHECK_THROWS_AS(losses::loss_transport_unpaired(y, y, phi, {}, cfg), ContractViolation);
}

TEST_CASE("loss_transport_paired: pair term vanishes at T(y)=x*") {
  CostConfig cfg = CostConfig::without_reg();
  Rng rng(11);
  T y = randn({2, 3, 2, 2}, rng, 0.3);
  T xstar = randn({2, 3, 2, 2}, rng, 0.3);
  T phi = T::zeros({2});
  std::vector<Task> tasks = {Task::haze, Task::haze};
  double got = losses::loss_transport_paired(y, xstar, xstar, phi, tasks, cfg).item();
  // reduces to mean c(y, x*)
  double expect = 0;
  for (int s = 0; s < 2; ++s) {
    double c2 = 0;
    for (int i = 0; i < 12; ++i) {
      double d = y.data()[size_t(s * 12 + i)] - xstar.data()[size_t(s * 12 + i)];
      c2 += d * d;
    }
    expect += std::sqrt(c2);
  }
  expect /= 2;
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss_transport_paired with lambda=0 equals unpaired bitwise") {
  Rng rng(12);
  CostConfig cfg = CostConfig::defaults();
  cfg.lambda_pair = 0;
  T y = randn({2, 1, 4, 4}, rng);
  T ty = randn({2, 1, 4, 4}, rng);
  T xs = randn({2, 1, 4, 4}, rng);
  T phi = randn({2}, rng);
  std::vector<Task> tasks = {Task::rain, Task::noise};
  double paired = losses::loss_transport_paired(y, ty, xs, phi, tasks, cfg).item();
  double unpaired = losses::loss_transport_unpaired(y, ty, phi, tasks, cfg).item();
  CHECK(paired == unpaired);  // bitwise
}

TEST_CASE("loss_transport_paired: hand-evaluated pair term") {
  // lambda=10, ||T(y)-x*||_1 = 0.2, everything else zeroed -> 2.0
  CostConfig cfg = CostConfig::without_reg();
  cfg.lambda_pair = 10.0;
  T y = T::zeros({1, 1, 2, 2});
  T ty = T::zeros({1, 1, 2, 2});
  T xs = T::from({1, 1, 2, 2}, {0.2, 0, 0, 0});
  // c(y,T(y)) = 0, phi = 0, pair term = 10 * 0.2 = 2... but c(y,T(y)) uses
  // T(y)=0 so cost 0; ||T(y)-x*||_1 = 0.2
  T phi = T::zeros({1});
  std::vector<Task> tasks = {Task::haze};
  CHECK(losses::loss_transport_paired(y, ty, xs, phi, tasks, cfg).item() ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("loss_transport_paired rejects missing pairs") {
  CostConfig cfg = CostConfig::defaults();
  T y = T::zeros({2, 1, 2, 2});
  T xs = T::zeros({1, 1, 2, 2});
  T phi = T::zeros({2});
  std::vector<Task> tasks = {Task::noise, Task::noise};
  CHECK_THROWS_AS(losses::loss_transport_paired(y, y, xs, phi, tasks, cfg),
                  ContractViolation);
}

TEST_CASE("loss_potential: examples and oracle") {
  T a = T::full({3}, 2.0);
  T b = T::full({2}, 2.0);
  CHECK(losses::loss_potential(a, b).item() == 0.0);  // constant potential

  T pty = T::from({2}, {1.0, 3.0});   // mean 2
  T px = T::from({4}, {5, 5, 5, 5});  // mean 5
  CHECK(losses::loss_potential(pty, px).item() == -3.0);

  Rng rng(13);
  T r1 = randn({5}, rng), r2 = randn({3}, rng);
  double m1 = 0, m2 = 0;
  for (double v : r1.data()) m1 += v;
  for (double v : r2.data()) m2 += v;
  CHECK(losses::loss_potential(r1, r2).item() ==
        doctest::Approx(m1 / 5 - m2 / 3).epsilon(1e-12));

  CHECK_THROWS_AS(losses::loss_potential(T::zeros({0}), px), ContractViolation);
}

TEST_CASE("contrastive: one task, one positive, no negatives -> 0") {
  T e = T::from({2, 3}, {1, 0, 0, 0.6, 0.8, 0});
  auto r = losses::loss_task_contrastive(e, {0, 0}, 0.07);
  CHECK(r.loss.item() == 0.0);
  CHECK(r.flags.empty());
}

TEST_CASE("contrastive: two tasks, all similarities equal -> 2 log 2") {
  // all-identical embeddings give equal similarities everywhere
  T e = T::from({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
  auto r = losses::loss_task_contrastive(e, {0, 0, 1, 1}, 0.07);
  CHECK(r.loss.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // also holds for unbalanced task sizes
  T e2 = T::from({5, 2}, {0.3, 0.1, 0.3, 0.1, 0.3, 0.1, 0.3, 0.1, 0.3, 0.1});
  auto r2 = losses::loss_task_contrastive(e2, {0, 0, 0, 1, 1}, 0.2);
  CHECK(r2.loss.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("contrastive: positives at sim 1, negatives at sim -1, tau=0.07 -> < 1e-8") {
  T e = T::from({4, 2}, {1, 0, 1, 0, -1, 0, -1, 0});
  auto r = losses::loss_task_contrastive(e, {0, 0, 1, 1}, 0.07);
  CHECK(r.loss.item() >= 0.0);
  CHECK(r.loss.item() < 1e-8);
}

TEST_CASE("contrastive: singleton task flagged, contributes 0") {
  T e = T::from({3, 2}, {1, 0, 1, 0, 0, 1});
  auto r = losses::loss_task_contrastive(e, {0, 0, 1}, 0.07);
  CHECK(r.flags.size() == 1);
  // task 0 still contributes its own positive/negative term
  CHECK(r.loss.item() > 0.0);
}

TEST_CASE("contrastive: strictly decreasing in a positive-pair similarity") {
  // Task 0 lives in the (e1,e2) plane, task 1 on the e3 axis, so every
  // cross-task similarity stays 0 while the task-0 positive similarity
  // sweeps with the rotation angle: "all else fixed".
  auto make = [](double angle) {
    return T::from({4, 3}, {1, 0, 0,
                            std::cos(angle), std::sin(angle), 0,
                            0, 0, 1,
                            0, 0, 1});
  };
  double prev = 1e100;
  for (double ang : {1.2, 0.9, 0.6, 0.3, 0.05}) {
    auto r = losses::loss_task_contrastive(make(ang), {0, 0, 1, 1}, 0.07);
    CHECK(r.loss.item() < prev);
    prev = r.loss.item();
  }
}

TEST_CASE("losses are differentiable end-to-end (finite differences)") {
  Rng rng(17);
  CostConfig cfg = CostConfig::defaults();
  std::vector<Task> tasks = {Task::rain, Task::noise};
  T y = randn({2, 1, 4, 4}, rng, 0.4);
  T ty0 = randn({2, 1, 4, 4}, rng, 0.4);
  T xs = randn({2, 1, 4, 4}, rng, 0.4);
  T phi = randn({2}, rng);

  double err_u = ops::finite_diff_check<double>(
      [&](const T& v) {
        return losses::loss_transport_unpaired(y, v, phi, tasks, cfg);
      },
      ty0, 1e-6);
  CHECK(err_u < 1e-4);

  double err_p = ops::finite_diff_check<double>(
      [&](const T& v) {
        return losses::loss_transport_paired(y, v, xs, phi, tasks, cfg);
      },
      ty0, 1e-6);
  CHECK(err_p < 1e-4);

  T emb = randn({4, 3}, rng);
  double err_c = ops::finite_diff_check<double>(
      [&](const T& v) {
        return losses::loss_task_contrastive(v, {0, 0, 1, 1}, 0.07).loss;
      },
      emb, 1e-6);
  CHECK(err_c < 1e-4);

  double err_phi = ops::finite_diff_check<double>(
      [&](const T& v) { return losses::loss_potential(v, phi); },
      randn({3}, rng), 1e-6);
  CHECK(err_phi < 1e-4);
}
