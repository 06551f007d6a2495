#include <doctest.h>

#include <cmath>
#include <cstring>

#include "darcot/trainer.hpp"

using darcot::Rng;
using darcot::Tape;
using darcot::Tensor;
namespace ops = darcot::ops;
namespace nets = darcot::nets;
namespace train = darcot::train;
namespace synth = darcot::synth;
using synth::Task;

namespace {

nets::ModelConfig tiny_model(nets::Conditioning mode = nets::Conditioning::full) {
  nets::ModelConfig m;
  m.gen_base = 4;
  m.regm_c3 = 8;
  m.regm_c2 = 4;
  m.regm_c1 = 2;
  m.pot_base = 4;
  m.conditioning = mode;
  return m;
}

train::TrainConfig tiny_config(int steps, uint64_t seed = 3) {
  train::TrainConfig c;
  c.model = tiny_model();
  c.steps = steps;
  c.batch_size = 4;
  c.seed = seed;
  c.metrics_every = 1;
  return c;
}

synth::DatasetBundle tiny_data(int count = 8, int size = 16, uint64_t seed = 1,
                               std::vector<Task> tasks = {Task::noise, Task::haze}) {
  synth::GenConfig g;
  g.tasks = std::move(tasks);
  g.count = count;
  g.size = size;
  return synth::make_dataset(g, seed);
}

template <class S>
bool params_equal(const nets::ParamList<S>& a, const nets::ParamList<S>& b) {
  if (a.items.size() != b.items.size()) return false;
  for (size_t i = 0; i < a.items.size(); ++i) {
    if (a.items[i].first != b.items[i].first) return false;
    if (a.items[i].second.shape() != b.items[i].second.shape()) return false;
    if (std::memcmp(a.items[i].second.data().data(), b.items[i].second.data().data(),
                    size_t(a.items[i].second.numel()) * sizeof(S)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("rmsprop_update: zero gradient leaves parameters unchanged") {
  Tensor<double> p = Tensor<double>::from({3}, {1, 2, 3});
  Tensor<double> v = Tensor<double>::zeros({3});
  train::rmsprop_update(p, {0, 0, 0}, v, 0.1, 0.99, 1e-8);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == 2.0);
  CHECK(p.data()[2] == 3.0);
}

TEST_CASE("rmsprop_update: hand-evaluated single step, eps=0") {
  // v = 0.99*0 + 0.01*1 = 0.01; dp = -0.1 * 1/sqrt(0.01) = -1.0
  Tensor<double> p = Tensor<double>::from({1}, {5.0});
  Tensor<double> v = Tensor<double>::zeros({1});
  train::rmsprop_update(p, {1.0}, v, 0.1, 0.99, 0.0);
  CHECK(p.data()[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(v.data()[0] == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("rmsprop_update: repeated constant gradient approaches step size lr") {
  Tensor<double> p = Tensor<double>::from({1}, {0.0});
  Tensor<double> v = Tensor<double>::zeros({1});
  double prev = 0;
  double delta = 0;
  for (int i = 0; i < 2000; ++i) {
    prev = p.data()[0];
    train::rmsprop_update(p, {2.5}, v, 0.1, 0.99, 0.0);
    delta = std::abs(p.data()[0] - prev);
  }
  CHECK(delta == doctest::Approx(0.1).epsilon(1e-3));  // v -> g^2 fixed point
}

TEST_CASE("rmsprop_update: non-finite gradient aborts") {
  Tensor<double> p = Tensor<double>::from({1}, {0.0});
  Tensor<double> v = Tensor<double>::zeros({1});
  CHECK_THROWS_AS(train::rmsprop_update(p, {std::nan("")}, v, 0.1, 0.99, 0.0),
                  darcot::NumericError);
}

TEST_CASE("trainer: identical seed and config give bitwise-identical runs") {
  auto data = tiny_data();
  auto cfg = tiny_config(5);
  train::Trainer<float> a(cfg, data);
  train::Trainer<float> b(cfg, data);
  for (int i = 0; i < 5; ++i) {
    auto ma = a.step();
    auto mb = b.step();
    CHECK(std::memcmp(&ma.l_phi, &mb.l_phi, sizeof(double)) == 0);
    CHECK(std::memcmp(&ma.l_t, &mb.l_t, sizeof(double)) == 0);
    CHECK(std::memcmp(&ma.l_task, &mb.l_task, sizeof(double)) == 0);
  }
  auto pa = a.map().params();
  auto pb = b.map().params();
  CHECK(params_equal(pa, pb));
}

TEST_CASE("trainer: zero learning rates leave parameters unchanged") {
  auto data = tiny_data();
  auto cfg = tiny_config(3);
  cfg.lr_T = 0;
  cfg.lr_phi = 0;
  train::Trainer<float> t(cfg, data);
  train::Trainer<float> fresh(cfg, data);
  for (int i = 0; i < 3; ++i) t.step();
  auto pt = t.map().params();
  auto pf = fresh.map().params();
  CHECK(params_equal(pt, pf));
}

TEST_CASE("trainer: steps=0 fit returns initialization unchanged") {
  auto data = tiny_data();
  auto cfg = tiny_config(0);
  auto result = train::fit<float>(cfg, data);
  CHECK(result.metrics.empty());
  train::Trainer<float> fresh(cfg, data);
  auto pr = result.map.params();
  auto pf = fresh.map().params();
  CHECK(params_equal(pr, pf));
}

TEST_CASE("trainer: one potential update and n_T transport updates per step") {
  auto data = tiny_data();
  auto cfg = tiny_config(4);
  cfg.n_T = 3;
  train::Trainer<float> t(cfg, data);
  for (int i = 0; i < 4; ++i) t.step();
  CHECK(t.potential_update_count() == 4);
  CHECK(t.transport_update_count() == 12);
}

TEST_CASE("trainer: metrics stay finite and carry warnings for tiny batches") {
  auto data = tiny_data();
  auto cfg = tiny_config(2);
  cfg.batch_size = 1;  // task loss must be skipped with a warning
  train::Trainer<float> t(cfg, data);
  auto m = t.step();
  CHECK(std::isfinite(m.l_phi));
  CHECK(std::isfinite(m.l_t));
  CHECK(m.l_task == 0.0);
  REQUIRE(!m.warnings.empty());
  CHECK(m.warnings[0].find("batch smaller than 2") != std::string::npos);
}

TEST_CASE("potential update direction: L_phi does not increase on a frozen batch") {
  // Full-batch, deterministic: one RMSProp step on omega must not increase
  // the potential loss evaluated on the same frozen inputs.
  auto cfg = tiny_model();
  auto pot = nets::Potential<double>::make(cfg, 17);
  nets::ParamList<double> omega;
  pot.collect(omega);
  for (auto& [n, t] : omega.items) t.set_requires_grad(true);
  std::vector<Tensor<double>> vstate;
  for (auto& [n, t] : omega.items) vstate.push_back(Tensor<double>::zeros(t.shape()));

  Rng rng(23);
  Tensor<double> ty = Tensor<double>::zeros({4, 3, 16, 16});
  Tensor<double> x = Tensor<double>::zeros({4, 3, 16, 16});
  for (auto& v : ty.mut_data()) v = rng.uniform();
  for (auto& v : x.mut_data()) v = rng.uniform();

  auto eval = [&]() {
    return darcot::losses::loss_potential(pot(ty), pot(x)).item();
  };
  double before = eval();
  {
    Tape<double> tape;
    auto loss = darcot::losses::loss_potential(pot(ty), pot(x));
    tape.backward(loss);
  }
  for (size_t i = 0; i < omega.items.size(); ++i) {
    auto g = omega.items[i].second.grad();
    train::rmsprop_update(omega.items[i].second, g, vstate[i], 0.5e-4, 0.99, 1e-8);
    omega.items[i].second.zero_grad();
  }
  double after = eval();
  CHECK(after <= before + 1e-12);
}

TEST_CASE("trainer: 500-step toy paired denoising improves the pair term") {
  synth::GenConfig g;
  g.tasks = {Task::noise};
  g.noise_sigmas = {25.0};
  g.count = 8;
  g.size = 16;
  auto data = synth::make_dataset(g, 5);

  train::TrainConfig cfg = tiny_config(500, 11);
  cfg.model.conditioning = nets::Conditioning::full;
  cfg.use_task_loss = false;  // single task

  train::Trainer<float> t(cfg, data);

  // mean ||T(y)-x*||_1 over the whole pool
  auto pair_l1 = [&]() {
    double total = 0;
    for (size_t i = 0; i < data.degraded_pool.size(); ++i) {
      Tensor<float> y = Tensor<float>::zeros({1, 3, 16, 16});
      std::copy(data.degraded_pool[i].degraded.data().begin(),
                data.degraded_pool[i].degraded.data().end(), y.mut_data().begin());
      auto out = nets::two_pass_restore(y, t.map());
      const auto& clean = data.clean_pool[size_t(data.degraded_pool[i].clean_index)];
      double l1 = 0;
      for (int64_t k = 0; k < clean.numel(); ++k)
        l1 += std::abs(double(out.x_hat.data()[size_t(k)]) - double(clean.data()[size_t(k)]));
      total += l1;
    }
    return total / double(data.degraded_pool.size());
  };

  double at_start = pair_l1();
  for (int i = 0; i < 500; ++i) t.step();
  double at_end = pair_l1();
  CHECK(at_end < at_start);
}

TEST_CASE("trainer: checkpoint resume reproduces the uninterrupted run bitwise") {
  auto data = tiny_data();
  auto cfg = tiny_config(12, 29);

  train::Trainer<float> full(cfg, data);
  std::vector<train::StepMetrics> full_metrics;
  for (int i = 0; i < 12; ++i) full_metrics.push_back(full.step());

  train::Trainer<float> first(cfg, data);
  for (int i = 0; i < 6; ++i) first.step();
  darcot::io::Checkpoint ck = first.make_checkpoint("h");

  train::Trainer<float> resumed(cfg, data);
  resumed.load_checkpoint(ck);
  CHECK(resumed.current_step() == 6);
  for (int i = 6; i < 12; ++i) {
    auto m = resumed.step();
    CHECK(std::memcmp(&m.l_phi, &full_metrics[size_t(i)].l_phi, sizeof(double)) == 0);
    CHECK(std::memcmp(&m.l_t, &full_metrics[size_t(i)].l_t, sizeof(double)) == 0);
    CHECK(std::memcmp(&m.l_task, &full_metrics[size_t(i)].l_task, sizeof(double)) == 0);
  }
  auto pa = full.map().params();
  auto pb = resumed.map().params();
  CHECK(params_equal(pa, pb));
}

TEST_CASE("trainer: unpaired mode and l1_only objective run and stay finite") {
  auto data = [&] {
    synth::GenConfig g;
    g.tasks = {Task::noise, Task::haze};
    g.count = 8;
    g.size = 16;
    g.paired = false;
    return synth::make_dataset(g, 31);
  }();
  auto cfg = tiny_config(3);
  cfg.paired = false;
  train::Trainer<float> t(cfg, data);
  for (int i = 0; i < 3; ++i) {
    auto m = t.step();
    CHECK(std::isfinite(m.l_t));
  }

  auto paired_data = tiny_data();
  auto cfg2 = tiny_config(3);
  cfg2.objective = train::Objective::l1_only;
  train::Trainer<float> t2(cfg2, paired_data);
  auto m2 = t2.step();
  CHECK(m2.l_phi == 0.0);
  CHECK(std::isfinite(m2.l_t));
  CHECK(t2.potential_update_count() == 0);
}

TEST_CASE("trainer: checkpoint rebuild yields the same restoration map") {
  auto data = tiny_data();
  auto cfg = tiny_config(4, 41);
  train::Trainer<float> t(cfg, data);
  for (int i = 0; i < 4; ++i) t.step();
  darcot::io::Checkpoint ck = t.make_checkpoint("x");

  auto map2 = train::map_from_checkpoint<float>(ck, cfg.model);
  Tensor<float> y = Tensor<float>::zeros({1, 3, 16, 16});
  Rng rng(4);
  for (auto& v : y.mut_data()) v = float(rng.uniform());
  auto a = nets::two_pass_restore(y, t.map()).x_hat;
  auto b = nets::two_pass_restore(y, map2).x_hat;
  CHECK(std::memcmp(a.data().data(), b.data().data(), size_t(a.numel()) * sizeof(float)) == 0);
}
