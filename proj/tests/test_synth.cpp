#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "darcot/synth.hpp"

#include "darcot/io.hpp"

using darcot::ContractViolation;
using darcot::Rng;
using darcot::Tensor;
namespace synth = darcot::synth;
using synth::DegradationSpec;
using synth::Image;
using synth::Task;

namespace {

Image constant_image(int h, int w, float v) {
  return Image::full({3, h, w}, v);
}

bool bitwise_equal(const Image& a, const Image& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     size_t(a.numel()) * sizeof(float)) == 0;
}

double mse(const Image& a, const Image& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(a.data()[size_t(i)]) - double(b.data()[size_t(i)]);
    acc += d * d;
  }
  return acc / double(a.numel());
}

}  // namespace

TEST_CASE("haze with t=1 is the identity") {
  Image x = synth::make_clean_image(16, 16, 1, 0);
  DegradationSpec s;
  s.task = Task::haze;
  s.haze_transmission = 1.0;
  s.haze_airlight = 0.5;
  CHECK(bitwise_equal(synth::apply_degradation(x, s), x));
}

TEST_CASE("haze with t->0, A=1 approaches the all-ones image") {
  Image x = synth::make_clean_image(8, 8, 2, 0);
  DegradationSpec s;
  s.task = Task::haze;
  s.haze_transmission = 1e-9;  // t=0 itself is outside (0,1]
  s.haze_airlight = 1.0;
  Image y = synth::apply_degradation(x, s);
  for (float v : y.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("noise sigma=25 on a constant 0.5 image at 256x256 gives PSNR 20.17 +- 0.2 dB") {
  // Monte-Carlo oracle for E[MSE] = sigma^2: PSNR = 20 log10(255/25) = 20.172
  Image x = constant_image(256, 256, 0.5f);
  DegradationSpec s;
  s.task = Task::noise;
  s.noise_sigma = 25.0;
  s.seed = 77;
  Image y = synth::apply_degradation(x, s);
  double psnr = 10.0 * std::log10(1.0 / mse(x, y));
  CHECK(psnr == doctest::Approx(20.172).epsilon(0.01));  // +-0.2 dB band
}

TEST_CASE("apply_degradation is deterministic and stays in [0,1]") {
  Image x = synth::make_clean_image(24, 24, 3, 1);
  for (int t = 0; t < synth::kNumTasks; ++t) {
    DegradationSpec s;
    s.task = Task(t);
    s.seed = 123 + uint64_t(t);
    Image y1 = synth::apply_degradation(x, s);
    Image y2 = synth::apply_degradation(x, s);
    CAPTURE(synth::task_name(Task(t)));
    CHECK(bitwise_equal(y1, y2));
    for (float v : y1.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("degradation parameter ranges are enforced") {
  Image x = constant_image(8, 8, 0.5f);
  DegradationSpec s;
  s.task = Task::haze;
  s.haze_transmission = 0.0;
  CHECK_THROWS_AS(synth::apply_degradation(x, s), ContractViolation);
  s.task = Task::lowlight;
  s.lowlight_gamma = 0.5;
  CHECK_THROWS_AS(synth::apply_degradation(x, s), ContractViolation);
  s.task = Task::noise;
  s.noise_sigma = 300;
  CHECK_THROWS_AS(synth::apply_degradation(x, s), ContractViolation);
}

TEST_CASE("sparsity: single-pixel impulse has flat spectrum, sparsity 0") {
  Tensor<double> r = Tensor<double>::zeros({8, 8});
  r.mut_data()[3 * 8 + 5] = 0.7;
  auto st = synth::residual_spectrum_stats(r);
  CHECK(st.sparsity == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(!st.all_zero);
}

TEST_CASE("sparsity: constant residual has only DC, sparsity 1 - 1/sqrt(HW)") {
  Tensor<double> r = Tensor<double>::full({8, 8}, 0.3);
  auto st = synth::residual_spectrum_stats(r);
  CHECK(st.sparsity == doctest::Approx(1.0 - 1.0 / 8.0).epsilon(1e-9));
}

TEST_CASE("sparsity: all-zero residual is flagged with sparsity 0") {
  auto st = synth::residual_spectrum_stats(Tensor<double>::zeros({4, 4}));
  CHECK(st.all_zero);
  CHECK(st.sparsity == 0.0);
}

TEST_CASE("sparsity: rain residual beats white-noise residual at equal energy") {
  // Monte-Carlo over 40 pairs, mirroring the averaged frequency analysis.
  const int pairs = 40;
  double rain_mean = 0, noise_mean = 0;
  for (int i = 0; i < pairs; ++i) {
    Image x = synth::make_clean_image(32, 32, 1000 + uint64_t(i), 0);
    DegradationSpec sr;
    sr.task = Task::rain;
    sr.seed = 2000 + uint64_t(i);
    Image yr = synth::apply_degradation(x, sr);
    DegradationSpec sn;
    sn.task = Task::noise;
    sn.noise_sigma = 25;
    sn.seed = 3000 + uint64_t(i);
    Image yn = synth::apply_degradation(x, sn);

    auto residual = [&](const Image& y) {
      Tensor<double> r = Tensor<double>::zeros(x.shape());
      for (int64_t k = 0; k < x.numel(); ++k)
        r.mut_data()[size_t(k)] = double(y.data()[size_t(k)]) - double(x.data()[size_t(k)]);
      return r;
    };
    rain_mean += synth::residual_spectrum_stats(residual(yr)).sparsity;
    noise_mean += synth::residual_spectrum_stats(residual(yn)).sparsity;
  }
  rain_mean /= pairs;
  noise_mean /= pairs;
  CHECK(rain_mean > noise_mean);
}

TEST_CASE("make_dataset: cardinality, balance, determinism") {
  synth::GenConfig cfg;
  cfg.tasks = {Task::noise};
  cfg.count = 4;
  cfg.size = 16;
  cfg.paired = true;
  auto b = synth::make_dataset(cfg, 7);
  CHECK(b.degraded_pool.size() == 4);
  for (const auto& item : b.degraded_pool) CHECK(item.task == Task::noise);

  auto b2 = synth::make_dataset(cfg, 7);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(bitwise_equal(b.clean_pool[i], b2.clean_pool[i]));
    CHECK(bitwise_equal(b.degraded_pool[i].degraded, b2.degraded_pool[i].degraded));
  }

  synth::GenConfig cfg3;
  cfg3.tasks = {Task::noise, Task::rain, Task::haze};
  cfg3.count = 30;
  cfg3.size = 16;
  auto b3 = synth::make_dataset(cfg3, 9);
  int per[3] = {0, 0, 0};
  for (const auto& item : b3.degraded_pool) {
    if (item.task == Task::noise) per[0]++;
    if (item.task == Task::rain) per[1]++;
    if (item.task == Task::haze) per[2]++;
  }
  CHECK(per[0] == 10);
  CHECK(per[1] == 10);
  CHECK(per[2] == 10);
}

TEST_CASE("make_dataset: empty task list rejected") {
  synth::GenConfig cfg;
  cfg.count = 4;
  CHECK_THROWS_AS(synth::make_dataset(cfg, 1), ContractViolation);
}

TEST_CASE("dataset save/load round-trips bitwise") {
  namespace fs = std::filesystem;
  synth::GenConfig cfg;
  cfg.tasks = {Task::noise, Task::haze};
  cfg.count = 4;
  cfg.size = 16;
  auto b = synth::make_dataset(cfg, 11);
  auto dir = (fs::temp_directory_path() / "darcot_ds_test").string();
  fs::remove_all(dir);
  synth::save_dataset(b, dir);
  auto back = synth::load_dataset(dir);
  REQUIRE(back.degraded_pool.size() == b.degraded_pool.size());
  CHECK(back.paired == b.paired);
  for (size_t i = 0; i < b.degraded_pool.size(); ++i) {
    CHECK(bitwise_equal(back.degraded_pool[i].degraded, b.degraded_pool[i].degraded));
    CHECK(bitwise_equal(back.clean_pool[i], b.clean_pool[i]));
    CHECK(back.degraded_pool[i].task == b.degraded_pool[i].task);
  }
  // clean folder loader sees the same tensors
  auto pool = synth::load_clean_folder(dir + "/tensors");
  CHECK(pool.size() == 8);  // clean + degraded files
}
