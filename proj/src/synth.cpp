#include "darcot/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "darcot/io.hpp"
#include "darcot/ops.hpp"

namespace darcot::synth {

namespace fs = std::filesystem;
using nlohmann::json;

const char* task_name(Task t) {
  switch (t) {
    case Task::noise: return "noise";
    case Task::rain: return "rain";
    case Task::haze: return "haze";
    case Task::blur: return "blur";
    case Task::lowlight: return "lowlight";
  }
  return "?";
}

Task task_from_name(const std::string& name) {
  for (int i = 0; i < kNumTasks; ++i)
    if (name == task_name(Task(i))) return Task(i);
  fail_contract("unknown task '", name, "' (expected noise|rain|haze|blur|lowlight)");
}

std::vector<Task> tasks_from_csv(const std::string& csv) {
  std::vector<Task> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    if (comma == std::string::npos) comma = csv.size();
    std::string tok = csv.substr(pos, comma - pos);
    if (!tok.empty()) out.push_back(task_from_name(tok));
    pos = comma + 1;
  }
  DARCOT_REQUIRE(!out.empty(), "empty task list");
  return out;
}

void DegradationSpec::validate() const {
  switch (task) {
    case Task::noise:
      DARCOT_REQUIRE(noise_sigma >= 0 && noise_sigma <= 255,
                     "noise sigma out of [0,255]: ", noise_sigma);
      break;
    case Task::rain:
      DARCOT_REQUIRE(rain_streaks >= 0 && rain_length > 0 && rain_intensity >= 0,
                     "rain parameters out of range");
      break;
    case Task::haze:
      DARCOT_REQUIRE(haze_transmission > 0 && haze_transmission <= 1,
                     "haze transmission out of (0,1]: ", haze_transmission);
      DARCOT_REQUIRE(haze_airlight >= 0 && haze_airlight <= 1,
                     "haze airlight out of [0,1]: ", haze_airlight);
      break;
    case Task::blur:
      DARCOT_REQUIRE(blur_length >= 1, "blur length must be >= 1 px: ", blur_length);
      break;
    case Task::lowlight:
      DARCOT_REQUIRE(lowlight_gamma >= 1, "lowlight gamma must be >= 1: ", lowlight_gamma);
      DARCOT_REQUIRE(lowlight_gain > 0 && lowlight_gain <= 1,
                     "lowlight gain out of (0,1]: ", lowlight_gain);
      break;
  }
}

namespace {

float clip01(double v) { return float(std::min(1.0, std::max(0.0, v))); }

void check_image(const Image& x) {
  DARCOT_REQUIRE(x.rank() == 3 && x.dim(0) == 3, "expected [3,H,W] image, got ",
                 shape_str(x.shape()));
}

Image degrade_noise(const Image& x, const DegradationSpec& spec) {
  Rng rng = Rng::substream(spec.seed, "noise");
  double s = spec.noise_sigma / 255.0;
  Image y = Image::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.mut_data();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = clip01(double(xv[i]) + s * rng.normal());
  return y;
}

Image degrade_haze(const Image& x, const DegradationSpec& spec) {
  double t = spec.haze_transmission, a = spec.haze_airlight;
  Image y = Image::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.mut_data();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = clip01(double(xv[i]) * t + a * (1.0 - t));
  return y;
}

Image degrade_lowlight(const Image& x, const DegradationSpec& spec) {
  Image y = Image::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.mut_data();
  for (size_t i = 0; i < xv.size(); ++i)
    yv[i] = clip01(spec.lowlight_gain * std::pow(double(xv[i]), spec.lowlight_gamma));
  return y;
}

// Streaks: anti-aliased line segments with a Gaussian cross-section,
// brightness-additive.
Image degrade_rain(const Image& x, const DegradationSpec& spec) {
  check_image(x);
  const int64_t h = x.dim(1), w = x.dim(2);
  Rng rng = Rng::substream(spec.seed, "rain");
  std::vector<double> streaks(size_t(h * w), 0.0);
  for (int s = 0; s < spec.rain_streaks; ++s) {
    double cx = rng.uniform(0, double(w));
    double cy = rng.uniform(0, double(h));
    double ang = (spec.rain_angle_deg + rng.uniform(-6.0, 6.0)) * M_PI / 180.0;
    double len = spec.rain_length * rng.uniform(0.7, 1.3);
    double amp = spec.rain_intensity * rng.uniform(0.6, 1.0);
    double dx = std::cos(ang), dy = -std::sin(ang);
    const double sigma = 0.55;  // cross-section width in px
    int steps = std::max(2, int(std::ceil(len * 2)));
    for (int k = 0; k <= steps; ++k) {
      double px = cx + dx * len * (double(k) / steps - 0.5);
      double py = cy + dy * len * (double(k) / steps - 0.5);
      int iy0 = int(std::floor(py)) - 1, ix0 = int(std::floor(px)) - 1;
      for (int iy = iy0; iy <= iy0 + 2; ++iy)
        for (int ix = ix0; ix <= ix0 + 2; ++ix) {
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
          double d2 = (px - ix) * (px - ix) + (py - iy) * (py - iy);
          double v = amp * std::exp(-d2 / (2 * sigma * sigma)) / steps * 2.5;
          streaks[size_t(iy * w + ix)] += v;
        }
    }
  }
  Image y = Image::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.mut_data();
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < h * w; ++i)
      yv[size_t(c * h * w + i)] =
          clip01(double(xv[size_t(c * h * w + i)]) + streaks[size_t(i)]);
  return y;
}

// Normalized oriented line kernel (motion blur); reflect-padded convolution
// keeps values a convex combination of inputs.
Image degrade_blur(const Image& x, const DegradationSpec& spec) {
  check_image(x);
  const int64_t h = x.dim(1), w = x.dim(2);
  int k = int(std::ceil(spec.blur_length));
  if (k % 2 == 0) k += 1;
  const int rad = k / 2;
  std::vector<double> kernel(size_t(k * k), 0.0);
  double ang = spec.blur_angle_deg * M_PI / 180.0;
  double dx = std::cos(ang), dy = std::sin(ang);
  int steps = std::max(2, int(spec.blur_length * 4));
  for (int s = 0; s <= steps; ++s) {
    double t = (double(s) / steps - 0.5) * (spec.blur_length - 1);
    double px = rad + dx * t, py = rad + dy * t;
    int ix = int(std::floor(px)), iy = int(std::floor(py));
    double fx = px - ix, fy = py - iy;
    // bilinear splat
    auto put = [&](int yy, int xx, double v) {
      if (yy >= 0 && yy < k && xx >= 0 && xx < k) kernel[size_t(yy * k + xx)] += v;
    };
    put(iy, ix, (1 - fx) * (1 - fy));
    put(iy, ix + 1, fx * (1 - fy));
    put(iy + 1, ix, (1 - fx) * fy);
    put(iy + 1, ix + 1, fx * fy);
  }
  double total = 0;
  for (double v : kernel) total += v;
  for (double& v : kernel) v /= total;

  auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return std::clamp<int64_t>(i, 0, n - 1);
  };
  Image y = Image::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.mut_data();
  for (int c = 0; c < 3; ++c) {
    const float* xp = xv.data() + int64_t(c) * h * w;
    float* yp = yv.data() + int64_t(c) * h * w;
    for (int64_t iy = 0; iy < h; ++iy)
      for (int64_t ix = 0; ix < w; ++ix) {
        double acc = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            double kv = kernel[size_t(ky * k + kx)];
            if (kv == 0) continue;
            int64_t sy = reflect(iy + ky - rad, h);
            int64_t sx = reflect(ix + kx - rad, w);
            acc += kv * double(xp[sy * w + sx]);
          }
        yp[iy * w + ix] = clip01(acc);
      }
  }
  return y;
}

}  // namespace

Image apply_degradation(const Image& x, const DegradationSpec& spec) {
  check_image(x);
  spec.validate();
  switch (spec.task) {
    case Task::noise: return degrade_noise(x, spec);
    case Task::rain: return degrade_rain(x, spec);
    case Task::haze: return degrade_haze(x, spec);
    case Task::blur: return degrade_blur(x, spec);
    case Task::lowlight: return degrade_lowlight(x, spec);
  }
  fail_contract("unreachable task");
}

Image make_clean_image(int h, int w, uint64_t seed, uint64_t index) {
  Rng rng = Rng::at(seed, "clean", index);
  Image img = Image::zeros({3, h, w});
  auto v = img.mut_data();

  // smooth low-frequency base, correlated across channels
  double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
  double ph1 = rng.uniform(0, 2 * M_PI), ph2 = rng.uniform(0, 2 * M_PI);
  double base_col[3] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
  double amp[3] = {rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u = double(x) / w, t = double(y) / h;
        double s = std::sin(2 * M_PI * (fx * u) + ph1) * std::cos(2 * M_PI * (fy * t) + ph2);
        v[size_t((c * h + y) * w + x)] = float(base_col[c] + amp[c] * s);
      }

  // rectangles with sharp edges
  int nrect = 2 + int(rng.below(4));
  for (int r = 0; r < nrect; ++r) {
    int x0 = int(rng.below(uint64_t(w)));
    int y0 = int(rng.below(uint64_t(h)));
    int rw = 2 + int(rng.below(uint64_t(std::max(2, w / 2))));
    int rh = 2 + int(rng.below(uint64_t(std::max(2, h / 2))));
    double col[3] = {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    double alpha = rng.uniform(0.5, 1.0);
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < std::min(h, y0 + rh); ++y)
        for (int x = x0; x < std::min(w, x0 + rw); ++x) {
          float& px = v[size_t((c * h + y) * w + x)];
          px = float((1 - alpha) * px + alpha * col[c]);
        }
  }

  // one oriented sinusoidal texture patch
  {
    double freq = rng.uniform(3.0, 8.0);
    double ang = rng.uniform(0, M_PI);
    double tamp = rng.uniform(0.05, 0.18);
    double cx = std::cos(ang), sy = std::sin(ang);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double u = double(x) / w, t = double(y) / h;
          float& px = v[size_t((c * h + y) * w + x)];
          px = float(px + tamp * std::sin(2 * M_PI * freq * (cx * u + sy * t)));
        }
  }

  for (auto& px : v) px = clip01(px);
  return img;
}

// --- residual spectrum stats --------------------------------------------------

SpectrumStats residual_spectrum_stats(const Tensor<double>& r, int num_bins) {
  DARCOT_REQUIRE(r.rank() == 2 || r.rank() == 3, "residual must be [H,W] or [C,H,W], got ",
                 shape_str(r.shape()));
  DARCOT_REQUIRE(num_bins >= 2, "need at least 2 bins");
  const int64_t channels = r.rank() == 3 ? r.dim(0) : 1;
  const int64_t h = r.dim(r.rank() - 2), w = r.dim(r.rank() - 1);

  Tensor<double> mags = ops::fft2_magnitudes(r);
  auto mv = mags.data();

  SpectrumStats out;
  double max_mag = 0;
  for (double m : mv) max_mag = std::max(max_mag, m);
  out.all_zero = max_mag == 0.0;

  // log-spaced bins; binning is a presentation choice, sparsity carries the
  // quantitative claim
  double hi = std::max(max_mag, 1e-12);
  double lo = hi * 1e-6;
  out.bin_edges.resize(size_t(num_bins) + 1);
  for (int b = 0; b <= num_bins; ++b)
    out.bin_edges[size_t(b)] = lo * std::pow(hi / lo, double(b) / num_bins);
  out.bin_counts.assign(size_t(num_bins), 0.0);

  double sparsity_sum = 0;
  for (int64_t c = 0; c < channels; ++c) {
    const double* m = mv.data() + c * h * w;
    double l1 = 0, l2sq = 0;
    for (int64_t i = 0; i < h * w; ++i) {
      l1 += m[i];
      l2sq += m[i] * m[i];
      // histogram
      double val = std::max(m[i], lo);
      int b = int(std::floor(std::log(val / lo) / std::log(hi / lo) * num_bins));
      b = std::clamp(b, 0, num_bins - 1);
      out.bin_counts[size_t(b)] += 1.0;
    }
    if (l2sq > 0)
      sparsity_sum += 1.0 - l1 / (std::sqrt(double(h * w)) * std::sqrt(l2sq));
    // zero channel contributes sparsity 0
  }
  for (double& b : out.bin_counts) b /= double(channels);
  out.sparsity = sparsity_sum / double(channels);
  return out;
}

SpectrumStats residual_spectrum_stats(const Image& r, int num_bins) {
  return residual_spectrum_stats(io::cast_tensor<double>(r), num_bins);
}

// --- dataset ------------------------------------------------------------------

void GenConfig::validate() const {
  DARCOT_REQUIRE(!tasks.empty(), "make_dataset: at least one task must be enabled");
  DARCOT_REQUIRE(count > 0, "make_dataset: count must be positive");
  DARCOT_REQUIRE(size >= 8 && size % 4 == 0,
                 "make_dataset: size must be >= 8 and divisible by 4, got ", size);
  DARCOT_REQUIRE(!noise_sigmas.empty(), "make_dataset: noise_sigmas empty");
}

std::vector<Task> DatasetBundle::present_tasks() const {
  std::vector<Task> seen;
  for (const auto& item : degraded_pool)
    if (std::find(seen.begin(), seen.end(), item.task) == seen.end())
      seen.push_back(item.task);
  return seen;
}

namespace {

DegradationSpec sample_spec(Task task, const GenConfig& cfg, Rng& rng, uint64_t item_seed) {
  DegradationSpec s;
  s.task = task;
  s.seed = item_seed;
  switch (task) {
    case Task::noise:
      s.noise_sigma = cfg.noise_sigmas[rng.below(cfg.noise_sigmas.size())];
      break;
    case Task::rain:
      s.rain_streaks = 30 + int(rng.below(50));
      s.rain_length = rng.uniform(8.0, 16.0);
      s.rain_angle_deg = rng.uniform(55.0, 85.0);
      s.rain_intensity = rng.uniform(0.2, 0.4);
      break;
    case Task::haze:
      s.haze_transmission = rng.uniform(0.35, 0.75);
      s.haze_airlight = rng.uniform(0.75, 1.0);
      break;
    case Task::blur:
      s.blur_length = rng.uniform(5.0, 9.0);
      s.blur_angle_deg = rng.uniform(0.0, 180.0);
      break;
    case Task::lowlight:
      s.lowlight_gamma = rng.uniform(1.8, 2.8);
      s.lowlight_gain = rng.uniform(0.4, 0.7);
      break;
  }
  return s;
}

}  // namespace

DatasetBundle make_dataset(const GenConfig& config, uint64_t seed) {
  config.validate();
  DatasetBundle bundle;
  bundle.paired = config.paired;
  bundle.seed = seed;
  bundle.patch = config.size;

  const int ntasks = int(config.tasks.size());
  std::vector<int> per_task(size_t(ntasks), config.count / ntasks);
  for (int i = 0; i < config.count % ntasks; ++i) per_task[size_t(i)] += 1;

  int idx = 0;
  for (int t = 0; t < ntasks; ++t) {
    for (int i = 0; i < per_task[size_t(t)]; ++i, ++idx) {
      Image clean = make_clean_image(config.size, config.size, seed, uint64_t(idx));
      Rng srng = Rng::at(seed, "spec", uint64_t(idx));
      DegradationSpec spec =
          sample_spec(config.tasks[size_t(t)], config, srng, srng.next_u64());
      DatasetItem item;
      item.task = spec.task;
      item.spec = spec;
      item.clean_index = idx;
      item.degraded = apply_degradation(clean, spec);
      bundle.clean_pool.push_back(std::move(clean));
      bundle.degraded_pool.push_back(std::move(item));
    }
  }
  return bundle;
}

namespace {

json spec_to_json(const DegradationSpec& s) {
  json j = {{"task", task_name(s.task)}, {"seed", s.seed}};
  switch (s.task) {
    case Task::noise: j["sigma"] = s.noise_sigma; break;
    case Task::rain:
      j["streaks"] = s.rain_streaks;
      j["length"] = s.rain_length;
      j["angle_deg"] = s.rain_angle_deg;
      j["intensity"] = s.rain_intensity;
      break;
    case Task::haze:
      j["transmission"] = s.haze_transmission;
      j["airlight"] = s.haze_airlight;
      break;
    case Task::blur:
      j["length"] = s.blur_length;
      j["angle_deg"] = s.blur_angle_deg;
      break;
    case Task::lowlight:
      j["gamma"] = s.lowlight_gamma;
      j["gain"] = s.lowlight_gain;
      break;
  }
  return j;
}

DegradationSpec spec_from_json(const json& j) {
  DegradationSpec s;
  s.task = task_from_name(j.at("task").get<std::string>());
  s.seed = j.at("seed").get<uint64_t>();
  switch (s.task) {
    case Task::noise: s.noise_sigma = j.at("sigma").get<double>(); break;
    case Task::rain:
      s.rain_streaks = j.at("streaks").get<int>();
      s.rain_length = j.at("length").get<double>();
      s.rain_angle_deg = j.at("angle_deg").get<double>();
      s.rain_intensity = j.at("intensity").get<double>();
      break;
    case Task::haze:
      s.haze_transmission = j.at("transmission").get<double>();
      s.haze_airlight = j.at("airlight").get<double>();
      break;
    case Task::blur:
      s.blur_length = j.at("length").get<double>();
      s.blur_angle_deg = j.at("angle_deg").get<double>();
      break;
    case Task::lowlight:
      s.lowlight_gamma = j.at("gamma").get<double>();
      s.lowlight_gain = j.at("gain").get<double>();
      break;
  }
  return s;
}

std::string item_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", i);
  return buf;
}

}  // namespace

void save_dataset(const DatasetBundle& bundle, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "tensors");
  json items = json::array();
  for (size_t i = 0; i < bundle.degraded_pool.size(); ++i) {
    const auto& item = bundle.degraded_pool[i];
    std::string id = item_id(int(i));
    std::string clean_file = "tensors/" + id + "_clean.frtn";
    std::string deg_file = "tensors/" + id + "_deg.frtn";
    io::write_tensor((fs::path(dir) / clean_file).string(),
                     bundle.clean_pool[size_t(item.clean_index)]);
    io::write_tensor((fs::path(dir) / deg_file).string(), item.degraded);
    // each saved item carries its own clean copy, so the index is positional
    items.push_back({{"id", id},
                     {"task", task_name(item.task)},
                     {"spec", spec_to_json(item.spec)},
                     {"seed", item.spec.seed},
                     {"clean_index", int(i)},
                     {"clean_file", clean_file},
                     {"degraded_file", deg_file}});
  }
  json manifest = {{"format_version", 1},
                   {"seed", bundle.seed},
                   {"pairing", bundle.paired ? "paired" : "unpaired"},
                   {"patch", bundle.patch},
                   {"items", items}};
  io::atomic_write_bytes((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

DatasetBundle load_dataset(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_file_bytes((fs::path(dir) / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw FormatError(cat("manifest.json in ", dir, ": ", e.what()));
  }
  DatasetBundle bundle;
  try {
    if (manifest.at("format_version").get<int>() != 1)
      throw FormatError("manifest: unsupported format_version");
    bundle.seed = manifest.at("seed").get<uint64_t>();
    bundle.paired = manifest.at("pairing").get<std::string>() == "paired";
    bundle.patch = manifest.at("patch").get<int>();
    for (const auto& e : manifest.at("items")) {
      DatasetItem item;
      item.task = task_from_name(e.at("task").get<std::string>());
      item.spec = spec_from_json(e.at("spec"));
      item.clean_index = e.at("clean_index").get<int>();
      item.degraded = io::read_tensor<float>(
          (fs::path(dir) / e.at("degraded_file").get<std::string>()).string());
      bundle.clean_pool.push_back(io::read_tensor<float>(
          (fs::path(dir) / e.at("clean_file").get<std::string>()).string()));
      bundle.degraded_pool.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw FormatError(cat("manifest.json in ", dir, ": missing field: ", e.what()));
  }
  return bundle;
}

std::vector<Image> load_clean_folder(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".frtn") files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  DARCOT_REQUIRE(!files.empty(), "no .frtn images found in ", dir);
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(io::read_tensor_cast<float>(f));
  return out;
}

}  // namespace darcot::synth
