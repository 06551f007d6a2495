#pragma once

#include <optional>
#include <string>
#include <vector>

#include "darcot/common.hpp"
#include "darcot/tensor.hpp"

namespace darcot::synth {

// Images are [3,H,W] float tensors with values in [0,1].
using Image = Tensor<float>;

enum class Task { noise, rain, haze, blur, lowlight };

inline constexpr int kNumTasks = 5;
const char* task_name(Task t);
Task task_from_name(const std::string& name);
std::vector<Task> tasks_from_csv(const std::string& csv);

// One realized degradation. `seed` fully determines the outcome; parameters
// outside their documented ranges are contract violations.
struct DegradationSpec {
  Task task = Task::noise;
  uint64_t seed = 0;

  double noise_sigma = 25.0;  // 0..255 scale

  int rain_streaks = 60;
  double rain_length = 12.0;      // px
  double rain_angle_deg = 70.0;   // from horizontal
  double rain_intensity = 0.25;

  double haze_transmission = 0.6;  // (0,1]
  double haze_airlight = 0.9;      // [0,1]

  double blur_length = 7.0;      // px
  double blur_angle_deg = 0.0;

  double lowlight_gamma = 2.2;  // >= 1
  double lowlight_gain = 0.5;   // (0,1]

  void validate() const;
};

// Deterministic: identical (x, spec) give an identical result. Output values
// stay in [0,1].
Image apply_degradation(const Image& x, const DegradationSpec& spec);

// Procedural clean image: smooth color gradients, rectangles, and sinusoidal
// textures. Deterministic in (seed, index).
Image make_clean_image(int h, int w, uint64_t seed, uint64_t index);

// --- residual frequency statistics -------------------------------------------

struct SpectrumStats {
  std::vector<double> bin_edges;   // num_bins+1 log-spaced magnitude edges
  std::vector<double> bin_counts;  // averaged over channels
  double sparsity = 0.0;           // 1 - |F|_1 / (sqrt(HW) |F|_2), channel mean
  bool all_zero = false;           // flagged when r == 0 (sparsity defined 0)
};

// r: [C,H,W] or [H,W] residual in any real range.
SpectrumStats residual_spectrum_stats(const Tensor<double>& r, int num_bins = 32);
SpectrumStats residual_spectrum_stats(const Image& r, int num_bins = 32);

// --- dataset generation -------------------------------------------------------

struct GenConfig {
  std::vector<Task> tasks;
  int count = 30;  // total items, balanced across tasks
  int size = 32;   // square patches
  bool paired = true;
  std::vector<double> noise_sigmas = {15.0, 25.0, 50.0};  // sampled per item
  void validate() const;
};

struct DatasetItem {
  Image degraded;
  int clean_index = -1;  // always recorded; ignored by unpaired training
  Task task = Task::noise;
  DegradationSpec spec;
};

// Holds the degraded marginal, the clean marginal, and the pairing flag.
struct DatasetBundle {
  std::vector<Image> clean_pool;
  std::vector<DatasetItem> degraded_pool;
  bool paired = true;
  uint64_t seed = 0;
  int patch = 32;

  std::vector<Task> present_tasks() const;
};

DatasetBundle make_dataset(const GenConfig& config, uint64_t seed);

// Serialized layout: <dir>/manifest.json plus tensors/<id>_{clean,deg}.frtn.
void save_dataset(const DatasetBundle& bundle, const std::string& dir);
DatasetBundle load_dataset(const std::string& dir);

// Loads every *.frtn image in a folder as a clean pool (user-provided data
// path instead of procedural scenes).
std::vector<Image> load_clean_folder(const std::string& dir);

}  // namespace darcot::synth
