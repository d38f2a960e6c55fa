#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kpconv/datasets.hpp"
#include "kpconv/network.hpp"

namespace kpconv {

inline constexpr int kRunConfigVersion = 1;

/// Where training/evaluation clouds come from: a synthetic generator, or a
/// directory of labeled PLY files (relative paths resolve against the data
/// directory).
struct DatasetSource {
  std::string kind = "shapes3";  // shapes3 | planes-corners | indoor-boxes | directory
  int count = 300;
  std::uint64_t seed = 0;
  std::string directory;
  SyntheticOptions synthetic;
};

struct TrainingConfig {
  int epochs = 50;
  double learning_rate = 1e-3;
  double momentum = 0.98;
  double regularization_weight = 0.1;
  double epochs_per_decade = 100.0;
  int batch_size = 16;  // target average number of elements per batch
  double target_accuracy = 0.0;  // stop once an epoch reaches it (0 = never)
  AugmentationConfig augmentation;
};

struct RunConfig {
  Task task = Task::classification;
  DatasetSource dataset;
  InputFeatures input_features = InputFeatures::ones;
  double first_cell_size = 0.02;
  double sphere_radius = 0.0;  // segmentation input spheres; 0 = 50 * first_cell_size
  std::vector<int> widths = {16, 32, 64, 128, 256};
  int kernel_size = 15;
  double sigma_ratio = 1.0;
  double radius_ratio = 5.0;
  int deformable_blocks = 0;
  double dropout = 0.5;
  TrainingConfig training;
  int min_visits = 3;
  int max_passes = 8;
  std::uint64_t seed = 0;
  std::string checkpoint = "model.ckpt";
  std::string log = "";

  double input_radius() const;
  /// Network description for a dataset with `num_classes` classes.
  NetworkSpec network_spec(int num_classes) const;
  void validate() const;
};

/// Defaults for a task: segmentation trains at 1e-2 with batches of 10 and
/// no dropout.
RunConfig default_run_config(Task task);

/// Flat sectioned key-value text:
///   version = 1
///   [section]
///   key = value        # comment
/// Keys not present keep their defaults; unknown keys are errors.
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);
std::string format_run_config(const RunConfig& config);

/// Sets `section.key` from its text form (same syntax as the file).
void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value);
std::vector<std::string> run_config_keys();

/// Directory for datasets and cached artifacts: $KPCONV_DATA_DIR, else the
/// current directory.
std::filesystem::path data_directory();
std::filesystem::path resolve_data_path(const std::filesystem::path& path);

}  // namespace kpconv
