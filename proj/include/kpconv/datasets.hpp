#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kpconv/geometry.hpp"

namespace kpconv {

enum class DatasetKind { shapes3, planes_corners, indoor_boxes };

DatasetKind dataset_kind_from_string(const std::string& name);
std::string to_string(DatasetKind kind);

struct SyntheticOptions {
  int points_per_cloud = 1024;  // shapes3
  double jitter = 0.01;         // max displacement of a surface sample (meters)
  double density = 250.0;       // points per square meter (planes/rooms)
  std::vector<double> proportions;  // shapes3 class proportions, empty = equal
};

/// Labeled synthetic clouds; features are 3 color channels in [0, 1].
///  shapes3:        unit sphere (0), cube of side 2 (1), cylinder r=1 h=2 (2),
///                  surface samples displaced by at most `jitter`, each rotated
///                  about the vertical axis. Every point carries the class.
///  planes-corners: a floor plane with zero, one or two walls meeting it;
///                  labels floor 0, wall 1.
///  indoor-boxes:   a room (floor, four walls) with boxes on the floor;
///                  labels floor 0, wall 1, box 2.
/// Fully determined by `seed`.
std::vector<PointCloud> generate_synthetic_dataset(DatasetKind kind, int count, std::uint64_t seed,
                                                   const SyntheticOptions& options = {});

/// Number of shapes3 clouds per class for `count` clouds.
std::vector<int> class_counts(int count, const std::vector<double>& proportions, int classes);

struct AugmentationConfig {
  double scale_min = 1.0;
  double scale_max = 1.0;
  bool anisotropic = false;
  std::array<bool, 3> flip_axes = {false, false, false};
  double flip_probability = 0.0;
  double jitter_sigma = 0.0;  // Gaussian, meters
  bool rotate_vertical = false;

  void validate() const;
  bool is_identity() const;
};

/// Scale, flip, vertical rotation, then jitter. Labels and features are left
/// untouched.
PointCloud augment(const PointCloud& cloud, const AugmentationConfig& config, std::uint64_t seed);

enum class InputFeatures { ones, ones_rgb, ones_xyz };

InputFeatures input_features_from_string(const std::string& name);
std::string to_string(InputFeatures mode);
int input_feature_dim(InputFeatures mode);

/// Replaces the features with [1], [1 r g b] (from the first three existing
/// channels) or [1 x y z].
PointCloud add_input_features(const PointCloud& cloud, InputFeatures mode);

}  // namespace kpconv
