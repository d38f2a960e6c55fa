#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "kpconv/config.hpp"
#include "kpconv/geometry.hpp"

namespace kpconv {

class KPNetwork;

/// Per-point running sums of predicted class probabilities. Sums are kept in
/// 64-bit fixed point, so the result does not depend on the order in which
/// votes (or partial accumulators) are added.
class VoteAccumulator {
 public:
  static constexpr double kScale = 281474976710656.0;  // 2^48

  VoteAccumulator(std::size_t points, int classes);

  /// Adds one prediction per listed point; rows must be probability vectors.
  void add(std::span<const int> point_indices, const Matrix& probabilities);
  void merge(const VoteAccumulator& other);

  std::size_t size() const { return visits_.size(); }
  int classes() const { return classes_; }
  const std::vector<int>& visits() const { return visits_; }
  int min_visits() const;
  std::size_t unvisited() const;

  /// Average probability per point. Throws CoverageError if a point was
  /// never visited.
  Matrix averaged() const;
  /// Argmax of the averaged probabilities (lowest class on ties).
  std::vector<int> finalize() const;

 private:
  int classes_;
  std::vector<std::int64_t> sums_;  // size x classes
  std::vector<int> visits_;
};

/// Probabilities (one row per point of the sphere cloud).
using SpherePredictor = std::function<Matrix(const PointCloud& sphere)>;

struct SegmentationOptions {
  double radius = 1.0;
  int min_visits = 3;
  int max_passes = 8;
  bool keep_votes = false;
};

struct SphereVote {
  Point3 center;
  std::vector<int> scene_indices;
  Matrix probabilities;
};

struct SceneSegmentation {
  std::vector<int> labels;
  Matrix probabilities;
  std::vector<int> visits;
  int passes = 0;
  int spheres = 0;
  std::vector<SphereVote> votes;  // filled when keep_votes is set
};

/// Lattice spacing between sphere centers.
double sphere_lattice_spacing(double radius);

/// Sphere centers of one pass: a regular lattice over the scene bounds,
/// shifted by `shift` (in units of the spacing) on every axis.
std::vector<Point3> sphere_lattice(const PointCloud& scene, double radius, double shift);

/// Votes over overlapping input spheres. Pass p shifts the lattice; later
/// passes only evaluate spheres holding under-visited points. A scene that
/// fits inside one sphere is evaluated once. Throws CoverageError when points
/// stay unvisited after `max_passes`.
SceneSegmentation segment_scene(const PointCloud& scene, int classes, const SpherePredictor& predictor,
                                const SegmentationOptions& options);

/// Predictor running `net` in inference mode: the sphere is grid-subsampled
/// at the first cell size and every point takes the prediction of its cell.
SpherePredictor network_sphere_predictor(KPNetwork& net, InputFeatures features);

SceneSegmentation segment_scene(const PointCloud& scene, KPNetwork& net, const RunConfig& config,
                                bool keep_votes = false);

}  // namespace kpconv
