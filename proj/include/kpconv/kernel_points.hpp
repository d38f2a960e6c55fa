#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kpconv/geometry.hpp"

namespace kpconv {

/// Unit-scale kernel point positions. With a fixed center, points[0] is the
/// origin.
struct KernelDisposition {
  PointList points;
  bool has_fixed_center = true;
  std::uint64_t seed = 0;
  bool converged = false;
  int iterations = 0;
  double energy = 0.0;
  double gradient_norm = 0.0;

  int size() const { return static_cast<int>(points.size()); }
};

/// Kernel of one layer: disposition scaled to a mean outer radius of
/// 1.5 sigma, then rotated.
struct LayerKernel {
  PointList points;
  double sigma = 0.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();

  int size() const { return static_cast<int>(points.size()); }
  /// Largest ||x_k|| + sigma: no support beyond this distance is influenced.
  double extent() const;
};

/// Attraction to the origin plus pairwise repulsion, both orderings of every
/// pair counted: sum_k ||x_k||^2 + sum_k sum_{l != k} 1 / ||x_l - x_k||.
/// Throws InfiniteEnergyError for coincident points.
double total_energy(std::span<const Point3> points);

/// Gradient of total_energy with respect to every point.
PointList energy_gradient(std::span<const Point3> points);

struct DescentOptions {
  double initial_step = 1e-2;
  double gradient_tolerance = 1e-5;
  int max_iterations = 10000;
  double step_growth = 1.1;  // applied after every accepted step
};

/// Gradient descent with backtracking from a random start in the unit ball:
/// the step is halved whenever the energy would increase and grown slightly
/// after each accepted step. Returns the best configuration found;
/// `converged` is false when the iteration cap was hit.
KernelDisposition optimize_disposition(int kernel_size, bool fixed_center, std::uint64_t seed,
                                       const DescentOptions& options = {});

/// Uniformly distributed rotation matrix (unit quaternion from four normals).
Eigen::Matrix3d random_rotation(std::uint64_t seed);

LayerKernel prepare_layer_kernel(const KernelDisposition& disposition, double sigma,
                                 std::uint64_t seed);

/// Groups of outer points sharing a plane perpendicular to a symmetry axis.
struct SymmetryGroups {
  Point3 axis = Point3::UnitZ();
  std::vector<int> group_sizes;  // ordered along the axis
  double plane_spread = 0.0;     // worst in-group spread of axial coordinate
  double ring_spread = 0.0;      // worst in-group spread of distance to axis
  std::string signature() const;  // e.g. "1-4-1"
};

/// Tries every outer-point direction and pairwise normal as the axis; keeps
/// the one with the largest group, then fewest groups. Spreads and `tolerance`
/// are relative to the mean outer radius.
SymmetryGroups symmetry_groups(std::span<const Point3> points, bool fixed_center,
                               double tolerance = 1e-3);

/// Largest relative deviation of the outer pairwise distances from their mean.
double outer_distance_spread(std::span<const Point3> points, bool fixed_center);

/// Plain-text table, one "x y z" row per kernel point.
void write_disposition_table(std::ostream& out, const KernelDisposition& d);
/// JSON sidecar: K, seed, fixed_center, converged, iterations, energy.
std::string disposition_sidecar_json(const KernelDisposition& d);

}  // namespace kpconv
