#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "kpconv/geometry.hpp"
#include "kpconv/kernel_points.hpp"

namespace kpconv {

/// Per-kernel-point weights W_k (D_in x D_out each) stacked vertically into
/// one (K * D_in) x D_out matrix; W_k is the k-th block of D_in rows.
using ConvWeights = Matrix;

/// Per-query kernel shifts, N' x 3K, row q = [dx_0 dy_0 dz_0 dx_1 ...].
using OffsetField = Matrix;

ConvWeights stack_kernel_weights(std::span<const Matrix> per_kernel_point);

/// Linear correlation max(0, 1 - ||y - kernel_point|| / sigma).
double correlation(const Point3& y, const Point3& kernel_point, double sigma);

/// Everything a KPConv evaluation reads. `offsets` is null for the rigid
/// operator.
struct ConvInputs {
  std::span<const Point3> queries;
  std::span<const Point3> supports;
  const Matrix& features;  // N x D_in
  const NeighborhoodMatrix& neighbors;
  const LayerKernel& kernel;
  const ConvWeights& weights;
  const OffsetField* offsets = nullptr;
};

struct ConvGradients {
  Matrix features;  // N x D_in
  ConvWeights weights;
  OffsetField offsets;  // empty for the rigid operator
};

/// out(x) = sum over neighbors i, kernel points k of h(x_i - x, x~_k) f_i W_k.
/// Shadow slots contribute nothing. Per query, neighbors are visited in row
/// order with kernel points inner, accumulating the weighted features before
/// one dense product with the stacked weights.
Matrix kpconv_forward(std::span<const Point3> queries, std::span<const Point3> supports,
                      const Matrix& features, const NeighborhoodMatrix& neighbors,
                      const LayerKernel& kernel, const ConvWeights& weights);

/// Same sum with kernel points shifted per query: x~_k + offsets(q, k).
Matrix deform_kpconv_forward(std::span<const Point3> queries, std::span<const Point3> supports,
                             const Matrix& features, const NeighborhoodMatrix& neighbors,
                             const LayerKernel& kernel, const ConvWeights& weights,
                             const OffsetField& offsets);

Matrix kpconv_forward(const ConvInputs& in);

/// Rigid KPConv producing 3K values per query, read as an N' x K x 3 field.
/// Throws ConfigError unless offset_weights has 3K columns.
OffsetField predict_offsets(std::span<const Point3> queries, std::span<const Point3> supports,
                            const Matrix& features, const NeighborhoodMatrix& neighbors,
                            const LayerKernel& offset_kernel, const ConvWeights& offset_weights);

/// Analytic gradients of sum(upstream .* forward(in)). At the kink
/// ||y - x~_k|| = sigma and at zero distance the offset subgradient is 0.
ConvGradients kpconv_backward(const ConvInputs& in, const Matrix& upstream);

/// Correlation tensor h(q, slot, k), N' x width x K, flattened row-major;
/// shadow slots hold 0.
std::vector<double> correlation_block(const ConvInputs& in);

/// Binary dump of correlation_block, little-endian:
/// "KPHT", u32 version (1), u32 rows, u32 width, u32 K, f64[rows*width*K].
void write_correlation_dump(std::ostream& out, const ConvInputs& in);

/// sum_k min_i (||y_i - p_k|| / sigma)^2 over neighbor offsets y_i = x_i - x.
/// Zero when there are no neighbors.
double fitting_loss(std::span<const Point3> neighbor_offsets,
                    std::span<const Point3> deformed_kernel_points, double sigma);

/// sum_k sum_{l != k} h(p_k, p_l)^2.
double repulsive_loss(std::span<const Point3> deformed_kernel_points, double sigma);

struct RegularizationResult {
  double fitting = 0.0;
  double repulsive = 0.0;
  OffsetField offset_gradient;  // d(fitting + repulsive) / d offsets

  double total() const { return fitting + repulsive; }
};

/// Sum of fitting and repulsive losses over every query of a deformable
/// convolution, with the gradient with respect to its offsets.
RegularizationResult regularization_loss(const ConvInputs& in);

/// Fraction of (query, kernel point) pairs whose kernel point, shifted by
/// the offsets when given, has at least one neighbor closer than sigma.
double active_kernel_fraction(const ConvInputs& in);

}  // namespace kpconv
