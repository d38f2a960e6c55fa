#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace kpconv {

using Point3 = Eigen::Vector3d;
using PointList = std::vector<Point3>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Points with per-point feature rows and optional per-point labels.
struct PointCloud {
  PointList points;
  Matrix features;          // N x D
  std::vector<int> labels;  // empty, or one per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
  bool has_labels() const { return !labels.empty(); }

  /// Throws ValidationError when the row counts disagree or a coordinate is
  /// not finite.
  void validate() const;

  /// Rows `indices` of this cloud, labels included.
  PointCloud select(std::span<const int> indices) const;
};

/// Fixed-width neighbor table. Slots holding `support_count` are shadow
/// neighbors; they always sit at the tail of their row.
struct NeighborhoodMatrix {
  int rows = 0;
  int width = 0;  // n_max, the widest row observed
  int support_count = 0;
  double radius = 0.0;
  std::vector<std::int32_t> indices;  // rows x width, row-major

  int shadow() const { return support_count; }
  bool is_shadow(std::int32_t index) const { return index == support_count; }
  std::int32_t at(int row, int slot) const {
    return indices[static_cast<std::size_t>(row) * width + slot];
  }
  std::span<const std::int32_t> row(int r) const {
    return {indices.data() + static_cast<std::size_t>(r) * width,
            static_cast<std::size_t>(width)};
  }
  /// Number of non-shadow entries in row `r`.
  int count(int r) const;

  /// Copy with `extra` additional shadow slots per row.
  NeighborhoodMatrix padded(int extra) const;
};

struct SubsampleResult {
  PointCloud support;
  std::vector<int> cell_assignment;  // input point -> support index
};

/// Replaces the points of every non-empty cell of a grid anchored at the
/// origin by their barycenter. Cells are floor(coord / cell_size), so a
/// point on a face belongs to the cell above it. Features are averaged,
/// labels take the majority vote (ties to the smaller label). Support points
/// are ordered by cell key (x, then y, then z).
SubsampleResult grid_subsample(const PointCloud& cloud, double cell_size);

/// Closed-ball radius search through a uniform spatial hash. Rows are sorted
/// by squared distance, ties broken by support index; with `cap` only the
/// first `cap` entries of that order are kept.
NeighborhoodMatrix radius_neighbors(std::span<const Point3> queries,
                                    std::span<const Point3> supports,
                                    double radius,
                                    std::optional<int> cap = std::nullopt);

/// Index of the nearest support for every query (ties to the lower index).
std::vector<int> nearest_neighbor_indices(std::span<const Point3> queries,
                                          std::span<const Point3> supports);

struct SphereSample {
  PointCloud cloud;
  std::vector<int> scene_indices;
};

/// All scene points with ||p - center|| <= radius, in scene order.
SphereSample sample_sphere(const PointCloud& scene, const Point3& center,
                           double radius);

/// Per-layer geometric parameters derived from the cell size.
struct LayerConfig {
  double cell_size = 0.0;  // dl_j
  double sigma = 0.0;      // influence distance of kernel points
  double radius = 0.0;     // neighborhood radius
  int kernel_size = 15;
  bool deformable = false;
  int width = 0;  // block feature width D

  /// sigma = sigma_ratio * dl; radius = 2.5 sigma when rigid,
  /// radius_ratio * dl when deformable.
  static LayerConfig make(double cell_size, int width, bool deformable = false,
                          int kernel_size = 15, double sigma_ratio = 1.0,
                          double radius_ratio = 5.0);
};

/// Builds the dl_{j+1} = 2 dl_j chain of `count` layers.
std::vector<LayerConfig> layer_chain(double first_cell_size,
                                     std::span<const int> widths,
                                     std::span<const bool> deformable,
                                     int kernel_size = 15,
                                     double sigma_ratio = 1.0,
                                     double radius_ratio = 5.0);

/// Support structure of one network layer, stacked over batch elements.
struct BatchLayer {
  PointList points;
  std::vector<int> element_lengths;
  std::vector<int> element_ids;
  NeighborhoodMatrix neighbors;  // this layer -> this layer
  NeighborhoodMatrix pools;      // next layer -> this layer (empty for last)
  std::vector<int> upsamples;    // this layer -> nearest next-layer point
};

/// Variable-size batch: elements concatenated along the point axis.
struct Batch {
  std::vector<BatchLayer> layers;
  Matrix features;                  // layer-0 input features
  std::vector<int> labels;          // layer-0 point labels (may be empty)
  std::vector<int> element_labels;  // label of the first point per element
  std::vector<std::size_t> sources;  // indices of the packed input elements

  std::size_t element_count() const { return sources.size(); }
  std::size_t point_count() const { return layers.empty() ? 0 : layers[0].points.size(); }
  const std::vector<int>& element_lengths() const { return layers.at(0).element_lengths; }
  const std::vector<int>& element_ids() const { return layers.at(0).element_ids; }
};

/// Greedily packs elements, in order, until the next one would overflow
/// `target_total_points`. Layer 0 uses each element's points as given; layer
/// j+1 is the grid subsample of layer j at layers[j+1].cell_size. All
/// neighborhoods are computed per element and then stacked.
Batch assemble_batch(std::span<const PointCloud> elements,
                     std::span<const LayerConfig> layers,
                     std::size_t target_total_points);

}  // namespace kpconv
