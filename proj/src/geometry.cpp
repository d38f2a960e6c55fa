#include "kpconv/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>

#include "kpconv/errors.hpp"

namespace kpconv {

namespace {

using CellKey = std::array<std::int64_t, 3>;

struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (auto v : k) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

CellKey cell_of(const Point3& p, double cell_size) {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell_size)),
          static_cast<std::int64_t>(std::floor(p.y() / cell_size)),
          static_cast<std::int64_t>(std::floor(p.z() / cell_size))};
}

void check_finite(std::span<const Point3> points, const char* what) {
  for (const auto& p : points) {
    if (!p.allFinite()) {
      throw ValidationError(std::string(what) + ": non-finite coordinate");
    }
  }
}

/// Uniform hash of point indices; the cell edge is slightly larger than the
/// search radius so a one-cell ring always covers the closed ball.
class SpatialHash {
 public:
  SpatialHash(std::span<const Point3> points, double radius)
      : cell_(radius * (1.0 + 1e-9)) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      cells_[cell_of(points[i], cell_)].push_back(static_cast<int>(i));
    }
  }

  template <typename Fn>
  void for_each_candidate(const Point3& q, Fn&& fn) const {
    const CellKey c = cell_of(q, cell_);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == cells_.end()) continue;
          for (int idx : it->second) fn(idx);
        }
      }
    }
  }

 private:
  double cell_;
  std::unordered_map<CellKey, std::vector<int>, CellKeyHash> cells_;
};

}  // namespace

void PointCloud::validate() const {
  if (features.rows() != static_cast<Eigen::Index>(points.size())) {
    throw ValidationError("point cloud: " + std::to_string(points.size()) + " points but " +
                          std::to_string(features.rows()) + " feature rows");
  }
  if (!labels.empty() && labels.size() != points.size()) {
    throw ValidationError("point cloud: label count does not match point count");
  }
  check_finite(points, "point cloud");
}

PointCloud PointCloud::select(std::span<const int> indices) const {
  PointCloud out;
  out.points.reserve(indices.size());
  out.features.resize(static_cast<Eigen::Index>(indices.size()), features.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    out.points.push_back(points[indices[r]]);
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(indices[r]);
  }
  if (has_labels()) {
    out.labels.reserve(indices.size());
    for (int i : indices) out.labels.push_back(labels[i]);
  }
  return out;
}

int NeighborhoodMatrix::count(int r) const {
  int n = 0;
  for (auto idx : row(r)) {
    if (is_shadow(idx)) break;
    ++n;
  }
  return n;
}

NeighborhoodMatrix NeighborhoodMatrix::padded(int extra) const {
  NeighborhoodMatrix out = *this;
  out.width = width + extra;
  out.indices.assign(static_cast<std::size_t>(rows) * out.width, support_count);
  for (int r = 0; r < rows; ++r) {
    std::copy(row(r).begin(), row(r).end(),
              out.indices.begin() + static_cast<std::ptrdiff_t>(r) * out.width);
  }
  return out;
}

SubsampleResult grid_subsample(const PointCloud& cloud, double cell_size) {
  if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
    throw ValidationError("grid_subsample: cell_size must be positive");
  }
  if (cloud.empty()) throw EmptyInputError("grid_subsample: empty cloud");
  cloud.validate();

  struct Cell {
    Point3 sum = Point3::Zero();
    std::vector<int> members;
  };
  std::map<CellKey, Cell> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Cell& c = cells[cell_of(cloud.points[i], cell_size)];
    c.sum += cloud.points[i];
    c.members.push_back(static_cast<int>(i));
  }

  SubsampleResult result;
  const auto n_cells = static_cast<Eigen::Index>(cells.size());
  result.support.points.reserve(cells.size());
  result.support.features = Matrix::Zero(n_cells, cloud.features.cols());
  result.cell_assignment.assign(cloud.size(), -1);
  if (cloud.has_labels()) result.support.labels.reserve(cells.size());

  Eigen::Index s = 0;
  for (const auto& [key, cell] : cells) {
    const double n = static_cast<double>(cell.members.size());
    Point3 center = cell.sum / n;
    // Rounding may push the mean an ulp outside the closed cube.
    for (int a = 0; a < 3; ++a) {
      const double lo = static_cast<double>(key[a]) * cell_size;
      const double hi = static_cast<double>(key[a] + 1) * cell_size;
      center[a] = std::clamp(center[a], lo, hi);
    }
    result.support.points.push_back(center);

    for (int i : cell.members) {
      result.support.features.row(s) += cloud.features.row(i);
      result.cell_assignment[i] = static_cast<int>(s);
    }
    result.support.features.row(s) /= n;

    if (cloud.has_labels()) {
      std::map<int, int> votes;
      for (int i : cell.members) ++votes[cloud.labels[i]];
      auto best = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
        return a.second < b.second;
      });
      result.support.labels.push_back(best->first);
    }
    ++s;
  }
  return result;
}

NeighborhoodMatrix radius_neighbors(std::span<const Point3> queries,
                                    std::span<const Point3> supports, double radius,
                                    std::optional<int> cap) {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw ValidationError("radius_neighbors: radius must be positive");
  }
  if (cap && *cap < 0) throw ValidationError("radius_neighbors: negative cap");
  check_finite(queries, "radius_neighbors queries");
  check_finite(supports, "radius_neighbors supports");

  const SpatialHash hash(supports, radius);
  const double r2 = radius * radius;

  std::vector<std::vector<std::pair<double, int>>> rows(queries.size());
  int width = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto& row = rows[q];
    hash.for_each_candidate(queries[q], [&](int idx) {
      const double d2 = (supports[idx] - queries[q]).squaredNorm();
      if (d2 <= r2) row.emplace_back(d2, idx);
    });
    std::sort(row.begin(), row.end());
    if (cap && static_cast<int>(row.size()) > *cap) row.resize(*cap);
    width = std::max(width, static_cast<int>(row.size()));
  }

  NeighborhoodMatrix out;
  out.rows = static_cast<int>(queries.size());
  out.width = width;
  out.support_count = static_cast<int>(supports.size());
  out.radius = radius;
  out.indices.assign(static_cast<std::size_t>(out.rows) * width, out.support_count);
  for (std::size_t q = 0; q < rows.size(); ++q) {
    for (std::size_t j = 0; j < rows[q].size(); ++j) {
      out.indices[q * width + j] = rows[q][j].second;
    }
  }
  return out;
}

std::vector<int> nearest_neighbor_indices(std::span<const Point3> queries,
                                          std::span<const Point3> supports) {
  if (supports.empty()) throw EmptyInputError("nearest_neighbor_indices: no supports");
  std::vector<int> out(queries.size(), 0);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    double best = (supports[0] - queries[q]).squaredNorm();
    for (std::size_t s = 1; s < supports.size(); ++s) {
      const double d2 = (supports[s] - queries[q]).squaredNorm();
      if (d2 < best) {
        best = d2;
        out[q] = static_cast<int>(s);
      }
    }
  }
  return out;
}

SphereSample sample_sphere(const PointCloud& scene, const Point3& center, double radius) {
  if (!(radius > 0.0)) throw ValidationError("sample_sphere: radius must be positive");
  const double r2 = radius * radius;
  SphereSample out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if ((scene.points[i] - center).squaredNorm() <= r2) {
      out.scene_indices.push_back(static_cast<int>(i));
    }
  }
  out.cloud = scene.select(out.scene_indices);
  return out;
}

LayerConfig LayerConfig::make(double cell_size, int width, bool deformable, int kernel_size,
                              double sigma_ratio, double radius_ratio) {
  if (!(cell_size > 0.0)) throw ConfigError("layer config: cell size must be positive");
  LayerConfig c;
  c.cell_size = cell_size;
  c.sigma = sigma_ratio * cell_size;
  c.radius = deformable ? radius_ratio * cell_size : 2.5 * c.sigma;
  c.kernel_size = kernel_size;
  c.deformable = deformable;
  c.width = width;
  return c;
}

std::vector<LayerConfig> layer_chain(double first_cell_size, std::span<const int> widths,
                                     std::span<const bool> deformable, int kernel_size,
                                     double sigma_ratio, double radius_ratio) {
  if (!deformable.empty() && deformable.size() != widths.size()) {
    throw ConfigError("layer chain: deformable flags do not match layer count");
  }
  std::vector<LayerConfig> out;
  double dl = first_cell_size;
  for (std::size_t j = 0; j < widths.size(); ++j) {
    const bool deform = !deformable.empty() && deformable[j];
    out.push_back(LayerConfig::make(dl, widths[j], deform, kernel_size, sigma_ratio, radius_ratio));
    dl *= 2.0;
  }
  return out;
}

namespace {

NeighborhoodMatrix stack_neighborhoods(const std::vector<NeighborhoodMatrix>& parts,
                                       const std::vector<int>& support_offsets,
                                       int total_supports, double radius) {
  NeighborhoodMatrix out;
  out.radius = radius;
  out.support_count = total_supports;
  for (const auto& p : parts) {
    out.rows += p.rows;
    out.width = std::max(out.width, p.width);
  }
  out.indices.assign(static_cast<std::size_t>(out.rows) * out.width, total_supports);
  std::size_t row = 0;
  for (std::size_t e = 0; e < parts.size(); ++e) {
    const auto& p = parts[e];
    for (int r = 0; r < p.rows; ++r, ++row) {
      for (int j = 0; j < p.width; ++j) {
        const auto idx = p.at(r, j);
        if (p.is_shadow(idx)) break;
        out.indices[row * out.width + j] = idx + support_offsets[e];
      }
    }
  }
  return out;
}

}  // namespace

Batch assemble_batch(std::span<const PointCloud> elements, std::span<const LayerConfig> layers,
                     std::size_t target_total_points) {
  if (elements.empty()) throw EmptyInputError("assemble_batch: no elements");
  if (layers.empty()) throw ConfigError("assemble_batch: no layer configs");
  if (elements.front().size() > target_total_points) {
    throw OversizedElementError("assemble_batch: first element has " +
                                std::to_string(elements.front().size()) +
                                " points, budget is " + std::to_string(target_total_points));
  }

  Batch batch;
  std::size_t total = 0;
  for (std::size_t e = 0; e < elements.size(); ++e) {
    if (total + elements[e].size() > target_total_points) break;
    if (elements[e].empty()) throw EmptyInputError("assemble_batch: empty element");
    elements[e].validate();
    total += elements[e].size();
    batch.sources.push_back(e);
  }

  const std::size_t n_layers = layers.size();
  const std::size_t n_elems = batch.sources.size();
  // per element, per layer support clouds
  std::vector<std::vector<PointList>> pts(n_elems, std::vector<PointList>(n_layers));
  const int feat_dim = elements[batch.sources[0]].feature_dim();
  for (std::size_t e = 0; e < n_elems; ++e) {
    const PointCloud& el = elements[batch.sources[e]];
    if (el.feature_dim() != feat_dim) throw ShapeError("assemble_batch: feature widths differ");
    pts[e][0] = el.points;
    PointCloud level;
    level.points = el.points;
    level.features = Matrix::Zero(static_cast<Eigen::Index>(el.size()), 0);
    for (std::size_t j = 1; j < n_layers; ++j) {
      level = grid_subsample(level, layers[j].cell_size).support;
      pts[e][j] = level.points;
    }
  }

  batch.layers.resize(n_layers);
  for (std::size_t j = 0; j < n_layers; ++j) {
    BatchLayer& L = batch.layers[j];
    std::vector<int> offsets;
    int offset = 0;
    for (std::size_t e = 0; e < n_elems; ++e) {
      offsets.push_back(offset);
      const int n = static_cast<int>(pts[e][j].size());
      L.element_lengths.push_back(n);
      L.points.insert(L.points.end(), pts[e][j].begin(), pts[e][j].end());
      L.element_ids.insert(L.element_ids.end(), n, static_cast<int>(e));
      offset += n;
    }

    std::vector<NeighborhoodMatrix> conv_parts;
    std::vector<NeighborhoodMatrix> pool_parts;
    for (std::size_t e = 0; e < n_elems; ++e) {
      conv_parts.push_back(radius_neighbors(pts[e][j], pts[e][j], layers[j].radius));
      if (j + 1 < n_layers) {
        pool_parts.push_back(radius_neighbors(pts[e][j + 1], pts[e][j], layers[j].radius));
        const auto up = nearest_neighbor_indices(pts[e][j], pts[e][j + 1]);
        int next_offset = 0;
        for (std::size_t f = 0; f < e; ++f) next_offset += static_cast<int>(pts[f][j + 1].size());
        for (int u : up) L.upsamples.push_back(u + next_offset);
      }
    }
    L.neighbors = stack_neighborhoods(conv_parts, offsets, offset, layers[j].radius);
    if (j + 1 < n_layers) {
      L.pools = stack_neighborhoods(pool_parts, offsets, offset, layers[j].radius);
    } else {
      L.pools.support_count = offset;
      L.pools.radius = layers[j].radius;
    }
  }

  batch.features.resize(static_cast<Eigen::Index>(total), feat_dim);
  Eigen::Index row = 0;
  const bool labeled = elements[batch.sources[0]].has_labels();
  for (std::size_t src : batch.sources) {
    const PointCloud& el = elements[src];
    batch.features.middleRows(row, static_cast<Eigen::Index>(el.size())) = el.features;
    row += static_cast<Eigen::Index>(el.size());
    if (labeled) {
      if (!el.has_labels()) throw ValidationError("assemble_batch: mixed labeled/unlabeled elements");
      batch.labels.insert(batch.labels.end(), el.labels.begin(), el.labels.end());
      batch.element_labels.push_back(el.labels.front());
    }
  }
  return batch;
}

}  // namespace kpconv
