#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "kpconv/geometry.hpp"

namespace kpconv {

/// Extra per-vertex scalar column written after the cloud's own properties.
struct ScalarProperty {
  std::string name;
  std::vector<double> values;
};

/// ASCII PLY with vertex properties x, y, z, optional f_0..f_{D-1} and an
/// optional integer `label`. Other vertex properties are kept in `extra`.
struct PlyData {
  PointCloud cloud;
  std::vector<ScalarProperty> extra;
};

PlyData read_ply(std::istream& in);
PlyData read_ply(const std::filesystem::path& path);

void write_ply(std::ostream& out, const PointCloud& cloud,
               const std::vector<ScalarProperty>& extra = {});
void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
               const std::vector<ScalarProperty>& extra = {});

// Batch index tables, little-endian:
//   char[4]  "KPBT"
//   u32      format version (1)
//   u32      layer count L
//   per layer:
//     u32 point count, u32 element count, i32[element count] lengths
//     table neighbors, table pools, u32 upsample count, i32[count] upsamples
//   where table = u32 rows, u32 width, u32 support count, f64 radius,
//                 i32[rows * width] indices
inline constexpr std::uint32_t kBatchTablesVersion = 1;

/// Index-table view of a batch, as stored in the fixture dump.
struct BatchTables {
  struct Layer {
    std::uint32_t point_count = 0;
    std::vector<std::int32_t> element_lengths;
    NeighborhoodMatrix neighbors;
    NeighborhoodMatrix pools;
    std::vector<std::int32_t> upsamples;
  };
  std::vector<Layer> layers;

  static BatchTables from(const Batch& batch);
  bool operator==(const BatchTables&) const;
};

void write_batch_tables(std::ostream& out, const BatchTables& tables);
BatchTables read_batch_tables(std::istream& in);

}  // namespace kpconv
