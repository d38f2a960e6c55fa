#include "kpconv/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "kpconv/errors.hpp"
#include "binary_io.hpp"

namespace kpconv {

namespace {

struct PlyProperty {
  std::string name;
  std::string type;
};

bool is_feature_name(const std::string& name, int& index) {
  if (name.size() < 3 || name.compare(0, 2, "f_") != 0) return false;
  for (std::size_t i = 2; i < name.size(); ++i) {
    if (name[i] < '0' || name[i] > '9') return false;
  }
  index = std::stoi(name.substr(2));
  return true;
}

}  // namespace

PlyData read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) {
    throw IoError("ply: missing magic line");
  }

  std::size_t vertex_count = 0;
  std::vector<PlyProperty> props;
  // elements declared before the vertex element are skipped line by line
  std::size_t lines_before = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  bool format_ok = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw IoError("ply: only ascii format is supported, got " + fmt);
      format_ok = true;
    } else if (word == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) {
        vertex_count = count;
        seen_vertex = true;
      } else if (!seen_vertex) {
        lines_before += count;
      }
    } else if (word == "property") {
      std::string type;
      ls >> type;
      if (type == "list") {
        if (in_vertex) throw IoError("ply: list properties on vertices are not supported");
        continue;
      }
      std::string name;
      ls >> name;
      if (in_vertex) props.push_back({name, type});
    } else if (word == "end_header") {
      break;
    }
  }
  if (!format_ok) throw IoError("ply: missing format line");
  if (!seen_vertex) throw IoError("ply: no vertex element");

  int ix = -1, iy = -1, iz = -1, ilabel = -1;
  std::map<int, int> feature_cols;  // feature index -> property column
  std::vector<int> extra_cols;
  for (int c = 0; c < static_cast<int>(props.size()); ++c) {
    const auto& n = props[c].name;
    int fi = 0;
    if (n == "x") ix = c;
    else if (n == "y") iy = c;
    else if (n == "z") iz = c;
    else if (n == "label") ilabel = c;
    else if (is_feature_name(n, fi)) feature_cols[fi] = c;
    else extra_cols.push_back(c);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw IoError("ply: vertex element lacks x/y/z");
  const int dim = static_cast<int>(feature_cols.size());
  if (dim > 0 && feature_cols.rbegin()->first != dim - 1) {
    throw IoError("ply: feature properties must be f_0..f_{D-1}");
  }

  for (std::size_t i = 0; i < lines_before; ++i) std::getline(in, line);

  PlyData data;
  auto& cloud = data.cloud;
  cloud.points.resize(vertex_count);
  cloud.features.resize(static_cast<Eigen::Index>(vertex_count), dim);
  if (ilabel >= 0) cloud.labels.resize(vertex_count);
  for (int c : extra_cols) data.extra.push_back({props[c].name, std::vector<double>(vertex_count)});

  std::vector<double> values(props.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!std::getline(in, line)) throw IoError("ply: truncated vertex list");
    std::istringstream ls(line);
    for (auto& value : values) {
      std::string tok;
      if (!(ls >> tok)) throw IoError("ply: short vertex row " + std::to_string(v));
      try {
        value = std::stod(tok);
      } catch (const std::exception&) {
        throw IoError("ply: bad number '" + tok + "'");
      }
    }
    cloud.points[v] = Point3(values[ix], values[iy], values[iz]);
    for (const auto& [fi, c] : feature_cols) cloud.features(static_cast<Eigen::Index>(v), fi) = values[c];
    if (ilabel >= 0) cloud.labels[v] = static_cast<int>(values[ilabel]);
    for (std::size_t e = 0; e < extra_cols.size(); ++e) data.extra[e].values[v] = values[extra_cols[e]];
  }
  cloud.validate();
  return data;
}

PlyData read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_ply(in);
}

void write_ply(std::ostream& out, const PointCloud& cloud, const std::vector<ScalarProperty>& extra) {
  cloud.validate();
  for (const auto& e : extra) {
    if (e.values.size() != cloud.size()) throw ShapeError("ply: extra property '" + e.name + "' has wrong length");
  }
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  for (int f = 0; f < cloud.feature_dim(); ++f) out << "property double f_" << f << "\n";
  if (cloud.has_labels()) out << "property int label\n";
  for (const auto& e : extra) out << "property double " << e.name << "\n";
  out << "end_header\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    out << p.x() << ' ' << p.y() << ' ' << p.z();
    for (int f = 0; f < cloud.feature_dim(); ++f) out << ' ' << cloud.features(static_cast<Eigen::Index>(i), f);
    if (cloud.has_labels()) out << ' ' << cloud.labels[i];
    for (const auto& e : extra) out << ' ' << e.values[i];
    out << '\n';
  }
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
               const std::vector<ScalarProperty>& extra) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_ply(out, cloud, extra);
}

namespace {

using namespace binary;

void put_table(std::ostream& out, const NeighborhoodMatrix& m) {
  put_u32(out, static_cast<std::uint32_t>(m.rows));
  put_u32(out, static_cast<std::uint32_t>(m.width));
  put_u32(out, static_cast<std::uint32_t>(m.support_count));
  put_f64(out, m.radius);
  for (auto v : m.indices) put_i32(out, v);
}

NeighborhoodMatrix get_table(std::istream& in) {
  NeighborhoodMatrix m;
  m.rows = static_cast<int>(get_u32(in));
  m.width = static_cast<int>(get_u32(in));
  m.support_count = static_cast<int>(get_u32(in));
  m.radius = get_f64(in);
  m.indices.resize(static_cast<std::size_t>(m.rows) * m.width);
  for (auto& v : m.indices) v = get_i32(in);
  return m;
}

bool same_table(const NeighborhoodMatrix& a, const NeighborhoodMatrix& b) {
  return a.rows == b.rows && a.width == b.width && a.support_count == b.support_count &&
         a.radius == b.radius && a.indices == b.indices;
}

}  // namespace

BatchTables BatchTables::from(const Batch& batch) {
  BatchTables t;
  for (const auto& L : batch.layers) {
    Layer out;
    out.point_count = static_cast<std::uint32_t>(L.points.size());
    out.element_lengths.assign(L.element_lengths.begin(), L.element_lengths.end());
    out.neighbors = L.neighbors;
    out.pools = L.pools;
    out.upsamples.assign(L.upsamples.begin(), L.upsamples.end());
    t.layers.push_back(std::move(out));
  }
  return t;
}

bool BatchTables::operator==(const BatchTables& o) const {
  if (layers.size() != o.layers.size()) return false;
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const auto& a = layers[j];
    const auto& b = o.layers[j];
    if (a.point_count != b.point_count || a.element_lengths != b.element_lengths ||
        !same_table(a.neighbors, b.neighbors) || !same_table(a.pools, b.pools) ||
        a.upsamples != b.upsamples) {
      return false;
    }
  }
  return true;
}

void write_batch_tables(std::ostream& out, const BatchTables& tables) {
  out.write("KPBT", 4);
  put_u32(out, kBatchTablesVersion);
  put_u32(out, static_cast<std::uint32_t>(tables.layers.size()));
  for (const auto& L : tables.layers) {
    put_u32(out, L.point_count);
    put_u32(out, static_cast<std::uint32_t>(L.element_lengths.size()));
    for (auto v : L.element_lengths) put_i32(out, v);
    put_table(out, L.neighbors);
    put_table(out, L.pools);
    put_u32(out, static_cast<std::uint32_t>(L.upsamples.size()));
    for (auto v : L.upsamples) put_i32(out, v);
  }
}

BatchTables read_batch_tables(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "KPBT", 4) != 0) {
    throw IoError("batch tables: bad magic");
  }
  const auto version = get_u32(in);
  if (version != kBatchTablesVersion) {
    throw IoError("batch tables: unsupported version " + std::to_string(version));
  }
  BatchTables t;
  t.layers.resize(get_u32(in));
  for (auto& L : t.layers) {
    L.point_count = get_u32(in);
    L.element_lengths.resize(get_u32(in));
    for (auto& v : L.element_lengths) v = get_i32(in);
    L.neighbors = get_table(in);
    L.pools = get_table(in);
    L.upsamples.resize(get_u32(in));
    for (auto& v : L.upsamples) v = get_i32(in);
  }
  return t;
}

}  // namespace kpconv
