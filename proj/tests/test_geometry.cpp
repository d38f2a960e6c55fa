#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "kpconv/errors.hpp"
#include "kpconv/geometry.hpp"
#include "oracles.hpp"

using namespace kpconv;

namespace {

PointCloud cloud_of(PointList points, int dim = 2) {
  PointCloud c;
  c.points = std::move(points);
  c.features = Matrix::Zero(static_cast<Eigen::Index>(c.points.size()), dim);
  for (Eigen::Index i = 0; i < c.features.rows(); ++i) c.features.row(i).setConstant(static_cast<double>(i));
  return c;
}

std::vector<int> row_indices(const NeighborhoodMatrix& m, int r) {
  std::vector<int> out;
  for (auto i : m.row(r)) {
    if (!m.is_shadow(i)) out.push_back(i);
  }
  return out;
}

}  // namespace

TEST_CASE("subsampling a single point returns it unchanged") {
  auto c = cloud_of({Point3(0.3, -1.7, 2.25)});
  c.features(0, 1) = 4.5;
  const auto s = grid_subsample(c, 0.7);
  REQUIRE(s.support.size() == 1);
  CHECK(s.support.points[0] == c.points[0]);
  CHECK(s.support.features == c.features);
  CHECK(s.cell_assignment == std::vector<int>{0});
}

TEST_CASE("two points in one cell collapse to their midpoint") {
  const auto s = grid_subsample(cloud_of({Point3(0, 0, 0), Point3(0.4, 0, 0)}), 1.0);
  REQUIRE(s.support.size() == 1);
  CHECK(s.support.points[0].isApprox(Point3(0.2, 0, 0)));
  CHECK(s.support.features(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("a point on a cell face belongs to the cell above it") {
  const auto s = grid_subsample(cloud_of({Point3(0.5, 0.1, 0.1), Point3(0.4, 0.1, 0.1)}), 0.5);
  CHECK(s.support.size() == 2);
  CHECK(s.cell_assignment[0] != s.cell_assignment[1]);
}

TEST_CASE("subsampling labels take the majority, ties to the smaller label") {
  auto c = cloud_of({Point3(0.1, 0.1, 0.1), Point3(0.2, 0.1, 0.1), Point3(0.3, 0.1, 0.1), Point3(0.4, 0.1, 0.1)});
  c.labels = {2, 1, 2, 1};
  CHECK(grid_subsample(c, 1.0).support.labels == std::vector<int>{1});
  c.labels = {2, 1, 2, 0};
  CHECK(grid_subsample(c, 1.0).support.labels == std::vector<int>{2});
}

TEST_CASE("grid subsampling equals the cell-bucketing oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PointCloud c;
    const int n = trial == 0 ? 1000 : 50 + static_cast<int>(rng() % 300);
    for (int i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
    c.features = oracle::random_matrix(rng, n, 3);
    c.labels.resize(n);
    for (auto& l : c.labels) l = static_cast<int>(rng() % 4);
    const double cell = trial == 0 ? 0.25 : 0.05 + 0.3 * u(rng);
    const auto got = grid_subsample(c, cell);
    const auto want = oracle::grid_subsample(c, cell);
    REQUIRE(got.support.size() == want.points.size());
    CHECK(got.support.points == want.points);
    CHECK(got.support.features == want.features);
    CHECK(got.support.labels == want.labels);
    CHECK(got.cell_assignment == want.assignment);
  }
}

TEST_CASE("every barycenter lies inside its closed cell") {
  std::mt19937_64 rng(22);
  auto c = cloud_of(oracle::random_points(rng, 2000, 3.0));
  const double cell = 0.37;
  const auto s = grid_subsample(c, cell);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& b = s.support.points[s.cell_assignment[i]];
    for (int a = 0; a < 3; ++a) {
      const double lo = std::floor(c.points[i][a] / cell) * cell;
      CHECK(b[a] >= lo);
      CHECK(b[a] <= lo + cell);
    }
  }
}

TEST_CASE("sparse points are returned one per cell") {
  PointList pts;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) pts.emplace_back(2.0 * i + 0.3, 2.0 * j + 0.7, 0.5 * i);
  }
  const auto s = grid_subsample(cloud_of(pts), 0.5);
  REQUIRE(s.support.size() == pts.size());
  std::set<std::vector<double>> a, b;
  for (const auto& p : pts) a.insert({p.x(), p.y(), p.z()});
  for (const auto& p : s.support.points) b.insert({p.x(), p.y(), p.z()});
  CHECK(a == b);
}

TEST_CASE("subsampling rejects bad input") {
  CHECK_THROWS_AS(grid_subsample(PointCloud{}, 0.1), EmptyInputError);
  CHECK_THROWS_AS(grid_subsample(cloud_of({Point3::Zero()}), 0.0), ValidationError);
  CHECK_THROWS_AS(grid_subsample(cloud_of({Point3(NAN, 0, 0)}), 0.1), ValidationError);
}

TEST_CASE("a single point is its own neighbor") {
  const PointList p{Point3(1, 2, 3)};
  const auto m = radius_neighbors(p, p, 1.0);
  CHECK(m.width == 1);
  CHECK(m.at(0, 0) == 0);
}

TEST_CASE("a support at exactly the radius is included") {
  const PointList q{Point3(0, 0, 0)};
  const PointList s{Point3(0.5, 0, 0), Point3(0.5000001, 0, 0)};
  const auto m = radius_neighbors(q, s, 0.5);
  CHECK(row_indices(m, 0) == std::vector<int>{0});
}

TEST_CASE("radius neighborhoods equal the exhaustive distance scan") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int nq = trial == 0 ? 500 : 20 + static_cast<int>(rng() % 200);
    const int ns = trial == 0 ? 500 : 20 + static_cast<int>(rng() % 200);
    const auto q = oracle::random_points(rng, nq, 1.0);
    const auto s = oracle::random_points(rng, ns, 1.0);
    const double r = trial == 0 ? 0.3 : 0.05 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng);
    const auto m = radius_neighbors(q, s, r);
    const auto want = oracle::radius_neighbors(q, s, r);
    CHECK(m.support_count == ns);
    std::size_t widest = 0;
    for (int row = 0; row < nq; ++row) {
      std::vector<int> expected;
      for (const auto& [d2, i] : want[row]) expected.push_back(i);
      CHECK(row_indices(m, row) == expected);
      widest = std::max(widest, expected.size());
      // shadow slots only at the tail
      bool seen_shadow = false;
      for (auto i : m.row(row)) {
        if (m.is_shadow(i)) seen_shadow = true;
        else CHECK_FALSE(seen_shadow);
      }
    }
    CHECK(static_cast<std::size_t>(m.width) == widest);
  }
}

TEST_CASE("a cap keeps the nearest neighbors, ties to the lower index") {
  const PointList q{Point3::Zero()};
  const PointList s{Point3(0.3, 0, 0), Point3(0.1, 0, 0), Point3(0, 0.3, 0), Point3(0, 0, 0.2)};
  const auto m = radius_neighbors(q, s, 1.0, 3);
  CHECK(row_indices(m, 0) == std::vector<int>{1, 3, 0});
}

TEST_CASE("neighborhoods are symmetric when queries are the supports") {
  std::mt19937_64 rng(24);
  const auto p = oracle::random_points(rng, 300, 1.0);
  const auto m = radius_neighbors(p, p, 0.25);
  for (int i = 0; i < m.rows; ++i) {
    for (int j : row_indices(m, i)) {
      const auto back = row_indices(m, j);
      CHECK(std::find(back.begin(), back.end(), i) != back.end());
    }
  }
}

TEST_CASE("radius search rejects a non-positive radius") {
  const PointList p{Point3::Zero()};
  CHECK_THROWS_AS(radius_neighbors(p, p, 0.0), ValidationError);
  CHECK_THROWS_AS(radius_neighbors(p, p, -1.0), ValidationError);
}

TEST_CASE("padding adds shadow slots to every row") {
  std::mt19937_64 rng(25);
  const auto p = oracle::random_points(rng, 40, 1.0);
  const auto m = radius_neighbors(p, p, 0.4);
  const auto padded = m.padded(3);
  CHECK(padded.width == m.width + 3);
  for (int r = 0; r < m.rows; ++r) {
    CHECK(row_indices(padded, r) == row_indices(m, r));
    CHECK(padded.count(r) == m.count(r));
  }
}

TEST_CASE("nearest neighbor ties go to the lower index") {
  const PointList s{Point3(1, 0, 0), Point3(-1, 0, 0), Point3(0, 3, 0)};
  const PointList q{Point3::Zero(), Point3(0, 2, 0)};
  CHECK(nearest_neighbor_indices(q, s) == std::vector<int>{0, 2});
}

TEST_CASE("nearest neighbors equal a brute-force scan") {
  std::mt19937_64 rng(26);
  const auto q = oracle::random_points(rng, 200, 1.0);
  const auto s = oracle::random_points(rng, 70, 1.0);
  const auto got = nearest_neighbor_indices(q, s);
  for (std::size_t i = 0; i < q.size(); ++i) {
    int best = 0;
    for (std::size_t j = 1; j < s.size(); ++j) {
      if ((s[j] - q[i]).squaredNorm() < (s[best] - q[i]).squaredNorm()) best = static_cast<int>(j);
    }
    CHECK(got[i] == best);
  }
}

TEST_CASE("sphere sampling") {
  std::mt19937_64 rng(27);
  SUBCASE("isolated point gives a singleton") {
    auto c = cloud_of({Point3(0, 0, 0), Point3(5, 0, 0), Point3(0, 5, 0)});
    const auto s = sample_sphere(c, Point3(5, 0, 0), 1.0);
    CHECK(s.scene_indices == std::vector<int>{1});
    CHECK(s.cloud.points[0] == Point3(5, 0, 0));
  }
  SUBCASE("a large radius returns the whole scene") {
    auto c = cloud_of(oracle::random_points(rng, 100, 1.0));
    CHECK(sample_sphere(c, Point3(0.1, 0, 0), 4.0).cloud.size() == 100);
  }
  SUBCASE("empty result is valid") {
    auto c = cloud_of({Point3(0, 0, 0)});
    CHECK(sample_sphere(c, Point3(9, 9, 9), 1.0).cloud.empty());
  }
  SUBCASE("membership equals a distance filter") {
    for (int trial = 0; trial < 20; ++trial) {
      auto c = cloud_of(oracle::random_points(rng, 300, 2.0));
      c.labels.assign(300, 0);
      for (auto& l : c.labels) l = static_cast<int>(rng() % 5);
      const Point3 center = oracle::random_points(rng, 1, 2.0)[0];
      const double r = 0.2 + (rng() % 100) / 50.0;
      const auto s = sample_sphere(c, center, r);
      std::vector<int> want;
      for (std::size_t i = 0; i < c.size(); ++i) {
        if ((c.points[i] - center).norm() <= r) want.push_back(static_cast<int>(i));
      }
      CHECK(s.scene_indices == want);
      for (std::size_t k = 0; k < want.size(); ++k) {
        CHECK(s.cloud.points[k] == c.points[want[k]]);
        CHECK(s.cloud.labels[k] == c.labels[want[k]]);
        CHECK(s.cloud.features.row(static_cast<Eigen::Index>(k)) == c.features.row(want[k]));
      }
    }
  }
  CHECK_THROWS_AS(sample_sphere(cloud_of({Point3::Zero()}), Point3::Zero(), 0.0), ValidationError);
}

TEST_CASE("layer chain doubles the cell size and derives radii") {
  const std::vector<int> widths{16, 32, 64, 128, 256};
  const bool deformable[] = {false, false, true, true, true};
  const auto layers = layer_chain(0.04, widths, deformable, 15, 1.0, 5.0);
  REQUIRE(layers.size() == 5);
  for (std::size_t j = 0; j < layers.size(); ++j) {
    if (j > 0) CHECK(layers[j].cell_size == 2.0 * layers[j - 1].cell_size);
    CHECK(layers[j].sigma == doctest::Approx(layers[j].cell_size));
    if (layers[j].deformable) CHECK(layers[j].radius == doctest::Approx(5.0 * layers[j].cell_size));
    else CHECK(layers[j].radius == doctest::Approx(2.5 * layers[j].sigma));
    CHECK(layers[j].width == widths[j]);
  }
}

TEST_CASE("batch packing is greedy in the given order") {
  std::mt19937_64 rng(28);
  const std::vector<int> widths{4, 8};
  const bool deformable[] = {false, false};
  const auto layers = layer_chain(0.1, widths, deformable);
  SUBCASE("single element under budget") {
    const std::vector<PointCloud> e{cloud_of(oracle::random_points(rng, 100, 1.0))};
    const auto b = assemble_batch(e, layers, 1000);
    CHECK(b.element_count() == 1);
    CHECK(b.point_count() == 100);
  }
  SUBCASE("third element deferred") {
    std::vector<PointCloud> e;
    for (int i = 0; i < 3; ++i) e.push_back(cloud_of(oracle::random_points(rng, 400, 1.0)));
    const auto b = assemble_batch(e, layers, 1000);
    CHECK(b.element_count() == 2);
    CHECK(b.element_lengths() == std::vector<int>{400, 400});
  }
  SUBCASE("oversized first element") {
    const std::vector<PointCloud> e{cloud_of(oracle::random_points(rng, 100, 1.0))};
    CHECK_THROWS_AS(assemble_batch(e, layers, 99), OversizedElementError);
  }
}

TEST_CASE("no neighborhood row crosses an element boundary") {
  std::mt19937_64 rng(29);
  const std::vector<int> widths{4, 8, 8};
  const bool deformable[] = {false, false, false};
  const auto layers = layer_chain(0.1, widths, deformable);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<PointCloud> e;
    // overlapping elements, so any leak would show up
    for (int i = 0; i < 4; ++i) e.push_back(cloud_of(oracle::random_points(rng, 50 + static_cast<int>(rng() % 100), 0.6)));
    const auto b = assemble_batch(e, layers, 10000);
    for (std::size_t j = 0; j < b.layers.size(); ++j) {
      const auto& L = b.layers[j];
      int total = 0;
      for (int n : L.element_lengths) total += n;
      CHECK(static_cast<std::size_t>(total) == L.points.size());
      for (int r = 0; r < L.neighbors.rows; ++r) {
        for (int i : row_indices(L.neighbors, r)) CHECK(L.element_ids[i] == L.element_ids[r]);
      }
      if (j + 1 < b.layers.size()) {
        const auto& next = b.layers[j + 1];
        for (int r = 0; r < L.pools.rows; ++r) {
          for (int i : row_indices(L.pools, r)) CHECK(L.element_ids[i] == next.element_ids[r]);
        }
        for (std::size_t p = 0; p < L.upsamples.size(); ++p) {
          CHECK(next.element_ids[L.upsamples[p]] == L.element_ids[p]);
        }
      }
    }
  }
}

TEST_CASE("translating every element translates the batch and keeps its tables") {
  std::mt19937_64 rng(30);
  const std::vector<int> widths{4, 8, 8};
  const bool deformable[] = {false, false, true};
  const auto layers = layer_chain(0.125, widths, deformable);
  std::vector<PointCloud> e, moved;
  const Point3 t(2.0, -3.0, 1.0);  // whole cells, exact on the dyadic lattice
  for (int i = 0; i < 3; ++i) {
    e.push_back(cloud_of(oracle::dyadic_points(rng, 80, 0.75)));
    moved.push_back(e.back());
    for (auto& p : moved.back().points) p += t;
  }
  const auto a = assemble_batch(e, layers, 1000);
  const auto b = assemble_batch(moved, layers, 1000);
  for (std::size_t j = 0; j < a.layers.size(); ++j) {
    REQUIRE(a.layers[j].points.size() == b.layers[j].points.size());
    for (std::size_t p = 0; p < a.layers[j].points.size(); ++p) {
      // barycenters divide by the cell population, so only layer 0 is exact
      if (j == 0) CHECK((a.layers[j].points[p] + t) == b.layers[j].points[p]);
      else CHECK(((a.layers[j].points[p] + t) - b.layers[j].points[p]).norm() < 1e-12);
    }
    CHECK(a.layers[j].neighbors.indices == b.layers[j].neighbors.indices);
    CHECK(a.layers[j].pools.indices == b.layers[j].pools.indices);
    CHECK(a.layers[j].upsamples == b.layers[j].upsamples);
  }
}

TEST_CASE("point cloud validation") {
  PointCloud c = cloud_of({Point3::Zero(), Point3::Ones()});
  CHECK_NOTHROW(c.validate());
  c.labels = {1};
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.labels.clear();
  c.features.resize(1, 2);
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
