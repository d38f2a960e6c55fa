#include <doctest.h>

#include <Eigen/LU>
#include <json.hpp>

#include <algorithm>
#include <sstream>

#include "kpconv/errors.hpp"
#include "kpconv/kernel_points.hpp"
#include "oracles.hpp"

using namespace kpconv;

namespace {

double mean_outer_norm(const PointList& p, bool fixed_center) {
  double sum = 0.0;
  for (std::size_t k = fixed_center ? 1 : 0; k < p.size(); ++k) sum += p[k].norm();
  return sum / static_cast<double>(p.size() - (fixed_center ? 1 : 0));
}

std::vector<double> sorted_distances(const PointList& p) {
  std::vector<double> d;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = i + 1; j < p.size(); ++j) d.push_back((p[i] - p[j]).norm());
  }
  std::sort(d.begin(), d.end());
  return d;
}

}  // namespace

TEST_CASE("energy of two points at +-0.5 on an axis is 2.5") {
  const PointList p{Point3(0.5, 0, 0), Point3(-0.5, 0, 0)};
  CHECK(total_energy(p) == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("energy of a single point at the origin is 0") { CHECK(total_energy(PointList{Point3::Zero()}) == 0.0); }

TEST_CASE("coincident points have infinite energy") {
  CHECK_THROWS_AS(total_energy(PointList{Point3(0.1, 0, 0), Point3(0.1, 0, 0)}), InfiniteEnergyError);
}

TEST_CASE("energy is invariant under rotation about the origin") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = oracle::random_points(rng, 9, 1.0);
    const Eigen::Matrix3d R = random_rotation(rng());
    PointList q;
    for (const auto& x : p) q.push_back(R * x);
    CHECK(total_energy(q) == doctest::Approx(total_energy(p)).epsilon(1e-12));
  }
}

TEST_CASE("energy gradient matches central differences") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = oracle::random_points(rng, 6, 1.0);
    const auto g = energy_gradient(p);
    Matrix x(6, 3), analytic(6, 3);
    for (int k = 0; k < 6; ++k) {
      x.row(k) = p[k].transpose();
      analytic.row(k) = g[k].transpose();
    }
    auto f = [&] {
      PointList q(6);
      for (int k = 0; k < 6; ++k) q[k] = x.row(k).transpose();
      return total_energy(q);
    };
    CHECK(oracle::check_gradient(x, analytic, f, 0, rng).max_error < 1e-6);
  }
}

TEST_CASE("random rotations are proper and orthonormal") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Eigen::Matrix3d R = random_rotation(s);
    CHECK((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(random_rotation(5) == random_rotation(5));
}

TEST_CASE("K = 1 with fixed center is the origin") {
  const auto d = optimize_disposition(1, true, 0);
  REQUIRE(d.size() == 1);
  CHECK(d.points[0] == Point3::Zero());
  CHECK(d.converged);
}

TEST_CASE("K = 5 with fixed center gives a regular tetrahedron") {
  const auto d = optimize_disposition(5, true, 3);
  CHECK(d.converged);
  CHECK(d.points[0] == Point3::Zero());
  CHECK(outer_distance_spread(d.points, true) < 1e-3);
}

TEST_CASE("K = 7 with fixed center gives an octahedron, groups 1-4-1") {
  const auto d = optimize_disposition(7, true, 4);
  CHECK(d.converged);
  const auto g = symmetry_groups(d.points, true);
  CHECK(g.signature() == "1-4-1");
  CHECK(g.plane_spread < 1e-3);
  CHECK(g.ring_spread < 1e-3);
}

TEST_CASE("the center point never moves") {
  for (int K : {3, 8, 11}) {
    const auto d = optimize_disposition(K, true, 9);
    CHECK(d.points[0] == Point3::Zero());
    CHECK(std::isfinite(d.energy));
  }
}

TEST_CASE("longer descent never ends at a higher energy") {
  double previous = INFINITY;
  for (int iterations : {5, 20, 80, 320}) {
    DescentOptions opts;
    opts.max_iterations = iterations;
    const auto d = optimize_disposition(9, true, 12, opts);
    CHECK(d.energy <= previous);
    CHECK(d.energy == doctest::Approx(total_energy(d.points)).epsilon(1e-14));
    previous = d.energy;
  }
}

TEST_CASE("an iteration cap reports non-convergence") {
  DescentOptions opts;
  opts.max_iterations = 3;
  const auto d = optimize_disposition(15, true, 0, opts);
  CHECK_FALSE(d.converged);
  CHECK(d.iterations == 3);
}

TEST_CASE("layer kernels are rescaled to a mean outer radius of 1.5 sigma") {
  auto d = optimize_disposition(7, true, 1);
  const double s = 1.0 / mean_outer_norm(d.points, true);
  for (auto& p : d.points) p *= s;  // outer mean norm 1
  const auto k = prepare_layer_kernel(d, 0.1, 2);
  CHECK(mean_outer_norm(k.points, true) == doctest::Approx(0.15).epsilon(1e-6));
  CHECK(k.points[0] == Point3::Zero());
  CHECK(k.sigma == 0.1);
  CHECK((k.rotation.transpose() * k.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-12);
  CHECK(k.rotation.determinant() == doctest::Approx(1.0));
}

TEST_CASE("rescaling and rotation scale the distance multiset exactly") {
  const auto d = optimize_disposition(13, true, 2);
  const auto k = prepare_layer_kernel(d, 0.3, 5);
  const double scale = 0.45 / mean_outer_norm(d.points, true);
  const auto a = sorted_distances(d.points);
  const auto b = sorted_distances(k.points);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(scale * a[i]).epsilon(1e-12));
}

TEST_CASE("layer kernels are bit-identical for a fixed seed") {
  const auto d = optimize_disposition(15, true, 0);
  const auto a = prepare_layer_kernel(d, 0.2, 77);
  const auto b = prepare_layer_kernel(d, 0.2, 77);
  CHECK(a.points == b.points);
  CHECK(a.rotation == b.rotation);
  CHECK(prepare_layer_kernel(d, 0.2, 78).rotation != a.rotation);
}

TEST_CASE("a single-point kernel skips the rescale") {
  const auto k = prepare_layer_kernel(optimize_disposition(1, true, 0), 0.5, 3);
  CHECK(k.points == PointList{Point3::Zero()});
  CHECK(k.extent() == doctest::Approx(0.5));
}

TEST_CASE("kernel extent is the farthest point plus sigma") {
  const auto k = oracle::test_kernel(15, 0.2);
  double far = 0.0;
  for (const auto& p : k.points) far = std::max(far, p.norm());
  CHECK(k.extent() == doctest::Approx(far + 0.2));
}

TEST_CASE("disposition table and sidecar") {
  const auto d = optimize_disposition(5, true, 8);
  std::ostringstream table;
  write_disposition_table(table, d);
  std::istringstream rows(table.str());
  for (const auto& p : d.points) {
    double x, y, z;
    rows >> x >> y >> z;
    CHECK(Point3(x, y, z) == p);
  }
  const auto j = nlohmann::json::parse(disposition_sidecar_json(d));
  CHECK(j["K"] == 5);
  CHECK(j["seed"] == 8);
  CHECK(j["fixed_center"] == true);
  CHECK(j["converged"] == d.converged);
  CHECK(j["energy"].get<double>() == d.energy);
}
