#include "kpconv/kernel_points.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>

#include <Eigen/Geometry>
#include <json.hpp>

#include "kpconv/errors.hpp"

namespace kpconv {

double LayerKernel::extent() const {
  double r = 0.0;
  for (const auto& p : points) r = std::max(r, p.norm());
  return r + sigma;
}

double total_energy(std::span<const Point3> points) {
  double e = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    e += points[k].squaredNorm();
    for (std::size_t l = 0; l < points.size(); ++l) {
      if (l == k) continue;
      const double d = (points[l] - points[k]).norm();
      if (d == 0.0) throw InfiniteEnergyError("total_energy: coincident kernel points");
      e += 1.0 / d;
    }
  }
  return e;
}

PointList energy_gradient(std::span<const Point3> points) {
  PointList g(points.size(), Point3::Zero());
  for (std::size_t k = 0; k < points.size(); ++k) {
    g[k] += 2.0 * points[k];
    for (std::size_t l = k + 1; l < points.size(); ++l) {
      const Point3 diff = points[k] - points[l];
      const double d = diff.norm();
      if (d == 0.0) throw InfiniteEnergyError("energy_gradient: coincident kernel points");
      // 1/d appears twice in the sum, once per ordering
      const Point3 f = (2.0 / (d * d * d)) * diff;
      g[k] -= f;
      g[l] += f;
    }
  }
  return g;
}

namespace {

PointList random_start(int kernel_size, bool fixed_center, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  PointList pts;
  if (fixed_center) pts.push_back(Point3::Zero());
  while (static_cast<int>(pts.size()) < kernel_size) {
    const Point3 p(uni(rng), uni(rng), uni(rng));
    if (p.squaredNorm() > 1.0) continue;
    const bool separated = std::all_of(pts.begin(), pts.end(), [&](const Point3& q) {
      return (p - q).norm() >= 1e-3;
    });
    if (separated) pts.push_back(p);
  }
  return pts;
}

double free_gradient_norm(const PointList& g, bool fixed_center) {
  double s = 0.0;
  for (std::size_t k = fixed_center ? 1 : 0; k < g.size(); ++k) s += g[k].squaredNorm();
  return std::sqrt(s);
}

}  // namespace

KernelDisposition optimize_disposition(int kernel_size, bool fixed_center, std::uint64_t seed,
                                       const DescentOptions& options) {
  if (kernel_size < 1) throw ValidationError("optimize_disposition: K must be >= 1");
  std::mt19937_64 rng(seed);
  KernelDisposition out;
  out.has_fixed_center = fixed_center;
  out.seed = seed;
  out.points = random_start(kernel_size, fixed_center, rng);

  const std::size_t first_free = fixed_center ? 1 : 0;
  double energy = total_energy(out.points);
  PointList grad = energy_gradient(out.points);
  double gnorm = free_gradient_norm(grad, fixed_center);
  double step = options.initial_step;
  int it = 0;
  for (; it < options.max_iterations && gnorm >= options.gradient_tolerance; ++it) {
    PointList trial = out.points;
    double trial_energy = std::numeric_limits<double>::infinity();
    while (step > 1e-16) {
      for (std::size_t k = first_free; k < trial.size(); ++k) trial[k] = out.points[k] - step * grad[k];
      try {
        trial_energy = total_energy(trial);
      } catch (const InfiniteEnergyError&) {
        trial_energy = std::numeric_limits<double>::infinity();
      }
      if (trial_energy <= energy) break;
      step *= 0.5;
    }
    if (!(trial_energy <= energy)) break;  // no descent possible at float precision
    out.points = std::move(trial);
    energy = trial_energy;
    step *= options.step_growth;
    grad = energy_gradient(out.points);
    gnorm = free_gradient_norm(grad, fixed_center);
  }
  out.iterations = it;
  out.energy = energy;
  out.gradient_norm = gnorm;
  out.converged = gnorm < options.gradient_tolerance;
  return out;
}

Eigen::Matrix3d random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::Quaterniond q;
  do {
    q = Eigen::Quaterniond(n01(rng), n01(rng), n01(rng), n01(rng));
  } while (q.norm() < 1e-12);
  q.normalize();
  return q.toRotationMatrix();
}

LayerKernel prepare_layer_kernel(const KernelDisposition& disposition, double sigma,
                                 std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ValidationError("prepare_layer_kernel: sigma must be positive");
  if (disposition.points.empty()) throw EmptyInputError("prepare_layer_kernel: empty disposition");
  LayerKernel out;
  out.sigma = sigma;
  out.rotation = random_rotation(seed);
  out.points = disposition.points;

  const std::size_t first = disposition.has_fixed_center ? 1 : 0;
  if (out.points.size() > first) {
    double mean_norm = 0.0;
    for (std::size_t k = first; k < out.points.size(); ++k) mean_norm += out.points[k].norm();
    mean_norm /= static_cast<double>(out.points.size() - first);
    const double scale = 1.5 * sigma / mean_norm;
    for (std::size_t k = first; k < out.points.size(); ++k) out.points[k] *= scale;
  }
  for (auto& p : out.points) p = out.rotation * p;
  if (disposition.has_fixed_center) out.points[0].setZero();
  return out;
}

std::string SymmetryGroups::signature() const {
  std::string s;
  for (std::size_t i = 0; i < group_sizes.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(group_sizes[i]);
  }
  return s;
}

namespace {

std::span<const Point3> outer_points(std::span<const Point3> points, bool fixed_center) {
  return fixed_center && !points.empty() ? points.subspan(1) : points;
}

}  // namespace

SymmetryGroups symmetry_groups(std::span<const Point3> points, bool fixed_center, double tolerance) {
  const auto outer = outer_points(points, fixed_center);
  SymmetryGroups best;
  if (outer.empty()) return best;
  double radius = 0.0;
  for (const auto& p : outer) radius += p.norm();
  radius /= static_cast<double>(outer.size());
  const double tol = tolerance * radius;

  std::vector<Point3> axes;
  for (const auto& p : outer) {
    if (p.norm() > tol) axes.push_back(p.normalized());
  }
  for (std::size_t a = 0; a < outer.size(); ++a) {
    for (std::size_t b = a + 1; b < outer.size(); ++b) {
      const Point3 c = outer[a].cross(outer[b]);
      if (c.norm() > tol * radius) axes.push_back(c.normalized());
    }
  }

  bool found = false;
  for (const auto& axis : axes) {
    std::vector<std::pair<double, double>> proj;  // (axial, distance to axis)
    for (const auto& p : outer) {
      const double t = p.dot(axis);
      proj.emplace_back(t, (p - t * axis).norm());
    }
    std::sort(proj.begin(), proj.end());
    SymmetryGroups cand;
    cand.axis = axis;
    std::size_t start = 0;
    for (std::size_t i = 1; i <= proj.size(); ++i) {
      if (i == proj.size() || proj[i].first - proj[i - 1].first > tol) {
        double rmin = proj[start].second, rmax = rmin;
        for (std::size_t j = start; j < i; ++j) {
          rmin = std::min(rmin, proj[j].second);
          rmax = std::max(rmax, proj[j].second);
        }
        cand.group_sizes.push_back(static_cast<int>(i - start));
        cand.plane_spread = std::max(cand.plane_spread, (proj[i - 1].first - proj[start].first) / radius);
        cand.ring_spread = std::max(cand.ring_spread, (rmax - rmin) / radius);
        start = i;
      }
    }
    const int largest = *std::max_element(cand.group_sizes.begin(), cand.group_sizes.end());
    if (!found) {
      best = cand;
      found = true;
      continue;
    }
    const int best_largest = *std::max_element(best.group_sizes.begin(), best.group_sizes.end());
    if (largest > best_largest ||
        (largest == best_largest && cand.group_sizes.size() < best.group_sizes.size())) {
      best = cand;
    }
  }
  return best;
}

double outer_distance_spread(std::span<const Point3> points, bool fixed_center) {
  const auto outer = outer_points(points, fixed_center);
  std::vector<double> d;
  for (std::size_t a = 0; a < outer.size(); ++a) {
    for (std::size_t b = a + 1; b < outer.size(); ++b) d.push_back((outer[a] - outer[b]).norm());
  }
  if (d.empty()) return 0.0;
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  double worst = 0.0;
  for (double v : d) worst = std::max(worst, std::abs(v - mean) / mean);
  return worst;
}

void write_disposition_table(std::ostream& out, const KernelDisposition& d) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : d.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

std::string disposition_sidecar_json(const KernelDisposition& d) {
  nlohmann::json j;
  j["K"] = d.size();
  j["seed"] = d.seed;
  j["fixed_center"] = d.has_fixed_center;
  j["converged"] = d.converged;
  j["iterations"] = d.iterations;
  j["energy"] = d.energy;
  j["gradient_norm"] = d.gradient_norm;
  return j.dump(2);
}

}  // namespace kpconv
