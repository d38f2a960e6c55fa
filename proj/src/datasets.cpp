#include "kpconv/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/Geometry>

#include "kpconv/errors.hpp"

namespace kpconv {

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Uniform displacement inside a ball of radius r.
Point3 ball_sample(Rng& rng, double r) {
  if (r <= 0.0) return Point3::Zero();
  while (true) {
    const Point3 p(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    if (p.squaredNorm() <= 1.0) return r * p;
  }
}

Point3 sphere_surface(Rng& rng) {
  std::normal_distribution<double> n01;
  Point3 p;
  do {
    p = Point3(n01(rng), n01(rng), n01(rng));
  } while (p.norm() < 1e-12);
  return p.normalized();
}

Point3 cube_surface(Rng& rng) {
  const int face = std::uniform_int_distribution<int>(0, 5)(rng);
  Point3 p(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
  p[face / 2] = face % 2 ? 1.0 : -1.0;
  return p;
}

Point3 cylinder_surface(Rng& rng) {
  // side area 4 pi, caps 2 pi in total
  const double u = uniform(rng, 0.0, 6.0 * std::numbers::pi);
  const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (u < 4.0 * std::numbers::pi) return {std::cos(a), std::sin(a), uniform(rng, -1, 1)};
  const double r = std::sqrt(uniform(rng, 0.0, 1.0));
  return {r * std::cos(a), r * std::sin(a), u < 5.0 * std::numbers::pi ? 1.0 : -1.0};
}

Eigen::Matrix3d vertical_rotation(double angle) {
  return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

struct SceneBuilder {
  PointList points;
  std::vector<int> labels;
  std::vector<Eigen::Vector3d> colors;
  double density;
  Rng& rng;

  // Uniform samples on the rectangle origin + s*u + t*v, s,t in [0,1].
  template <typename Keep>
  void rectangle(const Point3& origin, const Point3& u, const Point3& v, int label,
                 const Eigen::Vector3d& color, Keep&& keep) {
    const double area = u.cross(v).norm();
    const int n = std::max(1, static_cast<int>(std::lround(area * density)));
    for (int i = 0; i < n; ++i) {
      const Point3 p = origin + uniform(rng, 0, 1) * u + uniform(rng, 0, 1) * v;
      if (!keep(p)) continue;
      points.push_back(p);
      labels.push_back(label);
      Eigen::Vector3d c = color;
      for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k] + uniform(rng, -0.05, 0.05), 0.0, 1.0);
      colors.push_back(c);
    }
  }

  void rectangle(const Point3& origin, const Point3& u, const Point3& v, int label,
                 const Eigen::Vector3d& color) {
    rectangle(origin, u, v, label, color, [](const Point3&) { return true; });
  }

  PointCloud finish() {
    PointCloud c;
    c.points = std::move(points);
    c.labels = std::move(labels);
    c.features.resize(static_cast<Eigen::Index>(c.points.size()), 3);
    for (std::size_t i = 0; i < colors.size(); ++i) c.features.row(static_cast<Eigen::Index>(i)) = colors[i].transpose();
    return c;
  }
};

PointCloud make_shape(int label, const SyntheticOptions& opt, Rng& rng) {
  const Eigen::Matrix3d R = vertical_rotation(uniform(rng, 0.0, 2.0 * std::numbers::pi));
  const Eigen::Vector3d base_color(uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1));
  PointCloud c;
  c.points.reserve(opt.points_per_cloud);
  c.features.resize(opt.points_per_cloud, 3);
  for (int i = 0; i < opt.points_per_cloud; ++i) {
    Point3 p = label == 0 ? sphere_surface(rng) : label == 1 ? cube_surface(rng) : cylinder_surface(rng);
    c.points.push_back(R * p + ball_sample(rng, opt.jitter));
    c.features.row(i) = base_color.transpose();
  }
  c.labels.assign(opt.points_per_cloud, label);
  return c;
}

PointCloud make_planes(const SyntheticOptions& opt, Rng& rng) {
  SceneBuilder b{{}, {}, {}, opt.density, rng};
  const double sx = uniform(rng, 1.5, 2.5);
  const double sy = uniform(rng, 1.5, 2.5);
  const double h = uniform(rng, 0.6, 1.0);
  b.rectangle({0, 0, 0}, {sx, 0, 0}, {0, sy, 0}, 0, {0.6, 0.6, 0.6});
  const int walls = std::uniform_int_distribution<int>(0, 2)(rng);
  if (walls >= 1) b.rectangle({0, 0, 0}, {sx, 0, 0}, {0, 0, h}, 1, {0.8, 0.7, 0.6});
  if (walls >= 2) b.rectangle({0, 0, 0}, {0, sy, 0}, {0, 0, h}, 1, {0.8, 0.7, 0.6});
  return b.finish();
}

PointCloud make_room(const SyntheticOptions& opt, Rng& rng) {
  SceneBuilder b{{}, {}, {}, opt.density, rng};
  const double sx = uniform(rng, 2.0, 3.0);
  const double sy = uniform(rng, 2.0, 3.0);
  const double h = uniform(rng, 1.0, 1.4);

  struct Box {
    Point3 lo, hi;
  };
  std::vector<Box> boxes;
  const int n_boxes = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int tries = 0; static_cast<int>(boxes.size()) < n_boxes && tries < 50; ++tries) {
    const double w = uniform(rng, 0.3, 0.7), d = uniform(rng, 0.3, 0.7), bh = uniform(rng, 0.3, 0.7);
    const double x = uniform(rng, 0.2, sx - w - 0.2), y = uniform(rng, 0.2, sy - d - 0.2);
    Box box{{x, y, 0}, {x + w, y + d, bh}};
    const bool overlaps = std::any_of(boxes.begin(), boxes.end(), [&](const Box& o) {
      return box.lo.x() < o.hi.x() + 0.1 && o.lo.x() < box.hi.x() + 0.1 && box.lo.y() < o.hi.y() + 0.1 &&
             o.lo.y() < box.hi.y() + 0.1;
    });
    if (!overlaps) boxes.push_back(box);
  }

  auto outside_boxes = [&](const Point3& p) {
    return std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) {
      return p.x() > o.lo.x() && p.x() < o.hi.x() && p.y() > o.lo.y() && p.y() < o.hi.y();
    });
  };
  b.rectangle({0, 0, 0}, {sx, 0, 0}, {0, sy, 0}, 0, {0.5, 0.4, 0.3}, outside_boxes);
  const Eigen::Vector3d wall(0.9, 0.9, 0.85);
  b.rectangle({0, 0, 0}, {sx, 0, 0}, {0, 0, h}, 1, wall);
  b.rectangle({0, sy, 0}, {sx, 0, 0}, {0, 0, h}, 1, wall);
  b.rectangle({0, 0, 0}, {0, sy, 0}, {0, 0, h}, 1, wall);
  b.rectangle({sx, 0, 0}, {0, sy, 0}, {0, 0, h}, 1, wall);
  for (const auto& o : boxes) {
    const Eigen::Vector3d color(uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8));
    const Point3 e = o.hi - o.lo;
    b.rectangle({o.lo.x(), o.lo.y(), o.hi.z()}, {e.x(), 0, 0}, {0, e.y(), 0}, 2, color);
    b.rectangle(o.lo, {e.x(), 0, 0}, {0, 0, e.z()}, 2, color);
    b.rectangle({o.lo.x(), o.hi.y(), 0}, {e.x(), 0, 0}, {0, 0, e.z()}, 2, color);
    b.rectangle(o.lo, {0, e.y(), 0}, {0, 0, e.z()}, 2, color);
    b.rectangle({o.hi.x(), o.lo.y(), 0}, {0, e.y(), 0}, {0, 0, e.z()}, 2, color);
  }
  return b.finish();
}

}  // namespace

DatasetKind dataset_kind_from_string(const std::string& name) {
  if (name == "shapes3") return DatasetKind::shapes3;
  if (name == "planes-corners") return DatasetKind::planes_corners;
  if (name == "indoor-boxes") return DatasetKind::indoor_boxes;
  throw ConfigError("unknown dataset kind '" + name + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::shapes3: return "shapes3";
    case DatasetKind::planes_corners: return "planes-corners";
    case DatasetKind::indoor_boxes: return "indoor-boxes";
  }
  return "?";
}

std::vector<int> class_counts(int count, const std::vector<double>& proportions, int classes) {
  std::vector<double> p = proportions.empty() ? std::vector<double>(classes, 1.0) : proportions;
  if (static_cast<int>(p.size()) != classes) throw ConfigError("class proportions: need one per class");
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("class proportions: must sum to a positive value");
  std::vector<int> n(classes);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int c = 0; c < classes; ++c) {
    if (p[c] < 0.0) throw ConfigError("class proportions: negative value");
    const double exact = count * p[c] / total;
    n[c] = static_cast<int>(std::floor(exact));
    assigned += n[c];
    remainders.emplace_back(-(exact - n[c]), c);
  }
  std::sort(remainders.begin(), remainders.end());
  for (int i = 0; assigned < count; ++i, ++assigned) ++n[remainders[i % classes].second];
  return n;
}

std::vector<PointCloud> generate_synthetic_dataset(DatasetKind kind, int count, std::uint64_t seed,
                                                   const SyntheticOptions& options) {
  if (count < 0) throw ValidationError("dataset: negative count");
  Rng rng(seed);
  std::vector<PointCloud> out;
  out.reserve(count);
  if (kind == DatasetKind::shapes3) {
    const auto n = class_counts(count, options.proportions, 3);
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c) labels.insert(labels.end(), n[c], c);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int label : labels) out.push_back(make_shape(label, options, rng));
  } else {
    for (int i = 0; i < count; ++i) {
      out.push_back(kind == DatasetKind::planes_corners ? make_planes(options, rng) : make_room(options, rng));
    }
  }
  return out;
}

void AugmentationConfig::validate() const {
  if (!(scale_min > 0.0) || scale_max < scale_min) throw ConfigError("augmentation: bad scale range");
  if (jitter_sigma < 0.0) throw ConfigError("augmentation: negative jitter");
  if (flip_probability < 0.0 || flip_probability > 1.0) throw ConfigError("augmentation: bad flip probability");
}

bool AugmentationConfig::is_identity() const {
  const bool flips = flip_probability > 0.0 && (flip_axes[0] || flip_axes[1] || flip_axes[2]);
  return scale_min == 1.0 && scale_max == 1.0 && !flips && jitter_sigma == 0.0 && !rotate_vertical;
}

PointCloud augment(const PointCloud& cloud, const AugmentationConfig& config, std::uint64_t seed) {
  config.validate();
  PointCloud out = cloud;
  if (config.is_identity()) return out;
  Rng rng(seed);

  Eigen::Vector3d scale = Eigen::Vector3d::Ones();
  if (config.anisotropic) {
    for (int a = 0; a < 3; ++a) scale[a] = uniform(rng, config.scale_min, config.scale_max);
  } else {
    scale.setConstant(config.scale_max > config.scale_min ? uniform(rng, config.scale_min, config.scale_max)
                                                          : config.scale_min);
  }
  for (int a = 0; a < 3; ++a) {
    if (config.flip_axes[a] && std::bernoulli_distribution(config.flip_probability)(rng)) scale[a] = -scale[a];
  }
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  if (config.rotate_vertical) R = vertical_rotation(uniform(rng, 0.0, 2.0 * std::numbers::pi));
  std::normal_distribution<double> noise(0.0, config.jitter_sigma);
  for (auto& p : out.points) {
    p = R * p.cwiseProduct(scale);
    if (config.jitter_sigma > 0.0) p += Point3(noise(rng), noise(rng), noise(rng));
  }
  return out;
}

InputFeatures input_features_from_string(const std::string& name) {
  if (name == "ones") return InputFeatures::ones;
  if (name == "ones+rgb") return InputFeatures::ones_rgb;
  if (name == "ones+xyz") return InputFeatures::ones_xyz;
  throw ConfigError("unknown input feature mode '" + name + "'");
}

std::string to_string(InputFeatures mode) {
  switch (mode) {
    case InputFeatures::ones: return "ones";
    case InputFeatures::ones_rgb: return "ones+rgb";
    case InputFeatures::ones_xyz: return "ones+xyz";
  }
  return "?";
}

int input_feature_dim(InputFeatures mode) { return mode == InputFeatures::ones ? 1 : 4; }

PointCloud add_input_features(const PointCloud& cloud, InputFeatures mode) {
  PointCloud out;
  out.points = cloud.points;
  out.labels = cloud.labels;
  const auto n = static_cast<Eigen::Index>(cloud.size());
  out.features = Matrix::Ones(n, input_feature_dim(mode));
  if (mode == InputFeatures::ones_rgb) {
    if (cloud.features.cols() < 3) throw ShapeError("add_input_features: cloud has no rgb channels");
    out.features.rightCols(3) = cloud.features.leftCols(3);
  } else if (mode == InputFeatures::ones_xyz) {
    for (Eigen::Index i = 0; i < n; ++i) out.features.row(i).tail<3>() = cloud.points[i].transpose();
  }
  return out;
}

}  // namespace kpconv
