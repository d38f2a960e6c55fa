#include "kpconv/voting.hpp"

#include <algorithm>
#include <cmath>

#include "kpconv/errors.hpp"
#include "kpconv/network.hpp"

namespace kpconv {

VoteAccumulator::VoteAccumulator(std::size_t points, int classes)
    : classes_(classes), sums_(points * static_cast<std::size_t>(classes), 0), visits_(points, 0) {
  if (classes < 1) throw ValidationError("VoteAccumulator: need at least one class");
}

void VoteAccumulator::add(std::span<const int> point_indices, const Matrix& probabilities) {
  if (probabilities.rows() != static_cast<Eigen::Index>(point_indices.size()) || probabilities.cols() != classes_) {
    throw ShapeError("VoteAccumulator: probabilities must be points x classes");
  }
  for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
    const auto row = probabilities.row(r);
    if (!row.allFinite() || row.minCoeff() < 0.0 || std::abs(row.sum() - 1.0) > 1e-6) {
      throw ValidationError("VoteAccumulator: row " + std::to_string(r) + " is not a probability vector");
    }
  }
  for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
    const int p = point_indices[r];
    if (p < 0 || static_cast<std::size_t>(p) >= visits_.size()) throw ShapeError("VoteAccumulator: bad point index");
    for (int c = 0; c < classes_; ++c) {
      sums_[static_cast<std::size_t>(p) * classes_ + c] += std::llround(probabilities(r, c) * kScale);
    }
    ++visits_[p];
  }
}

void VoteAccumulator::merge(const VoteAccumulator& other) {
  if (other.classes_ != classes_ || other.visits_.size() != visits_.size()) {
    throw ShapeError("VoteAccumulator: merging accumulators of different shapes");
  }
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
  for (std::size_t i = 0; i < visits_.size(); ++i) visits_[i] += other.visits_[i];
}

int VoteAccumulator::min_visits() const {
  return visits_.empty() ? 0 : *std::min_element(visits_.begin(), visits_.end());
}

std::size_t VoteAccumulator::unvisited() const {
  return static_cast<std::size_t>(std::count(visits_.begin(), visits_.end(), 0));
}

Matrix VoteAccumulator::averaged() const {
  if (const auto n = unvisited(); n > 0) {
    throw CoverageError(std::to_string(n) + " point(s) were never visited by an input sphere");
  }
  Matrix out(static_cast<Eigen::Index>(visits_.size()), classes_);
  for (std::size_t p = 0; p < visits_.size(); ++p) {
    for (int c = 0; c < classes_; ++c) {
      out(static_cast<Eigen::Index>(p), c) =
          static_cast<double>(sums_[p * classes_ + c]) / kScale / static_cast<double>(visits_[p]);
    }
  }
  return out;
}

std::vector<int> VoteAccumulator::finalize() const {
  const Matrix avg = averaged();
  std::vector<int> labels(visits_.size());
  for (Eigen::Index p = 0; p < avg.rows(); ++p) {
    Eigen::Index best = 0;
    avg.row(p).maxCoeff(&best);
    labels[p] = static_cast<int>(best);
  }
  return labels;
}

double sphere_lattice_spacing(double radius) { return radius / std::sqrt(3.0); }

namespace {

void bounds(const PointCloud& scene, Point3& lo, Point3& hi) {
  lo = hi = scene.points.front();
  for (const auto& p : scene.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
}

double pass_shift(int pass) {
  // 0, 1/2, 1/4, 3/4, 1/8, ...
  double shift = 0.0, unit = 0.5;
  for (int p = pass; p > 0; p >>= 1, unit *= 0.5) {
    if (p & 1) shift += unit;
  }
  return shift;
}

}  // namespace

std::vector<Point3> sphere_lattice(const PointCloud& scene, double radius, double shift) {
  if (scene.empty()) throw EmptyInputError("sphere_lattice: empty scene");
  if (!(radius > 0.0)) throw ValidationError("sphere_lattice: radius must be > 0");
  const double step = sphere_lattice_spacing(radius);
  Point3 lo, hi;
  bounds(scene, lo, hi);
  const Point3 origin = lo.array() - step + shift * step;
  std::array<int, 3> n{};
  for (int a = 0; a < 3; ++a) n[a] = static_cast<int>(std::floor((hi[a] + step - origin[a]) / step)) + 1;
  std::vector<Point3> centers;
  for (int i = 0; i < n[0]; ++i) {
    for (int j = 0; j < n[1]; ++j) {
      for (int k = 0; k < n[2]; ++k) centers.push_back(origin + step * Point3(i, j, k));
    }
  }
  return centers;
}

SceneSegmentation segment_scene(const PointCloud& scene, int classes, const SpherePredictor& predictor,
                                const SegmentationOptions& options) {
  if (scene.empty()) throw EmptyInputError("segment_scene: empty scene");
  if (!(options.radius > 0.0)) throw ValidationError("segment_scene: sphere radius must be > 0");
  if (options.min_visits < 1 || options.max_passes < 1) throw ConfigError("segment_scene: bad visit settings");

  VoteAccumulator votes(scene.size(), classes);
  SceneSegmentation result;

  auto evaluate = [&](const Point3& center) {
    auto sphere = sample_sphere(scene, center, options.radius);
    if (sphere.cloud.empty()) return;
    const Matrix probs = predictor(sphere.cloud);
    if (probs.rows() != static_cast<Eigen::Index>(sphere.cloud.size())) {
      throw ShapeError("segment_scene: predictor returned the wrong number of rows");
    }
    votes.add(sphere.scene_indices, probs);
    ++result.spheres;
    if (options.keep_votes) result.votes.push_back({center, std::move(sphere.scene_indices), probs});
  };

  Point3 lo, hi;
  bounds(scene, lo, hi);
  const Point3 middle = 0.5 * (lo + hi);
  const bool fits = std::all_of(scene.points.begin(), scene.points.end(), [&](const Point3& p) {
    return (p - middle).squaredNorm() <= options.radius * options.radius;
  });
  if (fits) {
    evaluate(middle);
    result.passes = 1;
  } else {
    for (int pass = 0; pass < options.max_passes; ++pass) {
      if (pass > 0 && votes.min_visits() >= options.min_visits) break;
      for (const auto& center : sphere_lattice(scene, options.radius, pass_shift(pass))) {
        if (pass > 0) {
          const auto sphere = sample_sphere(scene, center, options.radius);
          const bool needed = std::any_of(sphere.scene_indices.begin(), sphere.scene_indices.end(),
                                          [&](int i) { return votes.visits()[i] < options.min_visits; });
          if (!needed) continue;
        }
        evaluate(center);
      }
      result.passes = pass + 1;
    }
  }

  result.visits = votes.visits();
  result.probabilities = votes.averaged();
  result.labels = votes.finalize();
  return result;
}

SpherePredictor network_sphere_predictor(KPNetwork& net, InputFeatures features) {
  return [&net, features](const PointCloud& sphere) {
    PointCloud raw = sphere;
    if (raw.features.cols() == 0) raw.features = Matrix::Zero(static_cast<Eigen::Index>(raw.size()), 3);
    raw.labels.clear();
    const auto sub = grid_subsample(raw, net.spec().first_cell_size);
    const std::vector<PointCloud> element{add_input_features(sub.support, features)};
    const auto layers = net.spec().layer_configs();
    const auto batch = assemble_batch(element, layers, element[0].size());
    const Matrix probs = softmax(net.forward(batch, ForwardContext{false, 0}).logits);
    Matrix out(static_cast<Eigen::Index>(sphere.size()), probs.cols());
    for (std::size_t i = 0; i < sphere.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = probs.row(sub.cell_assignment[i]);
    return out;
  };
}

SceneSegmentation segment_scene(const PointCloud& scene, KPNetwork& net, const RunConfig& config, bool keep_votes) {
  if (net.spec().task != Task::segmentation) throw ConfigError("segment_scene: model is not a segmentation network");
  SegmentationOptions options;
  options.radius = config.input_radius();
  options.min_visits = config.min_visits;
  options.max_passes = config.max_passes;
  options.keep_votes = keep_votes;
  return segment_scene(scene, net.spec().num_classes, network_sphere_predictor(net, config.input_features), options);
}

}  // namespace kpconv
