#include "kpconv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "kpconv/errors.hpp"
#include "kpconv/io.hpp"
#include "kpconv/training.hpp"

namespace kpconv {

double NetworkErfModel::receptive_radius(const Batch& batch, int layer) const {
  double r = 0.0;
  for (int b = 0; b <= layer; ++b) r += net_.block(b).radius(batch);
  return r;
}

Matrix NetworkErfModel::forward(const Batch& batch, int layer) {
  return net_.forward_blocks(batch, ForwardContext{false, 0}, layer);
}

Matrix NetworkErfModel::backward(const Matrix& upstream, int layer) {
  Matrix g = net_.backward_from_block(layer, upstream);
  net_.zero_grad();
  return g;
}

double SingleConvModel::receptive_radius(const Batch& batch, int) const { return batch.layers.at(0).neighbors.radius; }

Matrix SingleConvModel::forward(const Batch& batch, int) {
  batch_ = &batch;
  const auto& L = batch.layers.at(0);
  return kpconv_forward(L.points, L.points, batch.features, L.neighbors, kernel_, weights_);
}

Matrix SingleConvModel::backward(const Matrix& upstream, int) {
  if (!batch_) throw ShapeError("SingleConvModel: backward before forward");
  const auto& L = batch_->layers.at(0);
  return kpconv_backward(ConvInputs{L.points, L.points, batch_->features, L.neighbors, kernel_, weights_}, upstream)
      .features;
}

ErfResult compute_erf(ErfModel& model, const Batch& batch, int layer, const Point3& center) {
  if (layer < 0 || layer >= model.depth()) {
    throw ValidationError("compute_erf: layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(model.depth()) + ")");
  }
  if (batch.layers.empty() || batch.layers[0].points.empty()) throw EmptyInputError("compute_erf: empty batch");
  const auto& inputs = batch.layers[0].points;
  const auto& outputs = batch.layers.at(model.output_layer(layer)).points;

  ErfResult erf;
  erf.layer = layer;
  erf.points = inputs;
  Point3 lo = inputs.front(), hi = inputs.front();
  for (const auto& p : inputs) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  erf.center_outside = (center.array() < lo.array()).any() || (center.array() > hi.array()).any();
  const PointList query{center};
  erf.center_row = nearest_neighbor_indices(query, outputs).front();
  erf.center = outputs[erf.center_row];
  erf.receptive_radius = model.receptive_radius(batch, layer);

  const Matrix out = model.forward(batch, layer);
  Matrix upstream = Matrix::Zero(out.rows(), out.cols());
  upstream.row(erf.center_row).setOnes();
  const Matrix grad = model.backward(upstream, layer);

  erf.scores.resize(inputs.size());
  for (Eigen::Index i = 0; i < grad.rows(); ++i) erf.scores[i] = grad.row(i).cwiseAbs().sum();
  const double top = *std::max_element(erf.scores.begin(), erf.scores.end());
  if (top > 0.0) {
    for (auto& s : erf.scores) s /= top;
  }
  return erf;
}

void write_erf(const std::filesystem::path& prefix, const ErfResult& erf) {
  PointCloud cloud;
  cloud.points = erf.points;
  cloud.features.resize(static_cast<Eigen::Index>(cloud.size()), 0);
  write_ply(std::filesystem::path(prefix.string() + ".ply"), cloud, {{"score", erf.scores}});
  std::ofstream csv(prefix.string() + ".csv");
  if (!csv) throw IoError("cannot write " + prefix.string() + ".csv");
  csv.precision(17);
  csv << "x,y,z,score\n";
  for (std::size_t i = 0; i < erf.points.size(); ++i) {
    const auto& p = erf.points[i];
    csv << p.x() << ',' << p.y() << ',' << p.z() << ',' << erf.scores[i] << '\n';
  }
}

ActivationRanking export_feature_activations(KPNetwork& net, std::span<const PointCloud> dataset,
                                             InputFeatures features, int block, int channel, int top_n) {
  if (block < 0 || block >= net.block_count()) throw ValidationError("export_feature_activations: bad block");
  if (channel < 0 || channel >= net.block(block).output_width()) {
    throw ValidationError("export_feature_activations: channel out of range for block " + std::to_string(block));
  }
  if (top_n < 0) throw ValidationError("export_feature_activations: negative top_n");
  if (dataset.empty()) throw EmptyInputError("export_feature_activations: empty dataset");

  const auto layers = net.spec().layer_configs();
  const int out_layer = net.block(block).query_layer();
  struct Scan {
    Matrix column;
    PointList points;
  };
  std::vector<Scan> scans;
  ActivationRanking ranking;
  double strongest = 0.0;
  for (const auto& raw : dataset) {
    PointCloud cloud = raw;
    if (cloud.features.cols() == 0) cloud.features = Matrix::Zero(static_cast<Eigen::Index>(cloud.size()), 3);
    const auto sub = grid_subsample(cloud, net.spec().first_cell_size);
    const std::vector<PointCloud> element{add_input_features(sub.support, features)};
    const auto batch = assemble_batch(element, layers, element[0].size());
    const Matrix out = net.forward_blocks(batch, ForwardContext{false, 0}, block);
    Scan scan{out.col(channel), batch.layers[out_layer].points};
    ranking.max_per_element.push_back(scan.column.maxCoeff());
    strongest = std::max(strongest, scan.column.cwiseAbs().maxCoeff());
    scans.push_back(std::move(scan));
  }
  if (strongest == 0.0) {
    ranking.all_zero = true;
    return ranking;
  }

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ranking.max_per_element[a] > ranking.max_per_element[b];
  });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(top_n)));
  for (auto i : order) {
    ActivationElement e;
    e.index = i;
    e.max_activation = ranking.max_per_element[i];
    e.cloud = dataset[i];
    const auto nearest = nearest_neighbor_indices(e.cloud.points, scans[i].points);
    e.activations.resize(nearest.size());
    for (std::size_t p = 0; p < nearest.size(); ++p) e.activations[p] = scans[i].column(nearest[p], 0);
    ranking.elements.push_back(std::move(e));
  }
  return ranking;
}

void write_activation_ranking(const std::filesystem::path& directory, const ActivationRanking& ranking) {
  std::filesystem::create_directories(directory);
  std::ofstream csv(directory / "ranking.csv");
  if (!csv) throw IoError("cannot write " + (directory / "ranking.csv").string());
  csv.precision(17);
  csv << "rank,element,max_activation,file\n";
  for (std::size_t r = 0; r < ranking.elements.size(); ++r) {
    const auto& e = ranking.elements[r];
    const std::string name = "rank_" + std::to_string(r) + "_element_" + std::to_string(e.index) + ".ply";
    PointCloud cloud = e.cloud;
    cloud.features.resize(static_cast<Eigen::Index>(cloud.size()), 0);
    write_ply(directory / name, cloud, {{"activation", e.activations}});
    csv << r << ',' << e.index << ',' << e.max_activation << ',' << name << '\n';
  }
}

LostPointsResult lost_kernel_points_trial(const LostPointsOptions& options) {
  const auto scene = generate_synthetic_dataset(DatasetKind::planes_corners, 1, options.seed).front();
  const auto in = add_input_features(grid_subsample(scene, options.cell_size).support, InputFeatures::ones);
  const auto config = LayerConfig::make(options.cell_size, options.width, true);
  const auto neighbors = radius_neighbors(in.points, in.points, config.radius);
  KPConvLayer conv("conv", prepare_layer_kernel(stable_disposition(config.kernel_size), config.sigma, options.seed), 1,
                   options.width, true, options.seed);
  LinearLayer head("head", options.width, 2, options.seed + 1);
  std::vector<Parameter*> params{&conv.weights, &conv.offset_weights, &head.weights, &head.bias};

  LostPointsResult r;
  for (int step = 0;; ++step) {
    for (auto* p : params) p->zero_grad();
    const Matrix pre = conv.forward(in.points, in.points, in.features, neighbors);
    const double active = active_kernel_fraction(
        ConvInputs{in.points, in.points, in.features, neighbors, conv.kernel, conv.weights.value, &conv.offsets()});
    const auto ce = softmax_cross_entropy(head.forward(leaky_relu(pre)), in.labels);
    if (step == 0) r.initial_active = active;
    if (step == options.steps) {
      r.final_active = active;
      r.final_cross_entropy = ce.loss;
      r.final_regularization = conv.regularization();
      return r;
    }
    conv.backward(leaky_relu_backward(pre, head.backward(ce.gradient)), options.regularization_weight);
    momentum_sgd_update(params, options.learning_rate, options.momentum);
  }
}

}  // namespace kpconv
