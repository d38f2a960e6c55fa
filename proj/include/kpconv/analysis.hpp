#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kpconv/datasets.hpp"
#include "kpconv/network.hpp"

namespace kpconv {

/// A model whose responses can be differentiated with respect to the input
/// features of a batch.
class ErfModel {
 public:
  virtual ~ErfModel() = default;
  /// Number of selectable layers.
  virtual int depth() const = 0;
  /// Batch layer whose points carry the responses of `layer`.
  virtual int output_layer(int layer) const = 0;
  /// Radius of a ball around an output point that contains every input point
  /// able to influence it.
  virtual double receptive_radius(const Batch& batch, int layer) const = 0;
  virtual Matrix forward(const Batch& batch, int layer) = 0;
  /// Gradient with respect to the layer-0 features of `upstream` placed on
  /// the output of the last forward.
  virtual Matrix backward(const Matrix& upstream, int layer) = 0;
};

/// Block outputs of a network, evaluated in inference mode (batch norm uses
/// running statistics, so every row only depends on its own neighborhood).
/// Layer b is block b; its receptive radius is the sum of the block radii.
class NetworkErfModel : public ErfModel {
 public:
  explicit NetworkErfModel(KPNetwork& net) : net_(net) {}
  int depth() const override { return net_.block_count(); }
  int output_layer(int layer) const override { return net_.block(layer).query_layer(); }
  double receptive_radius(const Batch& batch, int layer) const override;
  Matrix forward(const Batch& batch, int layer) override;
  Matrix backward(const Matrix& upstream, int layer) override;

 private:
  KPNetwork& net_;
};

/// One rigid KPConv on the layer-0 neighborhoods of a batch.
class SingleConvModel : public ErfModel {
 public:
  SingleConvModel(LayerKernel kernel, ConvWeights weights)
      : kernel_(std::move(kernel)), weights_(std::move(weights)) {}
  int depth() const override { return 1; }
  int output_layer(int) const override { return 0; }
  double receptive_radius(const Batch& batch, int layer) const override;
  Matrix forward(const Batch& batch, int layer) override;
  Matrix backward(const Matrix& upstream, int layer) override;

 private:
  LayerKernel kernel_;
  ConvWeights weights_;
  const Batch* batch_ = nullptr;
};

struct ErfResult {
  PointList points;            // layer-0 points of the batch
  std::vector<double> scores;  // one per point, in [0, 1]
  int layer = 0;
  int center_row = 0;          // row of the response in the output layer
  Point3 center;               // snapped center
  bool center_outside = false; // requested center was outside the scene bounds
  double receptive_radius = 0.0;
};

/// Effective receptive field: the response is the channel sum of `layer`'s
/// output at the output point nearest to `center`; each input point scores
/// the L1 norm over channels of the response gradient with respect to its
/// features, normalized so the largest score is 1.
ErfResult compute_erf(ErfModel& model, const Batch& batch, int layer, const Point3& center);

/// Writes `<prefix>.ply` (with a "score" property) and `<prefix>.csv`.
void write_erf(const std::filesystem::path& prefix, const ErfResult& erf);

struct ActivationElement {
  std::size_t index = 0;  // position in the dataset
  double max_activation = 0.0;
  PointCloud cloud;                 // input points of the element
  std::vector<double> activations;  // projected, one per input point
};

struct ActivationRanking {
  std::vector<ActivationElement> elements;  // top elements, best first
  std::vector<double> max_per_element;      // every dataset element
  bool all_zero = false;                    // channel never fired: empty ranking
};

/// Runs each raw cloud (subsampled at the first cell size) through the
/// network in inference mode up to `block`, ranks elements by their maximum
/// activation of `channel` (ties: lower index first) and projects the
/// activations of the top `top_n` back to the input points by nearest
/// support.
ActivationRanking export_feature_activations(KPNetwork& net, std::span<const PointCloud> dataset,
                                             InputFeatures features, int block, int channel, int top_n);

/// One PLY per ranked element (`rank_<r>_element_<i>.ply`, "activation"
/// property) and a summary CSV.
void write_activation_ranking(const std::filesystem::path& directory, const ActivationRanking& ranking);

struct LostPointsOptions {
  std::uint64_t seed = 0;
  int steps = 200;
  double regularization_weight = 0.1;
  double learning_rate = 1e-4;
  double momentum = 0.98;
  double cell_size = 0.06;
  int width = 8;
};

struct LostPointsResult {
  double initial_active = 0.0;  // active kernel point fraction before training
  double final_active = 0.0;
  double final_cross_entropy = 0.0;
  double final_regularization = 0.0;
};

/// Trains one deformable KPConv (constant input feature, leaky ReLU, linear
/// floor/wall classifier) on a planes-corners scene with full-batch
/// momentum SGD, and measures the active kernel point fraction before and
/// after.
LostPointsResult lost_kernel_points_trial(const LostPointsOptions& options);

}  // namespace kpconv
