#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kpconv/conv_ops.hpp"
#include "kpconv/geometry.hpp"

namespace kpconv {

/// Trainable tensor with its gradient accumulator and momentum buffer.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix momentum;
  double grad_scale = 1.0;  // per-parameter learning-rate factor

  Parameter() = default;
  Parameter(std::string n, Matrix v, double scale = 1.0);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct ForwardContext {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

inline constexpr double kLeakySlope = 0.1;

Matrix leaky_relu(const Matrix& x);
/// Gradient through leaky ReLU, given the pre-activation input.
Matrix leaky_relu_backward(const Matrix& pre, const Matrix& upstream);

/// 1x1 convolution (shared linear map), no bias.
class UnaryLayer {
 public:
  UnaryLayer() = default;
  UnaryLayer(std::string name, int d_in, int d_out, std::uint64_t seed);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& upstream);

  Parameter weights;

 private:
  Matrix input_;
};

/// Linear layer with bias, used for the final classifier.
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::string name, int d_in, int d_out, std::uint64_t seed);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& upstream);

  Parameter weights;
  Parameter bias;

 private:
  Matrix input_;
};

/// Batch normalization over rows. Training mode normalizes with the biased
/// batch statistics and blends them into the running statistics with
/// `momentum` (fraction of the old value kept).
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(std::string name, int channels);

  Matrix forward(const Matrix& x, bool training);
  Matrix backward(const Matrix& upstream);

  Parameter gamma;
  Parameter beta;
  Matrix running_mean;  // 1 x C
  Matrix running_var;   // 1 x C
  long updates = 0;     // the first training batch replaces the running statistics
  double momentum = 0.98;
  double epsilon = 1e-6;

 private:
  bool training_ = false;
  Matrix xhat_;
  Eigen::RowVectorXd inv_std_;
};

/// Inverted dropout: kept activations are scaled by 1/(1-p) while training,
/// identity at inference.
class DropoutLayer {
 public:
  explicit DropoutLayer(double p = 0.5) : p_(p) {}
  Matrix forward(const Matrix& x, const ForwardContext& ctx);
  Matrix backward(const Matrix& upstream) const;
  double probability() const { return p_; }

 private:
  double p_;
  Matrix mask_;
};

/// Per-channel max over the non-shadow neighbors of each query row; rows with
/// no neighbor produce 0.
class NeighborMaxPool {
 public:
  Matrix forward(const Matrix& x, const NeighborhoodMatrix& neighbors);
  Matrix backward(const Matrix& upstream) const;

 private:
  Eigen::Index input_rows_ = 0;
  std::vector<std::int32_t> argmax_;
};

/// Mean feature of every batch element.
Matrix global_average_pool(const Matrix& features, std::span<const int> element_ids,
                           int element_count);
Matrix global_average_pool_backward(const Matrix& upstream, std::span<const int> element_ids);

/// Each fine point takes the features of its nearest coarse point.
Matrix nearest_upsample(const Matrix& coarse_features, std::span<const Point3> fine_points,
                        std::span<const Point3> coarse_points);
Matrix gather_rows(const Matrix& x, std::span<const int> rows);
Matrix scatter_add_rows(const Matrix& upstream, std::span<const int> rows, Eigen::Index out_rows);

struct CrossEntropy {
  double loss = 0.0;  // mean over rows
  Matrix gradient;    // d loss / d logits
  int correct = 0;
};

CrossEntropy softmax_cross_entropy(const Matrix& logits, std::span<const int> labels);
Matrix softmax(const Matrix& logits);

/// KPConv layer, rigid or deformable. The deformable variant predicts its
/// offsets with a rigid KPConv sharing the same kernel, whose weights
/// start at zero and learn at `offset_lr_factor` times the global rate.
class KPConvLayer {
 public:
  KPConvLayer() = default;
  KPConvLayer(std::string name, LayerKernel kernel, int d_in, int d_out, bool deformable,
              std::uint64_t seed, double offset_lr_factor = 0.1);

  Matrix forward(std::span<const Point3> queries, std::span<const Point3> supports,
                 const Matrix& features, const NeighborhoodMatrix& neighbors);
  /// `reg_weight` scales the regularization gradient added to the offsets.
  Matrix backward(const Matrix& upstream, double reg_weight);

  bool deformable() const { return deformable_; }
  /// Fitting + repulsive loss of the last forward pass (0 when rigid).
  double regularization() const { return reg_.total(); }
  const RegularizationResult& regularization_detail() const { return reg_; }
  const OffsetField& offsets() const { return offsets_; }

  LayerKernel kernel;
  Parameter weights;
  Parameter offset_weights;

 private:
  bool deformable_ = false;
  std::span<const Point3> queries_;
  std::span<const Point3> supports_;
  const NeighborhoodMatrix* neighbors_ = nullptr;
  Matrix features_;
  OffsetField offsets_;
  RegularizationResult reg_;
};

}  // namespace kpconv
