#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "kpconv/geometry.hpp"
#include "kpconv/kernel_points.hpp"
#include "kpconv/layers.hpp"

namespace kpconv {

enum class Task { classification, segmentation };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

/// Architecture description. Layer j has two bottleneck blocks; the first
/// block of every layer but the first is strided (it reads layer j-1 and
/// writes layer j). With `deformable_blocks` = n, the last n blocks use
/// deformable kernels.
struct NetworkSpec {
  Task task = Task::classification;
  int input_dim = 1;
  int num_classes = 3;
  double first_cell_size = 0.02;
  std::vector<int> widths = {16, 32, 64, 128, 256};
  int kernel_size = 15;
  double sigma_ratio = 1.0;   // Sigma
  double radius_ratio = 5.0;  // rho
  int deformable_blocks = 0;
  int head_width = 64;  // hidden units of the classification head
  double dropout = 0.5;  // classification head only
  double offset_lr_factor = 0.1;
  std::uint64_t seed = 0;

  int layer_count() const { return static_cast<int>(widths.size()); }
  int block_count() const { return 2 * layer_count(); }
  bool block_deformable(int block) const { return block >= block_count() - deformable_blocks; }
  /// Per-layer geometry; a layer gets the deformable radius when any block
  /// reading its neighborhoods is deformable.
  std::vector<LayerConfig> layer_configs() const;
  void validate() const;
};

/// Bottleneck residual block:
///   unary(D_in->D) BN LReLU -> KPConv(D->D) BN LReLU -> unary(D->2D) BN
///   + shortcut (identity | neighborhood max-pool when strided, then
///     unary + BN when D_in != 2D), followed by LReLU.
class BottleneckBlock {
 public:
  BottleneckBlock() = default;
  BottleneckBlock(const std::string& name, int d_in, int width, bool strided, int support_layer,
                  LayerKernel kernel, bool deformable, std::uint64_t seed, double offset_lr_factor);

  Matrix forward(const Batch& batch, const Matrix& x, const ForwardContext& ctx);
  Matrix backward(const Matrix& upstream, double reg_weight);

  int input_width() const { return d_in_; }
  int output_width() const { return 2 * width_; }
  bool strided() const { return strided_; }
  int support_layer() const { return support_layer_; }
  int query_layer() const { return strided_ ? support_layer_ + 1 : support_layer_; }
  /// Neighborhood radius used by this block's convolution.
  double radius(const Batch& batch) const;

  void collect(std::vector<Parameter*>& params);
  void collect_norms(std::vector<BatchNormLayer*>& norms);

  KPConvLayer conv;

 private:
  int d_in_ = 0;
  int width_ = 0;
  bool strided_ = false;
  int support_layer_ = 0;
  bool projection_ = false;
  UnaryLayer unary_in_;
  BatchNormLayer bn_in_;
  BatchNormLayer bn_conv_;
  UnaryLayer unary_out_;
  BatchNormLayer bn_out_;
  NeighborMaxPool pool_;
  UnaryLayer unary_shortcut_;
  BatchNormLayer bn_shortcut_;

  Matrix pre_in_, pre_conv_, pre_out_;
};

/// KP-CNN (classification) or KP-FCNN (segmentation), depending on the spec.
class KPNetwork {
 public:
  explicit KPNetwork(NetworkSpec spec);

  struct Output {
    Matrix logits;  // per element (classification) or per layer-0 point
    double regularization = 0.0;
  };

  Output forward(const Batch& batch, const ForwardContext& ctx);
  /// Runs the encoder up to and including `last_block`; returns its output.
  Matrix forward_blocks(const Batch& batch, const ForwardContext& ctx, int last_block);

  /// Accumulates gradients of loss(logits) + reg_weight * regularization.
  /// Returns the gradient with respect to the input features.
  Matrix backward(const Matrix& logits_grad, double reg_weight);
  /// Backpropagates `upstream` placed at the output of `block` down to the
  /// input features. Requires a preceding forward through that block.
  Matrix backward_from_block(int block, const Matrix& upstream, double reg_weight = 0.0);

  const NetworkSpec& spec() const { return spec_; }
  int block_count() const { return static_cast<int>(blocks_.size()); }
  const BottleneckBlock& block(int b) const { return blocks_.at(b); }
  BottleneckBlock& block(int b) { return blocks_.at(b); }
  const Matrix& block_output(int b) const { return block_outputs_.at(b); }

  std::vector<Parameter*> parameters();
  std::vector<BatchNormLayer*> norms();
  std::vector<KPConvLayer*> convolutions();
  void zero_grad();

  void save_state(std::ostream& out);
  void load_state(std::istream& in);

 private:
  NetworkSpec spec_;
  std::vector<BottleneckBlock> blocks_;
  // classification head
  UnaryLayer head_unary_;
  BatchNormLayer head_bn_;
  DropoutLayer head_dropout_;
  LinearLayer head_out_;
  // segmentation decoder
  std::vector<UnaryLayer> decoder_unary_;
  std::vector<BatchNormLayer> decoder_bn_;

  const Batch* batch_ = nullptr;
  int forwarded_blocks_ = 0;
  std::vector<Matrix> block_outputs_;
  Matrix input_;
  Matrix pre_head_;
  std::vector<Matrix> decoder_pre_;
  std::vector<int> skip_widths_;
};

/// Stable disposition used for every layer kernel of a network (cached per
/// K, optimized with seed 0).
const KernelDisposition& stable_disposition(int kernel_size);

}  // namespace kpconv
