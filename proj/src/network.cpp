#include "kpconv/network.hpp"

#include <map>
#include <mutex>
#include <string>

#include "binary_io.hpp"
#include "kpconv/errors.hpp"

namespace kpconv {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::string to_string(Task task) {
  return task == Task::classification ? "classification" : "segmentation";
}

Task task_from_string(const std::string& name) {
  if (name == "classification") return Task::classification;
  if (name == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + name + "'");
}

const KernelDisposition& stable_disposition(int kernel_size) {
  static std::mutex mutex;
  static std::map<int, KernelDisposition> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(kernel_size);
  if (it == cache.end()) it = cache.emplace(kernel_size, optimize_disposition(kernel_size, true, 0)).first;
  return it->second;
}

void NetworkSpec::validate() const {
  if (widths.empty()) throw ConfigError("network: no layers");
  if (input_dim < 1) throw ConfigError("network: input_dim must be positive");
  if (num_classes < 2) throw ConfigError("network: need at least two classes");
  if (kernel_size < 1) throw ConfigError("network: kernel_size must be positive");
  if (deformable_blocks < 0 || deformable_blocks > block_count()) {
    throw ConfigError("network: deformable_blocks out of range");
  }
  if (!(first_cell_size > 0.0)) throw ConfigError("network: first cell size must be positive");
  for (int w : widths) {
    if (w < 1) throw ConfigError("network: widths must be positive");
  }
}

std::vector<LayerConfig> NetworkSpec::layer_configs() const {
  std::vector<LayerConfig> out;
  double dl = first_cell_size;
  for (int j = 0; j < layer_count(); ++j) {
    // blocks reading layer j neighborhoods: 2j+1, strided 2j+2, and block 0
    bool deform = block_deformable(2 * j + 1);
    if (j + 1 < layer_count()) deform = deform || block_deformable(2 * j + 2);
    if (j == 0) deform = deform || block_deformable(0);
    out.push_back(LayerConfig::make(dl, widths[j], deform, kernel_size, sigma_ratio, radius_ratio));
    dl *= 2.0;
  }
  return out;
}

BottleneckBlock::BottleneckBlock(const std::string& name, int d_in, int width, bool strided,
                                 int support_layer, LayerKernel kernel, bool deformable,
                                 std::uint64_t seed, double offset_lr_factor)
    : conv(name + ".conv", std::move(kernel), width, width, deformable, mix_seed(seed, 1),
           offset_lr_factor),
      d_in_(d_in),
      width_(width),
      strided_(strided),
      support_layer_(support_layer),
      projection_(d_in != 2 * width),
      unary_in_(name + ".unary_in", d_in, width, mix_seed(seed, 2)),
      bn_in_(name + ".bn_in", width),
      bn_conv_(name + ".bn_conv", width),
      unary_out_(name + ".unary_out", width, 2 * width, mix_seed(seed, 3)),
      bn_out_(name + ".bn_out", 2 * width) {
  if (projection_) {
    unary_shortcut_ = UnaryLayer(name + ".unary_shortcut", d_in, 2 * width, mix_seed(seed, 4));
    bn_shortcut_ = BatchNormLayer(name + ".bn_shortcut", 2 * width);
  }
}

double BottleneckBlock::radius(const Batch& batch) const {
  const auto& L = batch.layers.at(support_layer_);
  return strided_ ? L.pools.radius : L.neighbors.radius;
}

Matrix BottleneckBlock::forward(const Batch& batch, const Matrix& x, const ForwardContext& ctx) {
  if (x.cols() != d_in_) {
    throw ShapeError("bottleneck block: input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(d_in_));
  }
  if (query_layer() >= static_cast<int>(batch.layers.size())) {
    throw ShapeError("bottleneck block: batch has too few layers");
  }
  const auto& support = batch.layers[support_layer_];
  const auto& query = batch.layers[query_layer()];
  const NeighborhoodMatrix& neighbors = strided_ ? support.pools : support.neighbors;

  pre_in_ = bn_in_.forward(unary_in_.forward(x), ctx.training);
  const Matrix a = leaky_relu(pre_in_);
  pre_conv_ = bn_conv_.forward(conv.forward(query.points, support.points, a, neighbors), ctx.training);
  const Matrix b = leaky_relu(pre_conv_);
  Matrix c = bn_out_.forward(unary_out_.forward(b), ctx.training);

  Matrix shortcut = strided_ ? pool_.forward(x, neighbors) : x;
  if (projection_) shortcut = bn_shortcut_.forward(unary_shortcut_.forward(shortcut), ctx.training);
  pre_out_ = c + shortcut;
  return leaky_relu(pre_out_);
}

Matrix BottleneckBlock::backward(const Matrix& upstream, double reg_weight) {
  const Matrix g = leaky_relu_backward(pre_out_, upstream);

  Matrix g_short = g;
  if (projection_) g_short = unary_shortcut_.backward(bn_shortcut_.backward(g_short));
  if (strided_) g_short = pool_.backward(g_short);

  Matrix g_main = unary_out_.backward(bn_out_.backward(g));
  g_main = leaky_relu_backward(pre_conv_, g_main);
  g_main = conv.backward(bn_conv_.backward(g_main), reg_weight);
  g_main = leaky_relu_backward(pre_in_, g_main);
  g_main = unary_in_.backward(bn_in_.backward(g_main));
  return g_main + g_short;
}

void BottleneckBlock::collect(std::vector<Parameter*>& params) {
  params.push_back(&unary_in_.weights);
  params.push_back(&bn_in_.gamma);
  params.push_back(&bn_in_.beta);
  params.push_back(&conv.weights);
  if (conv.deformable()) params.push_back(&conv.offset_weights);
  params.push_back(&bn_conv_.gamma);
  params.push_back(&bn_conv_.beta);
  params.push_back(&unary_out_.weights);
  params.push_back(&bn_out_.gamma);
  params.push_back(&bn_out_.beta);
  if (projection_) {
    params.push_back(&unary_shortcut_.weights);
    params.push_back(&bn_shortcut_.gamma);
    params.push_back(&bn_shortcut_.beta);
  }
}

void BottleneckBlock::collect_norms(std::vector<BatchNormLayer*>& norms) {
  norms.push_back(&bn_in_);
  norms.push_back(&bn_conv_);
  norms.push_back(&bn_out_);
  if (projection_) norms.push_back(&bn_shortcut_);
}

KPNetwork::KPNetwork(NetworkSpec spec) : spec_(std::move(spec)), head_dropout_(0.0) {
  spec_.validate();
  const auto layers = spec_.layer_configs();
  const auto& disposition = stable_disposition(spec_.kernel_size);
  int d_in = spec_.input_dim;
  for (int b = 0; b < spec_.block_count(); ++b) {
    const int layer = b / 2;
    const bool strided = b % 2 == 0 && layer > 0;
    const int support = strided ? layer - 1 : layer;
    const std::uint64_t seed = mix_seed(spec_.seed, 100 + b);
    LayerKernel kernel = prepare_layer_kernel(disposition, layers[support].sigma, mix_seed(seed, 0));
    blocks_.emplace_back("block" + std::to_string(b), d_in, spec_.widths[layer], strided, support,
                         std::move(kernel), spec_.block_deformable(b), seed, spec_.offset_lr_factor);
    d_in = blocks_.back().output_width();
  }

  const std::uint64_t head_seed = mix_seed(spec_.seed, 7);
  if (spec_.task == Task::classification) {
    head_unary_ = UnaryLayer("head.unary", d_in, spec_.head_width, mix_seed(head_seed, 1));
    head_bn_ = BatchNormLayer("head.bn", spec_.head_width);
    head_dropout_ = DropoutLayer(spec_.dropout);
    head_out_ = LinearLayer("head.out", spec_.head_width, spec_.num_classes, mix_seed(head_seed, 2));
  } else {
    // decoder stage j produces layer-j features from layer j+1 and the skip
    int coarse = d_in;
    decoder_unary_.resize(spec_.layer_count() - 1);
    decoder_bn_.resize(spec_.layer_count() - 1);
    for (int j = spec_.layer_count() - 2; j >= 0; --j) {
      const int skip = 2 * spec_.widths[j];
      const std::string name = "decoder" + std::to_string(j);
      decoder_unary_[j] = UnaryLayer(name + ".unary", coarse + skip, spec_.widths[j], mix_seed(head_seed, 10 + j));
      decoder_bn_[j] = BatchNormLayer(name + ".bn", spec_.widths[j]);
      coarse = spec_.widths[j];
    }
    const int w = spec_.layer_count() > 1 ? spec_.widths[0] : d_in;
    head_unary_ = UnaryLayer("head.unary", w, w, mix_seed(head_seed, 1));
    head_bn_ = BatchNormLayer("head.bn", w);
    head_out_ = LinearLayer("head.out", w, spec_.num_classes, mix_seed(head_seed, 2));
  }
}

Matrix KPNetwork::forward_blocks(const Batch& batch, const ForwardContext& ctx, int last_block) {
  if (last_block < 0 || last_block >= block_count()) throw ShapeError("network: block index out of range");
  if (static_cast<int>(batch.layers.size()) < spec_.layer_count()) {
    throw ShapeError("network: batch has fewer layers than the network");
  }
  if (batch.features.cols() != spec_.input_dim) {
    throw ShapeError("network: batch features have " + std::to_string(batch.features.cols()) +
                     " channels, network expects " + std::to_string(spec_.input_dim));
  }
  batch_ = &batch;
  input_ = batch.features;
  block_outputs_.assign(blocks_.size(), Matrix());
  const Matrix* x = &input_;
  for (int b = 0; b <= last_block; ++b) {
    block_outputs_[b] = blocks_[b].forward(batch, *x, ctx);
    x = &block_outputs_[b];
  }
  forwarded_blocks_ = last_block + 1;
  return block_outputs_[last_block];
}

KPNetwork::Output KPNetwork::forward(const Batch& batch, const ForwardContext& ctx) {
  forward_blocks(batch, ctx, block_count() - 1);
  Output out;
  for (auto& blk : blocks_) out.regularization += blk.conv.regularization();

  const Matrix& top = block_outputs_.back();
  if (spec_.task == Task::classification) {
    const auto& ids = batch.layers[spec_.layer_count() - 1].element_ids;
    const Matrix pooled = global_average_pool(top, ids, static_cast<int>(batch.element_count()));
    pre_head_ = head_bn_.forward(head_unary_.forward(pooled), ctx.training);
    const Matrix h = head_dropout_.forward(leaky_relu(pre_head_), ctx);
    out.logits = head_out_.forward(h);
    return out;
  }

  decoder_pre_.assign(decoder_unary_.size(), Matrix());
  skip_widths_.assign(decoder_unary_.size(), 0);
  Matrix x = top;
  for (int j = spec_.layer_count() - 2; j >= 0; --j) {
    const Matrix up = gather_rows(x, batch.layers[j].upsamples);
    const Matrix& skip = block_outputs_[2 * j + 1];
    Matrix cat(up.rows(), up.cols() + skip.cols());
    cat << up, skip;
    skip_widths_[j] = static_cast<int>(skip.cols());
    decoder_pre_[j] = decoder_bn_[j].forward(decoder_unary_[j].forward(cat), ctx.training);
    x = leaky_relu(decoder_pre_[j]);
  }
  pre_head_ = head_bn_.forward(head_unary_.forward(x), ctx.training);
  out.logits = head_out_.forward(leaky_relu(pre_head_));
  return out;
}

Matrix KPNetwork::backward_from_block(int block, const Matrix& upstream, double reg_weight) {
  if (block >= forwarded_blocks_) throw ShapeError("network: backward past the forwarded blocks");
  std::vector<Matrix> extra(blocks_.size());
  extra[block] = upstream;
  Matrix g;
  for (int b = block; b >= 0; --b) {
    Matrix total = b == block ? extra[b] : std::move(g);
    g = blocks_[b].backward(total, reg_weight);
  }
  return g;
}

Matrix KPNetwork::backward(const Matrix& logits_grad, double reg_weight) {
  if (!batch_ || forwarded_blocks_ != block_count()) throw ShapeError("network: backward before forward");
  const Batch& batch = *batch_;
  const int last = block_count() - 1;
  std::vector<Matrix> skip_grads(blocks_.size());

  if (spec_.task == Task::classification) {
    Matrix g = head_out_.backward(logits_grad);
    g = head_dropout_.backward(g);
    g = head_unary_.backward(head_bn_.backward(leaky_relu_backward(pre_head_, g)));
    skip_grads[last] = global_average_pool_backward(g, batch.layers[spec_.layer_count() - 1].element_ids);
  } else {
    Matrix g = head_out_.backward(logits_grad);
    g = head_unary_.backward(head_bn_.backward(leaky_relu_backward(pre_head_, g)));
    for (int j = 0; j + 1 < spec_.layer_count(); ++j) {
      const Matrix g_cat =
          decoder_unary_[j].backward(decoder_bn_[j].backward(leaky_relu_backward(decoder_pre_[j], g)));
      const auto up_cols = g_cat.cols() - skip_widths_[j];
      skip_grads[2 * j + 1] = g_cat.rightCols(skip_widths_[j]);
      g = scatter_add_rows(g_cat.leftCols(up_cols), batch.layers[j].upsamples,
                           static_cast<Eigen::Index>(batch.layers[j + 1].points.size()));
    }
    if (skip_grads[last].size() == 0) skip_grads[last] = std::move(g);
    else skip_grads[last] += g;
  }

  Matrix g;
  for (int b = last; b >= 0; --b) {
    Matrix total = std::move(skip_grads[b]);
    if (b < last) {
      if (total.size() == 0) total = std::move(g);
      else total += g;
    }
    g = blocks_[b].backward(total, reg_weight);
  }
  return g;
}

std::vector<Parameter*> KPNetwork::parameters() {
  std::vector<Parameter*> out;
  for (auto& b : blocks_) b.collect(out);
  for (std::size_t j = 0; j < decoder_unary_.size(); ++j) {
    out.push_back(&decoder_unary_[j].weights);
    out.push_back(&decoder_bn_[j].gamma);
    out.push_back(&decoder_bn_[j].beta);
  }
  out.push_back(&head_unary_.weights);
  out.push_back(&head_bn_.gamma);
  out.push_back(&head_bn_.beta);
  out.push_back(&head_out_.weights);
  out.push_back(&head_out_.bias);
  return out;
}

std::vector<BatchNormLayer*> KPNetwork::norms() {
  std::vector<BatchNormLayer*> out;
  for (auto& b : blocks_) b.collect_norms(out);
  for (auto& bn : decoder_bn_) out.push_back(&bn);
  out.push_back(&head_bn_);
  return out;
}

std::vector<KPConvLayer*> KPNetwork::convolutions() {
  std::vector<KPConvLayer*> out;
  for (auto& b : blocks_) out.push_back(&b.conv);
  return out;
}

void KPNetwork::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

void KPNetwork::save_state(std::ostream& out) {
  using namespace binary;
  const auto params = parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    put_string(out, p->name);
    put_matrix(out, p->value);
    put_matrix(out, p->momentum);
  }
  const auto bns = norms();
  put_u32(out, static_cast<std::uint32_t>(bns.size()));
  for (auto* bn : bns) {
    put_matrix(out, bn->running_mean);
    put_matrix(out, bn->running_var);
    put_u64(out, static_cast<std::uint64_t>(bn->updates));
  }
  put_u32(out, static_cast<std::uint32_t>(blocks_.size()));
  for (auto& b : blocks_) {
    const auto& k = b.conv.kernel;
    put_f64(out, k.sigma);
    put_u32(out, static_cast<std::uint32_t>(k.points.size()));
    for (const auto& p : k.points) {
      put_f64(out, p.x());
      put_f64(out, p.y());
      put_f64(out, p.z());
    }
    for (Eigen::Index i = 0; i < 9; ++i) put_f64(out, k.rotation.data()[i]);
  }
}

void KPNetwork::load_state(std::istream& in) {
  using namespace binary;
  const auto params = parameters();
  if (get_u32(in) != params.size()) throw IoError("checkpoint: parameter count mismatch");
  for (auto* p : params) {
    const auto name = get_string(in);
    if (name != p->name) throw IoError("checkpoint: expected parameter " + p->name + ", found " + name);
    get_matrix_into(in, p->value, name);
    get_matrix_into(in, p->momentum, name + " momentum");
    p->zero_grad();
  }
  const auto bns = norms();
  if (get_u32(in) != bns.size()) throw IoError("checkpoint: batch-norm count mismatch");
  for (auto* bn : bns) {
    get_matrix_into(in, bn->running_mean, "running mean");
    get_matrix_into(in, bn->running_var, "running var");
    bn->updates = static_cast<long>(get_u64(in));
  }
  if (get_u32(in) != blocks_.size()) throw IoError("checkpoint: block count mismatch");
  for (auto& b : blocks_) {
    auto& k = b.conv.kernel;
    k.sigma = get_f64(in);
    if (get_u32(in) != k.points.size()) throw IoError("checkpoint: kernel size mismatch");
    for (auto& p : k.points) {
      p.x() = get_f64(in);
      p.y() = get_f64(in);
      p.z() = get_f64(in);
    }
    for (Eigen::Index i = 0; i < 9; ++i) k.rotation.data()[i] = get_f64(in);
  }
}

}  // namespace kpconv
