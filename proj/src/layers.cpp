#include "kpconv/layers.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "kpconv/errors.hpp"

namespace kpconv {

namespace {

Matrix he_normal(int rows, int cols, double variance, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void require_cols(const Matrix& x, Eigen::Index cols, const std::string& who) {
  if (x.cols() != cols) {
    throw ShapeError(who + ": expected " + std::to_string(cols) + " channels, got " +
                     std::to_string(x.cols()));
  }
}

}  // namespace

Parameter::Parameter(std::string n, Matrix v, double scale)
    : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())),
      momentum(Matrix::Zero(value.rows(), value.cols())), grad_scale(scale) {}

Matrix leaky_relu(const Matrix& x) {
  return x.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
}

Matrix leaky_relu_backward(const Matrix& pre, const Matrix& upstream) {
  return upstream.binaryExpr(pre, [](double g, double v) { return v > 0.0 ? g : kLeakySlope * g; });
}

UnaryLayer::UnaryLayer(std::string name, int d_in, int d_out, std::uint64_t seed)
    : weights(std::move(name), he_normal(d_in, d_out, 2.0 / d_in, seed)) {}

Matrix UnaryLayer::forward(const Matrix& x) {
  require_cols(x, weights.value.rows(), weights.name);
  input_ = x;
  return x * weights.value;
}

Matrix UnaryLayer::backward(const Matrix& upstream) {
  weights.grad.noalias() += input_.transpose() * upstream;
  return upstream * weights.value.transpose();
}

LinearLayer::LinearLayer(std::string name, int d_in, int d_out, std::uint64_t seed)
    : weights(name + ".weights", he_normal(d_in, d_out, 2.0 / d_in, seed)),
      bias(name + ".bias", Matrix::Zero(1, d_out)) {}

Matrix LinearLayer::forward(const Matrix& x) {
  require_cols(x, weights.value.rows(), weights.name);
  input_ = x;
  Matrix out = x * weights.value;
  out.rowwise() += bias.value.row(0);
  return out;
}

Matrix LinearLayer::backward(const Matrix& upstream) {
  weights.grad.noalias() += input_.transpose() * upstream;
  bias.grad += upstream.colwise().sum();
  return upstream * weights.value.transpose();
}

BatchNormLayer::BatchNormLayer(std::string name, int channels)
    : gamma(name + ".gamma", Matrix::Ones(1, channels)),
      beta(name + ".beta", Matrix::Zero(1, channels)),
      running_mean(Matrix::Zero(1, channels)),
      running_var(Matrix::Ones(1, channels)) {}

Matrix BatchNormLayer::forward(const Matrix& x, bool training) {
  require_cols(x, gamma.value.cols(), gamma.name);
  training_ = training;
  const auto n = x.rows();
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd var;
  if (training && n > 0) {
    mean = x.colwise().mean();
    const Matrix centered = x.rowwise() - mean;
    var = centered.array().square().colwise().sum() / static_cast<double>(n);
    if (updates == 0) {
      running_mean = mean;
      running_var = var;
    } else {
      running_mean = momentum * running_mean + (1.0 - momentum) * Matrix(mean);
      running_var = momentum * running_var + (1.0 - momentum) * Matrix(var);
    }
    ++updates;
  } else {
    mean = running_mean.row(0);
    var = running_var.row(0);
  }
  inv_std_ = (var.array() + epsilon).rsqrt().matrix();
  xhat_ = (x.rowwise() - mean).array().rowwise() * inv_std_.array();
  Matrix out = xhat_.array().rowwise() * gamma.value.row(0).array();
  out.rowwise() += beta.value.row(0);
  return out;
}

Matrix BatchNormLayer::backward(const Matrix& upstream) {
  const auto n = upstream.rows();
  beta.grad += upstream.colwise().sum();
  gamma.grad += upstream.cwiseProduct(xhat_).colwise().sum();
  const Matrix dxhat = upstream.array().rowwise() * gamma.value.row(0).array();
  if (!training_ || n == 0) return dxhat.array().rowwise() * inv_std_.array();
  const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(xhat_).colwise().sum();
  Matrix dx = (dxhat * static_cast<double>(n)).rowwise() - sum_d;
  dx -= Matrix(xhat_.array().rowwise() * sum_dx.array());
  return (dx.array().rowwise() * (inv_std_.array() / static_cast<double>(n))).matrix();
}

Matrix DropoutLayer::forward(const Matrix& x, const ForwardContext& ctx) {
  if (!ctx.training || p_ <= 0.0) {
    mask_ = Matrix::Ones(x.rows(), x.cols());
    return x;
  }
  std::mt19937_64 rng(ctx.dropout_seed);
  std::bernoulli_distribution keep(1.0 - p_);
  mask_.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask_.size(); ++i) mask_.data()[i] = keep(rng) ? 1.0 / (1.0 - p_) : 0.0;
  return x.cwiseProduct(mask_);
}

Matrix DropoutLayer::backward(const Matrix& upstream) const { return upstream.cwiseProduct(mask_); }

Matrix NeighborMaxPool::forward(const Matrix& x, const NeighborhoodMatrix& neighbors) {
  input_rows_ = x.rows();
  const auto channels = x.cols();
  Matrix out = Matrix::Zero(neighbors.rows, channels);
  argmax_.assign(static_cast<std::size_t>(neighbors.rows) * channels, -1);
  for (int q = 0; q < neighbors.rows; ++q) {
    for (auto idx : neighbors.row(q)) {
      if (neighbors.is_shadow(idx)) break;
      for (Eigen::Index c = 0; c < channels; ++c) {
        auto& arg = argmax_[static_cast<std::size_t>(q) * channels + c];
        if (arg < 0 || x(idx, c) > out(q, c)) {
          out(q, c) = x(idx, c);
          arg = idx;
        }
      }
    }
  }
  return out;
}

Matrix NeighborMaxPool::backward(const Matrix& upstream) const {
  Matrix dx = Matrix::Zero(input_rows_, upstream.cols());
  for (Eigen::Index q = 0; q < upstream.rows(); ++q) {
    for (Eigen::Index c = 0; c < upstream.cols(); ++c) {
      const auto arg = argmax_[static_cast<std::size_t>(q) * upstream.cols() + c];
      if (arg >= 0) dx(arg, c) += upstream(q, c);
    }
  }
  return dx;
}

Matrix global_average_pool(const Matrix& features, std::span<const int> element_ids,
                           int element_count) {
  if (element_ids.size() != static_cast<std::size_t>(features.rows())) {
    throw ShapeError("global_average_pool: element ids must cover every row");
  }
  Matrix out = Matrix::Zero(element_count, features.cols());
  std::vector<int> counts(element_count, 0);
  for (std::size_t i = 0; i < element_ids.size(); ++i) {
    const int e = element_ids[i];
    if (e < 0 || e >= element_count) throw ShapeError("global_average_pool: element id out of range");
    out.row(e) += features.row(static_cast<Eigen::Index>(i));
    ++counts[e];
  }
  for (int e = 0; e < element_count; ++e) {
    if (counts[e] == 0) throw EmptyInputError("global_average_pool: element " + std::to_string(e) + " is empty");
    out.row(e) /= counts[e];
  }
  return out;
}

Matrix global_average_pool_backward(const Matrix& upstream, std::span<const int> element_ids) {
  std::vector<int> counts(upstream.rows(), 0);
  for (int e : element_ids) ++counts[e];
  Matrix dx(static_cast<Eigen::Index>(element_ids.size()), upstream.cols());
  for (std::size_t i = 0; i < element_ids.size(); ++i) {
    dx.row(static_cast<Eigen::Index>(i)) = upstream.row(element_ids[i]) / counts[element_ids[i]];
  }
  return dx;
}

Matrix gather_rows(const Matrix& x, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Matrix scatter_add_rows(const Matrix& upstream, std::span<const int> rows, Eigen::Index out_rows) {
  Matrix out = Matrix::Zero(out_rows, upstream.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) += upstream.row(static_cast<Eigen::Index>(i));
  return out;
}

Matrix nearest_upsample(const Matrix& coarse_features, std::span<const Point3> fine_points,
                        std::span<const Point3> coarse_points) {
  if (coarse_features.rows() != static_cast<Eigen::Index>(coarse_points.size())) {
    throw ShapeError("nearest_upsample: feature rows do not match coarse points");
  }
  const auto idx = nearest_neighbor_indices(fine_points, coarse_points);
  return gather_rows(coarse_features, idx);
}

Matrix softmax(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

CrossEntropy softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != static_cast<std::size_t>(logits.rows())) {
    throw ShapeError("softmax_cross_entropy: one label per row required");
  }
  CrossEntropy ce;
  const auto n = logits.rows();
  if (n == 0) return ce;
  ce.gradient = softmax(logits);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= logits.cols()) throw ShapeError("softmax_cross_entropy: label out of range");
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    ce.loss += lse - logits(r, y);
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (arg == y) ++ce.correct;
    ce.gradient(r, y) -= 1.0;
  }
  ce.loss /= static_cast<double>(n);
  ce.gradient /= static_cast<double>(n);
  return ce;
}

KPConvLayer::KPConvLayer(std::string name, LayerKernel k, int d_in, int d_out, bool deformable,
                         std::uint64_t seed, double offset_lr_factor)
    : kernel(std::move(k)),
      weights(name + ".weights",
              he_normal(kernel.size() * d_in, d_out, 2.0 / (static_cast<double>(d_in) * kernel.size()), seed)),
      deformable_(deformable) {
  if (deformable_) {
    offset_weights = Parameter(name + ".offset_weights",
                               Matrix::Zero(static_cast<Eigen::Index>(kernel.size()) * d_in, 3 * kernel.size()),
                               offset_lr_factor);
  }
}

Matrix KPConvLayer::forward(std::span<const Point3> queries, std::span<const Point3> supports,
                            const Matrix& features, const NeighborhoodMatrix& neighbors) {
  queries_ = queries;
  supports_ = supports;
  neighbors_ = &neighbors;
  features_ = features;
  if (!deformable_) return kpconv_forward(queries, supports, features, neighbors, kernel, weights.value);

  offsets_ = predict_offsets(queries, supports, features, neighbors, kernel, offset_weights.value);
  const ConvInputs in{queries, supports, features_, neighbors, kernel, weights.value, &offsets_};
  reg_ = regularization_loss(in);
  return kpconv_forward(in);
}

Matrix KPConvLayer::backward(const Matrix& upstream, double reg_weight) {
  if (!neighbors_) throw ShapeError("KPConvLayer::backward before forward");
  if (!deformable_) {
    const ConvInputs in{queries_, supports_, features_, *neighbors_, kernel, weights.value};
    auto g = kpconv_backward(in, upstream);
    weights.grad += g.weights;
    return std::move(g.features);
  }
  const ConvInputs in{queries_, supports_, features_, *neighbors_, kernel, weights.value, &offsets_};
  auto g = kpconv_backward(in, upstream);
  weights.grad += g.weights;
  OffsetField d_offsets = g.offsets;
  if (reg_weight != 0.0) d_offsets += reg_weight * reg_.offset_gradient;
  const ConvInputs pred{queries_, supports_, features_, *neighbors_, kernel, offset_weights.value};
  auto gp = kpconv_backward(pred, d_offsets);
  offset_weights.grad += gp.weights;
  return g.features + gp.features;
}

}  // namespace kpconv
