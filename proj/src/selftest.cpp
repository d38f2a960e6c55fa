#include "kpconv/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "kpconv/conv_ops.hpp"
#include "kpconv/geometry.hpp"
#include "kpconv/kernel_points.hpp"
#include "kpconv/network.hpp"

namespace kpconv {

namespace {

constexpr double kStep = 1e-5;
constexpr double kFloor = 1e-8;
constexpr double kOperatorTolerance = 1e-4;
constexpr double kNetworkTolerance = 1e-3;

double relative_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kFloor}); }

Matrix normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Upstream for the scalar sum(u .* out), scaled so the scalar stays small.
Matrix probe(std::mt19937_64& rng, const Matrix& out) {
  Matrix u = normal_matrix(rng, out.rows(), out.cols(), 1.0);
  const double mass = (u.array() * out.array()).abs().sum();
  if (mass > 0.1) u *= 0.1 / mass;
  return u;
}

/// Compares `analytic` with central differences of `f` at up to `samples`
/// entries of `x` (every entry when samples <= 0).
void compare(SelfCheck& check, Matrix& x, const Matrix& analytic, const std::function<double()>& f, int samples,
             std::mt19937_64& rng) {
  const Eigen::Index n = x.size();
  if (n == 0) return;
  const bool exhaustive = samples <= 0 || samples >= n;
  const int wanted = exhaustive ? static_cast<int>(n) : samples;
  const double f0 = f();
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  Eigen::Index next = 0;
  for (int attempts = 0, done = 0; done < wanted && attempts < 4 * wanted + 8; ++attempts) {
    if (exhaustive && next >= n) break;
    const Eigen::Index i = exhaustive ? next++ : pick(rng);
    double& v = x.data()[i];
    const double saved = v;
    v = saved + kStep;
    const double plus = f();
    v = saved - kStep;
    const double minus = f();
    v = saved;
    if (relative_error((plus - f0) / kStep, (f0 - minus) / kStep) > 1e-3) {
      ++check.kinks;
      continue;
    }
    check.max_error = std::max(check.max_error, relative_error(analytic.data()[i], (plus - minus) / (2.0 * kStep)));
    ++check.checked;
    ++done;
  }
}

struct ConvInstance {
  PointList supports;
  PointList queries;
  Matrix features;
  NeighborhoodMatrix neighbors;
  LayerKernel kernel;
  ConvWeights weights;
};

ConvInstance conv_instance(std::mt19937_64& rng, int points, int d_in, int d_out) {
  ConvInstance c;
  const double sigma = 0.3;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < points; ++i) c.supports.emplace_back(u(rng), u(rng), u(rng));
  c.queries.assign(c.supports.begin(), c.supports.begin() + points / 2);
  c.features = normal_matrix(rng, points, d_in, 1.0);
  c.neighbors = radius_neighbors(c.queries, c.supports, 2.5 * sigma);
  c.kernel = prepare_layer_kernel(stable_disposition(15), sigma, rng());
  c.weights = normal_matrix(rng, 15 * d_in, d_out, 1.0);
  return c;
}

SelfCheck rigid_features(std::mt19937_64& rng) {
  SelfCheck check{"rigid kpconv: features", 0.0, kOperatorTolerance};
  auto c = conv_instance(rng, 40, 3, 4);
  const auto forward = [&] { return kpconv_forward(c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights); };
  const Matrix u = probe(rng, forward());
  const auto grads = kpconv_backward(ConvInputs{c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights}, u);
  compare(check, c.features, grads.features, [&] { return (u.array() * forward().array()).sum(); }, 0, rng);
  return check;
}

SelfCheck rigid_weights(std::mt19937_64& rng) {
  SelfCheck check{"rigid kpconv: weights", 0.0, kOperatorTolerance};
  auto c = conv_instance(rng, 40, 3, 4);
  const auto forward = [&] { return kpconv_forward(c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights); };
  const Matrix u = probe(rng, forward());
  const auto grads = kpconv_backward(ConvInputs{c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights}, u);
  compare(check, c.weights, grads.weights, [&] { return (u.array() * forward().array()).sum(); }, 60, rng);
  return check;
}

SelfCheck deformable_offsets(std::mt19937_64& rng) {
  SelfCheck check{"deformable kpconv: offsets", 0.0, kOperatorTolerance};
  auto c = conv_instance(rng, 40, 3, 4);
  OffsetField offsets = normal_matrix(rng, static_cast<Eigen::Index>(c.queries.size()), 45, 0.1);
  const auto forward = [&] {
    return deform_kpconv_forward(c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights, offsets);
  };
  const Matrix u = probe(rng, forward());
  const auto grads =
      kpconv_backward(ConvInputs{c.queries, c.supports, c.features, c.neighbors, c.kernel, c.weights, &offsets}, u);
  compare(check, offsets, grads.offsets, [&] { return (u.array() * forward().array()).sum(); }, 80, rng);
  return check;
}

SelfCheck offset_predictor(std::mt19937_64& rng) {
  SelfCheck check{"offset predictor: weights", 0.0, kOperatorTolerance};
  auto c = conv_instance(rng, 40, 3, 4);
  KPConvLayer layer("conv", c.kernel, 3, 4, true, rng());
  layer.offset_weights.value = normal_matrix(rng, layer.offset_weights.value.rows(), layer.offset_weights.value.cols(), 0.02);
  const auto forward = [&] { return layer.forward(c.queries, c.supports, c.features, c.neighbors); };
  const Matrix u = probe(rng, forward());
  layer.offset_weights.zero_grad();
  layer.weights.zero_grad();
  forward();
  layer.backward(u, 0.0);
  const Matrix analytic = layer.offset_weights.grad;
  compare(check, layer.offset_weights.value, analytic, [&] { return (u.array() * forward().array()).sum(); }, 80, rng);
  return check;
}

/// Regularization gradient on an instance where only one of the two losses
/// is active: with kernel points kept apart the repulsion vanishes; without
/// neighbors the fitting term vanishes.
SelfCheck regularization(std::mt19937_64& rng, bool fitting) {
  SelfCheck check{fitting ? "fitting loss" : "repulsive loss", 0.0, kOperatorTolerance};
  auto c = conv_instance(rng, 40, 2, 2);
  const auto K = c.kernel.size();
  OffsetField offsets;
  NeighborhoodMatrix neighbors = c.neighbors;
  if (fitting) {
    offsets = normal_matrix(rng, static_cast<Eigen::Index>(c.queries.size()), 3 * K, 0.01);
  } else {
    // pull every kernel point halfway to the center so influence areas overlap
    offsets = Matrix::Zero(static_cast<Eigen::Index>(c.queries.size()), 3 * K);
    for (Eigen::Index q = 0; q < offsets.rows(); ++q) {
      for (int k = 0; k < K; ++k) offsets.block(q, 3 * k, 1, 3) = -0.5 * c.kernel.points[k].transpose();
    }
    offsets += normal_matrix(rng, offsets.rows(), offsets.cols(), 0.01);
    neighbors = radius_neighbors(c.queries, c.supports, 1e-9);
    neighbors.indices.assign(neighbors.indices.size(), neighbors.support_count);
  }
  const auto inputs = [&] { return ConvInputs{c.queries, c.supports, c.features, neighbors, c.kernel, c.weights, &offsets}; };
  const auto reg = regularization_loss(inputs());
  if ((fitting ? reg.repulsive : reg.fitting) != 0.0 || (fitting ? reg.fitting : reg.repulsive) <= 0.0) {
    check.max_error = INFINITY;
    return check;
  }
  const double scale = 0.1 / reg.total();
  const Matrix analytic = scale * reg.offset_gradient;
  compare(check, offsets, analytic, [&] { return scale * regularization_loss(inputs()).total(); }, 80, rng);
  return check;
}

SelfCheck network(std::mt19937_64& rng, Task task) {
  SelfCheck check{"network end-to-end: " + to_string(task), 0.0, kNetworkTolerance};
  NetworkSpec spec;
  spec.task = task;
  spec.input_dim = 2;
  spec.num_classes = 3;
  spec.first_cell_size = 0.3;
  spec.widths = {4, 4, 6, 6, 8};
  spec.head_width = 6;
  spec.deformable_blocks = 5;
  spec.seed = rng();
  KPNetwork net(spec);
  for (auto* conv : net.convolutions()) {
    if (conv->deformable()) {
      conv->offset_weights.value =
          normal_matrix(rng, conv->offset_weights.value.rows(), conv->offset_weights.value.cols(), 0.005);
    }
  }
  std::uniform_real_distribution<double> g(0.5, 1.5), u(-1.0, 1.0);
  for (auto* bn : net.norms()) {
    for (Eigen::Index i = 0; i < bn->gamma.value.size(); ++i) bn->gamma.value.data()[i] = g(rng);
    bn->beta.value = normal_matrix(rng, 1, bn->beta.value.cols(), 0.1);
  }
  std::vector<PointCloud> elements(2);
  for (auto& e : elements) {
    for (int i = 0; i < 24; ++i) e.points.emplace_back(u(rng), u(rng), u(rng));
    e.features = normal_matrix(rng, 24, 2, 1.0);
    e.features.col(0).setOnes();
    for (int i = 0; i < 24; ++i) e.labels.push_back(static_cast<int>(rng() % 3));
  }
  const auto batch = assemble_batch(elements, spec.layer_configs(), 48);
  const ForwardContext ctx{true, 5};
  const auto first = net.forward(batch, ctx);
  const Matrix upstream = probe(rng, first.logits);
  const double w = first.regularization > 0.0 ? 0.1 * std::min(1.0, 0.1 / first.regularization) : 0.1;
  const auto loss = [&] {
    const auto out = net.forward(batch, ctx);
    return (upstream.array() * out.logits.array()).sum() + w * out.regularization;
  };
  net.zero_grad();
  net.forward(batch, ctx);
  net.backward(upstream, w);
  for (auto* p : net.parameters()) {
    const Matrix analytic = p->grad;
    compare(check, p->value, analytic, loss, 4, rng);
  }
  return check;
}

}  // namespace

std::vector<SelfCheck> run_selftest(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SelfCheck> checks;
  checks.push_back(rigid_features(rng));
  checks.push_back(rigid_weights(rng));
  checks.push_back(deformable_offsets(rng));
  checks.push_back(offset_predictor(rng));
  checks.push_back(regularization(rng, true));
  checks.push_back(regularization(rng, false));
  checks.push_back(network(rng, Task::classification));
  checks.push_back(network(rng, Task::segmentation));
  return checks;
}

}  // namespace kpconv
