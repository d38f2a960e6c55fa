#include "kpconv/conv_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>

#include "kpconv/errors.hpp"
#include "binary_io.hpp"

namespace kpconv {

namespace {

int kernel_input_dim(const ConvInputs& in) {
  const int K = in.kernel.size();
  if (K == 0) throw ShapeError("kpconv: empty kernel");
  if (in.weights.rows() % K != 0) throw ShapeError("kpconv: weight rows not a multiple of K");
  return static_cast<int>(in.weights.rows()) / K;
}

void check_inputs(const ConvInputs& in) {
  const int K = in.kernel.size();
  const int d_in = kernel_input_dim(in);
  if (in.features.cols() != d_in) {
    throw ShapeError("kpconv: features have " + std::to_string(in.features.cols()) +
                     " channels, weights expect " + std::to_string(d_in));
  }
  if (in.features.rows() != static_cast<Eigen::Index>(in.supports.size())) {
    throw ShapeError("kpconv: feature rows do not match support count");
  }
  if (in.neighbors.rows != static_cast<int>(in.queries.size())) {
    throw ShapeError("kpconv: neighborhood rows do not match query count");
  }
  if (in.neighbors.support_count != static_cast<int>(in.supports.size())) {
    throw ShapeError("kpconv: neighborhood built for a different support set");
  }
  for (auto idx : in.neighbors.indices) {
    if (idx < 0 || idx > in.neighbors.support_count) throw ShapeError("kpconv: neighbor index out of range");
  }
  if (in.offsets) {
    if (in.offsets->rows() != static_cast<Eigen::Index>(in.queries.size()) || in.offsets->cols() != 3 * K) {
      throw ShapeError("kpconv: offsets must be N' x 3K");
    }
  }
}

/// Kernel point k for query q, shifted when offsets are present.
Point3 kernel_point(const ConvInputs& in, Eigen::Index q, int k) {
  Point3 p = in.kernel.points[k];
  if (in.offsets) p += in.offsets->row(q).segment<3>(3 * k).transpose();
  return p;
}

/// Rows of correlation-weighted features: A(q, k*D_in + c) = sum_i h_qik f_ic.
Matrix weighted_features(const ConvInputs& in, int d_in) {
  const int K = in.kernel.size();
  const auto n_queries = static_cast<Eigen::Index>(in.queries.size());
  const double sigma = in.kernel.sigma;
  Matrix A = Matrix::Zero(n_queries, static_cast<Eigen::Index>(K) * d_in);
  PointList kp(K);
  for (Eigen::Index q = 0; q < n_queries; ++q) {
    for (int k = 0; k < K; ++k) kp[k] = kernel_point(in, q, k);
    const Point3& x = in.queries[q];
    for (auto idx : in.neighbors.row(static_cast<int>(q))) {
      if (in.neighbors.is_shadow(idx)) break;
      const Point3 y = in.supports[idx] - x;
      for (int k = 0; k < K; ++k) {
        const double h = correlation(y, kp[k], sigma);
        if (h <= 0.0) continue;
        A.row(q).segment(static_cast<Eigen::Index>(k) * d_in, d_in) += h * in.features.row(idx);
      }
    }
  }
  return A;
}

}  // namespace

ConvWeights stack_kernel_weights(std::span<const Matrix> per_kernel_point) {
  if (per_kernel_point.empty()) throw ShapeError("stack_kernel_weights: no matrices");
  const auto rows = per_kernel_point[0].rows();
  const auto cols = per_kernel_point[0].cols();
  ConvWeights out(rows * static_cast<Eigen::Index>(per_kernel_point.size()), cols);
  for (std::size_t k = 0; k < per_kernel_point.size(); ++k) {
    if (per_kernel_point[k].rows() != rows || per_kernel_point[k].cols() != cols) {
      throw ShapeError("stack_kernel_weights: kernel point matrices differ in shape");
    }
    out.middleRows(static_cast<Eigen::Index>(k) * rows, rows) = per_kernel_point[k];
  }
  return out;
}

double correlation(const Point3& y, const Point3& kernel_point, double sigma) {
  return std::max(0.0, 1.0 - (y - kernel_point).norm() / sigma);
}

Matrix kpconv_forward(const ConvInputs& in) {
  check_inputs(in);
  const int d_in = kernel_input_dim(in);
  return weighted_features(in, d_in) * in.weights;
}

Matrix kpconv_forward(std::span<const Point3> queries, std::span<const Point3> supports,
                      const Matrix& features, const NeighborhoodMatrix& neighbors,
                      const LayerKernel& kernel, const ConvWeights& weights) {
  return kpconv_forward(ConvInputs{queries, supports, features, neighbors, kernel, weights});
}

Matrix deform_kpconv_forward(std::span<const Point3> queries, std::span<const Point3> supports,
                             const Matrix& features, const NeighborhoodMatrix& neighbors,
                             const LayerKernel& kernel, const ConvWeights& weights,
                             const OffsetField& offsets) {
  return kpconv_forward(ConvInputs{queries, supports, features, neighbors, kernel, weights, &offsets});
}

OffsetField predict_offsets(std::span<const Point3> queries, std::span<const Point3> supports,
                            const Matrix& features, const NeighborhoodMatrix& neighbors,
                            const LayerKernel& offset_kernel, const ConvWeights& offset_weights) {
  if (offset_weights.cols() != 3 * offset_kernel.size()) {
    throw ConfigError("predict_offsets: predictor must output 3K = " +
                      std::to_string(3 * offset_kernel.size()) + " values, has " +
                      std::to_string(offset_weights.cols()));
  }
  return kpconv_forward(queries, supports, features, neighbors, offset_kernel, offset_weights);
}

ConvGradients kpconv_backward(const ConvInputs& in, const Matrix& upstream) {
  check_inputs(in);
  const int K = in.kernel.size();
  const int d_in = kernel_input_dim(in);
  const auto n_queries = static_cast<Eigen::Index>(in.queries.size());
  if (upstream.rows() != n_queries || upstream.cols() != in.weights.cols()) {
    throw ShapeError("kpconv_backward: upstream gradient must be N' x D_out");
  }
  const double sigma = in.kernel.sigma;

  const Matrix A = weighted_features(in, d_in);
  ConvGradients g;
  g.weights = A.transpose() * upstream;
  const Matrix dA = upstream * in.weights.transpose();
  g.features = Matrix::Zero(in.features.rows(), in.features.cols());
  if (in.offsets) g.offsets = OffsetField::Zero(n_queries, 3 * K);

  PointList kp(K);
  for (Eigen::Index q = 0; q < n_queries; ++q) {
    for (int k = 0; k < K; ++k) kp[k] = kernel_point(in, q, k);
    const Point3& x = in.queries[q];
    for (auto idx : in.neighbors.row(static_cast<int>(q))) {
      if (in.neighbors.is_shadow(idx)) break;
      const Point3 y = in.supports[idx] - x;
      for (int k = 0; k < K; ++k) {
        const Point3 diff = y - kp[k];
        const double d = diff.norm();
        const double h = 1.0 - d / sigma;
        if (h <= 0.0) continue;
        const auto grad_row = dA.row(q).segment(static_cast<Eigen::Index>(k) * d_in, d_in);
        g.features.row(idx) += h * grad_row;
        if (in.offsets && d > 0.0) {
          const double dh = grad_row.dot(in.features.row(idx));
          g.offsets.row(q).segment<3>(3 * k) += (dh / (d * sigma)) * diff.transpose();
        }
      }
    }
  }
  return g;
}

std::vector<double> correlation_block(const ConvInputs& in) {
  check_inputs(in);
  const int K = in.kernel.size();
  const int width = in.neighbors.width;
  std::vector<double> h(in.queries.size() * static_cast<std::size_t>(width) * K, 0.0);
  for (std::size_t q = 0; q < in.queries.size(); ++q) {
    const auto row = in.neighbors.row(static_cast<int>(q));
    for (int j = 0; j < width; ++j) {
      if (in.neighbors.is_shadow(row[j])) break;
      const Point3 y = in.supports[row[j]] - in.queries[q];
      for (int k = 0; k < K; ++k) {
        h[(q * width + j) * K + k] = correlation(y, kernel_point(in, static_cast<Eigen::Index>(q), k), in.kernel.sigma);
      }
    }
  }
  return h;
}

void write_correlation_dump(std::ostream& out, const ConvInputs& in) {
  const auto h = correlation_block(in);
  out.write("KPHT", 4);
  binary::put_u32(out, 1);
  binary::put_u32(out, static_cast<std::uint32_t>(in.queries.size()));
  binary::put_u32(out, static_cast<std::uint32_t>(in.neighbors.width));
  binary::put_u32(out, static_cast<std::uint32_t>(in.kernel.size()));
  for (double v : h) binary::put_f64(out, v);
}

double fitting_loss(std::span<const Point3> neighbor_offsets,
                    std::span<const Point3> deformed_kernel_points, double sigma) {
  if (neighbor_offsets.empty()) return 0.0;
  double loss = 0.0;
  for (const auto& p : deformed_kernel_points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : neighbor_offsets) best = std::min(best, (y - p).squaredNorm());
    loss += best / (sigma * sigma);
  }
  return loss;
}

double repulsive_loss(std::span<const Point3> deformed_kernel_points, double sigma) {
  double loss = 0.0;
  for (std::size_t k = 0; k < deformed_kernel_points.size(); ++k) {
    for (std::size_t l = 0; l < deformed_kernel_points.size(); ++l) {
      if (l == k) continue;
      const double h = correlation(deformed_kernel_points[k], deformed_kernel_points[l], sigma);
      loss += h * h;
    }
  }
  return loss;
}

RegularizationResult regularization_loss(const ConvInputs& in) {
  check_inputs(in);
  if (!in.offsets) throw ShapeError("regularization_loss: requires offsets");
  const int K = in.kernel.size();
  const double sigma = in.kernel.sigma;
  const auto n_queries = static_cast<Eigen::Index>(in.queries.size());

  RegularizationResult r;
  r.offset_gradient = OffsetField::Zero(n_queries, 3 * K);
  PointList kp(K);
  PointList ys;
  for (Eigen::Index q = 0; q < n_queries; ++q) {
    for (int k = 0; k < K; ++k) kp[k] = kernel_point(in, q, k);
    ys.clear();
    for (auto idx : in.neighbors.row(static_cast<int>(q))) {
      if (in.neighbors.is_shadow(idx)) break;
      ys.push_back(in.supports[idx] - in.queries[q]);
    }
    auto grad = r.offset_gradient.row(q);

    if (!ys.empty()) {
      for (int k = 0; k < K; ++k) {
        std::size_t best = 0;
        double best_d2 = (ys[0] - kp[k]).squaredNorm();
        for (std::size_t i = 1; i < ys.size(); ++i) {
          const double d2 = (ys[i] - kp[k]).squaredNorm();
          if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
          }
        }
        r.fitting += best_d2 / (sigma * sigma);
        grad.segment<3>(3 * k) += (2.0 / (sigma * sigma)) * (kp[k] - ys[best]).transpose();
      }
    }

    for (int k = 0; k < K; ++k) {
      for (int l = k + 1; l < K; ++l) {
        const Point3 diff = kp[k] - kp[l];
        const double d = diff.norm();
        const double h = 1.0 - d / sigma;
        if (h <= 0.0) continue;
        // both orderings of the pair
        r.repulsive += 2.0 * h * h;
        if (d == 0.0) continue;
        const Point3 dk = (-4.0 * h / (d * sigma)) * diff;
        grad.segment<3>(3 * k) += dk.transpose();
        grad.segment<3>(3 * l) -= dk.transpose();
      }
    }
  }
  return r;
}

double active_kernel_fraction(const ConvInputs& in) {
  check_inputs(in);
  const int K = in.kernel.size();
  const auto n_queries = static_cast<Eigen::Index>(in.queries.size());
  if (n_queries == 0) return 0.0;
  const double sigma2 = in.kernel.sigma * in.kernel.sigma;
  long active = 0;
  for (Eigen::Index q = 0; q < n_queries; ++q) {
    for (int k = 0; k < K; ++k) {
      const Point3 kp = kernel_point(in, q, k);
      for (auto idx : in.neighbors.row(static_cast<int>(q))) {
        if (in.neighbors.is_shadow(idx)) break;
        if ((in.supports[idx] - in.queries[q] - kp).squaredNorm() < sigma2) {
          ++active;
          break;
        }
      }
    }
  }
  return static_cast<double>(active) / static_cast<double>(n_queries * K);
}

}  // namespace kpconv
