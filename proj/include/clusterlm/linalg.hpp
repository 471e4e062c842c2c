#pragma once

// Minimal dense linear algebra for desk-scale problems: a row-major matrix
// and a cyclic Jacobi eigensolver for symmetric matrices. No BLAS; the
// matrices here are at most a few thousand on a side.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "clusterlm/common.hpp"

namespace clusterlm {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
};

inline double squared_distance(std::span<const double> a,
                               std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

inline double euclidean_distance(std::span<const double> a,
                                 std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Matrix vectors;              // row i = eigenvector for values[i]
};

// Cyclic Jacobi rotations on a symmetric matrix. O(n^3) per sweep; exact
// enough for the oracle tests (off-diagonal norm driven below 1e-12 of the
// diagonal scale).
inline EigenDecomposition jacobi_eigen_symmetric(Matrix a,
                                                 std::size_t max_sweeps = 64) {
  const std::size_t n = a.rows;
  if (a.rows != a.cols) fail_validation("jacobi_eigen_symmetric: matrix not square");
  Matrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

  double diag_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag_scale = std::max(diag_scale, std::fabs(a.at(i, i)));
  if (diag_scale == 0.0) diag_scale = 1.0;

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (std::sqrt(off) <= 1e-13 * diag_scale * n) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double apq = a.at(p, q);
        if (std::fabs(apq) <= 1e-300) continue;
        double app = a.at(p, p);
        double aqq = a.at(q, q);
        double tau = (aqq - app) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;

        for (std::size_t i = 0; i < n; ++i) {
          double aip = a.at(i, p);
          double aiq = a.at(i, q);
          a.at(i, p) = c * aip - s * aiq;
          a.at(i, q) = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          double api = a.at(p, i);
          double aqi = a.at(q, i);
          a.at(p, i) = c * api - s * aqi;
          a.at(q, i) = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          double vip = v.at(i, p);
          double viq = v.at(i, q);
          v.at(i, p) = c * vip - s * viq;
          v.at(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = a.at(i, i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return diag[x] > diag[y]; });

  EigenDecomposition out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    out.values[r] = diag[order[r]];
    for (std::size_t i = 0; i < n; ++i) out.vectors.at(r, i) = v.at(i, order[r]);
  }
  return out;
}

}  // namespace clusterlm
