#pragma once

#include <prunelab/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace prunelab {

// Singular values (descending) of a row-major rows x cols matrix by one-sided Jacobi rotations
// in double precision. Throws a numeric error if the sweeps do not converge.
inline std::vector<double> singular_values(std::span<const float> matrix, std::size_t rows, std::size_t cols,
                                           int max_sweeps = 60) {
  if (rows == 0 || cols == 0 || matrix.size() != rows * cols) {
    fail(ErrorKind::structural, "singular_values: matrix extents do not match data");
  }
  // Orthogonalize the columns of the tall orientation; n = min(rows, cols) columns of length m.
  const bool transpose = rows < cols;
  const std::size_t m = transpose ? cols : rows;
  const std::size_t n = transpose ? rows : cols;
  std::vector<double> a(m * n);  // column-major: column j at a[j*m ...]
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = matrix[r * cols + c];
      if (transpose) {
        a[r * m + c] = v;
      } else {
        a[c * m + r] = v;
      }
    }
  }

  constexpr double tol = 1e-15;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      double* ap = a.data() + p * m;
      for (std::size_t q = p + 1; q < n; ++q) {
        double* aq = a.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) fail(ErrorKind::numeric, "singular_values: Jacobi sweeps did not converge");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) sq += a[j * m + i] * a[j * m + i];
    sigma[j] = std::sqrt(sq);
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<>());
  return sigma;
}

// Number of singular values strictly greater than `epsilon`.
inline std::size_t thresholded_rank(std::span<const float> matrix, std::size_t rows, std::size_t cols,
                                    double epsilon) {
  const auto sigma = singular_values(matrix, rows, cols);
  return static_cast<std::size_t>(std::count_if(sigma.begin(), sigma.end(), [epsilon](double s) { return s > epsilon; }));
}

}  // namespace prunelab
