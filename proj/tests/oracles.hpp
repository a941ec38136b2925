// Test-only oracles, written independently of the library code paths
// they check: plain-loop implementations of the defining formulas and a
// gradient-descent least-squares solver.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracles {

// Minimizes ||f - M beta||^2 by gradient descent with backtracking-free
// small steps until the gradient is tiny. M is row-major n×k.
inline std::vector<double> gd_least_squares(const std::vector<double>& m,
                                            const std::vector<double>& f, std::size_t n,
                                            std::size_t k, double tol = 1e-10,
                                            std::size_t max_iters = 2000000) {
  std::vector<double> beta(k, 0.0);
  // Step below 1/λmax(MᵀM), via the trace bound λmax ≤ Σᵢⱼ mᵢⱼ².
  double trace = 0.0;
  for (double v : m) trace += v * v;
  const double step = 0.9 / trace;
  std::vector<double> grad(k);
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t a = 0; a < k; ++a) grad[a] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double r = f[i];
      for (std::size_t a = 0; a < k; ++a) r -= m[i * k + a] * beta[a];
      for (std::size_t a = 0; a < k; ++a) grad[a] += -2.0 * m[i * k + a] * r;
    }
    double gnorm = 0.0;
    for (std::size_t a = 0; a < k; ++a) gnorm = std::max(gnorm, std::abs(grad[a]));
    if (gnorm < tol) break;
    for (std::size_t a = 0; a < k; ++a) beta[a] -= step * grad[a];
  }
  return beta;
}

// Squared distance correlation straight from the definition.
inline double brute_dcor2(const std::vector<double>& x, const std::vector<double>& y,
                          std::size_t n, std::size_t p, std::size_t q) {
  auto dist = [](const std::vector<double>& v, std::size_t dim, std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = v[i * dim + k] - v[j * dim + k];
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  auto centered = [&](const std::vector<double>& v, std::size_t dim) {
    std::vector<double> a(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] = dist(v, dim, i, j);
    }
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double row = 0.0, col = 0.0, grand = 0.0;
        for (std::size_t t = 0; t < n; ++t) row += a[i * n + t];
        for (std::size_t t = 0; t < n; ++t) col += a[t * n + j];
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t t = 0; t < n; ++t) grand += a[s * n + t];
        }
        out[i * n + j] = a[i * n + j] - row / n - col / n + grand / (double(n) * double(n));
      }
    }
    return out;
  };
  const std::vector<double> a = centered(x, p);
  const std::vector<double> b = centered(y, q);
  double dcov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    dcov += a[i] * b[i];
    vx += a[i] * a[i];
    vy += b[i] * b[i];
  }
  const double n2 = double(n) * double(n);
  dcov /= n2;
  vx /= n2;
  vy /= n2;
  if (vx <= 1e-12 || vy <= 1e-12) return 0.0;
  return dcov / std::sqrt(vx * vy);
}

}  // namespace oracles
