// Reference implementations used only as test oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ff/tensor.hpp"

namespace oracle {

inline ff::Matrix naive_matmul(const ff::Matrix& a, const ff::Matrix& b) {
  ff::Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline ff::Matrix random_matrix(ff::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  ff::Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal() * scale;
  return m;
}

// A A^T / n + jitter * I, symmetric positive definite.
inline ff::Matrix random_spd(ff::Rng& rng, std::size_t n, double jitter = 0.1) {
  const ff::Matrix a = random_matrix(rng, n, n);
  ff::Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(i, k) * a(j, k);
      s(i, j) = acc / static_cast<double>(n) + (i == j ? jitter : 0.0);
    }
  return s;
}

struct Eigen {
  std::vector<double> values;                // descending
  std::vector<std::vector<double>> vectors;  // vectors[i] pairs with values[i]
};

// Cyclic Jacobi rotations for a symmetric matrix.
inline Eigen jacobi(ff::Matrix a, int sweeps = 100) {
  const std::size_t n = a.rows();
  ff::Matrix v = ff::Matrix::identity(n);
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  Eigen out;
  for (auto i : order) {
    out.values.push_back(a(i, i));
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = v(k, i);
    out.vectors.push_back(vec);
  }
  return out;
}

}  // namespace oracle
