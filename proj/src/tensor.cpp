#include "ff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ff/metering.hpp"

namespace ff {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> init) {
  rows_ = init.size();
  cols_ = rows_ == 0 ? 0 : init.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : init) {
    if (r.size() != cols_) throw ShapeError("ragged initializer list for Matrix");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!all_finite(m)) throw NumericError(what + ": non-finite value in " + m.shape_string() + " result");
}

// ---------------------------------------------------------------------------
// Rng

namespace {
std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t Rng::next_u64() {
  const std::uint64_t key = splitmix64(seed_);
  return splitmix64(key ^ (position_++ * 0xd1342543de82ef95ULL));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() {
  // Box-Muller, one draw per call so the stream position stays simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Rng Rng::split(std::uint64_t stream_id) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL)), 0);
}

// ---------------------------------------------------------------------------
// Products. Every output entry accumulates its terms in increasing k, so the
// result does not depend on blocking or vector width.

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), kdim = a.cols(), n = b.cols();
  Matrix c(m, n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = cd + (i + 0) * n;
    double* __restrict c1 = cd + (i + 1) * n;
    double* __restrict c2 = cd + (i + 2) * n;
    double* __restrict c3 = cd + (i + 3) * n;
    for (std::size_t k = 0; k < kdim; ++k) {
      const double a0 = ad[(i + 0) * kdim + k];
      const double a1 = ad[(i + 1) * kdim + k];
      const double a2 = ad[(i + 2) * kdim + k];
      const double a3 = ad[(i + 3) * kdim + k];
      const double* __restrict br = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = br[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict cr = cd + i * n;
    for (std::size_t k = 0; k < kdim; ++k) {
      const double av = ad[i * kdim + k];
      const double* __restrict br = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
  record_flops(OpKind::matmul, 2ULL * m * kdim * n);
  require_finite(c, "matmul");
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < m.rows(); r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < m.cols(); c0 += kBlock) {
      const std::size_t r1 = std::min(r0 + kBlock, m.rows());
      const std::size_t c1 = std::min(c0 + kBlock, m.cols());
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) t(c, r) = m(r, c);
    }
  }
  return t;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: shape mismatch " + a.shape_string() + " x (" + b.shape_string() + ")^T");
  }
  return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: shape mismatch (" + a.shape_string() + ")^T x " + b.shape_string());
  }
  const std::size_t kdim = a.rows(), m = a.cols(), n = b.cols();
  Matrix c(m, n);
  double* cd = c.data().data();
  for (std::size_t k = 0; k < kdim; ++k) {
    const double* __restrict ar = a.data().data() + k * m;
    const double* __restrict br = b.data().data() + k * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      double* __restrict cr = cd + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
  record_flops(OpKind::matmul, 2ULL * m * kdim * n);
  require_finite(c, "matmul_tn");
  return c;
}

// ---------------------------------------------------------------------------

Matrix row_reduce(const Matrix& m, Reduce kind) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("row_reduce: empty matrix " + m.shape_string());
  Matrix out(m.rows(), 1);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double acc = 0.0;
    switch (kind) {
      case Reduce::sum:
      case Reduce::mean:
        for (double v : row) acc += v;
        if (kind == Reduce::mean) acc /= static_cast<double>(row.size());
        break;
      case Reduce::l2norm: {
        // Scaled accumulation keeps 1e300-magnitude rows finite.
        double scale = 0.0;
        for (double v : row) scale = std::max(scale, std::abs(v));
        if (scale > 0.0) {
          for (double v : row) acc += (v / scale) * (v / scale);
          acc = scale * std::sqrt(acc);
        }
        break;
      }
      case Reduce::max: acc = *std::max_element(row.begin(), row.end()); break;
      case Reduce::min: acc = *std::min_element(row.begin(), row.end()); break;
    }
    out(r, 0) = acc;
  }
  record_flops(OpKind::reduction, m.size());
  require_finite(out, "row_reduce");
  return out;
}

Matrix batch_covariance(const Matrix& m) {
  if (m.rows() < 2) {
    throw ShapeError("batch_covariance: need at least 2 rows, got " + std::to_string(m.rows()));
  }
  const std::size_t b = m.rows(), n = m.cols();
  std::vector<double> mean(n, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < n; ++c) mean[c] += m(r, c);
  for (double& v : mean) v /= static_cast<double>(b);
  Matrix centered(b, n);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < n; ++c) centered(r, c) = m(r, c) - mean[c];

  Matrix cov(n, n);
  const double inv = 1.0 / static_cast<double>(b - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < b; ++r) acc += centered(r, i) * centered(r, j);
      cov(i, j) = acc * inv;
      cov(j, i) = cov(i, j);
    }
  }
  record_flops(OpKind::covariance, static_cast<std::uint64_t>(b) * n * (n + 1) + 2ULL * b * n);
  require_finite(cov, "batch_covariance");
  return cov;
}

namespace {
void require_symmetric(const Matrix& a, const char* op) {
  if (a.rows() != a.cols()) throw ShapeError(std::string(op) + ": matrix not square " + a.shape_string());
  double asym = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
  if (asym > 1e-8) {
    throw std::invalid_argument(std::string(op) + ": input not symmetric (max asymmetry " +
                                std::to_string(asym) + ")");
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

std::vector<double> symv(const Matrix& a, const std::vector<double>& v) {
  std::vector<double> out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), v);
  record_flops(OpKind::matmul, 2ULL * a.rows() * a.cols());
  return out;
}
}  // namespace

EigenPairs top_k_eigenpairs(const Matrix& cov, std::size_t k, std::size_t iters) {
  require_symmetric(cov, "top_k_components");
  const std::size_t n = cov.rows();
  if (k > n) throw ShapeError("top_k_components: k=" + std::to_string(k) + " exceeds N=" + std::to_string(n));
  require_finite(cov, "top_k_components input");

  EigenPairs out{Matrix(k, n), std::vector<double>(k, 0.0)};
  Matrix deflated = cov;
  Rng start(0x70ca11ULL);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> v(n);
    for (double& x : v) x = start.uniform() - 0.5;
    auto orthonormalize = [&](std::vector<double>& w) {
      // Two Gram-Schmidt passes against the components already found.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < c; ++p) {
          const double proj = dot(out.vectors.row(p), w);
          for (std::size_t i = 0; i < n; ++i) w[i] -= proj * out.vectors(p, i);
        }
      }
      const double norm = std::sqrt(dot(w, w));
      if (norm == 0.0) return false;
      for (double& x : w) x /= norm;
      return true;
    };
    if (!orthonormalize(v)) v.assign(n, 0.0), v[c] = 1.0;

    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<double> w = symv(deflated, v);
      if (!orthonormalize(w)) break;  // remaining spectrum is zero; keep v
      double change = 0.0;
      for (std::size_t i = 0; i < n; ++i) change = std::max(change, std::abs(w[i] - v[i]));
      v = std::move(w);
      if (change < 1e-13) break;
    }
    const std::vector<double> av = symv(cov, v);
    const double lambda = dot(v, av);
    out.values[c] = lambda;
    for (std::size_t i = 0; i < n; ++i) out.vectors(c, i) = v[i];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) deflated(i, j) -= lambda * v[i] * v[j];
  }
  return out;
}

Matrix top_k_components(const Matrix& cov, std::size_t k, std::size_t iters) {
  return top_k_eigenpairs(cov, k, iters).vectors;
}

Matrix inverse_sqrt_spd(const Matrix& cov, double shrinkage, std::size_t iters) {
  if (!(shrinkage > 0.0)) throw std::invalid_argument("inverse_sqrt_spd: shrinkage must be > 0");
  require_symmetric(cov, "inverse_sqrt_spd");
  require_finite(cov, "inverse_sqrt_spd input");
  const std::size_t n = cov.rows();
  Matrix a = cov;
  for (std::size_t i = 0; i < n; ++i) a(i, i) += shrinkage;
  const double scale = frobenius_norm(a);
  const double condition_estimate = scale / shrinkage;

  Matrix y(n, n);
  for (std::size_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] / scale;
  Matrix z = Matrix::identity(n);
  const double bound = std::sqrt(static_cast<double>(n)) * std::sqrt(condition_estimate) * 10.0 + 10.0;
  for (std::size_t it = 0; it < iters; ++it) {
    Matrix t = matmul(z, y);
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double eye = i == j ? 1.0 : 0.0;
        residual = std::max(residual, std::abs(t(i, j) - eye));
        t(i, j) = 0.5 * (3.0 * eye - t(i, j));
      }
    }
    if (residual < 1e-14) break;
    y = matmul(y, t);
    z = matmul(t, z);
    const double zn = frobenius_norm(z);
    if (!std::isfinite(zn) || zn > bound) {
      std::ostringstream msg;
      msg << "inverse_sqrt_spd: Newton-Schulz diverged (condition estimate " << condition_estimate << ")";
      throw NumericError(msg.str());
    }
  }
  const double s = 1.0 / std::sqrt(scale);
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w(i, j) = 0.5 * (z(i, j) + z(j, i)) * s;
  require_finite(w, "inverse_sqrt_spd");
  return w;
}

Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at,
                                  double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_gradient: eps must be > 0");
  Matrix grad(at.rows(), at.cols());
  Matrix x = at;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double fp = f(x);
    x.data()[i] = orig - eps;
    const double fm = f(x);
    x.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_gradient: function returned a non-finite value");
    }
    grad.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data()) acc += v * v;
  return std::sqrt(acc);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace ff
