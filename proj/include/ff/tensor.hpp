#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ff {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles. Row = sample, column = feature.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> init);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix& other) const = default;

  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);
bool all_finite(const Matrix& m);

// Counter-based generator (SplitMix64 over a 64-bit counter). The stream is a
// pure function of (seed, position), so it is reproducible across platforms
// and can be checkpointed by saving the position.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0) : seed_(seed), position_(position) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). Lemire's method with rejection, n > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();
  // Independent stream derived from this one's seed and `stream_id`.
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materialising the transpose for the caller.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

enum class Reduce { sum, mean, l2norm, max, min };
Matrix row_reduce(const Matrix& m, Reduce kind);

// Sample covariance over rows with divisor rows-1.
Matrix batch_covariance(const Matrix& m);

struct EigenPairs {
  Matrix vectors;               // k x N, unit-norm rows
  std::vector<double> values;   // Rayleigh quotients, descending
};

// Leading eigenpairs of a symmetric matrix via power iteration with deflation.
EigenPairs top_k_eigenpairs(const Matrix& cov, std::size_t k, std::size_t iters);
Matrix top_k_components(const Matrix& cov, std::size_t k, std::size_t iters);

// Newton-Schulz coupled iteration for (cov + shrinkage*I)^(-1/2).
Matrix inverse_sqrt_spd(const Matrix& cov, double shrinkage, std::size_t iters = 60);

// Central differences of a scalar function, one entry at a time.
Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at,
                                  double eps);

double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace ff
