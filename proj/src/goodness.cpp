#include "ff/goodness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "ff/metering.hpp"

namespace ff {

namespace {

using M = GoodnessMode;

constexpr std::array<GoodnessDescriptor, 21> kRegistry{{
    {"sum_of_squares", M::sum_of_squares, Family::pointwise, kNeedsNone,
     "Standard FF objective; sum of squared activations"},
    {"l2_normalized_energy", M::l2_normalized_energy, Family::pointwise, kNeedsNone,
     "Squared activations of the L2-normalised activity vector"},
    {"huber_norm", M::huber_norm, Family::pointwise, kNeedsNone, "Huber penalty per unit; linear beyond delta"},
    {"tempered_energy", M::tempered_energy, Family::pointwise, kNeedsNone, "Sum of exp(h^2 / T)"},
    {"outlier_trimmed_energy", M::outlier_trimmed_energy, Family::pointwise, kNeedsNone,
     "Sum of squares after dropping the most active fraction of units"},
    {"oja", M::oja, Family::pointwise, kNeedsNone, "Sum of squares minus alpha * sum of fourth powers"},
    {"sparse_l1", M::sparse_l1, Family::pointwise, kNeedsNone, "Sum of squares minus lambda * L1 norm"},
    {"hebbian", M::hebbian, Family::stateful, kNeedsRunningMean, "Squared deviation from a running mean"},
    {"bcm", M::bcm, Family::stateful, kNeedsBcmThreshold, "Energy plus sliding-threshold BCM term"},
    {"predictive_coding", M::predictive_coding, Family::stateful, kNeedsPredBaseline,
     "Energy minus lambda * squared prediction error against a running baseline"},
    {"gaussian_energy", M::gaussian_energy, Family::stateful, kNeedsRunningMean | kNeedsRunningVar,
     "Diagonal Gaussian log-likelihood (up to a constant)"},
    {"decorrelation", M::decorrelation, Family::batch, kNeedsNone,
     "Energy minus lambda * squared Frobenius norm of the batch covariance"},
    {"whitened_energy", M::whitened_energy, Family::batch, kNeedsWhitening, "Energy of whitened activity"},
    {"pca_energy", M::pca_energy, Family::batch, kNeedsPca, "Energy of the projection on leading components"},
    {"game_theoretic", M::game_theoretic, Family::batch, kNeedsRunningVar,
     "Energy weighted by magnitude- and variance-based importance"},
    {"attention_weighted", M::attention_weighted, Family::batch, kNeedsNone,
     "Energy weighted by a per-row softmax over unit energies"},
    {"fractal_dimension", M::fractal_dimension, Family::batch, kNeedsNone,
     "Energy plus weighted box-counting dimension"},
    {"triplet_margin", M::triplet_margin, Family::contrastive, kNeedsNone,
     "Energy plus bounded positive/negative energy separation"},
    {"softmax_energy_margin", M::softmax_energy_margin, Family::contrastive, kNeedsNone,
     "Log-softmax of the sample energy against its pair"},
    {"info_nce", M::info_nce, Family::contrastive, kNeedsNone, "Energy plus InfoNCE term over in-batch pairs"},
    {"nt_xent", M::nt_xent, Family::contrastive, kNeedsNone, "NT-Xent over cosine similarities to the paired batch"},
}};

// Rough per-element FLOP cost of each objective's forward+gradient evaluation.
std::uint64_t flops_per_element(GoodnessMode mode) {
  switch (mode) {
    case M::sum_of_squares: return 3;
    case M::l2_normalized_energy: return 6;
    case M::huber_norm: return 5;
    case M::tempered_energy: return 25;
    case M::outlier_trimmed_energy: return 12;
    case M::oja: return 8;
    case M::sparse_l1: return 6;
    case M::hebbian: return 5;
    case M::bcm: return 10;
    case M::predictive_coding: return 8;
    case M::gaussian_energy: return 7;
    case M::decorrelation: return 4;
    case M::whitened_energy: return 4;
    case M::pca_energy: return 4;
    case M::game_theoretic: return 12;
    case M::attention_weighted: return 25;
    case M::fractal_dimension: return 40;
    case M::triplet_margin: return 8;
    case M::softmax_energy_margin: return 8;
    case M::info_nce: return 10;
    case M::nt_xent: return 10;
  }
  return 1;
}

void meter(GoodnessMode mode, const Matrix& h) {
  record_flops(OpKind::goodness, flops_per_element(mode) * h.size());
}

double sqnorm(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc;
}

double dotp(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

GoodnessResult make_result(const Matrix& h) { return {Matrix(h.rows(), 1), Matrix(h.rows(), h.cols())}; }

void require_input(const Matrix& h, std::string_view name) {
  if (h.rows() == 0 || h.cols() == 0) throw ShapeError(std::string(name) + ": empty activation batch");
  require_finite(h, std::string(name) + " input");
}

void require_width(const Matrix& stat, std::size_t n, const char* what) {
  if (stat.rows() != 1 || stat.cols() != n) {
    throw ShapeError(std::string("goodness state ") + what + " has shape " + stat.shape_string() +
                     ", expected 1x" + std::to_string(n));
  }
}

void finish(GoodnessResult& r, std::string_view name) {
  require_finite(r.values, std::string(name) + " values");
  require_finite(r.grad, std::string(name) + " gradient");
}

void ema(Matrix& stat, std::span<const double> batch_value, double decay) {
  for (std::size_t i = 0; i < batch_value.size(); ++i) {
    stat(0, i) = decay * stat(0, i) + (1.0 - decay) * batch_value[i];
  }
}

std::vector<double> column_mean(const Matrix& h) {
  std::vector<double> mean(h.cols(), 0.0);
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < h.cols(); ++c) mean[c] += h(r, c);
  for (double& v : mean) v /= static_cast<double>(h.rows());
  return mean;
}

// Cosine similarity with norms smoothed by eps so all-zero rows stay differentiable.
struct Cosine {
  double value;
  double nx, ny, dot;
};

Cosine smooth_cosine(std::span<const double> x, std::span<const double> y, double eps) {
  const double nx = std::sqrt(sqnorm(x) + eps * eps);
  const double ny = std::sqrt(sqnorm(y) + eps * eps);
  const double d = dotp(x, y);
  return {d / (nx * ny), nx, ny, d};
}

// out += scale * d cos(x, y) / dx
void add_cosine_grad(std::span<double> out, std::span<const double> x, std::span<const double> y, const Cosine& c,
                     double scale) {
  const double a = 1.0 / (c.nx * c.ny);
  const double b = c.dot / (c.nx * c.nx * c.nx * c.ny);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += scale * (y[i] * a - x[i] * b);
}

// Order in which units are dropped: largest |h| first, lower index first on ties.
std::vector<std::size_t> trim_order(std::span<const double> row) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(row[a]) > std::abs(row[b]);
  });
  return idx;
}

}  // namespace

std::string_view to_string(Family family) {
  switch (family) {
    case Family::pointwise: return "pointwise";
    case Family::stateful: return "stateful";
    case Family::batch: return "batch";
    case Family::contrastive: return "contrastive";
  }
  return "unknown";
}

void GoodnessParams::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("goodness params: " + msg); };
  if (!(temperature > 0.0)) fail("temperature must be > 0");
  if (!(ntxent_tau > 0.0)) fail("ntxent_tau must be > 0");
  if (!(delta > 0.0)) fail("delta must be > 0");
  if (!(trim_fraction > 0.0 && trim_fraction < 1.0)) fail("trim_fraction must be in (0,1)");
  if (!(epsilon > 0.0)) fail("epsilon must be > 0");
  if (!(decay > 0.0 && decay < 1.0)) fail("decay must be in (0,1)");
  if (pca_k == 0) fail("pca_k must be >= 1");
  for (double v : {oja_alpha, bcm_lambda, infonce_weight, pc_lambda, decorr_lambda, fractal_weight, l1_lambda,
                   triplet_weight}) {
    if (!std::isfinite(v)) fail("weights and lambdas must be finite");
  }
}

GoodnessState GoodnessState::for_width(std::size_t n) {
  GoodnessState s;
  s.running_mean = Matrix(1, n, 0.0);
  s.running_var = Matrix(1, n, 1.0);
  s.bcm_threshold = Matrix(1, n, 0.0);
  s.pred_baseline = Matrix(1, n, 0.0);
  return s;
}

std::span<const GoodnessDescriptor> registry() { return kRegistry; }

const GoodnessDescriptor& registry_lookup(std::string_view name) {
  for (const auto& d : kRegistry) {
    if (d.name == name) return d;
  }
  std::ostringstream msg;
  msg << "unknown goodness '" << name << "'; valid names:";
  for (const auto& d : kRegistry) msg << ' ' << d.name;
  throw std::invalid_argument(msg.str());
}

const GoodnessDescriptor& registry_lookup(GoodnessMode mode) {
  for (const auto& d : kRegistry) {
    if (d.mode == mode) return d;
  }
  throw std::invalid_argument("goodness mode not registered");
}

std::size_t trimmed_count(std::size_t n, double trim_fraction) {
  return std::min(n, static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(n) + 1e-9)));
}

double box_counting_dimension(std::span<const double> h) {
  constexpr int kScales = 8;
  double peak = 0.0;
  for (double v : h) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return 0.0;
  std::vector<double> x(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) x[i] = std::abs(h[i]) / peak;
  std::sort(x.begin(), x.end());

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (int j = 1; j <= kScales; ++j) {
    const double boxes_per_unit = std::ldexp(1.0, j);
    const auto last_box = static_cast<long long>(boxes_per_unit) - 1;
    long long prev = -1;
    double count = 0.0;
    for (double v : x) {
      const long long box = std::min(static_cast<long long>(std::floor(v * boxes_per_unit)), last_box);
      if (box != prev) {
        count += 1.0;
        prev = box;
      }
    }
    const double lx = j * std::log(2.0);  // log(1/s)
    const double ly = std::log(count);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double n = kScales;
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------

GoodnessResult goodness_pointwise(GoodnessMode mode, const Matrix& h, const GoodnessParams& params) {
  const auto& desc = registry_lookup(mode);
  if (desc.family != Family::pointwise) throw std::invalid_argument(std::string(desc.name) + " is not pointwise");
  require_input(h, desc.name);
  GoodnessResult r = make_result(h);
  const std::size_t n = h.cols();

  for (std::size_t b = 0; b < h.rows(); ++b) {
    const auto row = h.row(b);
    auto g = r.grad.row(b);
    double value = 0.0;
    switch (mode) {
      case M::sum_of_squares:
        for (std::size_t i = 0; i < n; ++i) {
          value += row[i] * row[i];
          g[i] = 2.0 * row[i];
        }
        break;
      case M::l2_normalized_energy: {
        const double norm = std::sqrt(sqnorm(row));
        const double denom = norm + params.epsilon;
        value = (norm * norm) / (denom * denom);
        const double scale = 2.0 * params.epsilon / (denom * denom * denom);
        for (std::size_t i = 0; i < n; ++i) g[i] = scale * row[i];
        break;
      }
      case M::huber_norm:
        for (std::size_t i = 0; i < n; ++i) {
          const double a = std::abs(row[i]);
          if (a <= params.delta) {
            value += 0.5 * row[i] * row[i];
            g[i] = row[i];
          } else {
            value += params.delta * (a - 0.5 * params.delta);
            g[i] = params.delta * sign(row[i]);
          }
        }
        break;
      case M::tempered_energy:
        for (std::size_t i = 0; i < n; ++i) {
          const double arg = row[i] * row[i] / params.temperature;
          if (arg > 700.0) {
            std::ostringstream msg;
            msg << "tempered_energy: exp overflow, h^2/T = " << arg << " > 700 with temperature T = "
                << params.temperature;
            throw NumericError(msg.str());
          }
          const double e = std::exp(arg);
          value += e;
          g[i] = e * 2.0 * row[i] / params.temperature;
        }
        break;
      case M::outlier_trimmed_energy: {
        const std::size_t drop = trimmed_count(n, params.trim_fraction);
        const auto order = trim_order(row);
        for (std::size_t i = 0; i < n; ++i) g[i] = 2.0 * row[i];
        for (std::size_t t = 0; t < drop; ++t) g[order[t]] = 0.0;
        for (std::size_t t = drop; t < n; ++t) value += row[order[t]] * row[order[t]];
        break;
      }
      case M::oja:
        for (std::size_t i = 0; i < n; ++i) {
          const double sq = row[i] * row[i];
          value += sq - params.oja_alpha * sq * sq;
          g[i] = 2.0 * row[i] - 4.0 * params.oja_alpha * sq * row[i];
        }
        break;
      case M::sparse_l1:
        for (std::size_t i = 0; i < n; ++i) {
          value += row[i] * row[i] - params.l1_lambda * std::abs(row[i]);
          g[i] = 2.0 * row[i] - params.l1_lambda * sign(row[i]);
        }
        break;
      default:
        throw std::logic_error("unreachable pointwise mode");
    }
    r.values(b, 0) = value;
  }
  meter(mode, h);
  finish(r, desc.name);
  return r;
}

namespace {

GoodnessResult stateful_eval(GoodnessMode mode, const Matrix& h, const GoodnessState& state,
                             const GoodnessParams& params) {
  const auto& desc = registry_lookup(mode);
  if (desc.family != Family::stateful) throw std::invalid_argument(std::string(desc.name) + " is not stateful");
  require_input(h, desc.name);
  const std::size_t n = h.cols();
  GoodnessResult r = make_result(h);

  switch (mode) {
    case M::hebbian: {
      require_width(state.running_mean, n, "running_mean");
      for (std::size_t b = 0; b < h.rows(); ++b) {
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = h(b, i) - state.running_mean(0, i);
          value += d * d;
          r.grad(b, i) = 2.0 * d;
        }
        r.values(b, 0) = value;
      }
      break;
    }
    case M::bcm: {
      require_width(state.bcm_threshold, n, "bcm_threshold");
      const double lambda = params.bcm_lambda;
      for (std::size_t b = 0; b < h.rows(); ++b) {
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = h(b, i), sq = x * x, theta = state.bcm_threshold(0, i);
          value += sq + lambda * sq * (sq - theta);
          r.grad(b, i) = 2.0 * x + lambda * (4.0 * sq * x - 2.0 * theta * x);
        }
        r.values(b, 0) = value;
      }
      break;
    }
    case M::predictive_coding: {
      require_width(state.pred_baseline, n, "pred_baseline");
      const double lambda = params.pc_lambda;
      for (std::size_t b = 0; b < h.rows(); ++b) {
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = h(b, i), e = x - state.pred_baseline(0, i);
          value += x * x - lambda * e * e;
          r.grad(b, i) = 2.0 * x - 2.0 * lambda * e;
        }
        r.values(b, 0) = value;
      }
      break;
    }
    case M::gaussian_energy: {
      require_width(state.running_mean, n, "running_mean");
      require_width(state.running_var, n, "running_var");
      for (std::size_t i = 0; i < n; ++i) {
        if (!(state.running_var(0, i) > 0.0)) {
          throw NumericError("gaussian_energy: non-positive variance estimate at unit " + std::to_string(i));
        }
      }
      for (std::size_t b = 0; b < h.rows(); ++b) {
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = h(b, i) - state.running_mean(0, i), var = state.running_var(0, i);
          value += -0.5 * d * d / var;
          r.grad(b, i) = -d / var;
        }
        r.values(b, 0) = value;
      }
      break;
    }
    default:
      throw std::logic_error("unreachable stateful mode");
  }
  meter(mode, h);
  finish(r, desc.name);
  return r;
}

GoodnessResult batch_eval(GoodnessMode mode, const Matrix& h, const GoodnessState& state,
                          const GoodnessParams& params) {
  const auto& desc = registry_lookup(mode);
  if (desc.family != Family::batch) throw std::invalid_argument(std::string(desc.name) + " is not a batch objective");
  require_input(h, desc.name);
  const std::size_t n = h.cols(), rows = h.rows();
  GoodnessResult r = make_result(h);

  switch (mode) {
    case M::decorrelation: {
      if (rows < 2) throw ShapeError("decorrelation: needs a batch of at least 2 rows");
      const Matrix cov = batch_covariance(h);
      const double penalty = params.decorr_lambda * sqnorm(cov.data());
      const auto mean = column_mean(h);
      Matrix centered(rows, n);
      for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < n; ++i) centered(b, i) = h(b, i) - mean[i];
      const Matrix cu = matmul(centered, cov);  // cov is symmetric
      const double k = params.decorr_lambda * 4.0 / static_cast<double>(rows - 1);
      for (std::size_t b = 0; b < rows; ++b) {
        r.values(b, 0) = sqnorm(h.row(b)) - penalty;
        for (std::size_t i = 0; i < n; ++i) r.grad(b, i) = 2.0 * h(b, i) - k * cu(b, i);
      }
      break;
    }
    case M::whitened_energy:
    case M::pca_energy: {
      const bool whiten = mode == M::whitened_energy;
      if (!(whiten ? state.whitening : state.pca)) {
        throw std::invalid_argument(std::string(desc.name) + ": projection not fitted and state is frozen");
      }
      const Matrix& proj = whiten ? *state.whitening : *state.pca;
      if (proj.cols() != n) throw ShapeError(std::string(desc.name) + ": projection width mismatch");
      const Matrix projected = matmul_nt(h, proj);   // B x k
      const Matrix g = matmul(projected, proj);      // B x N, = (P^T P h)^T
      for (std::size_t b = 0; b < rows; ++b) {
        r.values(b, 0) = sqnorm(projected.row(b));
        for (std::size_t i = 0; i < n; ++i) r.grad(b, i) = 2.0 * g(b, i);
      }
      break;
    }
    case M::game_theoretic: {
      require_width(state.running_var, n, "running_var");
      std::vector<double> weight(n);
      double sigma_max = 0.0;
      for (std::size_t i = 0; i < n; ++i) sigma_max = std::max(sigma_max, std::sqrt(state.running_var(0, i)));
      for (std::size_t i = 0; i < n; ++i) weight[i] = std::sqrt(state.running_var(0, i)) / (sigma_max + params.epsilon);
      for (std::size_t b = 0; b < rows; ++b) {
        const auto row = h.row(b);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (std::abs(row[i]) > std::abs(row[arg])) arg = i;
        const double peak = std::abs(row[arg]) + params.epsilon;
        double value = 0.0, cubic = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = row[i], a = std::abs(x);
          value += x * x * (1.0 + a / peak * weight[i]);
          cubic += x * x * a * weight[i];
          r.grad(b, i) = 2.0 * x + 3.0 * x * a * weight[i] / peak;
        }
        r.grad(b, arg) -= cubic / (peak * peak) * sign(row[arg]);
        r.values(b, 0) = value;
      }
      break;
    }
    case M::attention_weighted: {
      std::vector<double> energy(n);
      for (std::size_t b = 0; b < rows; ++b) {
        const auto row = h.row(b);
        for (std::size_t i = 0; i < n; ++i) energy[i] = row[i] * row[i];
        const double lse = log_sum_exp(energy);
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double alpha = std::exp(energy[i] - lse);
          value += alpha * energy[i];
          r.grad(b, i) = 2.0 * alpha * row[i];
        }
        r.values(b, 0) = value;
      }
      break;
    }
    case M::fractal_dimension: {
      for (std::size_t b = 0; b < rows; ++b) {
        const auto row = h.row(b);
        r.values(b, 0) = sqnorm(row) + params.fractal_weight * box_counting_dimension(row);
        for (std::size_t i = 0; i < n; ++i) r.grad(b, i) = 2.0 * row[i];
      }
      break;
    }
    default:
      throw std::logic_error("unreachable batch mode");
  }
  meter(mode, h);
  finish(r, desc.name);
  return r;
}

bool projection_missing(GoodnessMode mode, const GoodnessState& state) {
  return (mode == M::whitened_energy && !state.whitening) || (mode == M::pca_energy && !state.pca);
}

}  // namespace

GoodnessResult goodness_stateful(GoodnessMode mode, const Matrix& h, GoodnessState& state,
                                 const GoodnessParams& params, bool update_state) {
  GoodnessResult r = stateful_eval(mode, h, state, params);
  if (update_state) update_goodness_state(mode, h, state, params);
  return r;
}

// With update_state and no fitted projection, whitened/pca fit on this batch
// first; the batch then seeds the covariance EMA.
GoodnessResult goodness_batch(GoodnessMode mode, const Matrix& h, GoodnessState& state, const GoodnessParams& params,
                              bool update_state) {
  if (update_state && projection_missing(mode, state)) {
    fit_projections_from_batch(mode, h, state, params);
    GoodnessResult r = batch_eval(mode, h, state, params);
    ++state.updates;
    return r;
  }
  GoodnessResult r = batch_eval(mode, h, state, params);
  if (update_state) update_goodness_state(mode, h, state, params);
  return r;
}

std::pair<GoodnessResult, GoodnessResult> goodness_contrastive(GoodnessMode mode, const Matrix& h_pos,
                                                               const Matrix& h_neg, const GoodnessParams& params) {
  const auto& desc = registry_lookup(mode);
  if (desc.family != Family::contrastive) {
    throw std::invalid_argument(std::string(desc.name) + " is not contrastive");
  }
  if (h_pos.rows() != h_neg.rows() || h_pos.cols() != h_neg.cols()) {
    throw ShapeError(std::string(desc.name) + ": positive batch " + h_pos.shape_string() +
                     " and negative batch " + h_neg.shape_string() + " differ in shape");
  }
  require_input(h_pos, desc.name);
  require_input(h_neg, desc.name);
  const std::size_t rows = h_pos.rows(), n = h_pos.cols();
  if ((mode == M::info_nce || mode == M::nt_xent) && rows < 2) {
    throw ShapeError(std::string(desc.name) + ": needs a batch of at least 2 pairs");
  }
  GoodnessResult pos = make_result(h_pos), neg = make_result(h_neg);
  const double inv_n = 1.0 / static_cast<double>(n);

  // Evaluates one direction: `self` rows against the paired `other` batch.
  auto one_side = [&](const Matrix& self, const Matrix& other, GoodnessResult& out) {
    std::vector<double> logits;
    for (std::size_t b = 0; b < rows; ++b) {
      const auto x = self.row(b);
      auto g = out.grad.row(b);
      const double ex = sqnorm(x);
      switch (mode) {
        case M::triplet_margin: {
          const double sep = (ex - sqnorm(other.row(b))) * inv_n;
          const double t = std::tanh(sep);
          out.values(b, 0) = ex + params.triplet_weight * t;
          const double scale = 2.0 + params.triplet_weight * (1.0 - t * t) * 2.0 * inv_n;
          for (std::size_t i = 0; i < n; ++i) g[i] = scale * x[i];
          break;
        }
        case M::softmax_energy_margin: {
          const double e_self = ex * inv_n, e_other = sqnorm(other.row(b)) * inv_n;
          out.values(b, 0) = -softplus(e_other - e_self);
          const double scale = sigmoid(e_other - e_self) * 2.0 * inv_n;
          for (std::size_t i = 0; i < n; ++i) g[i] = scale * x[i];
          break;
        }
        case M::info_nce: {
          // Logits: the fixed self-alignment score 1, then cosine similarity
          // to every row of the paired batch.
          std::vector<Cosine> cos(rows);
          logits.assign(rows + 1, 1.0);
          for (std::size_t j = 0; j < rows; ++j) {
            cos[j] = smooth_cosine(x, other.row(j), params.epsilon);
            logits[j + 1] = cos[j].value;
          }
          const double lse = log_sum_exp(logits);
          out.values(b, 0) = ex + params.infonce_weight * (1.0 - lse);
          for (std::size_t i = 0; i < n; ++i) g[i] = 2.0 * x[i];
          for (std::size_t j = 0; j < rows; ++j) {
            const double p = std::exp(logits[j + 1] - lse);
            add_cosine_grad(g, x, other.row(j), cos[j], -params.infonce_weight * p);
          }
          break;
        }
        case M::nt_xent: {
          // Numerator: same-image row of the paired batch. Denominator: all
          // other rows of the paired batch.
          const double tau = params.ntxent_tau;
          std::vector<Cosine> cos(rows);
          logits.clear();
          for (std::size_t j = 0; j < rows; ++j) {
            cos[j] = smooth_cosine(x, other.row(j), params.epsilon);
            if (j != b) logits.push_back(cos[j].value / tau);
          }
          const double lse = log_sum_exp(logits);
          out.values(b, 0) = -cos[b].value / tau + lse;
          std::fill(g.begin(), g.end(), 0.0);
          add_cosine_grad(g, x, other.row(b), cos[b], -1.0 / tau);
          for (std::size_t j = 0; j < rows; ++j) {
            if (j == b) continue;
            const double p = std::exp(cos[j].value / tau - lse);
            add_cosine_grad(g, x, other.row(j), cos[j], p / tau);
          }
          break;
        }
        default:
          throw std::logic_error("unreachable contrastive mode");
      }
    }
  };
  one_side(h_pos, h_neg, pos);
  one_side(h_neg, h_pos, neg);
  meter(mode, h_pos);
  meter(mode, h_neg);
  if (mode == M::info_nce || mode == M::nt_xent) {
    record_flops(OpKind::goodness, 2ULL * 3ULL * rows * rows * n);
  }
  finish(pos, desc.name);
  finish(neg, desc.name);
  return {std::move(pos), std::move(neg)};
}

// ---------------------------------------------------------------------------

void update_goodness_state(GoodnessMode mode, const Matrix& h, GoodnessState& state, const GoodnessParams& params) {
  const std::size_t n = h.cols(), rows = h.rows();
  const double decay = params.decay;
  auto batch_var = [&](const std::vector<double>& mean) {
    std::vector<double> var(n, 0.0);
    for (std::size_t b = 0; b < rows; ++b)
      for (std::size_t i = 0; i < n; ++i) var[i] += (h(b, i) - mean[i]) * (h(b, i) - mean[i]);
    for (double& v : var) v = v / static_cast<double>(rows) + params.epsilon;
    return var;
  };
  switch (mode) {
    case M::hebbian:
      require_width(state.running_mean, n, "running_mean");
      ema(state.running_mean, column_mean(h), decay);
      break;
    case M::bcm: {
      require_width(state.bcm_threshold, n, "bcm_threshold");
      std::vector<double> sq(n, 0.0);
      for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < n; ++i) sq[i] += h(b, i) * h(b, i);
      for (double& v : sq) v /= static_cast<double>(rows);
      ema(state.bcm_threshold, sq, decay);
      break;
    }
    case M::predictive_coding:
      require_width(state.pred_baseline, n, "pred_baseline");
      ema(state.pred_baseline, column_mean(h), decay);
      break;
    case M::gaussian_energy:
    case M::game_theoretic: {
      require_width(state.running_mean, n, "running_mean");
      require_width(state.running_var, n, "running_var");
      const auto mean = column_mean(h);
      ema(state.running_var, batch_var(mean), decay);
      ema(state.running_mean, mean, decay);
      break;
    }
    case M::whitened_energy:
    case M::pca_energy: {
      if (rows < 2) break;
      const Matrix cov = batch_covariance(h);
      if (state.covariance.empty()) {
        state.covariance = cov;
      } else {
        if (state.covariance.rows() != n) throw ShapeError("goodness state covariance width mismatch");
        for (std::size_t i = 0; i < cov.size(); ++i) {
          state.covariance.data()[i] = decay * state.covariance.data()[i] + (1.0 - decay) * cov.data()[i];
        }
      }
      break;
    }
    default:
      break;
  }
  record_flops(OpKind::goodness, 3ULL * h.size());
  ++state.updates;
}

void refit_projections(GoodnessMode mode, GoodnessState& state, const GoodnessParams& params) {
  if (mode != M::whitened_energy && mode != M::pca_energy) return;
  if (state.covariance.empty()) return;
  if (mode == M::whitened_energy) {
    state.whitening = inverse_sqrt_spd(state.covariance, params.epsilon, params.newton_schulz_iters);
  } else {
    const std::size_t k = std::min(params.pca_k, state.covariance.rows());
    state.pca = top_k_components(state.covariance, k, params.power_iters);
  }
}

void fit_projections_from_batch(GoodnessMode mode, const Matrix& h, GoodnessState& state,
                                const GoodnessParams& params) {
  if (h.rows() < 2) throw ShapeError("fitting a projection needs a batch of at least 2 rows");
  state.covariance = batch_covariance(h);
  refit_projections(mode, state, params);
}

std::pair<GoodnessResult, GoodnessResult> evaluate_pair(const GoodnessDescriptor& desc, const Matrix& h_pos,
                                                        const Matrix& h_neg, GoodnessState& state,
                                                        const GoodnessParams& params, bool update_state) {
  switch (desc.family) {
    case Family::pointwise:
      return {goodness_pointwise(desc.mode, h_pos, params), goodness_pointwise(desc.mode, h_neg, params)};
    case Family::stateful: {
      auto pos = stateful_eval(desc.mode, h_pos, state, params);
      auto neg = stateful_eval(desc.mode, h_neg, state, params);
      if (update_state) update_goodness_state(desc.mode, h_pos, state, params);
      return {std::move(pos), std::move(neg)};
    }
    case Family::batch: {
      const bool needs_fit = projection_missing(desc.mode, state);
      if (needs_fit && update_state) fit_projections_from_batch(desc.mode, h_pos, state, params);
      auto pos = batch_eval(desc.mode, h_pos, state, params);
      auto neg = batch_eval(desc.mode, h_neg, state, params);
      if (update_state) {
        if (needs_fit) {
          ++state.updates;
        } else {
          update_goodness_state(desc.mode, h_pos, state, params);
        }
      }
      return {std::move(pos), std::move(neg)};
    }
    case Family::contrastive:
      return goodness_contrastive(desc.mode, h_pos, h_neg, params);
  }
  throw std::logic_error("unreachable family");
}

Matrix inference_score(const GoodnessDescriptor& desc, const Matrix& h, const GoodnessState& state,
                       const GoodnessParams& params) {
  switch (desc.family) {
    case Family::pointwise:
      return goodness_pointwise(desc.mode, h, params).values;
    case Family::stateful:
      return stateful_eval(desc.mode, h, state, params).values;
    case Family::batch:
      if (desc.mode == M::decorrelation) break;
      return batch_eval(desc.mode, h, state, params).values;
    case Family::contrastive:
      if (desc.mode == M::softmax_energy_margin) {
        Matrix e = row_reduce(h, Reduce::l2norm);
        for (double& v : e.data()) v = v * v / static_cast<double>(h.cols());
        return e;
      }
      break;
  }
  Matrix energy(h.rows(), 1);
  for (std::size_t b = 0; b < h.rows(); ++b) energy(b, 0) = sqnorm(h.row(b));
  record_flops(OpKind::goodness, 2ULL * h.size());
  return energy;
}

}  // namespace ff
