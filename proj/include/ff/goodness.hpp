#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "ff/tensor.hpp"

namespace ff {

enum class Family { pointwise, stateful, batch, contrastive };

enum class GoodnessMode {
  sum_of_squares,
  l2_normalized_energy,
  huber_norm,
  tempered_energy,
  outlier_trimmed_energy,
  oja,
  sparse_l1,
  hebbian,
  bcm,
  predictive_coding,
  gaussian_energy,
  decorrelation,
  whitened_energy,
  pca_energy,
  game_theoretic,
  attention_weighted,
  fractal_dimension,
  triplet_margin,
  softmax_energy_margin,
  info_nce,
  nt_xent,
};

std::string_view to_string(Family family);

// Running statistics a stateful objective reads from GoodnessState.
enum StateNeed : std::uint32_t {
  kNeedsNone = 0,
  kNeedsRunningMean = 1u << 0,
  kNeedsRunningVar = 1u << 1,
  kNeedsBcmThreshold = 1u << 2,
  kNeedsPredBaseline = 1u << 3,
  kNeedsWhitening = 1u << 4,
  kNeedsPca = 1u << 5,
};

struct GoodnessParams {
  double delta = 1.0;             // huber_norm transition point
  double temperature = 1.0;       // tempered_energy
  double trim_fraction = 0.1;     // outlier_trimmed_energy, fraction of most active units dropped
  double oja_alpha = 0.1;
  double bcm_lambda = 0.1;
  double infonce_weight = 1.0;
  double pc_lambda = 0.1;
  double ntxent_tau = 0.5;
  double decorr_lambda = 0.1;
  double fractal_weight = 1.0;
  double l1_lambda = 0.1;
  double triplet_weight = 1.0;
  std::size_t pca_k = 64;
  double epsilon = 1e-4;          // norm guard, whitening shrinkage, variance floor
  double decay = 0.9;             // EMA decay of all running statistics
  std::size_t power_iters = 200;  // pca_energy power iteration budget
  std::size_t newton_schulz_iters = 60;

  void validate() const;
  bool operator==(const GoodnessParams&) const = default;
};

struct GoodnessDescriptor {
  std::string_view name;
  GoodnessMode mode;
  Family family;
  std::uint32_t state_needs;
  std::string_view description;
};

// Per-layer running statistics. Updated only from positive training batches.
struct GoodnessState {
  Matrix running_mean;   // 1 x N
  Matrix running_var;    // 1 x N, strictly positive
  Matrix bcm_threshold;  // 1 x N, >= 0
  Matrix pred_baseline;  // 1 x N
  Matrix covariance;     // N x N EMA, empty until the first update
  std::optional<Matrix> whitening;  // N x N
  std::optional<Matrix> pca;        // k x N
  std::uint64_t updates = 0;

  static GoodnessState for_width(std::size_t n);
  std::size_t width() const { return running_mean.cols(); }
  bool operator==(const GoodnessState&) const = default;
};

// values(b) = G(h_b). grad row b = dG(h_b)/dh_b with every other row of the
// batch, the paired batch, and all running statistics held fixed. Attention
// weights and the box-counting dimension are likewise treated as constants.
struct GoodnessResult {
  Matrix values;  // B x 1
  Matrix grad;    // B x N
};

std::span<const GoodnessDescriptor> registry();
// Throws std::invalid_argument listing the valid names.
const GoodnessDescriptor& registry_lookup(std::string_view name);
const GoodnessDescriptor& registry_lookup(GoodnessMode mode);

GoodnessResult goodness_pointwise(GoodnessMode mode, const Matrix& h, const GoodnessParams& params);
GoodnessResult goodness_stateful(GoodnessMode mode, const Matrix& h, GoodnessState& state,
                                 const GoodnessParams& params, bool update_state);
GoodnessResult goodness_batch(GoodnessMode mode, const Matrix& h, GoodnessState& state,
                              const GoodnessParams& params, bool update_state = false);
std::pair<GoodnessResult, GoodnessResult> goodness_contrastive(GoodnessMode mode, const Matrix& h_pos,
                                                               const Matrix& h_neg, const GoodnessParams& params);

// Advances the running statistics `mode` depends on using a positive batch.
void update_goodness_state(GoodnessMode mode, const Matrix& h, GoodnessState& state, const GoodnessParams& params);
// Recomputes whitening / PCA projections from the covariance EMA.
void refit_projections(GoodnessMode mode, GoodnessState& state, const GoodnessParams& params);
// Seeds the covariance EMA from `h` and fits projections from it.
void fit_projections_from_batch(GoodnessMode mode, const Matrix& h, GoodnessState& state,
                                const GoodnessParams& params);

// Training entry point: scores the paired positive/negative batches against the
// current state, then (if update_state) advances the state from the positives.
std::pair<GoodnessResult, GoodnessResult> evaluate_pair(const GoodnessDescriptor& desc, const Matrix& h_pos,
                                                        const Matrix& h_neg, GoodnessState& state,
                                                        const GoodnessParams& params, bool update_state);

// Single-pass scores with frozen state, used for multi-pass label selection.
// Batch-coupled and pair-coupled objectives score by their energy term, which
// ranks candidates identically to the full objective when the coupling term is
// shared across candidates.
Matrix inference_score(const GoodnessDescriptor& desc, const Matrix& h, const GoodnessState& state,
                       const GoodnessParams& params);

// Box-counting dimension of the multiset |h_i| over eight dyadic scales.
double box_counting_dimension(std::span<const double> h);
// Number of top entries outlier_trimmed_energy drops for a row of width n.
std::size_t trimmed_count(std::size_t n, double trim_fraction);

}  // namespace ff
