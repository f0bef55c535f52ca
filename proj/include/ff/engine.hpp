#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ff/data.hpp"
#include "ff/goodness.hpp"
#include "ff/tensor.hpp"

namespace ff {

struct FFConfig {
  std::vector<std::size_t> layer_sizes{2000, 2000, 2000, 2000};
  double threshold = 2.0;
  double learning_rate = 1e-3;
  double weight_decay = 3e-4;
  // Adam moments; "momentum 0.9" is beta1.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 100;
  std::size_t epochs = 20;
  double peer_coeff = 0.03;
  double peer_decay = 0.9;
  std::string goodness = "sum_of_squares";
  GoodnessParams goodness_params;
  std::uint64_t seed = 0;
  bool length_normalize_between_layers = true;
  // Weight scale is set so the expected initial sum of squared activations of
  // each layer equals this value (see initial_weight_std).
  double init_goodness = 4.0;
  // Layers [multipass_first_layer, L) are summed during multi-pass selection.
  std::size_t multipass_first_layer = 1;
  std::size_t eval_subset = 1000;
  std::size_t probe_epochs = 20;
  double probe_learning_rate = 1e-3;
  std::size_t probe_batch_size = 100;
  bool probe_every_epoch = true;

  void validate() const;
  bool operator==(const FFConfig&) const = default;
};

struct AdamMoments {
  Matrix m;
  Matrix v;
  bool operator==(const AdamMoments&) const = default;
};

struct LayerState {
  Matrix weights;  // out x in
  Matrix bias;     // 1 x out
  AdamMoments weight_moments;
  AdamMoments bias_moments;
  std::uint64_t step = 0;
  Matrix peer_mean;  // 1 x out
  GoodnessState goodness_state;

  std::size_t in_dim() const { return weights.cols(); }
  std::size_t out_dim() const { return weights.rows(); }
  bool operator==(const LayerState&) const = default;
};

// Weights ~ N(0, weight_std^2), zero bias, zeroed optimiser state.
LayerState make_layer(std::size_t in_dim, std::size_t out_dim, double weight_std, Rng& rng);

// Standard deviation giving E[sum relu(Wx)^2] = target_goodness for inputs of
// squared norm input_sq_norm.
double initial_weight_std(std::size_t out_dim, double input_sq_norm, double target_goodness);
// Mean over rows of the squared L2 norm.
double mean_squared_norm(const Matrix& x);

// Divides each row by its L2 norm + 1e-8.
Matrix length_normalize(const Matrix& x);

// relu(x W^T + b), optionally length-normalising the rows of x first. The
// trainer backpropagates through the relu with an all-ones mask.
Matrix layer_forward(const LayerState& layer, const Matrix& x, bool normalize_input);

struct FFLoss {
  double loss = 0.0;
  Matrix d_pos;  // dL/dG_pos, B x 1
  Matrix d_neg;  // dL/dG_neg, B x 1
};

// Mean over the batch of softplus(theta - G_pos) + softplus(G_neg - theta).
FFLoss ff_layer_loss(const Matrix& g_pos, const Matrix& g_neg, double theta);

struct PeerPenalty {
  double penalty = 0.0;
  Matrix grad;         // B x out, w.r.t. the positive activations
  Matrix updated_mean; // EMA including this batch
};

// coeff * sum_i (p_i - mean(p))^2 where p = decay * peer_mean + (1-decay) * batch mean.
PeerPenalty peer_penalty(const Matrix& activations, const LayerState& layer, double coeff, double decay = 0.9);

struct BatchStats {
  double ff_loss = 0.0;
  double peer_penalty = 0.0;
  double ff_accuracy = 0.0;  // fraction of rows with G_pos > G_neg
  Matrix out_pos;            // activations before this step's update
  Matrix out_neg;
};

// One local step: forward both passes, goodness, loss, gradient through this
// layer only, AdamW update. Inputs are treated as constants.
BatchStats train_layer_batch(LayerState& layer, const Matrix& x_pos, const Matrix& x_neg, const FFConfig& cfg,
                             const GoodnessDescriptor& goodness, bool normalize_input);

struct Network {
  FFConfig config;
  std::vector<LayerState> layers;
  std::size_t input_dim = 0;
  int num_classes = 10;
  Rng rng;

  bool operator==(const Network& other) const {
    return config == other.config && layers == other.layers && input_dim == other.input_dim &&
           num_classes == other.num_classes && rng.seed() == other.rng.seed() &&
           rng.position() == other.rng.position();
  }
};

// `input_sq_norm` is the mean squared norm of label-embedded inputs to the
// first layer; it only matters when that layer sees unnormalised input.
Network make_network(std::size_t input_dim, int num_classes, const FFConfig& cfg, double input_sq_norm = 1.0);

// Activations of every layer for a batch, with the trainer's normalisation rule.
std::vector<Matrix> forward_all(const Network& net, const Matrix& x);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::vector<double> layer_loss;
  std::vector<double> layer_accuracy;
  std::vector<double> layer_mean_goodness_pos;
  std::vector<double> layer_mean_goodness_neg;
  double multipass_accuracy = 0.0;
  std::optional<double> probe_accuracy;
  std::optional<double> probe_loss;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  bool aborted = false;
  std::string diagnostic;
};

// Called after every epoch; lets callers checkpoint or log.
using EpochCallback = std::function<void(const Network&, const EpochMetrics&)>;

// All layers train together batch by batch; each layer consumes the previous
// layer's detached outputs. `eval` supplies the per-epoch multi-pass and probe
// evaluation samples. A numeric failure stops training, keeps the weights and
// records a diagnostic naming the objective.
RunMetrics train_network(Network& net, const DatasetPart& train, const DatasetPart& eval,
                         const EpochCallback& on_epoch = {});

struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;  // exclusive
};

LayerRange default_multipass_range(const Network& net);

// Per candidate label: embed, forward, sum per-layer scores over `range`;
// argmax with ties resolved to the lowest label.
int multipass_predict(const Network& net, std::span<const double> image_row, std::optional<LayerRange> range = {});
std::vector<int> multipass_predict_batch(const Network& net, const Matrix& images,
                                         std::optional<LayerRange> range = {});
double multipass_accuracy(const Network& net, const DatasetPart& part, std::optional<LayerRange> range = {});

// Concatenated length-normalised activations of layers 2..L for
// neutral-label inputs (layer 1 alone for single-layer networks).
Matrix probe_features(const Network& net, const Matrix& images);

struct ProbeState {
  Matrix weights;  // classes x features
  Matrix bias;     // 1 x classes
  AdamMoments weight_moments;
  AdamMoments bias_moments;
  std::uint64_t step = 0;
};

struct ProbeResult {
  double accuracy = 0.0;
  double loss = 0.0;          // mean test cross-entropy
  double initial_loss = 0.0;  // test cross-entropy at zero initialisation
  ProbeState state;
};

struct ProbeConfig {
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
};

// Softmax-regression probe trained with Adam on fixed features.
ProbeResult train_probe(const Matrix& train_features, std::span<const int> train_labels,
                        const Matrix& test_features, std::span<const int> test_labels, int num_classes,
                        const ProbeConfig& cfg);
ProbeResult linear_probe(const Network& net, const DatasetPart& train, const DatasetPart& test);

// Mean softmax cross-entropy and accuracy of logits against labels.
struct ClassificationScore {
  double loss = 0.0;
  double accuracy = 0.0;
};
ClassificationScore score_logits(const Matrix& logits, std::span<const int> labels);

void adam_step(Matrix& param, const Matrix& grad, AdamMoments& moments, std::uint64_t step, double lr, double beta1,
               double beta2, double eps, double weight_decay);

}  // namespace ff
