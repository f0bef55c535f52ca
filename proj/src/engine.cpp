#include "ff/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "ff/metering.hpp"

namespace ff {

namespace {

constexpr double kNormGuard = 1e-8;
constexpr std::uint64_t kProbeStream = 0x9b0be;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Bias and ReLU are billed as part of the 2mnk matmul cost.
void add_bias_relu(Matrix& z, const Matrix& bias) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = std::max(0.0, row[c] + bias(0, c));
  }
}

Matrix stack_rows(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

bool normalize_layer_input(const FFConfig& cfg, std::size_t layer_index) {
  return cfg.length_normalize_between_layers && layer_index > 0;
}

std::size_t probe_first_layer(const Network& net) { return net.layers.size() > 1 ? 1 : 0; }

}  // namespace

void FFConfig::validate() const {
  if (layer_sizes.empty()) throw std::invalid_argument("layer_sizes must not be empty");
  for (auto s : layer_sizes)
    if (s == 0) throw std::invalid_argument("layer sizes must be positive");
  if (!std::isfinite(threshold)) throw std::invalid_argument("threshold must be finite");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw std::invalid_argument("adam_epsilon must be > 0");
  if (!(peer_coeff >= 0.0)) throw std::invalid_argument("peer_coeff must be >= 0");
  if (!(peer_decay >= 0.0 && peer_decay < 1.0)) throw std::invalid_argument("peer_decay must lie in [0, 1)");
  if (probe_batch_size < 1) throw std::invalid_argument("probe_batch_size must be >= 1");
  if (!(init_goodness > 0.0) || !std::isfinite(init_goodness)) throw std::invalid_argument("init_goodness must be > 0");
  if (!(probe_learning_rate > 0.0)) throw std::invalid_argument("probe_learning_rate must be > 0");
  registry_lookup(goodness);
  goodness_params.validate();
}

LayerState make_layer(std::size_t in_dim, std::size_t out_dim, double weight_std, Rng& rng) {
  LayerState layer;
  layer.weights = Matrix(out_dim, in_dim);
  for (auto& w : layer.weights.data()) w = rng.normal() * weight_std;
  layer.bias = Matrix(1, out_dim);
  layer.weight_moments = {Matrix(out_dim, in_dim), Matrix(out_dim, in_dim)};
  layer.bias_moments = {Matrix(1, out_dim), Matrix(1, out_dim)};
  layer.peer_mean = Matrix(1, out_dim);
  layer.goodness_state = GoodnessState::for_width(out_dim);
  return layer;
}

Matrix length_normalize(const Matrix& x) {
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / (std::sqrt(ss) + kNormGuard);
    for (double& v : row) v *= inv;
  }
  record_flops(OpKind::elementwise, 3 * x.size());
  return out;
}

Matrix layer_forward(const LayerState& layer, const Matrix& x, bool normalize_input) {
  if (x.cols() != layer.weights.cols())
    throw ShapeError("layer_forward: input " + x.shape_string() + " does not match weights " +
                     layer.weights.shape_string());
  Matrix z = normalize_input ? matmul_nt(length_normalize(x), layer.weights) : matmul_nt(x, layer.weights);
  add_bias_relu(z, layer.bias);
  return z;
}

FFLoss ff_layer_loss(const Matrix& g_pos, const Matrix& g_neg, double theta) {
  if (g_pos.rows() != g_neg.rows() || g_pos.cols() != 1 || g_neg.cols() != 1)
    throw ShapeError("ff_layer_loss: expected matching Bx1 goodness, got " + g_pos.shape_string() + " and " +
                     g_neg.shape_string());
  const std::size_t b = g_pos.rows();
  FFLoss out{0.0, Matrix(b, 1), Matrix(b, 1)};
  if (b == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double up = theta - g_pos(i, 0);
    const double un = g_neg(i, 0) - theta;
    total += softplus(up) + softplus(un);
    out.d_pos(i, 0) = -sigmoid(up) * inv_b;
    out.d_neg(i, 0) = sigmoid(un) * inv_b;
  }
  out.loss = total * inv_b;
  record_flops(OpKind::elementwise, 12 * b);
  return out;
}

PeerPenalty peer_penalty(const Matrix& activations, const LayerState& layer, double coeff, double decay) {
  const std::size_t n = layer.peer_mean.cols();
  if (activations.cols() != n)
    throw ShapeError("peer_penalty: activations " + activations.shape_string() + " vs peer mean width " +
                     std::to_string(n));
  if (coeff < 0.0) throw std::invalid_argument("peer_penalty: coeff must be >= 0");
  const std::size_t b = activations.rows();
  PeerPenalty out{0.0, Matrix(b, n), layer.peer_mean};
  if (b == 0) return out;
  Matrix batch_mean = row_reduce(transpose(activations), Reduce::mean);  // n x 1
  for (std::size_t i = 0; i < n; ++i)
    out.updated_mean(0, i) = decay * layer.peer_mean(0, i) + (1.0 - decay) * batch_mean(i, 0);
  double centre = 0.0;
  for (std::size_t i = 0; i < n; ++i) centre += out.updated_mean(0, i);
  centre /= static_cast<double>(n);
  const double scale = coeff * 2.0 * (1.0 - decay) / static_cast<double>(b);
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = out.updated_mean(0, i) - centre;
    out.penalty += dev * dev;
    // The centring term's derivative sums to zero across neurons.
    const double g = scale * dev;
    for (std::size_t r = 0; r < b; ++r) out.grad(r, i) = g;
  }
  out.penalty *= coeff;
  record_flops(OpKind::elementwise, 6 * n + b * n);
  return out;
}

void adam_step(Matrix& param, const Matrix& grad, AdamMoments& moments, std::uint64_t step, double lr, double beta1,
               double beta2, double eps, double weight_decay) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("adam_step: parameter " + param.shape_string() + " vs gradient " + grad.shape_string());
  if (moments.m.size() != param.size()) moments.m = Matrix(param.rows(), param.cols());
  if (moments.v.size() != param.size()) moments.v = Matrix(param.rows(), param.cols());
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  auto& p = param.data();
  const auto& g = grad.data();
  auto& m = moments.m.data();
  auto& v = moments.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
  }
  record_flops(OpKind::optimizer, 14 * p.size());
}

BatchStats train_layer_batch(LayerState& layer, const Matrix& x_pos, const Matrix& x_neg, const FFConfig& cfg,
                             const GoodnessDescriptor& goodness, bool normalize_input) {
  if (x_pos.rows() != x_neg.rows() || x_pos.cols() != x_neg.cols())
    throw ShapeError("train_layer_batch: positive " + x_pos.shape_string() + " vs negative " + x_neg.shape_string());
  const Matrix in_pos = normalize_input ? length_normalize(x_pos) : x_pos;
  const Matrix in_neg = normalize_input ? length_normalize(x_neg) : x_neg;
  BatchStats stats;
  stats.out_pos = layer_forward(layer, in_pos, false);
  stats.out_neg = layer_forward(layer, in_neg, false);

  auto diagnose = [&](const std::string& what) {
    return NumericError("objective " + std::string(goodness.name) + ": " + what);
  };

  std::pair<GoodnessResult, GoodnessResult> g;
  try {
    g = evaluate_pair(goodness, stats.out_pos, stats.out_neg, layer.goodness_state, cfg.goodness_params, true);
  } catch (const NumericError& e) {
    throw diagnose(e.what());
  }
  const auto& [gp, gn] = g;
  const FFLoss loss = ff_layer_loss(gp.values, gn.values, cfg.threshold);
  if (!std::isfinite(loss.loss)) throw diagnose("non-finite loss");
  const PeerPenalty peer = peer_penalty(stats.out_pos, layer, cfg.peer_coeff, cfg.peer_decay);

  const std::size_t b = x_pos.rows();
  const std::size_t n = layer.out_dim();
  // The relu passes gradient everywhere, so dL/dz equals dL/dh.
  Matrix dz_pos(b, n), dz_neg(b, n);
  std::size_t wins = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const double sp = loss.d_pos(r, 0), sn = loss.d_neg(r, 0);
    for (std::size_t c = 0; c < n; ++c) {
      dz_pos(r, c) = sp * gp.grad(r, c) + peer.grad(r, c);
      dz_neg(r, c) = sn * gn.grad(r, c);
    }
    if (gp.values(r, 0) > gn.values(r, 0)) ++wins;
  }
  record_flops(OpKind::elementwise, 3 * b * n);
  const Matrix dz = stack_rows(dz_pos, dz_neg);
  const Matrix grad_w = matmul_tn(dz, stack_rows(in_pos, in_neg));
  Matrix grad_b = row_reduce(transpose(dz), Reduce::sum);  // n x 1
  grad_b = Matrix(1, n, std::move(grad_b.data()));
  if (!all_finite(grad_w) || !all_finite(grad_b)) throw diagnose("non-finite gradient");

  layer.step += 1;
  adam_step(layer.weights, grad_w, layer.weight_moments, layer.step, cfg.learning_rate, cfg.beta1, cfg.beta2,
            cfg.adam_epsilon, cfg.weight_decay);
  adam_step(layer.bias, grad_b, layer.bias_moments, layer.step, cfg.learning_rate, cfg.beta1, cfg.beta2,
            cfg.adam_epsilon, 0.0);
  layer.peer_mean = peer.updated_mean;

  stats.ff_loss = loss.loss;
  stats.peer_penalty = peer.penalty;
  stats.ff_accuracy = b == 0 ? 0.0 : static_cast<double>(wins) / static_cast<double>(b);
  return stats;
}

double initial_weight_std(std::size_t out_dim, double input_sq_norm, double target_goodness) {
  // z_j ~ N(0, std^2 |x|^2); E[relu(z_j)^2] = std^2 |x|^2 / 2, summed over out_dim units.
  return std::sqrt(2.0 * target_goodness / (static_cast<double>(out_dim) * input_sq_norm));
}

double mean_squared_norm(const Matrix& x) {
  if (x.rows() == 0) return 1.0;
  double total = 0.0;
  for (double v : x.data()) total += v * v;
  return total / static_cast<double>(x.rows());
}

Network make_network(std::size_t input_dim, int num_classes, const FFConfig& cfg, double input_sq_norm) {
  cfg.validate();
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (input_dim < static_cast<std::size_t>(num_classes))
    throw ShapeError("input dimension " + std::to_string(input_dim) + " cannot hold a " +
                     std::to_string(num_classes) + "-way label embedding");
  Network net;
  net.config = cfg;
  net.input_dim = input_dim;
  net.num_classes = num_classes;
  net.rng = Rng(cfg.seed);
  if (!(input_sq_norm > 0.0) || !std::isfinite(input_sq_norm))
    throw std::invalid_argument("input_sq_norm must be positive and finite");
  Rng init = net.rng.split(0x1417);
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < cfg.layer_sizes.size(); ++l) {
    const std::size_t out = cfg.layer_sizes[l];
    const double sq = normalize_layer_input(cfg, l) ? 1.0 : input_sq_norm;
    net.layers.push_back(make_layer(in, out, initial_weight_std(out, sq, cfg.init_goodness), init));
    in = out;
  }
  return net;
}

std::vector<Matrix> forward_all(const Network& net, const Matrix& x) {
  std::vector<Matrix> acts;
  acts.reserve(net.layers.size());
  const Matrix* in = &x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    acts.push_back(layer_forward(net.layers[l], *in, normalize_layer_input(net.config, l)));
    in = &acts.back();
  }
  return acts;
}

LayerRange default_multipass_range(const Network& net) {
  const std::size_t l = net.layers.size();
  return {std::min(net.config.multipass_first_layer, l == 0 ? 0 : l - 1), l};
}

std::vector<int> multipass_predict_batch(const Network& net, const Matrix& images, std::optional<LayerRange> range) {
  const LayerRange lr = range.value_or(default_multipass_range(net));
  if (lr.first >= lr.last || lr.last > net.layers.size())
    throw std::invalid_argument("multipass layer range [" + std::to_string(lr.first) + ", " +
                                std::to_string(lr.last) + ") is invalid for " + std::to_string(net.layers.size()) +
                                " layers");
  if (images.cols() != net.input_dim)
    throw ShapeError("multipass_predict: images " + images.shape_string() + " vs input dim " +
                     std::to_string(net.input_dim));
  const auto& desc = registry_lookup(net.config.goodness);
  const auto c = static_cast<std::size_t>(net.num_classes);
  constexpr std::size_t kChunk = 100;
  std::vector<int> predictions(images.rows());
  for (std::size_t start = 0; start < images.rows(); start += kChunk) {
    const std::size_t count = std::min(kChunk, images.rows() - start);
    // Row i*c + k holds image i with candidate label k.
    Matrix candidates(count * c, images.cols());
    for (std::size_t i = 0; i < count; ++i) {
      const auto src = images.row(start + i);
      for (std::size_t k = 0; k < c; ++k) {
        auto dst = candidates.row(i * c + k);
        std::copy(src.begin(), src.end(), dst.begin());
        embed_label(dst, static_cast<int>(k), net.num_classes);
      }
    }
    std::vector<double> total(count * c, 0.0);
    const Matrix* in = &candidates;
    Matrix act;
    for (std::size_t l = 0; l < lr.last; ++l) {
      act = layer_forward(net.layers[l], *in, normalize_layer_input(net.config, l));
      if (l >= lr.first) {
        const Matrix s = inference_score(desc, act, net.layers[l].goodness_state, net.config.goodness_params);
        for (std::size_t r = 0; r < total.size(); ++r) total[r] += s(r, 0);
      }
      in = &act;
    }
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (total[i * c + k] > total[i * c + best]) best = k;
      predictions[start + i] = static_cast<int>(best);
    }
  }
  return predictions;
}

int multipass_predict(const Network& net, std::span<const double> image_row, std::optional<LayerRange> range) {
  Matrix one(1, image_row.size(), std::vector<double>(image_row.begin(), image_row.end()));
  return multipass_predict_batch(net, one, range).front();
}

double multipass_accuracy(const Network& net, const DatasetPart& part, std::optional<LayerRange> range) {
  if (part.size() == 0) return 0.0;
  PhaseScope phase(Phase::eval);
  const auto pred = multipass_predict_batch(net, part.images, range);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == part.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Matrix probe_features(const Network& net, const Matrix& images) {
  const std::size_t first = probe_first_layer(net);
  std::size_t width = 0;
  for (std::size_t l = first; l < net.layers.size(); ++l) width += net.layers[l].out_dim();
  Matrix features(images.rows(), width);
  constexpr std::size_t kChunk = 500;
  for (std::size_t start = 0; start < images.rows(); start += kChunk) {
    const std::size_t count = std::min(kChunk, images.rows() - start);
    Matrix chunk(count, images.cols());
    std::copy(images.row(start).begin(), images.row(start).begin() + static_cast<std::ptrdiff_t>(count * images.cols()),
              chunk.data().begin());
    const auto acts = forward_all(net, embed_neutral(chunk, net.num_classes));
    std::size_t offset = 0;
    for (std::size_t l = first; l < acts.size(); ++l) {
      const Matrix normed = length_normalize(acts[l]);
      for (std::size_t r = 0; r < count; ++r) {
        const auto src = normed.row(r);
        std::copy(src.begin(), src.end(), features.row(start + r).begin() + static_cast<std::ptrdiff_t>(offset));
      }
      offset += normed.cols();
    }
  }
  return features;
}

ClassificationScore score_logits(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() != labels.size())
    throw ShapeError("score_logits: " + logits.shape_string() + " logits for " + std::to_string(labels.size()) +
                     " labels");
  ClassificationScore out;
  if (labels.empty()) return out;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double mx = row[best];
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out.loss += std::log(z) + mx - row[static_cast<std::size_t>(labels[r])];
    if (static_cast<int>(best) == labels[r]) ++hits;
  }
  out.loss /= static_cast<double>(labels.size());
  out.accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
  record_flops(OpKind::elementwise, 4 * logits.size());
  return out;
}

namespace {

Matrix probe_logits(const ProbeState& probe, const Matrix& features) {
  Matrix z = matmul_nt(features, probe.weights);
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += probe.bias(0, c);
  record_flops(OpKind::elementwise, z.size());
  return z;
}

}  // namespace

ProbeResult train_probe(const Matrix& train_features, std::span<const int> train_labels,
                        const Matrix& test_features, std::span<const int> test_labels, int num_classes,
                        const ProbeConfig& cfg) {
  if (train_features.rows() != train_labels.size() || test_features.rows() != test_labels.size())
    throw ShapeError("train_probe: feature rows must match label counts");
  if (train_features.cols() != test_features.cols())
    throw ShapeError("train_probe: train features " + train_features.shape_string() + " vs test features " +
                     test_features.shape_string());
  const auto c = static_cast<std::size_t>(num_classes);
  const std::size_t f = train_features.cols();
  ProbeResult result;
  ProbeState& p = result.state;
  p.weights = Matrix(c, f);
  p.bias = Matrix(1, c);
  p.weight_moments = {Matrix(c, f), Matrix(c, f)};
  p.bias_moments = {Matrix(1, c), Matrix(1, c)};
  result.initial_loss = score_logits(probe_logits(p, test_features), test_labels).loss;

  Rng rng(cfg.seed);
  const std::size_t n = train_features.rows();
  for (std::size_t epoch = 0; epoch < cfg.epochs && n > 0; ++epoch) {
    const auto order = permutation(n, rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      Matrix x(count, f);
      std::vector<int> y(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto src = train_features.row(order[start + i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
        y[i] = train_labels[order[start + i]];
      }
      Matrix dz = probe_logits(p, x);
      for (std::size_t r = 0; r < count; ++r) {
        auto row = dz.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double& v : row) z += (v = std::exp(v - mx));
        for (double& v : row) v /= z * static_cast<double>(count);
        row[static_cast<std::size_t>(y[r])] -= 1.0 / static_cast<double>(count);
      }
      record_flops(OpKind::elementwise, 4 * dz.size());
      const Matrix gw = matmul_tn(dz, x);
      Matrix gb = row_reduce(transpose(dz), Reduce::sum);
      gb = Matrix(1, c, std::move(gb.data()));
      p.step += 1;
      adam_step(p.weights, gw, p.weight_moments, p.step, cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0);
      adam_step(p.bias, gb, p.bias_moments, p.step, cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0);
    }
  }
  const auto score = score_logits(probe_logits(p, test_features), test_labels);
  result.accuracy = score.accuracy;
  result.loss = score.loss;
  return result;
}

ProbeResult linear_probe(const Network& net, const DatasetPart& train, const DatasetPart& test) {
  PhaseScope phase(Phase::probe);
  const Matrix train_f = probe_features(net, train.images);
  const Matrix test_f = probe_features(net, test.images);
  ProbeConfig pc;
  pc.epochs = net.config.probe_epochs;
  pc.learning_rate = net.config.probe_learning_rate;
  pc.batch_size = net.config.probe_batch_size;
  pc.seed = Rng(net.config.seed).split(kProbeStream).next_u64();
  return train_probe(train_f, train.labels, test_f, test.labels, net.num_classes, pc);
}

RunMetrics train_network(Network& net, const DatasetPart& train, const DatasetPart& eval,
                         const EpochCallback& on_epoch) {
  const FFConfig& cfg = net.config;
  cfg.validate();
  if (train.images.cols() != net.input_dim)
    throw ShapeError("train_network: training images " + train.images.shape_string() + " vs input dim " +
                     std::to_string(net.input_dim));
  const auto& desc = registry_lookup(cfg.goodness);
  const std::size_t num_layers = net.layers.size();
  const std::size_t n = train.size();
  RunMetrics run;
  // The first failure wins; later ones in the same epoch are consequences.
  auto fail = [&](std::size_t epoch, const std::string& what) {
    if (run.aborted) return;
    run.aborted = true;
    const std::string prefix = "objective " + std::string(desc.name) + ": ";
    run.diagnostic = "epoch " + std::to_string(epoch) + ": " + (what.rfind(prefix, 0) == 0 ? what : prefix + what);
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.layer_loss.assign(num_layers, 0.0);
    m.layer_accuracy.assign(num_layers, 0.0);
    m.layer_mean_goodness_pos.assign(num_layers, 0.0);
    m.layer_mean_goodness_neg.assign(num_layers, 0.0);
    std::size_t batches = 0;
    {
      PhaseScope phase(Phase::train);
      const auto order = permutation(n, net.rng);
      try {
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
          const std::size_t count = std::min(cfg.batch_size, n - start);
          Matrix x_pos(count, net.input_dim), x_neg(count, net.input_dim);
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t src = order[start + i];
            const auto img = train.images.row(src);
            std::copy(img.begin(), img.end(), x_pos.row(i).begin());
            std::copy(img.begin(), img.end(), x_neg.row(i).begin());
            embed_label(x_pos.row(i), train.labels[src], net.num_classes);
            make_negative(x_neg.row(i), train.labels[src], net.num_classes, net.rng);
          }
          Matrix in_pos = std::move(x_pos), in_neg = std::move(x_neg);
          for (std::size_t l = 0; l < num_layers; ++l) {
            BatchStats s = train_layer_batch(net.layers[l], in_pos, in_neg, cfg, desc, normalize_layer_input(cfg, l));
            m.layer_loss[l] += s.ff_loss;
            m.layer_accuracy[l] += s.ff_accuracy;
            in_pos = std::move(s.out_pos);
            in_neg = std::move(s.out_neg);
          }
          ++batches;
        }
      } catch (const NumericError& e) {
        fail(epoch, e.what());
      }
      if (!run.aborted) {
        for (auto& layer : net.layers) refit_projections(desc.mode, layer.goodness_state, cfg.goodness_params);
      }
    }
    if (batches > 0) {
      for (std::size_t l = 0; l < num_layers; ++l) {
        m.layer_loss[l] /= static_cast<double>(batches);
        m.layer_accuracy[l] /= static_cast<double>(batches);
      }
    }
    if (eval.size() > 0) {
      PhaseScope phase(Phase::eval);
      // Metrics that cannot be computed stay NaN.
      const double nan = std::numeric_limits<double>::quiet_NaN();
      std::fill(m.layer_mean_goodness_pos.begin(), m.layer_mean_goodness_pos.end(), nan);
      std::fill(m.layer_mean_goodness_neg.begin(), m.layer_mean_goodness_neg.end(), nan);
      m.multipass_accuracy = nan;
      try {
        const Matrix pos = embed_labels(eval.images, eval.labels, net.num_classes);
        const auto acts = forward_all(net, pos);
        for (std::size_t l = 0; l < num_layers; ++l) {
          const Matrix s = inference_score(desc, acts[l], net.layers[l].goodness_state, cfg.goodness_params);
          m.layer_mean_goodness_pos[l] = row_reduce(transpose(s), Reduce::mean)(0, 0);
        }
        Rng neg_rng = Rng(cfg.seed).split(0xe7a1 + epoch);
        Matrix neg = eval.images;
        for (std::size_t i = 0; i < eval.size(); ++i)
          make_negative(neg.row(i), eval.labels[i], net.num_classes, neg_rng);
        const auto nacts = forward_all(net, neg);
        for (std::size_t l = 0; l < num_layers; ++l) {
          const Matrix s = inference_score(desc, nacts[l], net.layers[l].goodness_state, cfg.goodness_params);
          m.layer_mean_goodness_neg[l] = row_reduce(transpose(s), Reduce::mean)(0, 0);
        }
        m.multipass_accuracy = multipass_accuracy(net, eval);
      } catch (const NumericError& e) {
        fail(epoch, e.what());
      }
      const bool last = run.aborted || epoch == cfg.epochs;
      if (cfg.probe_every_epoch || last) {
        try {
          const ProbeResult probe = linear_probe(net, train, eval);
          m.probe_accuracy = probe.accuracy;
          m.probe_loss = probe.loss;
        } catch (const NumericError& e) {
          fail(epoch, e.what());
          m.probe_accuracy = nan;
          m.probe_loss = nan;
        }
      }
    }
    run.epochs.push_back(std::move(m));
    if (on_epoch) on_epoch(net, run.epochs.back());
    if (run.aborted) break;
  }
  return run;
}

}  // namespace ff
