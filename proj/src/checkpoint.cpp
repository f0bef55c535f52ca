#include "ff/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "ff/config.hpp"

namespace ff {

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'K'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    for (double v : m.data()) f64(v);
  }
  void optional_matrix(const std::optional<Matrix>& m) {
    u8(m ? 1 : 0);
    if (m) matrix(*m);
  }
  std::string take() { return std::move(out_); }
  const std::string& buffer() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(bytes(u64())); }
  Matrix matrix() {
    const std::uint64_t rows = u64(), cols = u64();
    if (cols != 0 && rows > remaining() / 8 / cols) throw CheckpointError("checkpoint truncated inside a matrix");
    Matrix m(rows, cols);
    for (double& v : m.data()) v = f64();
    return m;
  }
  std::optional<Matrix> optional_matrix() {
    const auto flag = u8();
    if (flag > 1) throw CheckpointError("checkpoint has an invalid optional flag");
    if (flag == 0) return std::nullopt;
    return matrix();
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols)
    throw CheckpointError(std::string("checkpoint field ") + what + " has shape " + m.shape_string() + ", expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
}

}  // namespace

std::string serialize_checkpoint(const Network& net) {
  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(to_json(net.config).dump());
  w.u64(net.input_dim);
  w.u32(static_cast<std::uint32_t>(net.num_classes));
  w.u64(net.rng.seed());
  w.u64(net.rng.position());
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& layer : net.layers) {
    w.matrix(layer.weights);
    w.matrix(layer.bias);
    w.matrix(layer.weight_moments.m);
    w.matrix(layer.weight_moments.v);
    w.matrix(layer.bias_moments.m);
    w.matrix(layer.bias_moments.v);
    w.u64(layer.step);
    w.matrix(layer.peer_mean);
    const auto& g = layer.goodness_state;
    w.matrix(g.running_mean);
    w.matrix(g.running_var);
    w.matrix(g.bcm_threshold);
    w.matrix(g.pred_baseline);
    w.matrix(g.covariance);
    w.optional_matrix(g.whitening);
    w.optional_matrix(g.pca);
    w.u64(g.updates);
  }
  w.u64(fnv1a(w.buffer()));
  return w.take();
}

Network deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::string_view body(bytes.data(), bytes.size() - 8);
  Reader trailer(std::string_view(bytes).substr(bytes.size() - 8));
  if (trailer.u64() != fnv1a(body)) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(body);
  r.bytes(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Network net;
  try {
    net.config = ff_config_from_json(nlohmann::json::parse(r.str()));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  net.input_dim = r.u64();
  net.num_classes = static_cast<int>(r.u32());
  const auto seed = r.u64();
  const auto position = r.u64();
  net.rng = Rng(seed, position);
  const auto count = r.u32();
  if (count != net.config.layer_sizes.size()) throw CheckpointError("checkpoint layer count disagrees with config");
  std::size_t in = net.input_dim;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::size_t out = net.config.layer_sizes[l];
    LayerState layer;
    layer.weights = r.matrix();
    require_shape(layer.weights, out, in, "weights");
    layer.bias = r.matrix();
    require_shape(layer.bias, 1, out, "bias");
    layer.weight_moments.m = r.matrix();
    layer.weight_moments.v = r.matrix();
    layer.bias_moments.m = r.matrix();
    layer.bias_moments.v = r.matrix();
    require_shape(layer.weight_moments.m, out, in, "weight moment");
    require_shape(layer.weight_moments.v, out, in, "weight moment");
    require_shape(layer.bias_moments.m, 1, out, "bias moment");
    require_shape(layer.bias_moments.v, 1, out, "bias moment");
    layer.step = r.u64();
    layer.peer_mean = r.matrix();
    require_shape(layer.peer_mean, 1, out, "peer mean");
    auto& g = layer.goodness_state;
    g.running_mean = r.matrix();
    g.running_var = r.matrix();
    g.bcm_threshold = r.matrix();
    g.pred_baseline = r.matrix();
    g.covariance = r.matrix();
    g.whitening = r.optional_matrix();
    g.pca = r.optional_matrix();
    g.updates = r.u64();
    require_shape(g.running_mean, 1, out, "running mean");
    require_shape(g.running_var, 1, out, "running variance");
    require_shape(g.bcm_threshold, 1, out, "bcm threshold");
    require_shape(g.pred_baseline, 1, out, "prediction baseline");
    if (!g.covariance.empty()) require_shape(g.covariance, out, out, "covariance");
    net.layers.push_back(std::move(layer));
    in = out;
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace ff
