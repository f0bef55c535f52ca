#include "ff/data.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ff {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::missing_file, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrorKind::missing_file, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void push_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

std::string hex32(std::uint32_t v) {
  std::ostringstream s;
  s << "0x" << std::hex;
  s.width(8);
  s.fill('0');
  s << v;
  return s.str();
}

std::uint8_t quantise(double v) {
  const double q = std::round(v * 255.0);
  if (!(q >= 0.0 && q <= 255.0)) throw std::invalid_argument("pixel value outside [0,1]");
  return static_cast<std::uint8_t>(q);
}

std::size_t capped(std::size_t count, std::size_t limit) { return limit == 0 ? count : std::min(count, limit); }

}  // namespace

DatasetPart load_idx(const fs::path& images_path, const fs::path& labels_path, std::size_t limit) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  if (img.size() < 16) throw DataError(DataErrorKind::truncated, images_path.string() + ": truncated IDX header");
  if (lab.size() < 8) throw DataError(DataErrorKind::truncated, labels_path.string() + ": truncated IDX header");
  if (const auto m = read_be32(img, 0); m != kIdxImagesMagic) {
    throw DataError(DataErrorKind::unexpected_magic,
                    images_path.string() + ": unexpected magic " + hex32(m) + " (want " + hex32(kIdxImagesMagic) + ")");
  }
  if (const auto m = read_be32(lab, 0); m != kIdxLabelsMagic) {
    throw DataError(DataErrorKind::unexpected_magic,
                    labels_path.string() + ": unexpected magic " + hex32(m) + " (want " + hex32(kIdxLabelsMagic) + ")");
  }
  const std::size_t count = read_be32(img, 4);
  const std::size_t rows = read_be32(img, 8);
  const std::size_t cols = read_be32(img, 12);
  const std::size_t label_count = read_be32(lab, 4);
  if (count != label_count) {
    throw DataError(DataErrorKind::count_mismatch, "IDX count mismatch: " + std::to_string(count) + " images vs " +
                                                       std::to_string(label_count) + " labels");
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + count * dim) {
    throw DataError(DataErrorKind::truncated, images_path.string() + ": truncated, expected " +
                                                  std::to_string(16 + count * dim) + " bytes, found " +
                                                  std::to_string(img.size()));
  }
  if (lab.size() < 8 + count) {
    throw DataError(DataErrorKind::truncated, labels_path.string() + ": truncated, expected " +
                                                  std::to_string(8 + count) + " bytes, found " +
                                                  std::to_string(lab.size()));
  }
  const std::size_t n = capped(count, limit);
  DatasetPart part{Matrix(n, dim), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    part.labels[i] = lab[8 + i];
    for (std::size_t j = 0; j < dim; ++j) part.images(i, j) = img[16 + i * dim + j] / 255.0;
  }
  return part;
}

DatasetPart load_cifar10(const std::vector<fs::path>& batch_paths, std::size_t limit) {
  std::vector<std::vector<std::uint8_t>> files;
  std::size_t total = 0;
  for (const auto& p : batch_paths) {
    files.push_back(read_bytes(p));
    if (files.back().size() % kCifarRecordBytes != 0) {
      throw DataError(DataErrorKind::bad_length, p.string() + ": length " + std::to_string(files.back().size()) +
                                                     " is not a multiple of 3073");
    }
    total += files.back().size() / kCifarRecordBytes;
  }
  const std::size_t n = capped(total, limit);
  constexpr std::size_t dim = kCifarRecordBytes - 1;
  DatasetPart part{Matrix(n, dim), std::vector<int>(n)};
  std::size_t row = 0;
  for (const auto& bytes : files) {
    for (std::size_t off = 0; off < bytes.size() && row < n; off += kCifarRecordBytes, ++row) {
      if (bytes[off] > 9) throw DataError(DataErrorKind::bad_label, "CIFAR-10 label out of range: " + std::to_string(bytes[off]));
      part.labels[row] = bytes[off];
      for (std::size_t j = 0; j < dim; ++j) part.images(row, j) = bytes[off + 1 + j] / 255.0;
    }
  }
  return part;
}

DatasetPart load_stl10(const fs::path& images_path, const fs::path& labels_path, std::size_t limit,
                       std::size_t downsample) {
  if (downsample == 0 || kStlSide % downsample != 0) {
    throw std::invalid_argument("stl10 downsample factor must divide 96");
  }
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  if (img.size() % kStlImageBytes != 0) {
    throw DataError(DataErrorKind::bad_length, images_path.string() + ": length " + std::to_string(img.size()) +
                                                   " is not a multiple of 27648");
  }
  const std::size_t count = img.size() / kStlImageBytes;
  if (lab.size() != count) {
    throw DataError(DataErrorKind::count_mismatch, "STL-10 count mismatch: " + std::to_string(count) +
                                                       " images vs " + std::to_string(lab.size()) + " labels");
  }
  const std::size_t n = capped(count, limit);
  const std::size_t side = kStlSide / downsample;
  const std::size_t plane = side * side;
  const double pool = static_cast<double>(downsample * downsample);
  DatasetPart part{Matrix(n, 3 * plane), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = lab[i];
    if (label < 1 || label > 10) {
      throw DataError(DataErrorKind::bad_label, "STL-10 label out of range 1..10: " + std::to_string(label));
    }
    part.labels[i] = label - 1;
    const std::size_t base = i * kStlImageBytes;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t x = 0; x < side; ++x) {
          double acc = 0.0;
          for (std::size_t dr = 0; dr < downsample; ++dr)
            for (std::size_t dx = 0; dx < downsample; ++dx) {
              const std::size_t rr = r * downsample + dr, xx = x * downsample + dx;
              acc += img[base + c * kStlSide * kStlSide + xx * kStlSide + rr];
            }
          part.images(i, c * plane + r * side + x) = downsample == 1 ? acc / 255.0 : acc / (255.0 * pool);
        }
      }
    }
  }
  return part;
}

void write_idx(const DatasetPart& part, std::size_t height, std::size_t width, const fs::path& images_path,
               const fs::path& labels_path) {
  if (part.images.cols() != height * width && part.size() > 0) {
    throw ShapeError("write_idx: image dim does not match height*width");
  }
  std::vector<std::uint8_t> img, lab;
  push_be32(img, kIdxImagesMagic);
  push_be32(img, static_cast<std::uint32_t>(part.size()));
  push_be32(img, static_cast<std::uint32_t>(height));
  push_be32(img, static_cast<std::uint32_t>(width));
  push_be32(lab, kIdxLabelsMagic);
  push_be32(lab, static_cast<std::uint32_t>(part.size()));
  for (std::size_t i = 0; i < part.size(); ++i) {
    lab.push_back(static_cast<std::uint8_t>(part.labels[i]));
    for (double v : part.images.row(i)) img.push_back(quantise(v));
  }
  write_bytes(images_path, img);
  write_bytes(labels_path, lab);
}

void write_cifar10(const DatasetPart& part, const fs::path& path) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < part.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(part.labels[i]));
    for (double v : part.images.row(i)) out.push_back(quantise(v));
  }
  write_bytes(path, out);
}

void write_stl10(const DatasetPart& part, const fs::path& images_path, const fs::path& labels_path) {
  std::vector<std::uint8_t> img(part.size() * kStlImageBytes), lab;
  for (std::size_t i = 0; i < part.size(); ++i) {
    lab.push_back(static_cast<std::uint8_t>(part.labels[i] + 1));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t r = 0; r < kStlSide; ++r)
        for (std::size_t x = 0; x < kStlSide; ++x)
          img[i * kStlImageBytes + c * kStlSide * kStlSide + x * kStlSide + r] =
              quantise(part.images(i, c * kStlSide * kStlSide + r * kStlSide + x));
  }
  write_bytes(images_path, img);
  write_bytes(labels_path, lab);
}

bool is_known_dataset(const std::string& name) {
  return name == "mnist" || name == "fashionmnist" || name == "cifar10" || name == "stl10";
}

fs::path data_root_from_env() {
  const char* dir = std::getenv("FF_DATA_DIR");
  return dir != nullptr ? fs::path(dir) : fs::path("data");
}

Dataset load_dataset(const std::string& name, const fs::path& root, const LoadOptions& options) {
  Dataset ds;
  ds.name = name;
  ds.num_classes = 10;
  if (name == "mnist" || name == "fashionmnist") {
    const fs::path dir = root / name;
    ds.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", options.train_limit);
    ds.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", options.test_limit);
  } else if (name == "cifar10") {
    const fs::path dir = root / name;
    std::vector<fs::path> train;
    for (int i = 1; i <= 5; ++i) train.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    ds.train = load_cifar10(train, options.train_limit);
    ds.test = load_cifar10({dir / "test_batch.bin"}, options.test_limit);
  } else if (name == "stl10") {
    const fs::path dir = root / name;
    ds.train = load_stl10(dir / "train_X.bin", dir / "train_y.bin", options.train_limit, options.stl10_downsample);
    ds.test = load_stl10(dir / "test_X.bin", dir / "test_y.bin", options.test_limit, options.stl10_downsample);
  } else {
    throw std::invalid_argument("unknown dataset '" + name + "' (valid: mnist, fashionmnist, cifar10, stl10)");
  }
  return ds;
}

void embed_label(std::span<double> row, int label, int num_classes) {
  if (num_classes < 1 || row.size() < static_cast<std::size_t>(num_classes)) {
    throw std::invalid_argument("embed_label: row dim " + std::to_string(row.size()) + " < num_classes " +
                                std::to_string(num_classes));
  }
  if (label < 0 || label >= num_classes) {
    throw std::out_of_range("embed_label: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(num_classes) + ")");
  }
  for (int c = 0; c < num_classes; ++c) row[c] = c == label ? 1.0 : 0.0;
}

void embed_neutral(std::span<double> row, int num_classes) {
  if (num_classes < 1 || row.size() < static_cast<std::size_t>(num_classes)) {
    throw std::invalid_argument("embed_neutral: row dim smaller than num_classes");
  }
  const double v = 1.0 / num_classes;
  for (int c = 0; c < num_classes; ++c) row[c] = v;
}

int make_negative(std::span<double> row, int true_label, int num_classes, Rng& rng) {
  if (num_classes < 2) throw std::invalid_argument("make_negative: need at least 2 classes");
  if (true_label < 0 || true_label >= num_classes) throw std::out_of_range("make_negative: true label out of range");
  auto wrong = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(num_classes - 1)));
  if (wrong >= true_label) ++wrong;
  embed_label(row, wrong, num_classes);
  return wrong;
}

Matrix embed_labels(const Matrix& images, std::span<const int> labels, int num_classes) {
  if (labels.size() != images.rows()) throw ShapeError("embed_labels: label count does not match rows");
  Matrix out = images;
  for (std::size_t i = 0; i < out.rows(); ++i) embed_label(out.row(i), labels[i], num_classes);
  return out;
}

Matrix embed_neutral(const Matrix& images, int num_classes) {
  Matrix out = images;
  for (std::size_t i = 0; i < out.rows(); ++i) embed_neutral(out.row(i), num_classes);
  return out;
}

DatasetPart select_rows(const DatasetPart& part, std::span<const std::size_t> indices) {
  DatasetPart out{Matrix(indices.size(), part.images.cols()), std::vector<int>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = part.images.row(indices[i]);
    std::copy(src.begin(), src.end(), out.images.row(i).begin());
    out.labels[i] = part.labels[indices[i]];
  }
  return out;
}

}  // namespace ff
