#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ff/tensor.hpp"

namespace ff {

enum class DataErrorKind { missing_file, unexpected_magic, truncated, count_mismatch, bad_length, bad_label };

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

// One split of a dataset: images in [0,1] plus integer labels.
struct DatasetPart {
  Matrix images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct Dataset {
  std::string name;
  DatasetPart train;
  DatasetPart test;
  int num_classes = 10;

  std::size_t dim() const { return train.images.cols(); }
};

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarRecordBytes = 3073;
constexpr std::size_t kStlSide = 96;
constexpr std::size_t kStlImageBytes = kStlSide * kStlSide * 3;

// `limit` caps the number of records read (0 = all).
DatasetPart load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                     std::size_t limit = 0);
DatasetPart load_cifar10(const std::vector<std::filesystem::path>& batch_paths, std::size_t limit = 0);

// STL-10 records are stored channel by channel, each 96x96 plane column-major.
// Rows are emitted channel-major, then image row, then image column, matching
// the CIFAR layout. `downsample` > 1 average-pools each plane by that factor.
DatasetPart load_stl10(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                       std::size_t limit = 0, std::size_t downsample = 1);

// Writers for the same formats; values are quantised with round(v * 255).
void write_idx(const DatasetPart& part, std::size_t height, std::size_t width,
               const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
void write_cifar10(const DatasetPart& part, const std::filesystem::path& path);
void write_stl10(const DatasetPart& part, const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

struct LoadOptions {
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::size_t stl10_downsample = 1;
};

// Resolves the canonical file layout under `root` (normally $FF_DATA_DIR):
//   mnist/, fashionmnist/   {train,t10k}-{images-idx3,labels-idx1}-ubyte
//   cifar10/                data_batch_{1..5}.bin, test_batch.bin
//   stl10/                  {train,test}_{X,y}.bin
Dataset load_dataset(const std::string& name, const std::filesystem::path& root, const LoadOptions& options = {});
std::filesystem::path data_root_from_env();
bool is_known_dataset(const std::string& name);

// Overwrites the first num_classes entries with a one-hot of `label` at full
// intensity (1.0). The remaining entries are untouched.
void embed_label(std::span<double> row, int label, int num_classes);
// Sets the first num_classes entries to 1/num_classes.
void embed_neutral(std::span<double> row, int num_classes);
// Draws a wrong label uniformly from the other classes and embeds it.
int make_negative(std::span<double> row, int true_label, int num_classes, Rng& rng);

Matrix embed_labels(const Matrix& images, std::span<const int> labels, int num_classes);
Matrix embed_neutral(const Matrix& images, int num_classes);

// Row subset in the given order.
DatasetPart select_rows(const DatasetPart& part, std::span<const std::size_t> indices);

}  // namespace ff
