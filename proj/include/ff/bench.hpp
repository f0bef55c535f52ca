#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ff/engine.hpp"
#include "ff/metering.hpp"

namespace ff {

// Error surfaced to the CLI as {"error": {"kind": ..., "message": ...}}.
class BenchError : public std::runtime_error {
 public:
  BenchError(std::string kind, const std::string& message) : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct RunConfig {
  std::string dataset = "mnist";
  std::vector<std::string> goodness{"sum_of_squares"};
  FFConfig engine;
  std::filesystem::path output_dir = "results";
  std::optional<std::filesystem::path> data_dir;  // defaults to $FF_DATA_DIR
  bool desk_scale = false;
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;
  std::size_t stl10_downsample = 1;
  bool save_checkpoints = true;
  PowerModel power;

  std::uint64_t seed() const { return engine.seed; }
  void validate() const;
};

// Layers [500, 500], 5 epochs, 10k training images, 1k evaluation images.
void apply_desk_scale(RunConfig& cfg);

// Top-level keys: dataset, goodness (name, list, or "all"), seed, output_dir,
// data_dir, desk_scale, train_limit, test_limit, stl10_downsample,
// checkpoints, engine {FFConfig keys}, power {PowerModel keys}. The desk
// preset is applied before the engine table, so explicit values win.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
// Parses TOML (.toml) or JSON (anything else) into the JSON form above.
nlohmann::json read_config_file(const std::filesystem::path& path);
RunConfig load_run_config(const std::filesystem::path& path);

// FNV-1a over the canonical JSON of the fields that change results for one
// objective; output paths and the other sweep entries are excluded.
std::string config_hash(const RunConfig& cfg, const std::string& goodness);

struct ResultRow {
  std::string goodness;
  double class_acc = 0.0;
  double multipass_acc = 0.0;
  double class_loss = 0.0;
  double emissions_g = 0.0;
  double energy_kwh = 0.0;
  std::uint64_t flops = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

extern const char* const kResultsHeader;
std::string format_result_row(const ResultRow& row);

struct RunFailure {
  std::string goodness;
  std::string kind;
  std::string message;
};

struct BenchReport {
  std::vector<ResultRow> rows;
  std::vector<RunFailure> failures;
  bool ok() const { return failures.empty(); }
};

// Trains and evaluates every requested objective, writing results.csv,
// results.json, series/<goodness>.csv and checkpoints/<goodness>.ffck under
// cfg.output_dir. A failing objective is reported and the sweep continues.
// Throws BenchError only for problems that stop the whole sweep.
BenchReport run_benchmark(const RunConfig& cfg);

struct PlotRow {
  std::size_t epoch = 0;
  std::string metric;
  std::optional<std::size_t> layer;
  std::string goodness;
  double value = 0.0;
};

struct PlotData {
  std::vector<PlotRow> rows;
  std::vector<std::string> missing;  // objectives listed in results.json without a series file
};

// Reads series/*.csv under `run_dir` (or `run_dir` itself if it holds the
// series files) into long format. Missing series throw unless allow_partial.
PlotData emit_plot_data(const std::filesystem::path& run_dir, bool allow_partial = false);
void write_plot_data(const PlotData& data, const std::filesystem::path& path);

nlohmann::json error_json(const std::string& kind, const std::string& message);

}  // namespace ff
