// ffbench: train and evaluate Forward-Forward goodness functions.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ff/bench.hpp"
#include "ff/checkpoint.hpp"
#include "ff/config.hpp"
#include "ff/data.hpp"
#include "ff/engine.hpp"

namespace {

int fail(const std::string& kind, const std::string& message) {
  std::cerr << ff::error_json(kind, message).dump() << std::endl;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forward-Forward goodness benchmark"};
  std::string config_path, dataset, out_dir, plot_dir, inspect_path;
  std::vector<std::string> goodness;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  bool desk = false, partial = false, print_config = false, list = false;

  app.add_option("--config", config_path, "TOML or JSON run configuration");
  app.add_option("--dataset", dataset, "mnist, fashionmnist, cifar10 or stl10");
  app.add_option("--goodness", goodness, "goodness function name, repeatable, or 'all'");
  auto* seed_opt = app.add_option("--seed", seed, "random seed");
  auto* epochs_opt = app.add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
  app.add_flag("--desk-scale", desk, "2x500 layers, 5 epochs, 10k train / 1k eval");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--emit-plot-data", plot_dir, "convert a run's series into long-format plot_data.csv and exit");
  app.add_flag("--allow-partial", partial, "with --emit-plot-data, tolerate missing series");
  app.add_option("--inspect-checkpoint", inspect_path, "print the configuration stored in a checkpoint and exit");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
  app.add_flag("--list-goodness", list, "list registered goodness functions and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& d : ff::registry())
      std::cout << d.name << '\t' << ff::to_string(d.family) << '\t' << d.description << '\n';
    return 0;
  }

  try {
    if (!plot_dir.empty()) {
      const auto data = ff::emit_plot_data(plot_dir, partial);
      const auto path = std::filesystem::path(plot_dir) / "plot_data.csv";
      ff::write_plot_data(data, path);
      std::cout << "wrote " << data.rows.size() << " rows to " << path.string() << '\n';
      for (const auto& m : data.missing) std::cerr << ff::error_json("missing_series", m).dump() << '\n';
      return data.missing.empty() ? 0 : 3;
    }
    if (!inspect_path.empty()) {
      const auto net = ff::load_checkpoint(inspect_path);
      nlohmann::json j{{"config", ff::to_json(net.config)},
                       {"input_dim", net.input_dim},
                       {"num_classes", net.num_classes},
                       {"rng", {{"seed", net.rng.seed()}, {"position", net.rng.position()}}}};
      std::cout << j.dump(2) << '\n';
      return 0;
    }

    nlohmann::json j = config_path.empty() ? nlohmann::json::object() : ff::read_config_file(config_path);
    if (!dataset.empty()) j["dataset"] = dataset;
    if (!goodness.empty()) j["goodness"] = goodness;
    if (*seed_opt) j["seed"] = seed;
    if (desk) j["desk_scale"] = true;
    if (*epochs_opt) j["engine"]["epochs"] = epochs;
    if (!out_dir.empty()) j["output_dir"] = out_dir;
    const ff::RunConfig cfg = ff::run_config_from_json(j);
    cfg.validate();
    if (print_config) {
      std::cout << ff::to_json(cfg).dump(2) << '\n';
      return 0;
    }

    const auto report = ff::run_benchmark(cfg);
    for (const auto& row : report.rows) std::cout << ff::format_result_row(row) << '\n';
    for (const auto& f : report.failures) {
      auto e = ff::error_json(f.kind, f.message);
      e["error"]["goodness"] = f.goodness;
      std::cerr << e.dump() << '\n';
    }
    return report.ok() ? 0 : 1;
  } catch (const ff::BenchError& e) {
    return fail(e.kind(), e.what());
  } catch (const ff::CheckpointError& e) {
    return fail("checkpoint", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}
