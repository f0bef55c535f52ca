#include "ff/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "ff/checkpoint.hpp"
#include "ff/config.hpp"
#include "ff/data.hpp"
#include "ff/goodness.hpp"

namespace ff {

using nlohmann::json;
namespace fs = std::filesystem;

const char* const kResultsHeader = "goodness,class_acc,multipass_acc,class_loss,emissions_g,energy_kwh,flops,seed,config_hash";

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (auto&& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw BenchError("config", "unsupported TOML value type (dates and times are not accepted)");
}

template <typename T>
T typed(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw std::invalid_argument("expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw std::invalid_argument("expected a non-negative integer");
    } else {
      if (!v.is_number()) throw std::invalid_argument("expected a number");
    }
    return v.get<T>();
  } catch (const std::exception& e) {
    throw BenchError("config", "config key '" + key + "': " + e.what());
  }
}

std::vector<std::string> all_goodness_names() {
  std::vector<std::string> names;
  for (const auto& d : registry()) names.emplace_back(d.name);
  return names;
}

PowerModel power_from_json(const json& j, PowerModel base) {
  if (!j.is_object()) throw BenchError("config", "config key 'power' must be a table");
  for (const auto& [k, v] : j.items()) {
    if (k == "watts_per_gflops") base.watts_per_gflops = typed<double>(v, k);
    else if (k == "baseline_watts") base.baseline_watts = typed<double>(v, k);
    else if (k == "grid_intensity_g_per_kwh") base.grid_intensity_g_per_kwh = typed<double>(v, k);
    else throw BenchError("config", "unknown power key '" + k + "'");
  }
  return base;
}

json power_to_json(const PowerModel& p) {
  return json{{"watts_per_gflops", p.watts_per_gflops},
              {"baseline_watts", p.baseline_watts},
              {"grid_intensity_g_per_kwh", p.grid_intensity_g_per_kwh}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BenchError("io", "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw BenchError("io", "failed writing " + path.string());
}

std::string series_csv(const RunMetrics& run) {
  std::ostringstream out;
  out << "epoch,metric,layer,value\n";
  auto put = [&](std::size_t epoch, const char* metric, std::optional<std::size_t> layer, double value) {
    out << epoch << ',' << metric << ',';
    if (layer) out << *layer;
    out << ',' << fmt("%.9g", value) << '\n';
  };
  for (const auto& m : run.epochs) {
    for (std::size_t l = 0; l < m.layer_loss.size(); ++l) put(m.epoch, "ff_loss", l, m.layer_loss[l]);
    for (std::size_t l = 0; l < m.layer_accuracy.size(); ++l) put(m.epoch, "ff_accuracy", l, m.layer_accuracy[l]);
    for (std::size_t l = 0; l < m.layer_mean_goodness_pos.size(); ++l)
      put(m.epoch, "goodness_pos", l, m.layer_mean_goodness_pos[l]);
    for (std::size_t l = 0; l < m.layer_mean_goodness_neg.size(); ++l)
      put(m.epoch, "goodness_neg", l, m.layer_mean_goodness_neg[l]);
    put(m.epoch, "multipass_accuracy", std::nullopt, m.multipass_accuracy);
    if (m.probe_accuracy) put(m.epoch, "class_accuracy", std::nullopt, *m.probe_accuracy);
    if (m.probe_loss) put(m.epoch, "class_loss", std::nullopt, *m.probe_loss);
  }
  return out.str();
}

json snapshot_json(const MeterSnapshot& s) {
  json by_kind = json::object(), by_phase = json::object(), seconds = json::object();
  for (std::size_t i = 0; i < s.flops_by_kind.size(); ++i)
    by_kind[std::string(to_string(static_cast<OpKind>(i)))] = s.flops_by_kind[i];
  for (std::size_t i = 0; i < s.flops_by_phase.size(); ++i) {
    by_phase[std::string(to_string(static_cast<Phase>(i)))] = s.flops_by_phase[i];
    seconds[std::string(to_string(static_cast<Phase>(i)))] = s.seconds_by_phase[i];
  }
  return json{{"flops", s.flops},          {"flops_by_kind", by_kind}, {"flops_by_phase", by_phase},
              {"seconds_by_phase", seconds}, {"wall_seconds", s.wall_seconds}, {"saturated", s.saturated}};
}

}  // namespace

void RunConfig::validate() const {
  if (!is_known_dataset(dataset)) throw BenchError("unknown_dataset", "unknown dataset '" + dataset + "'");
  if (goodness.empty()) throw BenchError("config", "no goodness functions requested");
  for (const auto& g : goodness) {
    try {
      registry_lookup(g);
    } catch (const std::invalid_argument& e) {
      throw BenchError("unknown_goodness", e.what());
    }
  }
  try {
    FFConfig probe = engine;
    probe.goodness = goodness.front();
    probe.validate();
    power.validate();
  } catch (const std::invalid_argument& e) {
    throw BenchError("config", e.what());
  }
  if (stl10_downsample == 0) throw BenchError("config", "stl10_downsample must be >= 1");
}

void apply_desk_scale(RunConfig& cfg) {
  cfg.desk_scale = true;
  cfg.engine.layer_sizes = {500, 500};
  cfg.engine.epochs = 5;
  cfg.engine.eval_subset = 1000;
  cfg.train_limit = 10000;
  cfg.test_limit = 1000;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw BenchError("config", "config must be a table/object");
  RunConfig cfg;
  if (j.contains("desk_scale") && typed<bool>(j.at("desk_scale"), "desk_scale")) apply_desk_scale(cfg);
  std::optional<std::uint64_t> seed;
  for (const auto& [k, v] : j.items()) {
    if (k == "dataset") cfg.dataset = typed<std::string>(v, k);
    else if (k == "goodness") {
      if (v.is_string()) {
        const auto name = v.get<std::string>();
        cfg.goodness = name == "all" ? all_goodness_names() : std::vector<std::string>{name};
      } else if (v.is_array()) {
        cfg.goodness.clear();
        for (const auto& e : v) {
          const auto name = typed<std::string>(e, k);
          if (name == "all") {
            auto all = all_goodness_names();
            cfg.goodness.insert(cfg.goodness.end(), all.begin(), all.end());
          } else {
            cfg.goodness.push_back(name);
          }
        }
      } else {
        throw BenchError("config", "config key 'goodness' must be a name or a list of names");
      }
    } else if (k == "seed") seed = typed<std::uint64_t>(v, k);
    else if (k == "output_dir") cfg.output_dir = typed<std::string>(v, k);
    else if (k == "data_dir") cfg.data_dir = fs::path(typed<std::string>(v, k));
    else if (k == "desk_scale") continue;
    else if (k == "train_limit") cfg.train_limit = typed<std::size_t>(v, k);
    else if (k == "test_limit") cfg.test_limit = typed<std::size_t>(v, k);
    else if (k == "stl10_downsample") cfg.stl10_downsample = typed<std::size_t>(v, k);
    else if (k == "checkpoints") cfg.save_checkpoints = typed<bool>(v, k);
    else if (k == "power") cfg.power = power_from_json(v, cfg.power);
    else if (k == "engine") {
      try {
        cfg.engine = ff_config_from_json(v, cfg.engine);
      } catch (const std::invalid_argument& e) {
        throw BenchError("config", e.what());
      }
    } else {
      throw BenchError("config", "unknown config key '" + k + "'");
    }
  }
  if (seed) cfg.engine.seed = *seed;
  // De-duplicate while keeping order; a sweep runs each objective once.
  std::vector<std::string> unique;
  std::set<std::string> seen;
  for (const auto& g : cfg.goodness)
    if (seen.insert(g).second) unique.push_back(g);
  cfg.goodness = std::move(unique);
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json j{{"dataset", cfg.dataset},
         {"goodness", cfg.goodness},
         {"seed", cfg.engine.seed},
         {"output_dir", cfg.output_dir.string()},
         {"desk_scale", cfg.desk_scale},
         {"train_limit", cfg.train_limit},
         {"test_limit", cfg.test_limit},
         {"stl10_downsample", cfg.stl10_downsample},
         {"checkpoints", cfg.save_checkpoints},
         {"engine", to_json(cfg.engine)},
         {"power", power_to_json(cfg.power)}};
  if (cfg.data_dir) j["data_dir"] = cfg.data_dir->string();
  return j;
}

json read_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw BenchError("missing_file", "config file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (path.extension() == ".toml") {
    try {
      return toml_to_json(toml::parse(text, path.string()));
    } catch (const toml::parse_error& e) {
      std::ostringstream msg;
      msg << path.string() << ':' << e.source().begin.line << ':' << e.source().begin.column << ": "
          << e.description();
      throw BenchError("config", msg.str());
    }
  }
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw BenchError("config", path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_config_file(path)); }

std::string config_hash(const RunConfig& cfg, const std::string& goodness) {
  FFConfig engine = cfg.engine;
  engine.goodness = goodness;
  const json canonical{{"dataset", cfg.dataset},
                       {"train_limit", cfg.train_limit},
                       {"test_limit", cfg.test_limit},
                       {"stl10_downsample", cfg.dataset == "stl10" ? cfg.stl10_downsample : 1},
                       {"engine", to_json(engine)},
                       {"power", power_to_json(cfg.power)}};
  // nlohmann::json objects are key-sorted, so dump() is canonical.
  return hex64(fnv1a(canonical.dump()));
}

std::string format_result_row(const ResultRow& r) {
  std::ostringstream out;
  out << r.goodness << ',' << fmt("%.6f", r.class_acc) << ',' << fmt("%.6f", r.multipass_acc) << ','
      << fmt("%.6f", r.class_loss) << ',' << fmt("%.9e", r.emissions_g) << ',' << fmt("%.9e", r.energy_kwh) << ','
      << r.flops << ',' << r.seed << ',' << r.config_hash;
  return out.str();
}

json error_json(const std::string& kind, const std::string& message) {
  return json{{"error", {{"kind", kind}, {"message", message}}}};
}

BenchReport run_benchmark(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root = cfg.data_dir.value_or(data_root_from_env());
  LoadOptions lo;
  lo.train_limit = cfg.train_limit;
  lo.test_limit = cfg.test_limit;
  lo.stl10_downsample = cfg.stl10_downsample;
  Dataset ds;
  try {
    ds = load_dataset(cfg.dataset, root, lo);
  } catch (const DataError& e) {
    static const char* kinds[] = {"missing_file", "unexpected_magic", "truncated", "count_mismatch", "bad_length",
                                  "bad_label"};
    throw BenchError(std::string("data.") + kinds[static_cast<int>(e.kind())], e.what());
  }
  std::vector<std::size_t> eval_idx(std::min(cfg.engine.eval_subset, ds.test.size()));
  for (std::size_t i = 0; i < eval_idx.size(); ++i) eval_idx[i] = i;
  const DatasetPart eval = select_rows(ds.test, eval_idx);
  const double input_sq_norm = mean_squared_norm(embed_labels(ds.train.images, ds.train.labels, ds.num_classes));

  std::error_code ec;
  fs::create_directories(cfg.output_dir / "series", ec);
  if (cfg.save_checkpoints) fs::create_directories(cfg.output_dir / "checkpoints", ec);
  if (ec) throw BenchError("io", "cannot create " + cfg.output_dir.string() + ": " + ec.message());

  BenchReport report;
  json runs = json::array();
  for (const auto& name : cfg.goodness) {
    FFConfig engine = cfg.engine;
    engine.goodness = name;
    json entry{{"goodness", name}, {"config_hash", config_hash(cfg, name)}};
    try {
      CostMeter meter;
      RunMetrics metrics;
      ResultRow row;
      {
        MeterScope scope(meter);
        Network net = make_network(ds.dim(), ds.num_classes, engine, input_sq_norm);
        metrics = train_network(net, ds.train, eval);
        const EpochMetrics& last = metrics.epochs.back();
        const bool eval_is_test = eval.size() == ds.test.size();
        row.multipass_acc = eval_is_test ? last.multipass_accuracy : multipass_accuracy(net, ds.test);
        if (eval_is_test && last.probe_accuracy) {
          row.class_acc = *last.probe_accuracy;
          row.class_loss = *last.probe_loss;
        } else {
          const ProbeResult probe = linear_probe(net, ds.train, ds.test);
          row.class_acc = probe.accuracy;
          row.class_loss = probe.loss;
        }
        if (cfg.save_checkpoints) save_checkpoint(net, cfg.output_dir / "checkpoints" / (name + ".ffck"));
      }
      const MeterSnapshot snap = meter.read();
      const Footprint fp = estimate_footprint(snap, cfg.power);
      row.goodness = name;
      row.emissions_g = fp.emissions_g;
      row.energy_kwh = fp.energy_kwh;
      row.flops = snap.flops;
      row.seed = engine.seed;
      row.config_hash = entry["config_hash"];
      write_text(cfg.output_dir / "series" / (name + ".csv"), series_csv(metrics));
      report.rows.push_back(row);
      entry["status"] = metrics.aborted ? "aborted" : "completed";
      entry["epochs_completed"] = metrics.epochs.size();
      entry["meter"] = snapshot_json(snap);
      entry["result"] = {{"class_acc", row.class_acc},
                         {"multipass_acc", row.multipass_acc},
                         {"class_loss", row.class_loss},
                         {"energy_kwh", row.energy_kwh},
                         {"emissions_g", row.emissions_g}};
      if (metrics.aborted) {
        entry["diagnostic"] = metrics.diagnostic;
        report.failures.push_back({name, "numeric", metrics.diagnostic});
      }
    } catch (const BenchError& e) {
      report.failures.push_back({name, e.kind(), e.what()});
      entry["status"] = "failed";
      entry["diagnostic"] = e.what();
    } catch (const NumericError& e) {
      report.failures.push_back({name, "numeric", e.what()});
      entry["status"] = "failed";
      entry["diagnostic"] = e.what();
    } catch (const std::exception& e) {
      report.failures.push_back({name, "internal", e.what()});
      entry["status"] = "failed";
      entry["diagnostic"] = e.what();
    }
    runs.push_back(entry);
  }

  std::string csv = std::string(kResultsHeader) + "\n";
  for (const auto& r : report.rows) csv += format_result_row(r) + "\n";
  write_text(cfg.output_dir / "results.csv", csv);

  const LayerRange mp = [&] {
    Network shape;
    shape.config = cfg.engine;
    shape.layers.resize(cfg.engine.layer_sizes.size());
    return default_multipass_range(shape);
  }();
  json meta{{"schema_version", 1},
            {"config", to_json(cfg)},
            {"dataset", {{"name", ds.name}, {"train_size", ds.train.size()}, {"test_size", ds.test.size()},
                         {"eval_subset", eval.size()}, {"input_dim", ds.dim()}, {"num_classes", ds.num_classes}}},
            {"power_model", power_to_json(cfg.power)},
            {"footprint_formula", footprint_formula()},
            {"interpretation",
             {{"optimizer", "Adam with decoupled weight decay; momentum 0.9 is read as beta1"},
              {"multipass_layers", {{"first", mp.first}, {"last_exclusive", mp.last}}},
              {"multipass_scoring", "per-candidate label embedding, goodness summed over the listed layers"},
              {"probe_features", "length-normalised activations of layers 2..L on neutral-label inputs"},
              {"threshold", "shared by every objective"}}},
            {"runs", runs}};
  write_text(cfg.output_dir / "results.json", meta.dump(2) + "\n");
  return report;
}

PlotData emit_plot_data(const fs::path& run_dir, bool allow_partial) {
  if (!fs::is_directory(run_dir)) throw BenchError("missing_series", "not a directory: " + run_dir.string());
  const fs::path series = fs::is_directory(run_dir / "series") ? run_dir / "series" : run_dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(series))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  PlotData out;
  std::set<std::string> present;
  for (const auto& f : files) present.insert(f.stem().string());
  if (fs::exists(run_dir / "results.json")) {
    std::ifstream in(run_dir / "results.json");
    const json meta = json::parse(in, nullptr, false);
    if (!meta.is_discarded() && meta.contains("runs"))
      for (const auto& r : meta["runs"]) {
        const auto name = r.value("goodness", std::string{});
        if (!name.empty() && !present.count(name)) out.missing.push_back(name);
      }
  }
  if (files.empty() && out.missing.empty())
    throw BenchError("missing_series", "no series files under " + series.string());
  if (!out.missing.empty() && !allow_partial) {
    std::string list;
    for (const auto& m : out.missing) list += (list.empty() ? "" : ", ") + m;
    throw BenchError("missing_series", "missing series for: " + list);
  }

  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    if (line != "epoch,metric,layer,value") throw BenchError("bad_series", "unexpected header in " + f.string());
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() == 3 && line.back() == ',') cells.emplace_back();
      if (cells.size() != 4) throw BenchError("bad_series", f.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
      PlotRow row;
      try {
        row.epoch = std::stoul(cells[0]);
        row.metric = cells[1];
        if (!cells[2].empty()) row.layer = std::stoul(cells[2]);
        row.value = std::stod(cells[3]);
      } catch (const std::exception&) {
        throw BenchError("bad_series", f.string() + ":" + std::to_string(lineno) + ": malformed value");
      }
      row.goodness = f.stem().string();
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

void write_plot_data(const PlotData& data, const fs::path& path) {
  std::ostringstream out;
  out << "epoch,metric,layer,goodness,value\n";
  for (const auto& r : data.rows) {
    out << r.epoch << ',' << r.metric << ',';
    if (r.layer) out << *r.layer;
    out << ',' << r.goodness << ',' << fmt("%.9g", r.value) << '\n';
  }
  write_text(path, out.str());
}

}  // namespace ff
