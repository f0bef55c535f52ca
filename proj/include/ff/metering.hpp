#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace ff {

enum class OpKind : std::uint8_t { matmul = 0, reduction, elementwise, covariance, goodness, optimizer, kCount };
enum class Phase : std::uint8_t { train = 0, eval, probe, kCount };

std::string_view to_string(OpKind kind);
std::string_view to_string(Phase phase);

struct MeterSnapshot {
  std::uint64_t flops = 0;
  std::array<std::uint64_t, static_cast<std::size_t>(OpKind::kCount)> flops_by_kind{};
  std::array<std::uint64_t, static_cast<std::size_t>(Phase::kCount)> flops_by_phase{};
  std::array<double, static_cast<std::size_t>(Phase::kCount)> seconds_by_phase{};
  double wall_seconds = 0.0;
  bool saturated = false;
};

// Accumulates FLOPs and wall-clock per phase. Single writer.
class CostMeter {
 public:
  void record_flops(OpKind kind, std::uint64_t count);
  void set_phase(Phase phase);
  Phase phase() const { return phase_; }
  // Closes the running wall-clock interval and returns an immutable copy.
  MeterSnapshot read();

 private:
  void close_interval();

  MeterSnapshot totals_;
  Phase phase_ = Phase::train;
  std::optional<std::chrono::steady_clock::time_point> interval_start_;
};

// Routes FLOPs reported by kernels on this thread to `meter` for the
// lifetime of the scope. Scopes nest; the innermost wins.
class MeterScope {
 public:
  explicit MeterScope(CostMeter& meter);
  ~MeterScope();
  MeterScope(const MeterScope&) = delete;
  MeterScope& operator=(const MeterScope&) = delete;

 private:
  CostMeter* previous_;
};

// Phase switch on the active meter, restored on destruction.
class PhaseScope {
 public:
  explicit PhaseScope(Phase phase);
  ~PhaseScope();
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  Phase previous_ = Phase::train;
  bool active_ = false;
};

// Hook used by the tensor kernels; no-op when no meter is active.
void record_flops(OpKind kind, std::uint64_t count);
CostMeter* active_meter();

/// Analytic power model standing in for hardware telemetry.
/// Energy (J) = watts_per_gflops * GFLOPs + baseline_watts * wall_seconds.
struct PowerModel {
  double watts_per_gflops = 0.05;  // joules per GFLOP
  double baseline_watts = 0.0;
  double grid_intensity_g_per_kwh = 475.0;

  void validate() const;
};

struct Footprint {
  double energy_kwh = 0.0;
  double emissions_g = 0.0;
};

Footprint estimate_footprint(const MeterSnapshot& snapshot, const PowerModel& model);

// Human-readable statement of the footprint formula, echoed in results metadata.
std::string footprint_formula();

}  // namespace ff
