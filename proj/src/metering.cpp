#include "ff/metering.hpp"

#include <limits>
#include <stdexcept>

namespace ff {

namespace {
thread_local CostMeter* g_active = nullptr;

std::uint64_t saturating_add(std::uint64_t a, std::uint64_t b, bool& saturated) {
  if (a > std::numeric_limits<std::uint64_t>::max() - b) {
    saturated = true;
    return std::numeric_limits<std::uint64_t>::max();
  }
  return a + b;
}
}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::reduction: return "reduction";
    case OpKind::elementwise: return "elementwise";
    case OpKind::covariance: return "covariance";
    case OpKind::goodness: return "goodness";
    case OpKind::optimizer: return "optimizer";
    case OpKind::kCount: break;
  }
  return "unknown";
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::train: return "train";
    case Phase::eval: return "eval";
    case Phase::probe: return "probe";
    case Phase::kCount: break;
  }
  return "unknown";
}

void CostMeter::record_flops(OpKind kind, std::uint64_t count) {
  if (!interval_start_) interval_start_ = std::chrono::steady_clock::now();
  auto& t = totals_;
  t.flops = saturating_add(t.flops, count, t.saturated);
  auto& k = t.flops_by_kind[static_cast<std::size_t>(kind)];
  k = saturating_add(k, count, t.saturated);
  auto& p = t.flops_by_phase[static_cast<std::size_t>(phase_)];
  p = saturating_add(p, count, t.saturated);
}

void CostMeter::close_interval() {
  if (!interval_start_) return;
  const auto now = std::chrono::steady_clock::now();
  const double dt = std::chrono::duration<double>(now - *interval_start_).count();
  totals_.seconds_by_phase[static_cast<std::size_t>(phase_)] += dt;
  totals_.wall_seconds += dt;
  interval_start_ = now;
}

void CostMeter::set_phase(Phase phase) {
  close_interval();
  phase_ = phase;
  interval_start_ = std::chrono::steady_clock::now();
}

MeterSnapshot CostMeter::read() {
  close_interval();
  return totals_;
}

MeterScope::MeterScope(CostMeter& meter) : previous_(g_active) { g_active = &meter; }
MeterScope::~MeterScope() { g_active = previous_; }

PhaseScope::PhaseScope(Phase phase) {
  if (g_active == nullptr) return;
  active_ = true;
  previous_ = g_active->phase();
  g_active->set_phase(phase);
}

PhaseScope::~PhaseScope() {
  if (active_ && g_active != nullptr) g_active->set_phase(previous_);
}

void record_flops(OpKind kind, std::uint64_t count) {
  if (g_active != nullptr) g_active->record_flops(kind, count);
}

CostMeter* active_meter() { return g_active; }

void PowerModel::validate() const {
  if (!(watts_per_gflops >= 0.0) || !(baseline_watts >= 0.0) || !(grid_intensity_g_per_kwh >= 0.0)) {
    throw std::invalid_argument("power model parameters must be finite and >= 0");
  }
}

Footprint estimate_footprint(const MeterSnapshot& snapshot, const PowerModel& model) {
  model.validate();
  const double joules = model.watts_per_gflops * (static_cast<double>(snapshot.flops) / 1e9) +
                        model.baseline_watts * snapshot.wall_seconds;
  Footprint f;
  f.energy_kwh = joules / 3.6e6;
  f.emissions_g = f.energy_kwh * model.grid_intensity_g_per_kwh;
  return f;
}

std::string footprint_formula() {
  return "energy_kwh = (watts_per_gflops * flops / 1e9 + baseline_watts * wall_seconds) / 3.6e6; "
         "emissions_g = energy_kwh * grid_intensity_g_per_kwh";
}

}  // namespace ff
