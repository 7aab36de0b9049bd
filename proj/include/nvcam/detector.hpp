#pragma once

// SPAD pixel and array model: detection efficiency, dark counts,
// non-paralyzable dead time, gated counters, and frame readout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>


namespace nvcam {

inline constexpr std::uint16_t kCounterFullScale = 511;  // 2^9 - 1
inline constexpr double kFillFactorBare = 0.0314;
inline constexpr double kFillFactorMicrolens = 0.78;

struct SpadConfig {
  int rows = 32;
  int cols = 64;
  double dead_time_ns = 50.0;
  double pdp = 0.35;  // at the NV fluorescence band (peak 0.50 at 410 nm)
  double dark_rate_cps = 100.0;
  double fill_factor = kFillFactorBare;
  int counter_bits = 9;
  int counters_per_pixel = 1;
  double readout_time_per_counter_us = 10.40;
  double min_integration_us = 10.0;

  void validate() const {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("SpadConfig: rows/cols must be > 0");
    if (dead_time_ns < 50.0) throw std::invalid_argument("SpadConfig: dead_time must be >= 50 ns");
    if (!(pdp > 0.0 && pdp <= 1.0)) throw std::invalid_argument("SpadConfig: pdp outside (0,1]");
    if (dark_rate_cps < 0.0) throw std::invalid_argument("SpadConfig: dark_rate must be >= 0");
    if (!(fill_factor > 0.0 && fill_factor <= 1.0)) throw std::invalid_argument("SpadConfig: fill_factor outside (0,1]");
    if (counters_per_pixel < 1 || counters_per_pixel > 3)
      throw std::invalid_argument("SpadConfig: counters_per_pixel must be 1, 2 or 3");
    if (counter_bits != 9) throw std::invalid_argument("SpadConfig: only 9-bit counters are modelled");
  }

  [[nodiscard]] std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Mean detected count rate for a given incident photon flux on the pixel
/// cell. Dead time is non-paralyzable: the rate saturates at 1/dead_time.
[[nodiscard]] inline double detected_rate(double incident_flux_cps, const SpadConfig& cfg) {
  if (incident_flux_cps < 0.0) throw std::domain_error("detected_rate: incident flux must be >= 0");
  const double tau = cfg.dead_time_ns * 1e-9;
  const double r_in = cfg.pdp * cfg.fill_factor * incident_flux_cps + cfg.dark_rate_cps;
  if (std::isinf(r_in)) return 1.0 / tau;
  return r_in / (1.0 + r_in * tau);
}

struct CountSample {
  std::uint16_t count = 0;
  bool saturated = false;
};

/// Counts at or above this level are flagged as near saturation.
inline constexpr std::uint16_t kNearSaturation = 460;

template <class Engine>
[[nodiscard]] CountSample sample_counts(double mean_rate_cps, double exposure_s, Engine& engine) {
  if (exposure_s < 0.0) throw std::domain_error("sample_counts: exposure must be >= 0");
  const double mean = mean_rate_cps * exposure_s;
  if (!(mean > 0.0)) return {};
  std::poisson_distribution<long long> dist(mean);
  const long long n = dist(engine);
  CountSample s;
  if (n >= kCounterFullScale) {
    s.count = kCounterFullScale;
    s.saturated = true;
  } else {
    s.count = static_cast<std::uint16_t>(n);
    s.saturated = s.count >= kNearSaturation;
  }
  return s;
}

[[nodiscard]] inline CountSample sample_counts(double mean_rate_cps, double exposure_s, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  return sample_counts(mean_rate_cps, exposure_s, engine);
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

struct GateWindow {
  int counter_index = 0;
  std::int64_t start_ns = 0;
  std::int64_t duration_ns = 0;

  [[nodiscard]] std::int64_t end_ns() const { return start_ns + duration_ns; }
  bool operator==(const GateWindow&) const = default;
};

struct TimeInterval {
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
};

class GateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Exposure {
  double gate_s = 0.0;  // total enabled time
  double flux_s = 0.0;  // enabled time during which photons arrive
};

namespace detail {

inline std::vector<TimeInterval> merge_intervals(std::vector<TimeInterval> v) {
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.start_ns < b.start_ns; });
  std::vector<TimeInterval> out;
  for (const auto& iv : v) {
    if (iv.end_ns <= iv.start_ns) continue;
    if (!out.empty() && iv.start_ns <= out.back().end_ns)
      out.back().end_ns = std::max(out.back().end_ns, iv.end_ns);
    else
      out.push_back(iv);
  }
  return out;
}

}  // namespace detail

/// Effective exposure of one counter. `windows` are that counter's gates;
/// with `free_running` the counter is enabled for the whole integration.
/// `flux_on` lists the intervals during which photons reach the pixel.
[[nodiscard]] inline Exposure gated_exposure(std::span<const GateWindow> windows, std::int64_t integration_ns,
                                             std::span<const TimeInterval> flux_on, bool free_running = false) {
  if (integration_ns <= 0) throw GateError("gated_exposure: integration must be > 0");
  std::vector<TimeInterval> enabled;
  if (free_running) {
    enabled.push_back({0, integration_ns});
  } else {
    std::vector<GateWindow> sorted(windows.begin(), windows.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.start_ns < b.start_ns; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const auto& w = sorted[i];
      if (w.counter_index != sorted.front().counter_index)
        throw GateError("gated_exposure: windows belong to different counters");
      if (w.duration_ns <= 0 || w.start_ns < 0 || w.end_ns() > integration_ns)
        throw GateError("gated_exposure: window [" + std::to_string(w.start_ns) + ", " + std::to_string(w.end_ns()) +
                        ") ns outside the integration period");
      if (i > 0 && w.start_ns < sorted[i - 1].end_ns())
        throw GateError("gated_exposure: overlapping windows on counter " + std::to_string(w.counter_index));
      enabled.push_back({w.start_ns, w.end_ns()});
    }
  }
  const auto lit = detail::merge_intervals({flux_on.begin(), flux_on.end()});
  Exposure e;
  for (const auto& g : enabled) {
    e.gate_s += static_cast<double>(g.end_ns - g.start_ns) * 1e-9;
    for (const auto& l : lit) {
      const auto lo = std::max(g.start_ns, l.start_ns);
      const auto hi = std::min(g.end_ns, l.end_ns);
      if (hi > lo) e.flux_s += static_cast<double>(hi - lo) * 1e-9;
    }
  }
  return e;
}

[[nodiscard]] inline double frame_readout_time_us(const SpadConfig& cfg) {
  return cfg.counters_per_pixel * cfg.readout_time_per_counter_us;
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// Gate and illumination timing shared by every pixel of a frame.
struct FrameTiming {
  std::int64_t integration_ns = 10'000;
  std::vector<GateWindow> gates;      // all counters; empty with free_running
  std::vector<TimeInterval> laser_on;  // photon arrival intervals
  bool free_running = false;
};

inline constexpr std::uint32_t kReferenceSweepIndex = 0xFFFFFFFFu;

struct FrameRecord {
  std::uint64_t frame_index = 0;
  std::uint32_t sweep_index = 0;
  int rows = 32;
  int cols = 64;
  int counters = 1;
  double integration_us = 0.0;
  std::vector<GateWindow> gates;
  std::vector<std::uint16_t> counts;   // [counter][row][col]
  std::vector<std::uint8_t> saturated;  // [row][col], OR over counters

  FrameRecord() = default;
  FrameRecord(int r, int c, int k)
      : rows(r), cols(c), counters(k), counts(static_cast<std::size_t>(r) * c * k, 0),
        saturated(static_cast<std::size_t>(r) * c, 0) {}

  [[nodiscard]] std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
  [[nodiscard]] std::uint16_t count(int counter, int row, int col) const {
    return counts[static_cast<std::size_t>(counter) * pixels() + static_cast<std::size_t>(row) * cols + col];
  }
  std::uint16_t& count(int counter, int row, int col) {
    return counts[static_cast<std::size_t>(counter) * pixels() + static_cast<std::size_t>(row) * cols + col];
  }
  [[nodiscard]] std::span<const std::uint16_t> counter_plane(int counter) const {
    return {counts.data() + static_cast<std::size_t>(counter) * pixels(), pixels()};
  }
};

/// Engine for one frame, derived from (master seed, frame index) only, so
/// frames can be produced in any order or in parallel with identical output.
[[nodiscard]] inline std::mt19937_64 frame_engine(std::uint64_t master_seed, std::uint64_t frame_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(frame_index), static_cast<std::uint32_t>(frame_index >> 32)};
  return std::mt19937_64(seq);
}

/// Acquires one frame. `incident_flux_cps` holds the photon flux on each
/// pixel cell while the lasers are on, row-major. All pixels share the
/// same windows (global shutter).
[[nodiscard]] inline FrameRecord acquire_frame(std::span<const double> incident_flux_cps, const FrameTiming& timing,
                                               const SpadConfig& cfg, std::uint64_t master_seed,
                                               std::uint64_t frame_index, std::uint32_t sweep_index = 0) {
  cfg.validate();
  if (incident_flux_cps.size() != cfg.pixels())
    throw std::invalid_argument("acquire_frame: flux field has " + std::to_string(incident_flux_cps.size()) +
                                " pixels, expected " + std::to_string(cfg.pixels()));
  if (static_cast<double>(timing.integration_ns) < cfg.min_integration_us * 1e3 - 1e-9)
    throw GateError("acquire_frame: integration below the camera minimum");
  if (!timing.free_running && timing.gates.empty())
    throw GateError("acquire_frame: gated acquisition needs at least one camera gate");

  FrameRecord frame(cfg.rows, cfg.cols, cfg.counters_per_pixel);
  frame.frame_index = frame_index;
  frame.sweep_index = sweep_index;
  frame.integration_us = static_cast<double>(timing.integration_ns) * 1e-3;
  frame.gates = timing.gates;

  std::vector<Exposure> exposure(static_cast<std::size_t>(cfg.counters_per_pixel));
  for (int k = 0; k < cfg.counters_per_pixel; ++k) {
    std::vector<GateWindow> mine;
    for (const auto& g : timing.gates)
      if (g.counter_index == k) mine.push_back(g);
    if (!timing.free_running && mine.empty()) continue;
    exposure[static_cast<std::size_t>(k)] = gated_exposure(mine, timing.integration_ns, timing.laser_on,
                                                           timing.free_running);
  }

  const double dark_detected = detected_rate(0.0, cfg);
  auto engine = frame_engine(master_seed, frame_index);
  for (int k = 0; k < cfg.counters_per_pixel; ++k) {
    const auto& e = exposure[static_cast<std::size_t>(k)];
    for (std::size_t p = 0; p < cfg.pixels(); ++p) {
      const double lit = detected_rate(incident_flux_cps[p], cfg);
      const double mean_counts = lit * e.flux_s + dark_detected * (e.gate_s - e.flux_s);
      const auto s = sample_counts(mean_counts, 1.0, engine);
      frame.counts[static_cast<std::size_t>(k) * cfg.pixels() + p] = s.count;
      if (s.saturated) frame.saturated[p] = 1;
    }
  }
  return frame;
}

}  // namespace nvcam
