#pragma once

// Forward simulation of a wide-field measurement: protocol timing, scene
// sampling through the optics, per-pixel spin signal, and SPAD frames.
// Also accumulates frames into sweep stacks for fitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "nvcam/core_model.hpp"
#include "nvcam/detector.hpp"
#include "nvcam/fitters.hpp"
#include "nvcam/frame_store.hpp"
#include "nvcam/optics.hpp"
#include "nvcam/sequencer.hpp"

namespace nvcam {

struct Acquisition {
  int shots_per_frame = 100;
  int frames_per_point = 10;  // per repetition
  int reference_frames = 20;
  unsigned threads = 1;

  void validate() const {
    if (shots_per_frame < 1) throw std::invalid_argument("acquisition.shots_per_frame must be >= 1");
    if (frames_per_point < 1) throw std::invalid_argument("acquisition.frames_per_point must be >= 1");
    if (reference_frames < 0) throw std::invalid_argument("acquisition.reference_frames must be >= 0");
  }
};

struct RunConfig {
  Scene scene;
  OpticsConfig optics;
  SpadConfig spad;
  ProtocolSpec protocol;
  Acquisition acquisition;
  NVConstants constants;
  Vec2 stage;
  std::string set_id = "set0";
  std::uint64_t seed = 0;
  std::uint64_t provenance_hash = 0;

  void validate() const {
    scene.validate();
    optics.validate();
    spad.validate();
    protocol.validate();
    acquisition.validate();
    constants.validate();
  }
};

[[nodiscard]] inline RamseyMode ramsey_mode(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::SqRamsey: return RamseyMode::SQ;
    case ProtocolKind::DqRamsey: return RamseyMode::DQ;
    case ProtocolKind::DqEcho: return RamseyMode::DQ_ECHO;
    case ProtocolKind::Rabi: break;
  }
  throw std::invalid_argument("ramsey_mode: Rabi has no Ramsey mode");
}

/// Carrier detuning seen by the MINUS transition at a given environment.
[[nodiscard]] inline double local_detuning(const LocalEnvironment& env, const ProtocolSpec& p, const NVConstants& k) {
  return p.carrier_detuning_mhz + env.dD_mhz - k.gamma_e_mhz_per_gauss * env.dBz_gauss;
}

/// Probability of |0> after the sequence at sweep point t.
[[nodiscard]] inline double bright_population(const LocalEnvironment& env, const SceneDynamics& dyn,
                                              const ProtocolSpec& p, double t_us, const NVConstants& k) {
  if (p.kind == ProtocolKind::Rabi)
    return rabi_population(t_us, env.mw_amp_mhz, local_detuning(env, p, k), dyn.t2rho_us);
  double tau = dyn.t2_echo_us;
  if (p.kind != ProtocolKind::DqEcho) {
    const double t2 = p.kind == ProtocolKind::SqRamsey ? dyn.t2star_sq_us : dyn.t2star_dq_us;
    tau = dyn.density_coupling_per_us > 0
              ? 1.0 / dephasing_rate(std::max(0.0, env.spin_density), 1.0 / t2, dyn.density_coupling_per_us)
              : t2;
  }
  const SignalModel base{0.5, 0.5, 0.0, 0.0, tau};
  return ramsey_signal(t_us, ramsey_mode(p.kind), env, p.nu_mhz, base, k, dyn.echo_k);
}

/// Fluorescence relative to the |0> level: 1 - C (1 - P0), where the
/// contrast C is reduced by the local ionization dose.
[[nodiscard]] inline double relative_fluorescence(const LocalEnvironment& env, const SceneDynamics& dyn,
                                                  const ProtocolSpec& p, double t_us, const NVConstants& k) {
  const double c = contrast_under_ionization(dyn.contrast_bulk, env.ionization_dose, dyn.dose_scale);
  return 1.0 - c * (1.0 - bright_population(env, dyn, p, t_us, k));
}

/// Everything needed to produce frames, computed once per run.
struct SimulationPlan {
  SweepSchedule schedule;
  FrameFileHeader header;
  FrameTiming timing;
  PixelField field;
  std::vector<double> sweep_us;
  std::vector<double> reference_flux;            // [pixel]
  std::vector<std::vector<double>> point_flux;   // [point][pixel]
  std::uint64_t total_frames = 0;
};

[[nodiscard]] inline SimulationPlan plan_simulation(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.spad.rows != kArrayRows || cfg.spad.cols != kArrayCols)
    throw std::invalid_argument("simulation: the camera is 32 x 64 pixels");
  SimulationPlan plan;
  plan.schedule = sweep_schedule(cfg.protocol);
  plan.sweep_us = cfg.protocol.sweep_us;

  const auto period = plan.schedule.period_ns;
  const auto shots = cfg.acquisition.shots_per_frame;
  const auto gate_start = period - cfg.protocol.laser_readout_ns;
  const auto integration = period * shots;
  if (integration > std::int64_t{0xFFFFFFFF}) throw std::invalid_argument("simulation: frame integration exceeds 4.29 s");

  auto& h = plan.header;
  h.counters = static_cast<std::uint8_t>(cfg.spad.counters_per_pixel);
  h.integration_time_ns = static_cast<std::uint32_t>(integration);
  h.gates[0] = {static_cast<std::uint32_t>(gate_start), static_cast<std::uint32_t>(cfg.protocol.camera_gate_ns)};
  h.gate_period_ns = static_cast<std::uint32_t>(period);
  h.shots_per_frame = static_cast<std::uint32_t>(shots);
  h.master_seed = cfg.seed;
  h.provenance_hash = cfg.provenance_hash;

  plan.timing.integration_ns = integration;
  plan.timing.gates = h.frame_gates();
  for (int s = 0; s < shots; ++s) {
    const auto& tl = plan.schedule.timelines.front();
    for (const auto& e : tl.events)
      if ((e.channel == Channel::Laser1 || e.channel == Channel::Laser2) && e.label == "readout")
        plan.timing.laser_on.push_back({s * period + e.start_ns, s * period + e.end_ns()});
  }

  plan.field = sample_array(cfg.scene, cfg.optics, cfg.stage);
  const double fill = cfg.optics.footprint_fill();
  const auto n = plan.field.flux_cps.size();
  plan.reference_flux.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.reference_flux[i] = plan.field.flux_cps[i] / fill;
  plan.point_flux.assign(plan.sweep_us.size(), std::vector<double>(n));
  for (std::size_t k = 0; k < plan.sweep_us.size(); ++k)
    for (std::size_t i = 0; i < n; ++i)
      plan.point_flux[k][i] = plan.reference_flux[i] * relative_fluorescence(plan.field.env[i], cfg.scene.dynamics,
                                                                             cfg.protocol, plan.sweep_us[k],
                                                                             cfg.constants);
  plan.total_frames = static_cast<std::uint64_t>(cfg.acquisition.reference_frames) +
                      static_cast<std::uint64_t>(cfg.protocol.repetitions) * cfg.acquisition.frames_per_point *
                          plan.sweep_us.size();
  return plan;
}

/// Frame `index` of the run: reference frames first, then for each
/// repetition every sweep point in order.
[[nodiscard]] inline FrameRecord simulate_frame(const RunConfig& cfg, const SimulationPlan& plan, std::uint64_t index) {
  const auto nref = static_cast<std::uint64_t>(cfg.acquisition.reference_frames);
  if (index < nref)
    return acquire_frame(plan.reference_flux, plan.timing, cfg.spad, cfg.seed, index, kReferenceSweepIndex);
  const auto j = index - nref;
  const auto per_point = static_cast<std::uint64_t>(cfg.acquisition.frames_per_point);
  const auto point = (j / per_point) % plan.sweep_us.size();
  return acquire_frame(plan.point_flux[point], plan.timing, cfg.spad, cfg.seed, index,
                       static_cast<std::uint32_t>(point));
}

/// Produces every frame in order through `sink`. Frames are generated in
/// parallel batches; the output does not depend on the thread count.
inline SimulationPlan simulate(const RunConfig& cfg, const std::function<void(const FrameRecord&)>& sink) {
  auto plan = plan_simulation(cfg);
  const unsigned threads = std::max(1u, cfg.acquisition.threads);
  const std::uint64_t batch = 64ull * threads;
  std::vector<FrameRecord> buf;
  for (std::uint64_t b = 0; b < plan.total_frames; b += batch) {
    const auto e = std::min(plan.total_frames, b + batch);
    buf.assign(static_cast<std::size_t>(e - b), FrameRecord{});
    auto work = [&](unsigned t) {
      for (std::uint64_t i = b + t; i < e; i += threads) buf[static_cast<std::size_t>(i - b)] = simulate_frame(cfg, plan, i);
    };
    if (threads == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
      for (auto& th : pool) th.join();
    }
    for (const auto& f : buf) sink(f);
  }
  return plan;
}

/// Simulates straight to a frame file; returns the bytes written.
inline std::uint64_t simulate_to_file(const RunConfig& cfg, const std::filesystem::path& path) {
  const auto plan = plan_simulation(cfg);
  FrameWriter writer(path, plan.header);
  simulate(cfg, [&](const FrameRecord& f) { writer.write(f); });
  return writer.close();
}

// ---------------------------------------------------------------------------
// Frames to sweep stacks
// ---------------------------------------------------------------------------

class StackBuilder {
 public:
  StackBuilder(int rows, int cols, std::vector<double> sweep_us, int counter = 0)
      : stack_(rows, cols, std::move(sweep_us)), counter_(counter) {}

  void add(const FrameRecord& f) {
    if (f.rows != stack_.rows || f.cols != stack_.cols) throw std::invalid_argument("StackBuilder: frame geometry differs");
    if (counter_ >= f.counters) throw std::invalid_argument("StackBuilder: counter not present in frames");
    const auto plane = f.counter_plane(counter_);
    const auto n = stack_.pixels();
    if (f.sweep_index == kReferenceSweepIndex) {
      for (std::size_t i = 0; i < n; ++i) stack_.reference[i] += plane[i];
      ++stack_.reference_frames;
    } else {
      if (f.sweep_index >= stack_.points())
        throw std::invalid_argument("StackBuilder: sweep index " + std::to_string(f.sweep_index) +
                                    " beyond the sweep of " + std::to_string(stack_.points()) + " points");
      const auto k = f.sweep_index;
      for (std::size_t i = 0; i < n; ++i) stack_.count(i, k) += plane[i];
      ++stack_.frames[k];
    }
    for (std::size_t i = 0; i < n; ++i) stack_.saturated[i] |= f.saturated[i];
  }

  [[nodiscard]] SweepStack& stack() { return stack_; }
  [[nodiscard]] SweepStack take() { return std::move(stack_); }

 private:
  SweepStack stack_;
  int counter_;
};

/// Geometry of the unbinned map of a run.
[[nodiscard]] inline MapGeometry run_geometry(const RunConfig& cfg) {
  MapGeometry g;
  g.magnification = cfg.optics.magnification;
  g.pitch_um = cfg.optics.pitch_um();
  g.bin = 1;
  g.pose = {cfg.stage.x, cfg.stage.y, cfg.set_id, cfg.protocol.carrier_detuning_mhz};
  return g;
}

/// Simulates a run in memory and returns its sweep stack.
[[nodiscard]] inline SweepStack simulate_stack(const RunConfig& cfg) {
  StackBuilder b(kArrayRows, kArrayCols, cfg.protocol.sweep_us);
  simulate(cfg, [&](const FrameRecord& f) { b.add(f); });
  auto s = b.take();
  s.repetitions = cfg.protocol.repetitions;
  s.geometry = run_geometry(cfg);
  s.provenance_hash = cfg.provenance_hash;
  return s;
}

// ---------------------------------------------------------------------------
// Object-plane (photodiode-like) signal
// ---------------------------------------------------------------------------

struct ObjectPlaneOptions {
  double lattice_um = 2.0;
  /// Detected photons per sweep point; sets the shot noise. Zero gives a
  /// noiseless series.
  double counts_per_point = 1e8;
};

/// Area-weighted fluorescence of the whole illuminated scene, with no
/// pixel geometry, normalized to the laser-only level.
[[nodiscard]] inline std::vector<SeriesPoint> object_plane_series(const RunConfig& cfg,
                                                                  const ObjectPlaneOptions& opt = {}) {
  cfg.validate();
  const auto cells = object_plane_cells(cfg.scene, opt.lattice_um);
  if (cells.empty()) throw std::invalid_argument("object_plane_series: scene emits no light");
  double wsum = 0.0;
  for (const auto& c : cells) wsum += c.weight;
  auto engine = frame_engine(cfg.seed, 0xB0B0'0000'0000'0001ull);
  std::vector<SeriesPoint> out;
  for (double t : cfg.protocol.sweep_us) {
    double s = 0.0;
    for (const auto& c : cells) s += c.weight * relative_fluorescence(c.env, cfg.scene.dynamics, cfg.protocol, t, cfg.constants);
    const double mean = s / wsum;
    SeriesPoint p{mean, 0.0};
    if (opt.counts_per_point > 0) {
      const double n = mean * opt.counts_per_point;
      std::normal_distribution<double> noise(n, std::sqrt(n));
      const double counts = noise(engine);
      p.y = counts / opt.counts_per_point;
      p.var = std::max(counts, 1.0) / (opt.counts_per_point * opt.counts_per_point);
    } else {
      p.var = 1.0 / (1e12 * 1e12);
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace nvcam
