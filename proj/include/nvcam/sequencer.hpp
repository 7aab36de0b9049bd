#pragma once

// Compiles sensing protocols into multi-channel pulse timelines.
//
// A timeline is one shot of an experiment: optical initialization, the
// microwave block for a given sweep point T, then optical readout with the
// camera gate open at its start. Times are integer nanoseconds, snapped to
// the clock resolution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvcam/core_model.hpp"

namespace nvcam {

enum class Channel { Laser1, Laser2, MwA, MwB, CameraGate, AuxGate };
enum class Transition { None, Minus, Plus };

inline const char* to_string(Channel c) {
  switch (c) {
    case Channel::Laser1: return "LASER1";
    case Channel::Laser2: return "LASER2";
    case Channel::MwA: return "MW_A";
    case Channel::MwB: return "MW_B";
    case Channel::CameraGate: return "CAMERA_GATE";
    case Channel::AuxGate: return "AUX_GATE";
  }
  return "?";
}

inline const char* to_string(Transition t) {
  switch (t) {
    case Transition::None: return "-";
    case Transition::Minus: return "MINUS";
    case Transition::Plus: return "PLUS";
  }
  return "?";
}

struct ChannelEvent {
  Channel channel = Channel::Laser2;
  std::int64_t start_ns = 0;
  std::int64_t duration_ns = 0;
  Transition transition = Transition::None;
  double amplitude_mhz = 0.0;  // Rabi frequency of the drive
  double phase_rad = 0.0;
  std::string label;

  [[nodiscard]] std::int64_t end_ns() const { return start_ns + duration_ns; }
  [[nodiscard]] bool is_mw() const { return channel == Channel::MwA || channel == Channel::MwB; }
  bool operator==(const ChannelEvent&) const = default;
};

struct PulseTimeline {
  std::vector<ChannelEvent> events;
  std::int64_t total_duration_ns = 0;
  double sweep_value_us = 0.0;

  bool operator==(const PulseTimeline&) const = default;

  [[nodiscard]] std::vector<const ChannelEvent*> on(Channel c) const {
    std::vector<const ChannelEvent*> out;
    for (const auto& e : events)
      if (e.channel == c) out.push_back(&e);
    return out;
  }
  [[nodiscard]] std::int64_t mw_on_time_ns() const {
    std::int64_t t = 0;
    for (const auto& e : events)
      if (e.is_mw()) t += e.duration_ns;
    return t;
  }
};

enum class ProtocolKind { Rabi, SqRamsey, DqRamsey, DqEcho };
enum class EchoPrep { Simultaneous, Composite };

inline const char* to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::Rabi: return "rabi";
    case ProtocolKind::SqRamsey: return "sq-ramsey";
    case ProtocolKind::DqRamsey: return "dq-ramsey";
    case ProtocolKind::DqEcho: return "dq-echo";
  }
  return "?";
}

inline ProtocolKind protocol_kind_from_string(const std::string& s) {
  if (s == "rabi") return ProtocolKind::Rabi;
  if (s == "sq-ramsey") return ProtocolKind::SqRamsey;
  if (s == "dq-ramsey") return ProtocolKind::DqRamsey;
  if (s == "dq-echo") return ProtocolKind::DqEcho;
  throw std::invalid_argument("unknown protocol kind '" + s + "' (rabi, sq-ramsey, dq-ramsey, dq-echo)");
}

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::Rabi;
  std::vector<double> sweep_us;
  double nu_mhz = 0.0;  // phase ramp on the final pulse(s)
  double pi_time_minus_ns = 100.0;
  double pi_time_plus_ns = 100.0;
  EchoPrep echo_prep = EchoPrep::Simultaneous;
  /// Offset of the MW carrier from the mean transition frequency.
  double carrier_detuning_mhz = 0.0;
  std::int64_t laser_init_ns = 3000;
  std::int64_t laser_readout_ns = 3000;
  std::int64_t camera_gate_ns = 1000;
  std::int64_t resolution_ns = 2;
  bool focused_during_init = false;
  int repetitions = 1;

  void validate() const {
    if (sweep_us.empty()) throw std::invalid_argument("ProtocolSpec: sweep must be nonempty");
    for (std::size_t i = 0; i < sweep_us.size(); ++i) {
      if (sweep_us[i] < 0) throw std::invalid_argument("ProtocolSpec: sweep values must be >= 0");
      if (i > 0 && !(sweep_us[i] > sweep_us[i - 1]))
        throw std::invalid_argument("ProtocolSpec: sweep must be strictly increasing");
    }
    if (!(pi_time_minus_ns > 0 && pi_time_plus_ns > 0)) throw std::invalid_argument("ProtocolSpec: pi time must be > 0");
    if (resolution_ns <= 0) throw std::invalid_argument("ProtocolSpec: resolution must be > 0");
    if (laser_init_ns <= 0 || laser_readout_ns <= 0 || camera_gate_ns <= 0)
      throw std::invalid_argument("ProtocolSpec: laser and gate durations must be > 0");
    if (repetitions < 1) throw std::invalid_argument("ProtocolSpec: repetitions must be >= 1");
  }

  [[nodiscard]] double rabi_minus_mhz() const { return 1e3 / (2.0 * pi_time_minus_ns); }
  [[nodiscard]] double rabi_plus_mhz() const { return 1e3 / (2.0 * pi_time_plus_ns); }
};

/// Rotation angle 2 acos(sqrt(2/3)) of the second composite prep pulse.
inline const double kCompositePrepAngle = 2.0 * std::acos(std::sqrt(2.0 / 3.0));

enum class DiagnosticKind { Alignment, Overlap, CameraGate, Duration };

struct TimelineDiagnostic {
  DiagnosticKind kind;
  std::string message;
};

[[nodiscard]] inline std::vector<TimelineDiagnostic> validate_timeline(const PulseTimeline& t,
                                                                       std::int64_t resolution_ns) {
  std::vector<TimelineDiagnostic> out;
  auto describe = [](const ChannelEvent& e) {
    std::ostringstream os;
    os << to_string(e.channel) << (e.label.empty() ? "" : " '" + e.label + "'") << " @" << e.start_ns << "+"
       << e.duration_ns << "ns";
    return os.str();
  };
  std::int64_t last_end = 0;
  for (const auto& e : t.events) {
    if (e.start_ns < 0 || e.duration_ns < 0) out.push_back({DiagnosticKind::Duration, "negative time in " + describe(e)});
    if (resolution_ns > 0 && (e.start_ns % resolution_ns != 0 || e.duration_ns % resolution_ns != 0))
      out.push_back({DiagnosticKind::Alignment,
                     describe(e) + " not aligned to " + std::to_string(resolution_ns) + " ns clock"});
    last_end = std::max(last_end, e.end_ns());
  }
  for (std::size_t i = 0; i < t.events.size(); ++i)
    for (std::size_t j = i + 1; j < t.events.size(); ++j) {
      const auto& a = t.events[i];
      const auto& b = t.events[j];
      if (a.channel != b.channel || a.duration_ns == 0 || b.duration_ns == 0) continue;
      if (std::max(a.start_ns, b.start_ns) < std::min(a.end_ns(), b.end_ns()))
        out.push_back({DiagnosticKind::Overlap, describe(a) + " overlaps " + describe(b)});
    }
  const auto gates = t.on(Channel::CameraGate);
  if (gates.empty()) out.push_back({DiagnosticKind::CameraGate, "timeline has no camera gate"});
  for (const auto* g : gates)
    if (g->duration_ns <= 0 || g->start_ns < 0 || g->end_ns() > t.total_duration_ns)
      out.push_back({DiagnosticKind::CameraGate, describe(*g) + " not contained in the shot"});
  if (t.total_duration_ns < last_end)
    out.push_back({DiagnosticKind::Duration, "total duration " + std::to_string(t.total_duration_ns) +
                                                 " ns ends before the last event (" + std::to_string(last_end) + " ns)"});
  return out;
}

class CompileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class TimelineBuilder {
 public:
  TimelineBuilder(const ProtocolSpec& spec, double sweep_value_us) : spec_(spec) {
    timeline_.sweep_value_us = sweep_value_us;
  }

  [[nodiscard]] std::int64_t snap(double ns) const {
    const auto r = spec_.resolution_ns;
    return static_cast<std::int64_t>(std::llround(ns / static_cast<double>(r))) * r;
  }

  void add(Channel ch, std::int64_t start, std::int64_t dur, std::string label, Transition tr = Transition::None,
           double phase = 0.0) {
    ChannelEvent e;
    e.channel = ch;
    e.start_ns = start;
    e.duration_ns = dur;
    e.transition = tr;
    e.phase_rad = phase;
    e.label = std::move(label);
    if (tr == Transition::Minus) e.amplitude_mhz = spec_.rabi_minus_mhz();
    if (tr == Transition::Plus) e.amplitude_mhz = spec_.rabi_plus_mhz();
    timeline_.events.push_back(std::move(e));
  }

  /// Appends a pulse on one transition at the cursor and advances it.
  void pulse(Transition tr, std::int64_t dur, std::string label, double phase = 0.0) {
    add(tr == Transition::Minus ? Channel::MwA : Channel::MwB, cursor, dur, std::move(label), tr, phase);
    cursor += dur;
  }

  /// Drives both transitions at once for `dur`.
  void both(std::int64_t dur, std::string label, double phase = 0.0) {
    add(Channel::MwA, cursor, dur, label + "-", Transition::Minus, phase);
    add(Channel::MwB, cursor, dur, label + "+", Transition::Plus, phase);
    cursor += dur;
  }

  PulseTimeline finish(std::int64_t readout_start) {
    add(Channel::Laser2, readout_start, spec_.laser_readout_ns, "readout");
    add(Channel::CameraGate, readout_start, spec_.camera_gate_ns, "camera");
    timeline_.total_duration_ns = readout_start + spec_.laser_readout_ns;
    std::stable_sort(timeline_.events.begin(), timeline_.events.end(), [](const auto& a, const auto& b) {
      return a.start_ns != b.start_ns ? a.start_ns < b.start_ns : a.channel < b.channel;
    });
    return std::move(timeline_);
  }

  std::int64_t cursor = 0;

 private:
  const ProtocolSpec& spec_;
  PulseTimeline timeline_;
};

inline double ramp_phase(double nu_mhz, std::int64_t wait_ns) {
  const double cycles = nu_mhz * static_cast<double>(wait_ns) * 1e-3;
  return kTwoPi * (cycles - std::floor(cycles));
}

}  // namespace detail

/// Builds the timeline of one shot at sweep point `sweep_value_us`.
[[nodiscard]] inline PulseTimeline build_timeline(const ProtocolSpec& spec, double sweep_value_us) {
  spec.validate();
  if (sweep_value_us < 0) throw CompileError("build_timeline: negative sweep value");
  detail::TimelineBuilder b(spec, sweep_value_us);
  b.add(Channel::Laser2, 0, spec.laser_init_ns, "init");
  if (spec.focused_during_init) b.add(Channel::Laser1, 0, spec.laser_init_ns, "focused");
  b.cursor = spec.laser_init_ns;

  const std::int64_t t_ns = b.snap(sweep_value_us * 1e3);
  const double pi_mean = 0.5 * (spec.pi_time_minus_ns + spec.pi_time_plus_ns);
  // Driving both transitions couples |0> to the bright state at sqrt(2) Omega.
  const std::int64_t dq_prep = b.snap(pi_mean / std::numbers::sqrt2);

  switch (spec.kind) {
    case ProtocolKind::Rabi:
      b.pulse(Transition::Minus, t_ns, "drive");
      break;
    case ProtocolKind::SqRamsey: {
      const auto half = b.snap(0.5 * spec.pi_time_minus_ns);
      b.pulse(Transition::Minus, half, "pi/2");
      b.cursor += t_ns;
      b.pulse(Transition::Minus, half, "pi/2 ramp", detail::ramp_phase(spec.nu_mhz, t_ns));
      break;
    }
    case ProtocolKind::DqRamsey:
      b.both(dq_prep, "dq-prep");
      b.cursor += t_ns;
      b.both(dq_prep, "dq-unprep", detail::ramp_phase(spec.nu_mhz, t_ns));
      break;
    case ProtocolKind::DqEcho: {
      const auto half_wait = b.snap(0.5 * static_cast<double>(t_ns));
      const auto phase = detail::ramp_phase(spec.nu_mhz, 2 * half_wait);
      const auto sq_half = b.snap(0.5 * spec.pi_time_minus_ns);
      const auto sq_rot = b.snap(spec.pi_time_plus_ns * kCompositePrepAngle / std::numbers::pi);
      if (spec.echo_prep == EchoPrep::Simultaneous) {
        b.both(b.snap(0.5 * static_cast<double>(dq_prep)), "echo-prep");
      } else {
        b.pulse(Transition::Minus, sq_half, "echo-prep pi/2");
        b.pulse(Transition::Plus, sq_rot, "echo-prep rot");
      }
      b.cursor += half_wait;
      b.pulse(Transition::Minus, b.snap(spec.pi_time_minus_ns), "echo pi-");
      b.pulse(Transition::Plus, b.snap(spec.pi_time_plus_ns), "echo pi+");
      b.pulse(Transition::Minus, b.snap(spec.pi_time_minus_ns), "echo pi-");
      b.cursor += half_wait;
      if (spec.echo_prep == EchoPrep::Simultaneous) {
        b.both(b.snap(0.5 * static_cast<double>(dq_prep)), "echo-unprep", phase);
      } else {
        b.pulse(Transition::Plus, sq_rot, "echo-unprep rot", phase);
        b.pulse(Transition::Minus, sq_half, "echo-unprep pi/2", phase);
      }
      break;
    }
  }
  auto t = b.finish(b.cursor);
  const auto diags = validate_timeline(t, spec.resolution_ns);
  if (!diags.empty()) {
    std::string msg = "timeline for T=" + std::to_string(sweep_value_us) + " us failed validation:";
    for (const auto& d : diags) msg += "\n  " + d.message;
    throw CompileError(msg);
  }
  return t;
}

/// Laser-only shot (no microwaves) used as the normalization reference.
[[nodiscard]] inline PulseTimeline reference_timeline(const ProtocolSpec& spec) {
  spec.validate();
  detail::TimelineBuilder b(spec, 0.0);
  b.add(Channel::Laser2, 0, spec.laser_init_ns, "init");
  if (spec.focused_during_init) b.add(Channel::Laser1, 0, spec.laser_init_ns, "focused");
  return b.finish(spec.laser_init_ns);
}

struct SweepSchedule {
  std::vector<PulseTimeline> timelines;
  int repetitions = 1;
  /// Common shot period; every timeline is padded to it at the front.
  std::int64_t period_ns = 0;
};

[[nodiscard]] inline SweepSchedule sweep_schedule(const ProtocolSpec& spec) {
  spec.validate();
  SweepSchedule s;
  s.repetitions = spec.repetitions;
  s.timelines.reserve(spec.sweep_us.size());
  for (double t : spec.sweep_us) {
    try {
      s.timelines.push_back(build_timeline(spec, t));
    } catch (const CompileError& e) {
      throw CompileError("sweep value " + std::to_string(t) + " us: " + e.what());
    }
    s.period_ns = std::max(s.period_ns, s.timelines.back().total_duration_ns);
  }
  // Leading idle time pads each shot, so readout and camera gate sit at the
  // same offset in every shot of the sweep.
  for (auto& t : s.timelines) {
    const auto shift = s.period_ns - t.total_duration_ns;
    for (auto& e : t.events) e.start_ns += shift;
    t.total_duration_ns = s.period_ns;
  }
  return s;
}

/// Human-readable event table, one event per line.
[[nodiscard]] inline std::string export_table(const PulseTimeline& t) {
  std::ostringstream os;
  os << "# T = " << t.sweep_value_us << " us, shot = " << t.total_duration_ns << " ns\n";
  os << "# start_ns  duration_ns  channel      transition  amp_mhz   phase_rad  label\n";
  for (const auto& e : t.events) {
    char line[160];
    std::snprintf(line, sizeof line, "%10lld  %11lld  %-11s  %-10s  %7.4f  %9.6f  %s\n",
                  static_cast<long long>(e.start_ns), static_cast<long long>(e.duration_ns), to_string(e.channel),
                  to_string(e.transition), e.amplitude_mhz, e.phase_rad, e.label.c_str());
    os << line;
  }
  return os.str();
}

}  // namespace nvcam
