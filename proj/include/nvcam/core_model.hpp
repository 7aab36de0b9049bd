#pragma once

// Closed-form spin-1 signal models for an NV ensemble.
//
// Units used throughout the library: time in microseconds, frequencies in
// MHz (cycles per microsecond, so a phase is 2*pi*f*t), magnetic field in
// gauss. Every function here is a pure function of its arguments.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

namespace nvcam {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct NVConstants {
  double zero_field_mhz = 2870.0;
  double gamma_e_mhz_per_gauss = 2.8;
  /// Shift of the zero-field splitting per kelvin.
  double dD_dT_mhz_per_kelvin = 0.067;

  void validate() const {
    if (!(zero_field_mhz > 0.0)) throw std::invalid_argument("NVConstants: zero_field_mhz must be > 0");
    if (!(gamma_e_mhz_per_gauss > 0.0)) throw std::invalid_argument("NVConstants: gamma_e must be > 0");
    if (dD_dT_mhz_per_kelvin == 0.0) throw std::invalid_argument("NVConstants: dD_dT must be nonzero");
  }
};

/// Local fields seen by the spins under one pixel (or one scene cell).
struct LocalEnvironment {
  double dBz_gauss = 0.0;
  double dD_mhz = 0.0;
  double mw_amp_mhz = 0.0;  // local Rabi frequency
  double spin_density = 0.0;
  double ionization_dose = 0.0;

  void validate() const {
    if (mw_amp_mhz < 0.0 || spin_density < 0.0 || ionization_dose < 0.0 || !std::isfinite(dBz_gauss) ||
        !std::isfinite(dD_mhz))
      throw std::domain_error("LocalEnvironment: mw_amp, spin_density and ionization_dose must be >= 0");
  }
};

/// S(t) = c0 + c cos(2 pi omega t + phi) exp(-t / tau)
struct SignalModel {
  double c0 = 1.0;
  double c = 0.0;
  double omega_mhz = 0.0;
  double phi = 0.0;
  double tau_us = kInfinity;

  [[nodiscard]] double operator()(double t_us) const {
    return c0 + c * std::cos(kTwoPi * omega_mhz * t_us + phi) * std::exp(-t_us / tau_us);
  }
};

enum class RamseyMode { SQ, DQ, DQ_ECHO };

/// Returns the (m_s=-1, m_s=+1) single-quantum transition frequencies.
[[nodiscard]] inline std::pair<double, double> transition_frequencies(const NVConstants& consts, double bz_gauss,
                                                                      double dD_mhz) {
  const double d = consts.zero_field_mhz + dD_mhz;
  const double zeeman = consts.gamma_e_mhz_per_gauss * bz_gauss;
  return {d - zeeman, d + zeeman};
}

[[nodiscard]] inline double effective_rabi(double mw_amp_mhz, double detuning_mhz) {
  if (mw_amp_mhz < 0.0) throw std::domain_error("effective_rabi: mw_amp must be >= 0");
  return std::hypot(mw_amp_mhz, detuning_mhz);
}

/// Population of |0> after a drive of duration t. Off resonance the
/// oscillation runs at the effective Rabi frequency with its depth reduced
/// by (Omega_s / Omega_eff)^2; the oscillating part decays with tau.
[[nodiscard]] inline double rabi_population(double t_us, double mw_amp_mhz, double detuning_mhz, double tau_us) {
  if (t_us < 0.0) throw std::domain_error("rabi_population: t must be >= 0");
  if (!(tau_us > 0.0)) throw std::domain_error("rabi_population: tau must be > 0");
  const double omega_eff = effective_rabi(mw_amp_mhz, detuning_mhz);
  if (omega_eff == 0.0) return 1.0;
  const double ratio = mw_amp_mhz / omega_eff;
  const double depth = ratio * ratio;
  const double p = 1.0 - 0.5 * depth + 0.5 * depth * std::cos(kTwoPi * omega_eff * t_us) * std::exp(-t_us / tau_us);
  return std::clamp(p, 0.0, 1.0);
}

/// Oscillation frequency of a Ramsey-type fringe. `echo_k` is the
/// protocol constant multiplying dD in the double-quantum echo.
[[nodiscard]] inline double ramsey_frequency(RamseyMode mode, const LocalEnvironment& env, double nu_mhz,
                                             const NVConstants& consts = {}, double echo_k = 1.0) {
  const double g = consts.gamma_e_mhz_per_gauss;
  switch (mode) {
    case RamseyMode::SQ: return nu_mhz + env.dD_mhz - g * env.dBz_gauss;
    case RamseyMode::DQ: return nu_mhz + 2.0 * g * env.dBz_gauss;
    case RamseyMode::DQ_ECHO: return nu_mhz + echo_k * env.dD_mhz;
  }
  return nu_mhz;
}

/// Ramsey fringe value at time t. `baseline` provides c0, c, the phase
/// offset and the decay time for the chosen mode; its omega is ignored.
[[nodiscard]] inline double ramsey_signal(double t_us, RamseyMode mode, const LocalEnvironment& env, double nu_mhz,
                                          const SignalModel& baseline, const NVConstants& consts = {},
                                          double echo_k = 1.0) {
  if (t_us < 0.0) throw std::domain_error("ramsey_signal: t must be >= 0");
  if (!(baseline.tau_us > 0.0)) throw std::domain_error("ramsey_signal: decay time must be > 0");
  SignalModel m = baseline;
  m.omega_mhz = ramsey_frequency(mode, env, nu_mhz, consts, echo_k);
  return m(t_us);
}

/// 1/T2* grows linearly with the local paramagnetic spin density.
[[nodiscard]] inline double dephasing_rate(double spin_density, double base_rate_per_us, double coupling_per_us) {
  if (spin_density < 0.0 || base_rate_per_us < 0.0 || !(coupling_per_us > 0.0))
    throw std::domain_error("dephasing_rate: need density >= 0, base >= 0, coupling > 0");
  return base_rate_per_us + coupling_per_us * spin_density;
}

[[nodiscard]] inline double contrast_under_ionization(double c_bulk, double dose, double dose_scale) {
  if (c_bulk < 0.0 || c_bulk > 1.0) throw std::domain_error("contrast_under_ionization: c_bulk outside [0,1]");
  if (dose < 0.0) throw std::domain_error("contrast_under_ionization: dose must be >= 0");
  if (!(dose_scale > 0.0)) throw std::domain_error("contrast_under_ionization: dose scale must be > 0");
  if (std::isinf(dose)) return 0.0;
  return c_bulk * std::exp(-dose / dose_scale);
}

}  // namespace nvcam
