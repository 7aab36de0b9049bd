#pragma once

// Per-pixel fitting of S(t) = c0 + c cos(2 pi omega t + phi) exp(-t/tau)
// over a sweep stack, and the physical maps derived from the fits.
//
// The solver is Levenberg-Marquardt with an analytic Jacobian and
// Marquardt's diag(J^T W J) damping, seeded from the data spectrum.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "nvcam/core_model.hpp"
#include "nvcam/parameter_map.hpp"

namespace nvcam {

using Params = std::array<double, kNumFitParams>;
using Matrix5 = Eigen::Matrix<double, 5, 5>;
using Vector5 = Eigen::Matrix<double, 5, 1>;

[[nodiscard]] inline double model_value(const Params& p, double t) {
  return p[kC0] + p[kContrast] * std::cos(kTwoPi * p[kOmega] * t + p[kPhi]) * std::exp(-t / p[kTau]);
}

/// Partial derivatives of the model with respect to (c0, c, omega, phi, tau).
[[nodiscard]] inline Params model_jacobian(const Params& p, double t) {
  const double arg = kTwoPi * p[kOmega] * t + p[kPhi];
  const double e = std::exp(-t / p[kTau]);
  const double cs = std::cos(arg) * e;
  const double sn = std::sin(arg) * e;
  const double c = p[kContrast];
  return {1.0, cs, -c * sn * kTwoPi * t, -c * sn, c * cs * t / (p[kTau] * p[kTau])};
}

class NoSignalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline double median_step(std::span<const double> t) {
  std::vector<double> d;
  d.reserve(t.size());
  for (std::size_t i = 1; i < t.size(); ++i) d.push_back(t[i] - t[i - 1]);
  std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

inline void check_series(std::span<const double> t, std::span<const double> y) {
  if (t.size() != y.size()) throw std::invalid_argument("fit: T and y differ in length");
  if (t.size() < 8) throw std::invalid_argument("fit: need at least 8 samples");
  for (std::size_t i = 1; i < t.size(); ++i)
    if (!(t[i] > t[i - 1])) throw std::invalid_argument("fit: T must be strictly increasing");
}

inline double wrap_phase(double phi) {
  phi = std::remainder(phi, kTwoPi);  // [-pi, pi]
  if (phi <= -std::numbers::pi) phi += kTwoPi;
  return phi;
}

}  // namespace detail

/// Sampling limit of a sweep, 1 / (2 median step).
[[nodiscard]] inline double nyquist_mhz(std::span<const double> t) { return 0.5 / detail::median_step(t); }

/// Bounds applied to tau: [T[1], 100 T_end].
[[nodiscard]] inline std::pair<double, double> tau_bounds(std::span<const double> t) {
  const double lo = t[1] > 0 ? t[1] : t[1] - t[0];
  return {lo, 100.0 * t.back()};
}

/// Spectral seed. Throws NoSignalError for a series whose peak-to-peak
/// range does not exceed `noise_floor`.
[[nodiscard]] inline Params initial_guess(std::span<const double> t, std::span<const double> y,
                                          double noise_floor = 0.0) {
  detail::check_series(t, y);
  const auto n = y.size();
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
  const double range = *mx - *mn;
  const double floor = std::max(noise_floor, 1e-12 * std::max(1.0, std::abs(mean)));
  if (!(range > floor)) throw NoSignalError("initial_guess: series is flat");

  Params p{};
  p[kC0] = mean;
  p[kContrast] = 0.5 * range;

  // Zero-padded spectrum over actual sample times.
  const double span = t.back() - t.front();
  const double f_lo = 0.5 / span;
  const double f_hi = nyquist_mhz(t);
  const double df = 1.0 / (8.0 * span);
  std::vector<double> power;
  for (double f = f_lo; f <= f_hi + 1e-12; f += df) {
    std::complex<double> z{};
    for (std::size_t i = 0; i < n; ++i) z += (y[i] - mean) * std::polar(1.0, -kTwoPi * f * t[i]);
    power.push_back(std::norm(z));
  }
  if (power.empty()) throw std::invalid_argument("initial_guess: sweep too short to resolve one oscillation");
  const auto k = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
  double offset = 0.0;
  if (k > 0 && k + 1 < power.size()) {
    const double a = power[k - 1], b = power[k], c = power[k + 1];
    const double den = a - 2 * b + c;
    if (den < 0) offset = std::clamp(0.5 * (a - c) / den, -0.5, 0.5);
  }
  p[kOmega] = f_lo + (static_cast<double>(k) + offset) * df;

  // Envelope from amplitudes of one-period windows.
  const auto [tlo, thi] = tau_bounds(t);
  const double period = 1.0 / p[kOmega];
  std::vector<double> wt, wa;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && t[j] - t[i] < period) ++j;
    if (j - i >= 3) {
      Eigen::MatrixXd a(static_cast<Eigen::Index>(j - i), 3);
      Eigen::VectorXd b(static_cast<Eigen::Index>(j - i));
      double tc = 0.0;
      for (std::size_t m = i; m < j; ++m) {
        const auto r = static_cast<Eigen::Index>(m - i);
        a(r, 0) = 1.0;
        a(r, 1) = std::cos(kTwoPi * p[kOmega] * t[m]);
        a(r, 2) = std::sin(kTwoPi * p[kOmega] * t[m]);
        b(r) = y[m];
        tc += t[m];
      }
      const Eigen::Vector3d x = a.colPivHouseholderQr().solve(b);
      const double amp = std::hypot(x(1), x(2));
      if (amp > 0) {
        wt.push_back(tc / static_cast<double>(j - i));
        wa.push_back(amp);
      }
    }
    i = j;
  }
  double tau = thi;
  if (wt.size() >= 2) {
    double sw = 0, st = 0, sl = 0, stt = 0, stl = 0;
    for (std::size_t i = 0; i < wt.size(); ++i) {
      const double w = wa[i] * wa[i];
      const double l = std::log(wa[i]);
      sw += w;
      st += w * wt[i];
      sl += w * l;
      stt += w * wt[i] * wt[i];
      stl += w * wt[i] * l;
    }
    const double den = sw * stt - st * st;
    if (den > 0) {
      const double slope = (sw * stl - st * sl) / den;
      if (slope < 0) tau = -1.0 / slope;
    }
  }
  p[kTau] = std::clamp(tau, tlo, thi);

  // Phase by projection on the decaying quadratures.
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), 3);
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double e = std::exp(-t[i] / p[kTau]);
    a(r, 0) = 1.0;
    a(r, 1) = std::cos(kTwoPi * p[kOmega] * t[i]) * e;
    a(r, 2) = std::sin(kTwoPi * p[kOmega] * t[i]) * e;
    b(r) = y[i];
  }
  const Eigen::Vector3d x = a.colPivHouseholderQr().solve(b);
  p[kPhi] = std::atan2(-x(2), x(1));
  return p;
}

struct FitOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;
  bool clamp_tau = true;
};

struct FitResult {
  Params params{};
  Matrix5 covariance = Matrix5::Constant(kNaN);
  double residual_norm = kNaN;  // sqrt of the weighted chi^2
  bool converged = false;
  int iterations = 0;
  std::uint32_t flags = 0;
  std::string diagnostic;

  [[nodiscard]] double sigma(std::size_t k) const {
    const double v = covariance(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    return v >= 0 ? std::sqrt(v) : kNaN;
  }
  [[nodiscard]] SignalModel model() const {
    return {params[kC0], params[kContrast], params[kOmega], params[kPhi], params[kTau]};
  }
};

namespace detail {

/// Puts omega >= 0 and c >= 0, absorbing the signs into phi.
inline void fold(Params& p) {
  if (p[kOmega] < 0) {
    p[kOmega] = -p[kOmega];
    p[kPhi] = -p[kPhi];
  }
  if (p[kContrast] < 0) {
    p[kContrast] = -p[kContrast];
    p[kPhi] += std::numbers::pi;
  }
  p[kPhi] = wrap_phase(p[kPhi]);
}

inline double chi2(std::span<const double> t, std::span<const double> y, std::span<const double> w, const Params& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = y[i] - model_value(p, t[i]);
    s += w[i] * r * r;
  }
  return s;
}

inline void normal_equations(std::span<const double> t, std::span<const double> y, std::span<const double> w,
                             const Params& p, Matrix5& a, Vector5& g) {
  a.setZero();
  g.setZero();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto j = model_jacobian(p, t[i]);
    const Eigen::Map<const Vector5> jv(j.data());
    const double r = y[i] - model_value(p, t[i]);
    a.selfadjointView<Eigen::Lower>().rankUpdate(jv, w[i]);
    g += w[i] * r * jv;
  }
  a = a.selfadjointView<Eigen::Lower>();
}

}  // namespace detail

/// Weighted Levenberg-Marquardt fit. Empty `weights` means uniform.
[[nodiscard]] inline FitResult fit_decaying_sinusoid(std::span<const double> t, std::span<const double> y,
                                                     std::span<const double> weights, const Params& seed,
                                                     const FitOptions& opt = {}) {
  detail::check_series(t, y);
  std::vector<double> w(t.size(), 1.0);
  if (!weights.empty()) {
    if (weights.size() != t.size()) throw std::invalid_argument("fit: weights differ in length");
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!(weights[i] > 0) || !std::isfinite(weights[i])) throw std::invalid_argument("fit: weights must be > 0");
      w[i] = weights[i];
    }
  }
  if (!(seed[kTau] > 0)) throw std::invalid_argument("fit: seed tau must be > 0");
  for (double v : seed)
    if (!std::isfinite(v)) throw std::invalid_argument("fit: seed must be finite");

  const auto [tlo, thi] = tau_bounds(t);
  auto clamp_tau = [&](Params& p) {
    if (opt.clamp_tau) p[kTau] = std::clamp(p[kTau], tlo, thi);
    else p[kTau] = std::max(p[kTau], 1e-12);
  };

  FitResult res;
  Params p = seed;
  clamp_tau(p);
  double chi = detail::chi2(t, y, w, p);
  double lambda = 1e-3;
  Matrix5 a;
  Vector5 g;
  detail::normal_equations(t, y, w, p, a, g);

  const double tiny = std::numeric_limits<double>::min();
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    if (chi <= tiny) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    bool done = false;
    while (!accepted) {
      Matrix5 damped = a;
      for (int k = 0; k < 5; ++k) damped(k, k) += lambda * std::max(a(k, k), 1e-300);
      const Eigen::LDLT<Matrix5> ldlt(damped);
      if (ldlt.info() != Eigen::Success) {
        lambda *= 10;
        if (lambda > 1e16) break;
        continue;
      }
      const Vector5 step = ldlt.solve(g);
      Params trial = p;
      for (std::size_t k = 0; k < kNumFitParams; ++k) trial[k] += step(static_cast<Eigen::Index>(k));
      clamp_tau(trial);
      const double trial_chi = detail::chi2(t, y, w, trial);
      if (std::isfinite(trial_chi) && trial_chi <= chi) {
        double dp = 0, pn = 0;
        for (std::size_t k = 0; k < kNumFitParams; ++k) {
          dp += (trial[k] - p[k]) * (trial[k] - p[k]);
          pn += p[k] * p[k];
        }
        const double rel_step = std::sqrt(dp) / (std::sqrt(pn) + tiny);
        const double rel_chi = (chi - trial_chi) / std::max(chi, tiny);
        p = trial;
        chi = trial_chi;
        detail::normal_equations(t, y, w, p, a, g);
        lambda = std::max(lambda / 10, 1e-12);
        accepted = true;
        done = rel_step < opt.tolerance && rel_chi < opt.tolerance;
      } else {
        lambda *= 10;
        if (lambda > 1e16) break;
      }
    }
    if (!accepted) {
      // No descent direction left: stationary to working precision.
      res.converged = true;
      break;
    }
    if (done) {
      res.converged = true;
      ++it;
      break;
    }
  }
  res.iterations = it;
  if (!res.converged) {
    res.flags |= flags::kNotConverged;
    res.diagnostic = "iteration limit reached";
  }

  const Eigen::SelfAdjointEigenSolver<Matrix5> eig(a);
  const auto ev = eig.eigenvalues();
  if (eig.info() != Eigen::Success || !(ev(0) > 1e-13 * ev(4))) {
    res.flags |= flags::kSingular;
    res.converged = false;
    res.diagnostic = "singular normal matrix";
  } else {
    const double dof = static_cast<double>(t.size()) - 5.0;
    const double s2 = dof > 0 ? chi / dof : 1.0;
    res.covariance = s2 * eig.eigenvectors() * ev.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  }
  if (opt.clamp_tau && (p[kTau] <= tlo * (1 + 1e-9) || p[kTau] >= thi * (1 - 1e-9))) res.flags |= flags::kTauClamped;

  // Folding negates (omega, phi) or c; the covariance follows.
  Vector5 sign = Vector5::Ones();
  if (p[kOmega] < 0) sign(kOmega) = sign(kPhi) = -1;
  if (p[kContrast] < 0) sign(kContrast) = -1;
  res.covariance = sign.asDiagonal() * res.covariance * sign.asDiagonal();
  detail::fold(p);

  if (p[kOmega] > nyquist_mhz(t)) res.flags |= flags::kAlias;
  res.params = p;
  res.residual_norm = std::sqrt(chi);
  if (!(p[kTau] > 0)) res.converged = false;
  return res;
}

/// Seeds from the data and fits.
[[nodiscard]] inline FitResult fit_series(std::span<const double> t, std::span<const double> y,
                                          std::span<const double> weights = {}, double noise_floor = 0.0,
                                          const FitOptions& opt = {}) {
  return fit_decaying_sinusoid(t, y, weights, initial_guess(t, y, noise_floor), opt);
}

// ---------------------------------------------------------------------------
// Sweep stacks
// ---------------------------------------------------------------------------

/// Normalized value and variance of one sample.
struct SeriesPoint {
  double y = 0.0;
  double var = 0.0;
};

/// Photon counts accumulated per pixel and sweep point, with the
/// reference (laser only) counts that normalize them so c0 is about 1.
struct SweepStack {
  int rows = 0;
  int cols = 0;
  std::vector<double> sweep_us;
  std::vector<double> counts;          // [pixel][point], summed over frames
  std::vector<std::uint64_t> frames;   // frames per point
  std::vector<double> reference;       // [pixel], summed over reference frames
  std::uint64_t reference_frames = 0;
  std::vector<std::uint8_t> saturated; // [pixel]
  int repetitions = 1;
  MapGeometry geometry;
  std::uint64_t provenance_hash = 0;

  SweepStack() = default;
  SweepStack(int r, int c, std::vector<double> t)
      : rows(r), cols(c), sweep_us(std::move(t)), counts(static_cast<std::size_t>(r) * c * sweep_us.size(), 0.0),
        frames(sweep_us.size(), 0), reference(static_cast<std::size_t>(r) * c, 0.0),
        saturated(static_cast<std::size_t>(r) * c, 0) {}

  [[nodiscard]] std::size_t points() const { return sweep_us.size(); }
  [[nodiscard]] std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
  [[nodiscard]] double& count(std::size_t pixel, std::size_t point) { return counts[pixel * points() + point]; }
  [[nodiscard]] double count(std::size_t pixel, std::size_t point) const { return counts[pixel * points() + point]; }

  void validate() const {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("SweepStack: empty geometry");
    for (std::size_t i = 1; i < sweep_us.size(); ++i)
      if (!(sweep_us[i] > sweep_us[i - 1])) throw std::invalid_argument("SweepStack: T must be strictly increasing");
    if (counts.size() != pixels() * points() || frames.size() != points() || reference.size() != pixels() ||
        saturated.size() != pixels())
      throw std::invalid_argument("SweepStack: array sizes inconsistent with geometry");
    for (auto f : frames)
      if (f == 0) throw std::invalid_argument("SweepStack: a sweep point has no frames");
  }

  /// Counts per frame of the reference, or the series mean without one.
  [[nodiscard]] double reference_level(std::size_t pixel) const {
    if (reference_frames > 0) return reference[pixel] / static_cast<double>(reference_frames);
    double s = 0;
    for (std::size_t k = 0; k < points(); ++k) s += count(pixel, k) / static_cast<double>(frames[k]);
    return s / static_cast<double>(points());
  }

  /// Normalized series of summed counts `n[k]` with reference level `r`.
  [[nodiscard]] std::vector<SeriesPoint> normalize(std::span<const double> n, double r) const {
    std::vector<SeriesPoint> out(points());
    for (std::size_t k = 0; k < points(); ++k) {
      const double scale = static_cast<double>(frames[k]) * r;
      out[k].y = n[k] / scale;
      out[k].var = std::max(n[k], 1.0) / (scale * scale);
    }
    return out;
  }

  [[nodiscard]] std::vector<SeriesPoint> series(std::size_t pixel) const {
    return normalize({counts.data() + pixel * points(), points()}, reference_level(pixel));
  }

  /// Sums factor x factor pixel blocks.
  [[nodiscard]] SweepStack binned(int factor) const {
    if (factor != 1 && factor != 2 && factor != 4) throw std::invalid_argument("SweepStack: bin factor must be 1, 2 or 4");
    if (rows % factor || cols % factor) throw std::invalid_argument("SweepStack: bin factor does not divide the array");
    if (factor == 1) return *this;
    SweepStack out(rows / factor, cols / factor, sweep_us);
    out.frames = frames;
    out.reference_frames = reference_frames;
    out.repetitions = repetitions;
    out.geometry = geometry;
    out.geometry.bin = geometry.bin * factor;
    out.geometry.pitch_um = geometry.pitch_um * factor;
    out.provenance_hash = provenance_hash;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const auto src = static_cast<std::size_t>(r) * cols + c;
        const auto dst = static_cast<std::size_t>(r / factor) * out.cols + c / factor;
        for (std::size_t k = 0; k < points(); ++k) out.count(dst, k) += count(src, k);
        out.reference[dst] += reference[src];
        out.saturated[dst] |= saturated[src];
      }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Maps
// ---------------------------------------------------------------------------

struct MapFitOptions {
  FitOptions fit;
  bool uniform_weights = false;
  /// Pixels whose reference level is below this many counts per frame are
  /// reported as no-signal.
  double min_reference_counts = 1.0;
  unsigned threads = 0;  // 0: hardware concurrency
};

namespace detail {

inline PixelFit to_pixel(const FitResult& r) {
  PixelFit p;
  p.flags = r.flags;
  p.iterations = r.iterations;
  if (!r.converged) {
    p.flags |= flags::kNotConverged;
    return p;
  }
  p.converged = true;
  p.value = r.params;
  for (std::size_t k = 0; k < kNumFitParams; ++k) p.sigma[k] = r.sigma(k);
  p.residual_norm = r.residual_norm;
  return p;
}

inline PixelFit fit_points(std::span<const double> t, const std::vector<SeriesPoint>& s, const MapFitOptions& opt) {
  std::vector<double> y(s.size()), w(s.size());
  std::vector<double> sig(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    y[k] = s[k].y;
    w[k] = opt.uniform_weights ? 1.0 : 1.0 / s[k].var;
    sig[k] = std::sqrt(s[k].var);
  }
  std::nth_element(sig.begin(), sig.begin() + static_cast<long>(sig.size() / 2), sig.end());
  try {
    return to_pixel(fit_series(t, y, w, 2.0 * sig[sig.size() / 2], opt.fit));
  } catch (const NoSignalError&) {
    PixelFit p;
    p.flags = flags::kNoSignal | flags::kNotConverged;
    return p;
  }
}

}  // namespace detail

/// Independent fits of every pixel after binning.
[[nodiscard]] inline ParameterMap fit_map(const SweepStack& input, const std::string& mode_name, int bin,
                                          double nu_mhz = 0.0, const MapFitOptions& opt = {}) {
  input.validate();
  const SweepStack stack = input.binned(bin);
  ParameterMap map(stack.rows, stack.cols);
  map.geometry = stack.geometry;
  map.mode = mode_name;
  map.nu_mhz = nu_mhz;
  map.provenance_hash = stack.provenance_hash;

  const std::size_t n = stack.pixels();
  unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      PixelFit p;
      if (stack.reference_level(i) < opt.min_reference_counts) {
        p.flags = flags::kNoSignal | flags::kNotConverged;
      } else {
        p = detail::fit_points(stack.sweep_us, stack.series(i), opt);
      }
      if (stack.saturated[i]) p.flags |= flags::kSaturated;
      map.pixels[i] = p;
    }
  };
  if (threads <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (unsigned k = 0; k < threads; ++k) {
      const std::size_t b = k * chunk, e = std::min(n, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return map;
}

/// dBz in gauss from a Ramsey frequency map: (nu - f)/gamma for SQ,
/// (f - nu)/(2 gamma) for DQ.
[[nodiscard]] inline ScalarMap derive_field_map(const ParameterMap& map, RamseyMode mode, double nu_mhz,
                                                const NVConstants& consts = {}) {
  if (mode == RamseyMode::DQ_ECHO) throw std::invalid_argument("derive_field_map: echo data carries no field");
  const double g = consts.gamma_e_mhz_per_gauss;
  ScalarMap out(map.rows, map.cols, "dBz", "G");
  for (std::size_t i = 0; i < map.pixels.size(); ++i) {
    const auto& p = map.pixels[i];
    out.flags[i] = p.flags;
    if (!p.converged) continue;
    const double f = p.value[kOmega];
    if (mode == RamseyMode::SQ) {
      out.value[i] = (nu_mhz - f) / g;
      out.sigma[i] = p.sigma[kOmega] / g;
    } else {
      out.value[i] = (f - nu_mhz) / (2 * g);
      out.sigma[i] = p.sigma[kOmega] / (2 * g);
    }
    out.valid[i] = 1;
  }
  return out;
}

struct DdCoefficients {
  double echo_k = 1.0;
  double dD_dT_mhz_per_kelvin = 0.067;
  std::optional<double> strain_ppm_per_mhz;
};

struct DdMaps {
  ScalarMap dD;
  ScalarMap temperature;
  ScalarMap strain;  // valid nowhere unless a strain coefficient is given
};

[[nodiscard]] inline DdMaps derive_dD_map(const ParameterMap& map, double nu_mhz, const DdCoefficients& k = {}) {
  if (!(k.echo_k != 0) || !(k.dD_dT_mhz_per_kelvin != 0)) throw std::invalid_argument("derive_dD_map: zero coefficient");
  DdMaps out{ScalarMap(map.rows, map.cols, "dD", "MHz"), ScalarMap(map.rows, map.cols, "dT", "K"),
             ScalarMap(map.rows, map.cols, "strain", "ppm")};
  for (std::size_t i = 0; i < map.pixels.size(); ++i) {
    const auto& p = map.pixels[i];
    out.dD.flags[i] = out.temperature.flags[i] = out.strain.flags[i] = p.flags;
    if (!p.converged) continue;
    const double dd = (p.value[kOmega] - nu_mhz) / k.echo_k;
    const double sd = p.sigma[kOmega] / std::abs(k.echo_k);
    out.dD.value[i] = dd;
    out.dD.sigma[i] = sd;
    out.dD.valid[i] = 1;
    out.temperature.value[i] = dd / k.dD_dT_mhz_per_kelvin;
    out.temperature.sigma[i] = sd / std::abs(k.dD_dT_mhz_per_kelvin);
    out.temperature.valid[i] = 1;
    if (k.strain_ppm_per_mhz) {
      out.strain.value[i] = dd * *k.strain_ppm_per_mhz;
      out.strain.sigma[i] = sd * std::abs(*k.strain_ppm_per_mhz);
      out.strain.valid[i] = 1;
    }
  }
  return out;
}

/// Relative spin density rho = (1/tau - base)/A, floored at zero.
[[nodiscard]] inline ScalarMap density_map(const ParameterMap& map, double base_rate_per_us, double coupling_per_us) {
  if (!(coupling_per_us > 0)) throw std::invalid_argument("density_map: coupling must be > 0");
  ScalarMap out(map.rows, map.cols, "density", "relative");
  for (std::size_t i = 0; i < map.pixels.size(); ++i) {
    const auto& p = map.pixels[i];
    out.flags[i] = p.flags;
    if (!p.converged || !(p.value[kTau] > 0)) continue;
    const double tau = p.value[kTau];
    double rho = (1.0 / tau - base_rate_per_us) / coupling_per_us;
    if (rho < 0) {
      rho = 0;
      out.flags[i] |= flags::kNegativeDensity;
    }
    out.value[i] = rho;
    out.sigma[i] = p.sigma[kTau] / (tau * tau * coupling_per_us);
    out.valid[i] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Area-summed signals
// ---------------------------------------------------------------------------

struct SinglePixel {
  int row = 0;
  int col = 0;
};
struct PixelGroup {
  int row0 = 0, col0 = 0;  // inclusive
  int row1 = 0, col1 = 0;  // exclusive
};
struct FullFrame {};
using Region = std::variant<SinglePixel, PixelGroup, FullFrame>;

struct AreaSignal {
  std::vector<double> sweep_us;
  std::vector<double> y;
  std::vector<double> var;
  FitResult fit;
};

/// Fits an already-summed normalized series.
[[nodiscard]] inline AreaSignal fit_area_series(std::vector<double> t, std::vector<SeriesPoint> s,
                                                const FitOptions& opt = {}) {
  AreaSignal a;
  a.sweep_us = std::move(t);
  std::vector<double> w;
  for (const auto& p : s) {
    a.y.push_back(p.y);
    a.var.push_back(p.var);
    w.push_back(1.0 / p.var);
  }
  a.fit = fit_series(a.sweep_us, a.y, w, 0.0, opt);
  return a;
}

/// Sums counts over the region before fitting.
[[nodiscard]] inline AreaSignal area_signal(const SweepStack& stack, const Region& region, const FitOptions& opt = {}) {
  stack.validate();
  PixelGroup g = std::visit(
      [&](const auto& r) -> PixelGroup {
        using R = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<R, SinglePixel>) return {r.row, r.col, r.row + 1, r.col + 1};
        else if constexpr (std::is_same_v<R, PixelGroup>) return r;
        else return {0, 0, stack.rows, stack.cols};
      },
      region);
  if (g.row0 < 0 || g.col0 < 0 || g.row1 > stack.rows || g.col1 > stack.cols || g.row0 >= g.row1 || g.col0 >= g.col1)
    throw std::invalid_argument("area_signal: region empty or outside the array");
  std::vector<double> n(stack.points(), 0.0);
  double ref = 0.0;
  for (int r = g.row0; r < g.row1; ++r)
    for (int c = g.col0; c < g.col1; ++c) {
      const auto i = static_cast<std::size_t>(r) * stack.cols + c;
      for (std::size_t k = 0; k < stack.points(); ++k) n[k] += stack.count(i, k);
      ref += stack.reference_level(i);
    }
  return fit_area_series(stack.sweep_us, stack.normalize(n, ref), opt);
}

}  // namespace nvcam
