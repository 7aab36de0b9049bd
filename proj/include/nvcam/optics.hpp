#pragma once

// Object-plane scene description and its projection onto the SPAD array.
//
// A scene is a set of analytic (or rastered) scalar fields over a
// rectangle [0, width] x [0, height] in micrometres, sampled on a lattice
// of cell centres with pitch `spacing_um`. The lattice is what the flux
// quadrature runs over; fields are evaluated lazily, so large scenes cost
// nothing until pixels look at them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "nvcam/core_model.hpp"

namespace nvcam {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

// ---------------------------------------------------------------------------
// Scalar fields
// ---------------------------------------------------------------------------

struct ConstantTerm {
  double value = 0.0;
};

/// value + gradient . (p - origin)
struct LinearTerm {
  double value = 0.0;
  Vec2 gradient;
  Vec2 origin;
};

struct DiskTerm {
  Vec2 center;
  double radius = 0.0;
  double inside = 1.0;
  double outside = 0.0;
};

/// amplitude * exp(-8 r^2 / diameter^2), i.e. 1/e^2 full width `diameter`.
struct GaussianTerm {
  Vec2 center;
  double diameter = 1.0;
  double amplitude = 1.0;
};

/// Nearest-cell lookup into a row-major raster; zero outside it.
struct RasterTerm {
  Vec2 origin;
  double spacing = 1.0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

using FieldTerm = std::variant<ConstantTerm, LinearTerm, DiskTerm, GaussianTerm, RasterTerm>;

inline double evaluate(const FieldTerm& term, Vec2 p) {
  return std::visit(
      [p](const auto& t) -> double {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, ConstantTerm>) {
          return t.value;
        } else if constexpr (std::is_same_v<T, LinearTerm>) {
          return t.value + t.gradient.x * (p.x - t.origin.x) + t.gradient.y * (p.y - t.origin.y);
        } else if constexpr (std::is_same_v<T, DiskTerm>) {
          return distance(p, t.center) <= t.radius ? t.inside : t.outside;
        } else if constexpr (std::is_same_v<T, GaussianTerm>) {
          const double r2 = (p.x - t.center.x) * (p.x - t.center.x) + (p.y - t.center.y) * (p.y - t.center.y);
          return t.amplitude * std::exp(-8.0 * r2 / (t.diameter * t.diameter));
        } else {
          const double fc = std::floor((p.x - t.origin.x) / t.spacing);
          const double fr = std::floor((p.y - t.origin.y) / t.spacing);
          if (fc < 0 || fr < 0 || fc >= static_cast<double>(t.cols) || fr >= static_cast<double>(t.rows)) return 0.0;
          return t.values[static_cast<std::size_t>(fr) * t.cols + static_cast<std::size_t>(fc)];
        }
      },
      term);
}

/// Sum of terms; an empty field is identically zero.
struct ScalarField {
  std::vector<FieldTerm> terms;

  ScalarField() = default;
  ScalarField(std::initializer_list<FieldTerm> ts) : terms(ts) {}

  static ScalarField constant(double v) { return ScalarField{ConstantTerm{v}}; }

  [[nodiscard]] double at(Vec2 p) const {
    double v = 0.0;
    for (const auto& t : terms) v += evaluate(t, p);
    return v;
  }
};

// ---------------------------------------------------------------------------
// Beams
// ---------------------------------------------------------------------------

enum class BeamRole { Focused, Broad };

struct BeamProfile {
  Vec2 center;
  double diameter_um = 30.0;  // 1/e^2 full width
  double power_density = 1.0;
  BeamRole role = BeamRole::Focused;

  static BeamProfile focused(Vec2 c, double diameter = 30.0, double power = 1.0) {
    return {c, diameter, power, BeamRole::Focused};
  }
  static BeamProfile broad(Vec2 c, double diameter = 250.0, double power = 1.0) {
    return {c, diameter, power, BeamRole::Broad};
  }
};

[[nodiscard]] inline double beam_intensity(const BeamProfile& beam, Vec2 p) {
  if (!(beam.diameter_um > 0.0)) throw std::invalid_argument("beam_intensity: diameter must be > 0");
  const double r = distance(p, beam.center);
  return beam.power_density * std::exp(-8.0 * r * r / (beam.diameter_um * beam.diameter_um));
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// Per-protocol decay constants and contrast phenomenology.
struct SceneDynamics {
  double t2rho_us = 1.29;
  double t2star_sq_us = 0.35;  // at zero spin density
  double t2star_dq_us = 0.25;  // at zero spin density
  double t2_echo_us = 1.5;
  /// Extra Ramsey dephasing rate per unit relative spin density; zero disables it.
  double density_coupling_per_us = 0.0;
  double contrast_bulk = 0.1;  // full fluorescence contrast between |0> and |+-1>
  double dose_scale = 1.0;     // ionization dose at which contrast falls by 1/e
  double density_per_dose = 0.0;
  double dose_per_focused_intensity = 1.0;
  double echo_k = 1.0;  // echo phase prefactor on dD

  void validate() const {
    if (!(t2rho_us > 0 && t2star_sq_us > 0 && t2star_dq_us > 0 && t2_echo_us > 0))
      throw std::invalid_argument("SceneDynamics: decay times must be > 0");
    if (density_coupling_per_us < 0 || density_per_dose < 0 || dose_per_focused_intensity < 0)
      throw std::invalid_argument("SceneDynamics: couplings must be >= 0");
    if (contrast_bulk < 0 || contrast_bulk > 1) throw std::invalid_argument("SceneDynamics: contrast_bulk outside [0,1]");
    if (!(dose_scale > 0)) throw std::invalid_argument("SceneDynamics: dose_scale must be > 0");
  }
};

struct PointEmitter {
  Vec2 position;
  double rate_cps = 0.0;  // photons/s emitted toward the objective
};

struct Scene {
  double width_um = 200.0;
  double height_um = 100.0;
  double spacing_um = 0.3;

  ScalarField brightness;  // photons / s / um^2
  ScalarField dBz_gauss;
  ScalarField dD_mhz;
  ScalarField mw_amp_mhz;
  ScalarField spin_density;
  ScalarField ionization_dose;
  std::vector<PointEmitter> points;
  std::vector<BeamProfile> beams;
  SceneDynamics dynamics;

  void validate() const {
    if (!(width_um > 0 && height_um > 0)) throw std::invalid_argument("Scene: extent must be > 0");
    if (!(spacing_um > 0)) throw std::invalid_argument("Scene: spacing must be > 0");
    for (const auto& b : beams)
      if (!(b.diameter_um > 0)) throw std::invalid_argument("Scene: beam diameter must be > 0");
    dynamics.validate();
  }

  [[nodiscard]] bool contains(Vec2 p) const { return p.x >= 0 && p.y >= 0 && p.x <= width_um && p.y <= height_um; }

  /// Emitter brightness; broad beams, if any, set the excitation profile.
  [[nodiscard]] double brightness_at(Vec2 p) const {
    double b = brightness.at(p);
    bool any_broad = false;
    double excitation = 0.0;
    for (const auto& beam : beams) {
      if (beam.role != BeamRole::Broad) continue;
      any_broad = true;
      excitation += beam_intensity(beam, p);
    }
    return any_broad ? b * excitation : b;
  }

  [[nodiscard]] double dose_at(Vec2 p) const {
    double d = ionization_dose.at(p);
    for (const auto& beam : beams)
      if (beam.role == BeamRole::Focused) d += dynamics.dose_per_focused_intensity * beam_intensity(beam, p);
    return d;
  }

  [[nodiscard]] LocalEnvironment environment_at_point(Vec2 p) const {
    LocalEnvironment env;
    env.dBz_gauss = dBz_gauss.at(p);
    env.dD_mhz = dD_mhz.at(p);
    env.mw_amp_mhz = mw_amp_mhz.at(p);
    env.ionization_dose = dose_at(p);
    env.spin_density = spin_density.at(p) + dynamics.density_per_dose * env.ionization_dose;
    return env;
  }
};

// ---------------------------------------------------------------------------
// Optics and pixel geometry
// ---------------------------------------------------------------------------

inline constexpr int kArrayRows = 32;
inline constexpr int kArrayCols = 64;
inline constexpr double kPixelPitchUm = 150.0;
inline constexpr double kActiveDiameterUm = 30.0;

struct OpticsConfig {
  double magnification = 125.0;
  double numerical_aperture = 0.5;
  double psf_fwhm_um = 0.65;  // object plane
  double collection_efficiency = 0.1;
  double camera_attenuation = 0.02;
  /// Microlenses widen the collecting footprint to the full pitch square.
  bool microlens = false;

  void validate() const {
    if (!(magnification > 0)) throw std::invalid_argument("OpticsConfig: magnification must be > 0");
    if (!(psf_fwhm_um > 0)) throw std::invalid_argument("OpticsConfig: psf_fwhm must be > 0");
    if (!(collection_efficiency > 0 && collection_efficiency <= 1))
      throw std::invalid_argument("OpticsConfig: collection_efficiency outside (0,1]");
    if (!(camera_attenuation > 0 && camera_attenuation <= 1))
      throw std::invalid_argument("OpticsConfig: camera_attenuation outside (0,1]");
  }

  [[nodiscard]] double pitch_um() const { return kPixelPitchUm / magnification; }
  [[nodiscard]] double efficiency() const { return collection_efficiency * camera_attenuation; }
  /// Fraction of the pixel cell covered by the collecting footprint.
  [[nodiscard]] double footprint_fill() const {
    if (microlens) return 1.0;
    const double r = 0.5 * kActiveDiameterUm;
    return std::numbers::pi * r * r / (kPixelPitchUm * kPixelPitchUm);
  }
};

struct PixelIndex {
  int row = 0;
  int col = 0;
};

enum class FootprintShape { Disk, Square };

/// Region of the object plane imaged onto a pixel's collecting area.
struct Footprint {
  Vec2 center;
  double diameter_um = 0.0;  // disk diameter, or square side
  FootprintShape shape = FootprintShape::Disk;

  [[nodiscard]] double area() const {
    return shape == FootprintShape::Disk ? std::numbers::pi * 0.25 * diameter_um * diameter_um
                                         : diameter_um * diameter_um;
  }
  [[nodiscard]] bool contains(Vec2 p) const {
    if (shape == FootprintShape::Disk) return distance(p, center) <= 0.5 * diameter_um;
    return std::abs(p.x - center.x) <= 0.5 * diameter_um && std::abs(p.y - center.y) <= 0.5 * diameter_um;
  }
};

[[nodiscard]] inline Footprint pixel_footprint(const OpticsConfig& optics, PixelIndex pixel, Vec2 stage_offset,
                                               int rows = kArrayRows, int cols = kArrayCols) {
  if (pixel.row < 0 || pixel.row >= rows || pixel.col < 0 || pixel.col >= cols)
    throw std::out_of_range("pixel_footprint: pixel (" + std::to_string(pixel.row) + ", " +
                            std::to_string(pixel.col) + ") outside the array");
  const double pitch = optics.pitch_um();
  Footprint fp;
  fp.center = {stage_offset.x + pitch * pixel.col, stage_offset.y + pitch * pixel.row};
  if (optics.microlens) {
    fp.shape = FootprintShape::Square;
    fp.diameter_um = pitch;
  } else {
    fp.shape = FootprintShape::Disk;
    fp.diameter_um = kActiveDiameterUm / optics.magnification;
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Flux quadrature
// ---------------------------------------------------------------------------

namespace detail {

struct QuadPoint {
  Vec2 p;
  double weight;  // area, um^2
};

/// Midpoint rule over the footprint with at least 8 points across.
inline std::vector<QuadPoint> footprint_points(const Footprint& fp, double max_step) {
  const double step = std::min(max_step, fp.diameter_um / 8.0);
  const int n = std::max(1, static_cast<int>(std::ceil(fp.diameter_um / step)));
  const double h = fp.diameter_um / n;
  std::vector<QuadPoint> pts;
  pts.reserve(static_cast<std::size_t>(n) * n);
  const double x0 = fp.center.x - 0.5 * fp.diameter_um;
  const double y0 = fp.center.y - 0.5 * fp.diameter_um;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      Vec2 p{x0 + (j + 0.5) * h, y0 + (i + 0.5) * h};
      if (fp.contains(p)) pts.push_back({p, h * h});
    }
  // Rescale so the discrete area matches the exact footprint area.
  double total = 0.0;
  for (const auto& q : pts) total += q.weight;
  if (total > 0)
    for (auto& q : pts) q.weight *= fp.area() / total;
  return pts;
}

inline double gaussian_psf(double r2, double sigma) {
  return std::exp(-0.5 * r2 / (sigma * sigma)) / (kTwoPi * sigma * sigma);
}

/// Fraction of light from `source` that lands on the footprint.
inline double capture_fraction(Vec2 source, std::span<const QuadPoint> pts, double sigma) {
  double k = 0.0;
  for (const auto& q : pts) {
    const double dx = q.p.x - source.x, dy = q.p.y - source.y;
    k += q.weight * gaussian_psf(dx * dx + dy * dy, sigma);
  }
  return k;
}

}  // namespace detail

inline constexpr double kFwhmToSigma = 1.0 / 2.3548200450309493;  // 1 / (2 sqrt(2 ln 2))

/// Flux and flux-weighted environment for one pixel.
struct PixelSample {
  double flux_cps = 0.0;  // collected photons/s over the footprint, after efficiencies
  LocalEnvironment env;
  bool out_of_field = false;
};

/// Integrates brightness (blurred by the Gaussian PSF) over a footprint.
/// Scene cells within 5 sigma of the footprint edge contribute.
[[nodiscard]] inline PixelSample sample_footprint(const Scene& scene, const OpticsConfig& optics, const Footprint& fp) {
  if (scene.spacing_um > 0.5 * optics.psf_fwhm_um + 1e-12)
    throw std::invalid_argument("scene spacing " + std::to_string(scene.spacing_um) +
                                " um exceeds psf_fwhm/2 = " + std::to_string(0.5 * optics.psf_fwhm_um));
  PixelSample out;
  const double half = 0.5 * fp.diameter_um * (fp.shape == FootprintShape::Square ? std::sqrt(2.0) : 1.0);
  if (fp.center.x + half < 0 || fp.center.y + half < 0 || fp.center.x - half > scene.width_um ||
      fp.center.y - half > scene.height_um) {
    out.out_of_field = true;
    return out;
  }

  const double sigma = optics.psf_fwhm_um * kFwhmToSigma;
  const auto pts = detail::footprint_points(fp, scene.spacing_um);
  const double reach = half + 5.0 * sigma;
  const double h = scene.spacing_um;
  const auto nx = static_cast<long>(std::floor(scene.width_um / h));
  const auto ny = static_cast<long>(std::floor(scene.height_um / h));
  const long i0 = std::max(0L, static_cast<long>(std::floor((fp.center.x - reach) / h)));
  const long i1 = std::min(nx - 1, static_cast<long>(std::floor((fp.center.x + reach) / h)));
  const long j0 = std::max(0L, static_cast<long>(std::floor((fp.center.y - reach) / h)));
  const long j1 = std::min(ny - 1, static_cast<long>(std::floor((fp.center.y + reach) / h)));

  double total = 0.0, wsum = 0.0, geo_sum = 0.0;
  LocalEnvironment acc, geo_acc;
  auto accumulate = [](LocalEnvironment& a, const LocalEnvironment& e, double w) {
    a.dBz_gauss += w * e.dBz_gauss;
    a.dD_mhz += w * e.dD_mhz;
    a.mw_amp_mhz += w * e.mw_amp_mhz;
    a.spin_density += w * e.spin_density;
    a.ionization_dose += w * e.ionization_dose;
  };
  for (long j = j0; j <= j1; ++j) {
    for (long i = i0; i <= i1; ++i) {
      const Vec2 c{(i + 0.5) * h, (j + 0.5) * h};
      const double k = detail::capture_fraction(c, pts, sigma);
      if (k < 1e-14) continue;
      const double b = scene.brightness_at(c) * h * h;
      const auto env = scene.environment_at_point(c);
      const double w = b * k;
      total += w;
      if (w > 0) {
        wsum += w;
        accumulate(acc, env, w);
      }
      geo_sum += k;
      accumulate(geo_acc, env, k);
    }
  }
  for (const auto& pe : scene.points) {
    const double k = detail::capture_fraction(pe.position, pts, sigma);
    const double w = pe.rate_cps * k;
    total += w;
    if (w > 0) {
      wsum += w;
      accumulate(acc, scene.environment_at_point(pe.position), w);
    }
  }

  const auto& src = wsum > 0 ? acc : geo_acc;
  const double norm = wsum > 0 ? wsum : geo_sum;
  if (norm > 0) {
    out.env.dBz_gauss = src.dBz_gauss / norm;
    out.env.dD_mhz = src.dD_mhz / norm;
    out.env.mw_amp_mhz = src.mw_amp_mhz / norm;
    out.env.spin_density = src.spin_density / norm;
    out.env.ionization_dose = src.ionization_dose / norm;
  } else {
    out.env = scene.environment_at_point(fp.center);
  }
  out.env.validate();
  out.flux_cps = total * optics.efficiency();
  return out;
}

/// Collected photon flux (counts/s at the detector, before detection
/// efficiency) for one pixel. A footprint entirely outside the scene
/// yields zero flux and sets `out_of_field`.
[[nodiscard]] inline PixelSample collect_flux(const Scene& scene, const OpticsConfig& optics, PixelIndex pixel,
                                              Vec2 stage_offset) {
  return sample_footprint(scene, optics, pixel_footprint(optics, pixel, stage_offset));
}

[[nodiscard]] inline LocalEnvironment environment_at(const Scene& scene, const OpticsConfig& optics,
                                                     const Footprint& fp) {
  auto s = sample_footprint(scene, optics, fp);
  if (s.out_of_field) throw std::out_of_range("environment_at: footprint lies outside the scene");
  return s.env;
}

/// Per-pixel flux and environment for the whole array.
struct PixelField {
  int rows = kArrayRows;
  int cols = kArrayCols;
  std::vector<double> flux_cps;
  std::vector<LocalEnvironment> env;
  std::vector<std::uint8_t> out_of_field;
};

[[nodiscard]] inline PixelField sample_array(const Scene& scene, const OpticsConfig& optics, Vec2 stage_offset,
                                             int rows = kArrayRows, int cols = kArrayCols) {
  scene.validate();
  optics.validate();
  PixelField f;
  f.rows = rows;
  f.cols = cols;
  const auto n = static_cast<std::size_t>(rows) * cols;
  f.flux_cps.resize(n);
  f.env.resize(n);
  f.out_of_field.resize(n);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const auto s = sample_footprint(scene, optics, pixel_footprint(optics, {r, c}, stage_offset, rows, cols));
      const auto i = static_cast<std::size_t>(r) * cols + c;
      f.flux_cps[i] = s.flux_cps;
      f.env[i] = s.env;
      f.out_of_field[i] = s.out_of_field ? 1 : 0;
    }
  return f;
}

/// A cell of the coarse object-plane lattice used for area-integrated
/// (photodiode-like) signals, where no PSF or pixel geometry applies.
struct ObjectCell {
  double weight = 0.0;  // photons/s from this cell
  LocalEnvironment env;
};

[[nodiscard]] inline std::vector<ObjectCell> object_plane_cells(const Scene& scene, double spacing_um) {
  if (!(spacing_um > 0)) throw std::invalid_argument("object_plane_cells: spacing must be > 0");
  std::vector<ObjectCell> cells;
  const auto nx = static_cast<long>(std::floor(scene.width_um / spacing_um));
  const auto ny = static_cast<long>(std::floor(scene.height_um / spacing_um));
  cells.reserve(static_cast<std::size_t>(nx * ny));
  for (long j = 0; j < ny; ++j)
    for (long i = 0; i < nx; ++i) {
      const Vec2 c{(i + 0.5) * spacing_um, (j + 0.5) * spacing_um};
      const double b = scene.brightness_at(c) * spacing_um * spacing_um;
      if (b <= 0) continue;
      cells.push_back({b, scene.environment_at_point(c)});
    }
  for (const auto& pe : scene.points) cells.push_back({pe.rate_cps, scene.environment_at_point(pe.position)});
  return cells;
}

}  // namespace nvcam
