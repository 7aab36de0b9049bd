#pragma once

// Assembles a large-area map from tiles acquired at different stage
// positions. Rabi tiles are first corrected for the MW carrier detuning of
// their frame set, Omega_s = sqrt(Omega_eff^2 - Delta^2), which removes the
// seams between sets measured at different detunings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvcam/parameter_map.hpp"

namespace nvcam {

enum class OverlapPolicy { InverseVariance, First };

struct StitchOptions {
  OverlapPolicy overlap = OverlapPolicy::InverseVariance;
  /// Apply the detuning correction to Rabi maps.
  bool correct_detuning = true;
  /// Allowed misalignment of a pose from the pixel lattice, in pitches.
  double lattice_tolerance = 1e-3;
};

struct StitchReport {
  std::size_t gap_pixels = 0;
  std::size_t invalid_pixels = 0;
  std::size_t overlap_pixels = 0;
};

/// Rabi detuning correction of one fitted pixel, in place. Returns false
/// (and flags the pixel non-physical) when Omega_eff < |detuning|.
inline bool correct_rabi_detuning(PixelFit& p, double detuning_mhz) {
  if (!p.converged || detuning_mhz == 0.0) return p.converged;
  const double eff = p.value[kOmega];
  if (eff < std::abs(detuning_mhz)) {
    p.flags |= flags::kNonPhysical;
    p.clear_values();
    return false;
  }
  const double s = std::sqrt(eff * eff - detuning_mhz * detuning_mhz);
  p.value[kOmega] = s;
  p.sigma[kOmega] = s > 0 ? p.sigma[kOmega] * eff / s : std::numeric_limits<double>::infinity();
  return true;
}

/// Places every tile on a common lattice and merges overlaps. The output is
/// independent of the order of `tiles`.
[[nodiscard]] inline ParameterMap stitch(std::vector<ParameterMap> tiles, const StitchOptions& opt = {},
                                         StitchReport* report = nullptr) {
  if (tiles.empty()) throw std::invalid_argument("stitch: no tiles");
  const auto& ref = tiles.front();
  for (const auto& t : tiles) {
    if (std::abs(t.geometry.magnification - ref.geometry.magnification) > 1e-9 * ref.geometry.magnification)
      throw std::invalid_argument("stitch: tiles have mismatched magnification");
    if (t.geometry.bin != ref.geometry.bin || std::abs(t.geometry.pitch_um - ref.geometry.pitch_um) > 1e-12)
      throw std::invalid_argument("stitch: tiles have mismatched pixel pitch");
    if (t.mode != ref.mode) throw std::invalid_argument("stitch: tiles come from different protocols");
  }
  if (tiles.size() > 32) throw std::invalid_argument("stitch: at most 32 tiles");

  std::sort(tiles.begin(), tiles.end(), [](const ParameterMap& a, const ParameterMap& b) {
    const auto& pa = a.geometry.pose;
    const auto& pb = b.geometry.pose;
    if (pa.y_um != pb.y_um) return pa.y_um < pb.y_um;
    if (pa.x_um != pb.x_um) return pa.x_um < pb.x_um;
    if (pa.set_id != pb.set_id) return pa.set_id < pb.set_id;
    return pa.detuning_mhz < pb.detuning_mhz;
  });

  const double pitch = ref.geometry.pitch_um;
  struct Placement {
    long row0, col0;
  };
  std::vector<Placement> place;
  long rmin = std::numeric_limits<long>::max(), cmin = rmin;
  long rmax = std::numeric_limits<long>::min(), cmax = rmax;
  for (const auto& t : tiles) {
    const double fc = t.geometry.pose.x_um / pitch;
    const double fr = t.geometry.pose.y_um / pitch;
    const long c0 = std::lround(fc), r0 = std::lround(fr);
    if (std::abs(fc - c0) > opt.lattice_tolerance || std::abs(fr - r0) > opt.lattice_tolerance)
      throw std::invalid_argument("stitch: pose of set '" + t.geometry.pose.set_id + "' is off the pixel lattice");
    place.push_back({r0, c0});
    rmin = std::min(rmin, r0);
    cmin = std::min(cmin, c0);
    rmax = std::max(rmax, r0 + t.rows);
    cmax = std::max(cmax, c0 + t.cols);
  }

  ParameterMap out(static_cast<int>(rmax - rmin), static_cast<int>(cmax - cmin));
  out.geometry = ref.geometry;
  out.geometry.pose = {static_cast<double>(cmin) * pitch, static_cast<double>(rmin) * pitch, "composite", 0.0};
  out.mode = ref.mode;
  out.nu_mhz = ref.nu_mhz;
  out.provenance_hash = 0;
  for (const auto& t : tiles) {
    out.source_sets.push_back(t.geometry.pose.set_id);
    out.provenance_hash = out.provenance_hash * 1099511628211ull ^ t.provenance_hash;
  }

  const bool rabi = opt.correct_detuning && ref.mode == "rabi";
  struct Acc {
    std::array<double, kNumFitParams> wsum{}, wv{};
    double res = 0;
    int n = 0;
    std::uint32_t flags = 0, sources = 0, touched = 0;
  };
  std::vector<Acc> acc(out.pixels.size());

  for (std::size_t ti = 0; ti < tiles.size(); ++ti) {
    const auto& t = tiles[ti];
    for (int r = 0; r < t.rows; ++r)
      for (int c = 0; c < t.cols; ++c) {
        PixelFit p = t.at(r, c);
        const auto orow = place[ti].row0 - rmin + r, ocol = place[ti].col0 - cmin + c;
        auto& a = acc[static_cast<std::size_t>(orow) * out.cols + static_cast<std::size_t>(ocol)];
        a.touched |= 1u << ti;
        if (rabi) correct_rabi_detuning(p, t.geometry.pose.detuning_mhz);
        a.flags |= p.flags;
        if (!p.converged) continue;
        if (opt.overlap == OverlapPolicy::First && a.n > 0) continue;
        a.sources |= 1u << ti;
        ++a.n;
        a.res += p.residual_norm;
        for (std::size_t k = 0; k < kNumFitParams; ++k) {
          const double s = p.sigma[k];
          const double w = (std::isfinite(s) && s > 0) ? 1.0 / (s * s) : 1e300;
          a.wsum[k] += w;
          a.wv[k] += w * p.value[k];
        }
      }
  }

  StitchReport rep;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    auto& a = acc[i];
    auto& p = out.pixels[i];
    p.sources = a.sources;
    if (a.touched == 0) {
      p.flags = flags::kGap;
      ++rep.gap_pixels;
      continue;
    }
    if (a.n == 0) {
      p.flags = a.flags | flags::kNotConverged;
      if (a.flags & flags::kNonPhysical) ++rep.invalid_pixels;
      continue;
    }
    if (a.n > 1) ++rep.overlap_pixels;
    p.converged = true;
    p.flags = a.flags & ~(flags::kNotConverged | flags::kNonPhysical);
    p.residual_norm = a.res / a.n;
    for (std::size_t k = 0; k < kNumFitParams; ++k) {
      p.value[k] = a.wv[k] / a.wsum[k];
      p.sigma[k] = a.wsum[k] >= 1e299 ? 0.0 : 1.0 / std::sqrt(a.wsum[k]);
    }
  }
  if (report) *report = rep;
  return out;
}

}  // namespace nvcam
