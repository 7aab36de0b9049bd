#pragma once

// Per-pixel fit results and derived scalar maps, with CSV, JSON and
// portable-graymap (PGM) export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace nvcam {

enum FitParam : std::size_t { kC0 = 0, kContrast = 1, kOmega = 2, kPhi = 3, kTau = 4 };
inline constexpr std::size_t kNumFitParams = 5;
inline constexpr std::array<const char*, kNumFitParams> kFitParamNames{"c0", "c", "omega_mhz", "phi", "tau_us"};

/// Per-pixel flag bits.
namespace flags {
inline constexpr std::uint32_t kNoSignal = 1u << 0;
inline constexpr std::uint32_t kSingular = 1u << 1;
inline constexpr std::uint32_t kTauClamped = 1u << 2;
inline constexpr std::uint32_t kAlias = 1u << 3;
inline constexpr std::uint32_t kSaturated = 1u << 4;
inline constexpr std::uint32_t kNotConverged = 1u << 5;
inline constexpr std::uint32_t kNonPhysical = 1u << 6;  // e.g. Omega_eff < |detuning|
inline constexpr std::uint32_t kGap = 1u << 7;
inline constexpr std::uint32_t kNegativeDensity = 1u << 8;
}  // namespace flags

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct PixelFit {
  std::array<double, kNumFitParams> value{kNaN, kNaN, kNaN, kNaN, kNaN};
  std::array<double, kNumFitParams> sigma{kNaN, kNaN, kNaN, kNaN, kNaN};
  bool converged = false;
  double residual_norm = kNaN;
  std::uint32_t flags = 0;
  std::uint32_t sources = 0;  // bitmask of contributing tiles after stitching
  int iterations = 0;

  /// Drops values, keeping only the flags (for non-converged pixels).
  void clear_values() {
    value.fill(kNaN);
    sigma.fill(kNaN);
    residual_norm = kNaN;
    converged = false;
  }
};

struct StagePose {
  double x_um = 0.0;
  double y_um = 0.0;
  std::string set_id;
  double detuning_mhz = 0.0;  // MW carrier detuning of this frame set
};

struct MapGeometry {
  double magnification = 125.0;
  double pitch_um = 1.2;  // object-plane spacing of map pixels (after binning)
  int bin = 1;
  StagePose pose;
};

struct MapSummary {
  std::size_t pixels = 0;
  std::size_t converged = 0;
  std::array<double, kNumFitParams> mean_value{};
  std::array<double, kNumFitParams> mean_sigma{};

  [[nodiscard]] double converged_fraction() const {
    return pixels == 0 ? 0.0 : static_cast<double>(converged) / static_cast<double>(pixels);
  }
};

struct ParameterMap {
  int rows = 0;
  int cols = 0;
  std::vector<PixelFit> pixels;
  MapGeometry geometry;
  std::string mode = "rabi";
  double nu_mhz = 0.0;
  std::uint64_t provenance_hash = 0;
  std::vector<std::string> source_sets;  // names behind PixelFit::sources bits

  ParameterMap() = default;
  ParameterMap(int r, int c) : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c) {}

  [[nodiscard]] PixelFit& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
  [[nodiscard]] const PixelFit& at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

  [[nodiscard]] MapSummary summary() const {
    MapSummary s;
    s.pixels = pixels.size();
    for (const auto& p : pixels) {
      if (!p.converged) continue;
      ++s.converged;
      for (std::size_t k = 0; k < kNumFitParams; ++k) {
        s.mean_value[k] += p.value[k];
        s.mean_sigma[k] += p.sigma[k];
      }
    }
    if (s.converged > 0)
      for (std::size_t k = 0; k < kNumFitParams; ++k) {
        s.mean_value[k] /= static_cast<double>(s.converged);
        s.mean_sigma[k] /= static_cast<double>(s.converged);
      }
    return s;
  }
};

/// A derived per-pixel quantity (field, dD, temperature, density ...).
struct ScalarMap {
  int rows = 0;
  int cols = 0;
  std::string name;
  std::string unit;
  std::vector<double> value;
  std::vector<double> sigma;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint32_t> flags;

  ScalarMap() = default;
  ScalarMap(int r, int c, std::string n, std::string u)
      : rows(r), cols(c), name(std::move(n)), unit(std::move(u)),
        value(static_cast<std::size_t>(r) * c, kNaN), sigma(static_cast<std::size_t>(r) * c, kNaN),
        valid(static_cast<std::size_t>(r) * c, 0), flags(static_cast<std::size_t>(r) * c, 0) {}

  [[nodiscard]] std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * cols + c; }
};

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Hash rendered as 16 hex digits, as it appears in every exported file.
inline std::string provenance_string(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::uint64_t parse_provenance(const std::string& s) { return std::stoull(s, nullptr, 16); }

namespace detail {

inline std::string fmt_value(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

/// 8-bit PGM scaled linearly from the min to max of valid values; invalid
/// pixels are black.
inline void write_pgm(const std::filesystem::path& path, int rows, int cols, const std::vector<double>& v,
                      const std::vector<std::uint8_t>& valid, std::uint64_t provenance) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (valid[i] && std::isfinite(v[i])) {
      lo = std::min(lo, v[i]);
      hi = std::max(hi, v[i]);
    }
  auto out = open_out(path);
  out << "P5\n# provenance=" << provenance_string(provenance) << "\n" << cols << " " << rows << "\n255\n";
  for (std::size_t i = 0; i < v.size(); ++i) {
    unsigned char g = 0;
    if (valid[i] && std::isfinite(v[i])) {
      const double t = hi > lo ? (v[i] - lo) / (hi - lo) : 0.5;
      g = static_cast<unsigned char>(1 + std::lround(254.0 * std::clamp(t, 0.0, 1.0)));
    }
    out.put(static_cast<char>(g));
  }
}

}  // namespace detail

inline void write_csv(const ParameterMap& map, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "# provenance=" << provenance_string(map.provenance_hash) << " mode=" << map.mode << " magnification="
      << map.geometry.magnification << " bin=" << map.geometry.bin << "\n";
  out << "row,col,converged";
  for (auto* n : kFitParamNames) out << "," << n;
  for (auto* n : kFitParamNames) out << ",sigma_" << n;
  out << ",residual_norm,flags,sources\n";
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      const auto& p = map.at(r, c);
      out << r << "," << c << "," << (p.converged ? 1 : 0);
      for (double v : p.value) out << "," << detail::fmt_value(v);
      for (double v : p.sigma) out << "," << detail::fmt_value(v);
      out << "," << detail::fmt_value(p.residual_norm) << "," << p.flags << "," << p.sources << "\n";
    }
}

inline void write_csv(const ScalarMap& map, const std::filesystem::path& path, std::uint64_t provenance = 0) {
  auto out = detail::open_out(path);
  out << "# provenance=" << provenance_string(provenance) << " field=" << map.name << " unit=" << map.unit << "\n";
  out << "row,col,valid," << map.name << ",sigma,flags\n";
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      const auto i = map.index(r, c);
      out << r << "," << c << "," << int(map.valid[i]) << "," << detail::fmt_value(map.value[i]) << ","
          << detail::fmt_value(map.sigma[i]) << "," << map.flags[i] << "\n";
    }
}

inline void write_pgm(const ParameterMap& map, FitParam field, const std::filesystem::path& path) {
  std::vector<double> v(map.pixels.size());
  std::vector<std::uint8_t> ok(map.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = map.pixels[i].value[field];
    ok[i] = map.pixels[i].converged ? 1 : 0;
  }
  detail::write_pgm(path, map.rows, map.cols, v, ok, map.provenance_hash);
}

inline void write_pgm(const ScalarMap& map, const std::filesystem::path& path, std::uint64_t provenance = 0) {
  detail::write_pgm(path, map.rows, map.cols, map.value, map.valid, provenance);
}

// ---------------------------------------------------------------------------
// JSON round trip (used to feed maps into stitching)
// ---------------------------------------------------------------------------

namespace detail {
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double num(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }
}  // namespace detail

inline nlohmann::json to_json(const ParameterMap& map) {
  using nlohmann::json;
  json j;
  j["format"] = "nvcam-parameter-map";
  j["version"] = 1;
  j["rows"] = map.rows;
  j["cols"] = map.cols;
  j["mode"] = map.mode;
  j["nu_mhz"] = map.nu_mhz;
  j["provenance"] = provenance_string(map.provenance_hash);
  j["geometry"] = {{"magnification", map.geometry.magnification},
                   {"pitch_um", map.geometry.pitch_um},
                   {"bin", map.geometry.bin},
                   {"pose",
                    {{"x_um", map.geometry.pose.x_um},
                     {"y_um", map.geometry.pose.y_um},
                     {"set", map.geometry.pose.set_id},
                     {"detuning_mhz", map.geometry.pose.detuning_mhz}}}};
  j["source_sets"] = map.source_sets;
  json px = json::array();
  for (const auto& p : map.pixels) {
    json v = json::array(), s = json::array();
    for (std::size_t k = 0; k < kNumFitParams; ++k) {
      v.push_back(detail::num(p.value[k]));
      s.push_back(detail::num(p.sigma[k]));
    }
    px.push_back({{"ok", p.converged}, {"v", v}, {"s", s}, {"res", detail::num(p.residual_norm)},
                  {"flags", p.flags}, {"src", p.sources}, {"it", p.iterations}});
  }
  j["pixels"] = std::move(px);
  return j;
}

inline ParameterMap parameter_map_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "nvcam-parameter-map") throw std::runtime_error("not a parameter map document");
  ParameterMap m(j.at("rows").get<int>(), j.at("cols").get<int>());
  m.mode = j.at("mode").get<std::string>();
  m.nu_mhz = j.at("nu_mhz").get<double>();
  m.provenance_hash = parse_provenance(j.at("provenance").get<std::string>());
  const auto& g = j.at("geometry");
  m.geometry.magnification = g.at("magnification").get<double>();
  m.geometry.pitch_um = g.at("pitch_um").get<double>();
  m.geometry.bin = g.at("bin").get<int>();
  const auto& pose = g.at("pose");
  m.geometry.pose = {pose.at("x_um").get<double>(), pose.at("y_um").get<double>(), pose.at("set").get<std::string>(),
                     pose.at("detuning_mhz").get<double>()};
  m.source_sets = j.value("source_sets", std::vector<std::string>{});
  const auto& px = j.at("pixels");
  if (px.size() != m.pixels.size()) throw std::runtime_error("parameter map pixel count mismatch");
  for (std::size_t i = 0; i < px.size(); ++i) {
    auto& p = m.pixels[i];
    p.converged = px[i].at("ok").get<bool>();
    for (std::size_t k = 0; k < kNumFitParams; ++k) {
      p.value[k] = detail::num(px[i].at("v")[k]);
      p.sigma[k] = detail::num(px[i].at("s")[k]);
    }
    p.residual_norm = detail::num(px[i].at("res"));
    p.flags = px[i].at("flags").get<std::uint32_t>();
    p.sources = px[i].at("src").get<std::uint32_t>();
    p.iterations = px[i].value("it", 0);
  }
  return m;
}

inline void save_map(const ParameterMap& map, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << to_json(map).dump();
}

inline ParameterMap load_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return parameter_map_from_json(nlohmann::json::parse(in));
}

}  // namespace nvcam
