#pragma once

// JSON run configuration and pose files. Unknown keys are rejected so a
// misspelt field cannot silently fall back to its default.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nvcam/parameter_map.hpp"
#include "nvcam/simulation.hpp"

namespace nvcam {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a.
[[nodiscard]] inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

using nlohmann::json;

class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError((path_.empty() ? "/" : path_) + ": " + msg); }
  [[nodiscard]] const std::string& path() const { return path_; }
  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "/" + key + ": wrong type");
    }
  }

  [[nodiscard]] const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  [[nodiscard]] Node child(const std::string& key) {
    used_.insert(key);
    return Node(j_.at(key), path_ + "/" + key);
  }

  /// Fails on keys that were never looked up.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError(path_ + "/" + k + ": unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline Vec2 read_vec(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError(path + ": expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline void read_vec(Node& n, const std::string& key, Vec2& out) {
  if (n.has(key)) out = read_vec(n.raw(key), n.path() + "/" + key);
}

inline ScalarField read_field(const json& j, const std::string& path) {
  if (j.is_number()) return ScalarField::constant(j.get<double>());
  if (!j.is_array()) throw ConfigError(path + ": expected a number or a list of terms");
  ScalarField f;
  for (std::size_t i = 0; i < j.size(); ++i) {
    Node t(j[i], path + "/" + std::to_string(i));
    std::string type;
    t.read("type", type);
    if (type == "constant") {
      ConstantTerm c;
      t.read("value", c.value);
      f.terms.emplace_back(c);
    } else if (type == "linear") {
      LinearTerm c;
      t.read("value", c.value);
      read_vec(t, "gradient", c.gradient);
      read_vec(t, "origin", c.origin);
      f.terms.emplace_back(c);
    } else if (type == "disk") {
      DiskTerm c;
      read_vec(t, "center", c.center);
      t.read("radius", c.radius);
      t.read("inside", c.inside);
      t.read("outside", c.outside);
      f.terms.emplace_back(c);
    } else if (type == "gaussian") {
      GaussianTerm c;
      read_vec(t, "center", c.center);
      t.read("diameter", c.diameter);
      t.read("amplitude", c.amplitude);
      f.terms.emplace_back(c);
    } else if (type == "raster") {
      RasterTerm c;
      read_vec(t, "origin", c.origin);
      t.read("spacing", c.spacing);
      t.read("rows", c.rows);
      t.read("cols", c.cols);
      t.read("values", c.values);
      if (c.values.size() != c.rows * c.cols) t.fail("raster needs rows*cols values");
      f.terms.emplace_back(c);
    } else {
      t.fail("unknown term type '" + type + "' (constant, linear, disk, gaussian, raster)");
    }
    t.finish();
  }
  return f;
}

inline Scene read_scene(Node n) {
  Scene s;
  n.read("width_um", s.width_um);
  n.read("height_um", s.height_um);
  n.read("spacing_um", s.spacing_um);
  auto field = [&](const char* key, ScalarField& out) {
    if (n.has(key)) out = read_field(n.raw(key), n.path() + "/" + key);
  };
  field("brightness", s.brightness);
  field("dBz_gauss", s.dBz_gauss);
  field("dD_mhz", s.dD_mhz);
  field("mw_amp_mhz", s.mw_amp_mhz);
  field("spin_density", s.spin_density);
  field("ionization_dose", s.ionization_dose);
  if (n.has("points")) {
    const auto& arr = n.raw("points");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Node p(arr[i], n.path() + "/points/" + std::to_string(i));
      PointEmitter e;
      read_vec(p, "position", e.position);
      p.read("rate_cps", e.rate_cps);
      p.finish();
      s.points.push_back(e);
    }
  }
  if (n.has("beams")) {
    const auto& arr = n.raw("beams");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Node b(arr[i], n.path() + "/beams/" + std::to_string(i));
      BeamProfile beam;
      std::string role = "focused";
      b.read("role", role);
      if (role == "focused") beam.role = BeamRole::Focused;
      else if (role == "broad") beam.role = BeamRole::Broad;
      else b.fail("role must be 'focused' or 'broad'");
      read_vec(b, "center", beam.center);
      b.read("diameter_um", beam.diameter_um);
      b.read("power_density", beam.power_density);
      b.finish();
      s.beams.push_back(beam);
    }
  }
  if (n.has("dynamics")) {
    auto d = n.child("dynamics");
    auto& y = s.dynamics;
    d.read("t2rho_us", y.t2rho_us);
    d.read("t2star_sq_us", y.t2star_sq_us);
    d.read("t2star_dq_us", y.t2star_dq_us);
    d.read("t2_echo_us", y.t2_echo_us);
    d.read("density_coupling_per_us", y.density_coupling_per_us);
    d.read("contrast_bulk", y.contrast_bulk);
    d.read("dose_scale", y.dose_scale);
    d.read("density_per_dose", y.density_per_dose);
    d.read("dose_per_focused_intensity", y.dose_per_focused_intensity);
    d.read("echo_k", y.echo_k);
    d.finish();
  }
  n.finish();
  return s;
}

inline std::vector<double> read_sweep(const json& j, const std::string& path) {
  if (j.is_array()) return j.get<std::vector<double>>();
  Node n(j, path);
  double start = 0, stop = 0;
  int points = 0;
  n.read("start_us", start);
  n.read("stop_us", stop);
  n.read("points", points);
  n.finish();
  if (points < 2) n.fail("points must be >= 2");
  std::vector<double> v(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) v[static_cast<std::size_t>(i)] = start + (stop - start) * i / (points - 1);
  return v;
}

template <class F>
void checked(const std::string& where, F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const std::domain_error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace detail

[[nodiscard]] inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::Node;
  RunConfig c;
  Node root(j, "");
  if (root.has("scene")) c.scene = detail::read_scene(root.child("scene"));
  if (root.has("optics")) {
    auto n = root.child("optics");
    n.read("magnification", c.optics.magnification);
    n.read("numerical_aperture", c.optics.numerical_aperture);
    n.read("psf_fwhm_um", c.optics.psf_fwhm_um);
    n.read("collection_efficiency", c.optics.collection_efficiency);
    n.read("camera_attenuation", c.optics.camera_attenuation);
    n.read("microlens", c.optics.microlens);
    n.finish();
  }
  if (root.has("spad")) {
    auto n = root.child("spad");
    n.read("dead_time_ns", c.spad.dead_time_ns);
    n.read("pdp", c.spad.pdp);
    n.read("dark_rate_cps", c.spad.dark_rate_cps);
    n.read("fill_factor", c.spad.fill_factor);
    n.read("counters_per_pixel", c.spad.counters_per_pixel);
    n.finish();
  }
  if (!root.has("protocol")) root.fail("missing 'protocol'");
  {
    auto n = root.child("protocol");
    auto& p = c.protocol;
    std::string kind;
    n.read("kind", kind);
    detail::checked("/protocol/kind", [&] { p.kind = protocol_kind_from_string(kind); });
    if (!n.has("sweep")) n.fail("missing 'sweep'");
    p.sweep_us = detail::read_sweep(n.raw("sweep"), n.path() + "/sweep");
    n.read("nu_mhz", p.nu_mhz);
    n.read("pi_time_minus_ns", p.pi_time_minus_ns);
    n.read("pi_time_plus_ns", p.pi_time_plus_ns);
    std::string prep = "simultaneous";
    n.read("echo_prep", prep);
    if (prep == "simultaneous") p.echo_prep = EchoPrep::Simultaneous;
    else if (prep == "composite") p.echo_prep = EchoPrep::Composite;
    else n.fail("echo_prep must be 'simultaneous' or 'composite'");
    n.read("carrier_detuning_mhz", p.carrier_detuning_mhz);
    n.read("laser_init_ns", p.laser_init_ns);
    n.read("laser_readout_ns", p.laser_readout_ns);
    n.read("camera_gate_ns", p.camera_gate_ns);
    n.read("resolution_ns", p.resolution_ns);
    n.read("focused_during_init", p.focused_during_init);
    n.read("repetitions", p.repetitions);
    n.finish();
  }
  if (root.has("acquisition")) {
    auto n = root.child("acquisition");
    n.read("shots_per_frame", c.acquisition.shots_per_frame);
    n.read("frames_per_point", c.acquisition.frames_per_point);
    n.read("reference_frames", c.acquisition.reference_frames);
    n.read("threads", c.acquisition.threads);
    n.finish();
  }
  if (root.has("constants")) {
    auto n = root.child("constants");
    n.read("zero_field_mhz", c.constants.zero_field_mhz);
    n.read("gamma_e_mhz_per_gauss", c.constants.gamma_e_mhz_per_gauss);
    n.read("dD_dT_mhz_per_kelvin", c.constants.dD_dT_mhz_per_kelvin);
    n.finish();
  }
  if (root.has("stage")) {
    auto n = root.child("stage");
    n.read("x_um", c.stage.x);
    n.read("y_um", c.stage.y);
    n.read("set", c.set_id);
    n.finish();
  }
  root.read("seed", c.seed);
  root.finish();

  detail::checked("/scene", [&] { c.scene.validate(); });
  detail::checked("/optics", [&] { c.optics.validate(); });
  detail::checked("/spad", [&] { c.spad.validate(); });
  detail::checked("/protocol", [&] { c.protocol.validate(); });
  detail::checked("/acquisition", [&] { c.acquisition.validate(); });
  detail::checked("/constants", [&] { c.constants.validate(); });
  c.provenance_hash = fnv1a(j.dump());
  return c;
}

[[nodiscard]] inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Reads a run configuration. Errors name the file and the field.
[[nodiscard]] inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Pose file: {"poses": [{"map": "a.json", "x_um": 0, "y_um": 0, "set": "A", "detuning_mhz": 0}, ...]}.
/// Entries are matched to maps by file name, or by set id when "map" is absent.
struct PoseEntry {
  std::string map;
  StagePose pose;
};

[[nodiscard]] inline std::vector<PoseEntry> load_poses(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  std::vector<PoseEntry> out;
  try {
    detail::Node root(j, "");
    const auto& arr = root.raw("poses");
    if (!arr.is_array()) root.fail("'poses' must be a list");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::Node n(arr[i], "/poses/" + std::to_string(i));
      PoseEntry e;
      n.read("map", e.map);
      n.read("x_um", e.pose.x_um);
      n.read("y_um", e.pose.y_um);
      n.read("set", e.pose.set_id);
      n.read("detuning_mhz", e.pose.detuning_mhz);
      n.finish();
      if (!std::isfinite(e.pose.x_um) || !std::isfinite(e.pose.y_um) || !std::isfinite(e.pose.detuning_mhz))
        n.fail("pose values must be finite");
      out.push_back(e);
    }
    root.finish();
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace nvcam
