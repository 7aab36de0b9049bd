#pragma once

// Implementation of the nvcam subcommands, kept apart from argument
// parsing so the tests can drive them directly.
//
// Exit codes: 0 success, 1 bad input or usage, 2 no pixel converged,
// 3 convergence below the report threshold.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nvcam/nvcam.hpp"

namespace nvcam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitNoConvergence = 2;
inline constexpr int kExitBelowThreshold = 3;

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw CommandError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline std::string hex(std::uint64_t v) { return provenance_string(v); }

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  fs::path config;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& log = std::cout) {
  const auto raw = read_json_file(a.config);
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.provenance_hash = fnv1a(std::to_string(cfg.seed), cfg.provenance_hash);
  fs::create_directories(a.out);

  const auto plan = plan_simulation(cfg);
  const auto frames_path = a.out / "frames.wspc";
  const auto bytes = simulate_to_file(cfg, frames_path);

  json m;
  m["format"] = "nvcam-run";
  m["tool_version"] = kToolVersion;
  m["provenance"] = hex(cfg.provenance_hash);
  m["seed"] = cfg.seed;
  m["config_file"] = a.config.filename().string();
  m["config"] = raw;
  m["frames_file"] = frames_path.filename().string();
  m["frames"] = plan.total_frames;
  m["bytes"] = bytes;
  m["protocol"] = to_string(cfg.protocol.kind);
  m["nu_mhz"] = cfg.protocol.nu_mhz;
  m["sweep_us"] = cfg.protocol.sweep_us;
  m["period_ns"] = plan.schedule.period_ns;
  m["geometry"] = {{"magnification", cfg.optics.magnification},
                   {"pitch_um", cfg.optics.pitch_um()},
                   {"x_um", cfg.stage.x},
                   {"y_um", cfg.stage.y},
                   {"set", cfg.set_id},
                   {"detuning_mhz", cfg.protocol.carrier_detuning_mhz}};
  write_json(a.out / "manifest.json", m);
  log << "simulate: " << plan.total_frames << " frames, " << bytes << " bytes -> " << frames_path.string()
      << " (provenance " << hex(cfg.provenance_hash) << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct RunInput {
  fs::path dir;
  json manifest;
  RunConfig config;
};

inline json read_manifest(const fs::path& dir) {
  const auto p = dir / "manifest.json";
  if (!fs::exists(p)) throw CommandError(dir.string() + ": missing manifest.json");
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CommandError(p.string() + ": " + e.what());
  }
}

inline RunInput load_run(const fs::path& dir) {
  RunInput r;
  r.dir = dir;
  r.manifest = read_manifest(dir);
  if (r.manifest.value("format", "") != "nvcam-run") throw CommandError(dir.string() + ": not a simulation run");
  r.config = run_config_from_json(r.manifest.at("config"));
  r.config.seed = r.manifest.at("seed").get<std::uint64_t>();
  r.config.provenance_hash = parse_provenance(r.manifest.at("provenance").get<std::string>());
  return r;
}

struct AnalyzeArgs {
  std::vector<fs::path> inputs;
  std::string mode;
  int bin = 1;
  std::vector<std::string> region{"all"};
  fs::path out;
  bool force = false;
  std::optional<double> strain_ppm_per_mhz;
};

inline SweepStack read_stack(const std::vector<RunInput>& runs) {
  const auto& first = runs.front().config;
  StackBuilder b(kArrayRows, kArrayCols, first.protocol.sweep_us);
  for (const auto& r : runs) {
    if (r.config.protocol.sweep_us != first.protocol.sweep_us)
      throw CommandError(r.dir.string() + ": sweep differs from the first input");
    FrameReader reader(r.dir / r.manifest.at("frames_file").get<std::string>());
    FrameRecord f(reader.header().rows, reader.header().cols, reader.header().counters);
    while (reader.next(f)) b.add(f);
  }
  auto s = b.take();
  s.repetitions = first.protocol.repetitions * static_cast<int>(runs.size());
  s.geometry = run_geometry(first);
  s.provenance_hash = runs.front().config.provenance_hash;
  return s;
}

inline json fit_json(const FitResult& f) {
  json v;
  v["converged"] = f.converged;
  v["iterations"] = f.iterations;
  v["flags"] = f.flags;
  for (std::size_t k = 0; k < kNumFitParams; ++k) {
    v["value"][kFitParamNames[k]] = detail::num(f.params[k]);
    v["sigma"][kFitParamNames[k]] = detail::num(f.sigma(k));
  }
  return v;
}

inline json map_summary_json(const ParameterMap& map) {
  const auto s = map.summary();
  json j;
  j["pixels"] = s.pixels;
  j["converged"] = s.converged;
  j["converged_fraction"] = s.converged_fraction();
  for (std::size_t k = 0; k < kNumFitParams; ++k) {
    j["mean"][kFitParamNames[k]] = detail::num(s.converged ? s.mean_value[k] : kNaN);
    j["mean_sigma"][kFitParamNames[k]] = detail::num(s.converged ? s.mean_sigma[k] : kNaN);
  }
  std::map<std::string, std::size_t> flagged;
  const std::pair<std::uint32_t, const char*> names[] = {
      {flags::kNoSignal, "no_signal"},     {flags::kSingular, "singular"},      {flags::kTauClamped, "tau_clamped"},
      {flags::kAlias, "alias"},            {flags::kSaturated, "saturated"},    {flags::kNotConverged, "not_converged"},
      {flags::kNonPhysical, "invalid"},    {flags::kGap, "gap"},                {flags::kNegativeDensity, "negative_density"}};
  for (const auto& [bit, name] : names) flagged[name] = 0;
  for (const auto& p : map.pixels)
    for (const auto& [bit, name] : names)
      if (p.flags & bit) ++flagged[name];
  j["flag_counts"] = flagged;
  return j;
}

inline json scalar_summary(const ScalarMap& m) {
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.value.size(); ++i)
    if (m.valid[i]) {
      s += m.value[i];
      ss += m.sigma[i];
      ++n;
    }
  return {{"unit", m.unit}, {"valid", n}, {"mean", detail::num(n ? s / n : kNaN)},
          {"mean_sigma", detail::num(n ? ss / n : kNaN)}};
}

inline void export_scalar(const ScalarMap& m, const fs::path& dir, std::uint64_t prov, json& summary) {
  write_csv(m, dir / (m.name + ".csv"), prov);
  write_pgm(m, dir / (m.name + ".pgm"), prov);
  summary["derived"][m.name] = scalar_summary(m);
}

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& log = std::cout) {
  if (a.inputs.empty()) throw CommandError("analyze: no inputs");
  const auto kind = protocol_kind_from_string(a.mode);
  std::vector<RunInput> runs;
  for (const auto& d : a.inputs) runs.push_back(load_run(d));
  for (const auto& r : runs) {
    if (r.config.provenance_hash != runs.front().config.provenance_hash && !a.force)
      throw CommandError("analyze: inputs have mixed provenance (" + runs.front().dir.string() + " vs " +
                         r.dir.string() + "); pass --force to combine them");
    if (r.config.protocol.kind != kind && !a.force)
      throw CommandError("analyze: " + r.dir.string() + " holds " + to_string(r.config.protocol.kind) +
                         " data, not " + a.mode);
  }
  if (a.bin != 1 && a.bin != 2 && a.bin != 4) throw CommandError("analyze: --bin must be 1, 2 or 4");
  const auto& cfg = runs.front().config;
  const auto prov = cfg.provenance_hash;
  fs::create_directories(a.out);

  json manifest;
  manifest["format"] = "nvcam-analysis";
  manifest["tool_version"] = kToolVersion;
  manifest["provenance"] = hex(prov);
  manifest["mode"] = a.mode;
  manifest["bin"] = a.bin;
  manifest["region"] = a.region;
  for (const auto& r : runs) manifest["inputs"].push_back(fs::absolute(r.dir).lexically_normal().string());

  json summary;
  summary["provenance"] = hex(prov);
  summary["mode"] = a.mode;
  summary["bin"] = a.bin;

  const std::string region = a.region.empty() ? "all" : a.region.front();
  auto stack = read_stack(runs);

  if (region != "all") {
    AreaSignal area;
    if (region == "object") {
      area = fit_area_series(cfg.protocol.sweep_us, object_plane_series(cfg));
    } else {
      Region reg = FullFrame{};
      auto arg = [&](std::size_t i) {
        if (i >= a.region.size()) throw CommandError("analyze: --region " + region + " needs more coordinates");
        return std::stoi(a.region[i]);
      };
      if (region == "pixel") reg = SinglePixel{arg(1), arg(2)};
      else if (region == "group") reg = PixelGroup{arg(1), arg(2), arg(3), arg(4)};
      else if (region != "full") throw CommandError("analyze: unknown region '" + region + "' (all, full, pixel, group, object)");
      area = area_signal(stack.binned(a.bin), reg);
    }
    json j;
    j["sweep_us"] = area.sweep_us;
    j["y"] = area.y;
    j["var"] = area.var;
    j["fit"] = fit_json(area.fit);
    summary["region"] = a.region;
    summary["area"] = j;
    summary["pixels"] = 1;
    summary["converged"] = area.fit.converged ? 1 : 0;
    summary["converged_fraction"] = area.fit.converged ? 1.0 : 0.0;
    write_json(a.out / "summary.json", summary);
    write_json(a.out / "manifest.json", manifest);
    log << "analyze: region " << region << " tau = " << area.fit.params[kTau] << " +- " << area.fit.sigma(kTau)
        << " us, omega = " << area.fit.params[kOmega] << " +- " << area.fit.sigma(kOmega) << " MHz\n";
    if (!area.fit.converged) {
      log << "analyze: FAILED, the fit did not converge\n";
      return kExitNoConvergence;
    }
    return kExitOk;
  }

  MapFitOptions opt;
  opt.threads = cfg.acquisition.threads;
  const auto map = fit_map(stack, a.mode, a.bin, cfg.protocol.nu_mhz, opt);
  save_map(map, a.out / "map.json");
  write_csv(map, a.out / "map.csv");
  for (auto field : {kOmega, kTau, kContrast})
    write_pgm(map, field, a.out / (std::string(kFitParamNames[field]) + ".pgm"));
  summary["map"] = map_summary_json(map);
  summary["pixels"] = summary["map"]["pixels"];
  summary["converged"] = summary["map"]["converged"];
  summary["converged_fraction"] = summary["map"]["converged_fraction"];

  if (kind == ProtocolKind::SqRamsey || kind == ProtocolKind::DqRamsey) {
    export_scalar(derive_field_map(map, ramsey_mode(kind), cfg.protocol.nu_mhz, cfg.constants), a.out, prov, summary);
    const auto& dyn = cfg.scene.dynamics;
    if (dyn.density_coupling_per_us > 0) {
      const double t2 = kind == ProtocolKind::SqRamsey ? dyn.t2star_sq_us : dyn.t2star_dq_us;
      export_scalar(density_map(map, 1.0 / t2, dyn.density_coupling_per_us), a.out, prov, summary);
    }
  } else if (kind == ProtocolKind::DqEcho) {
    DdCoefficients k;
    k.echo_k = cfg.scene.dynamics.echo_k;
    k.dD_dT_mhz_per_kelvin = cfg.constants.dD_dT_mhz_per_kelvin;
    k.strain_ppm_per_mhz = a.strain_ppm_per_mhz;
    const auto maps = derive_dD_map(map, cfg.protocol.nu_mhz, k);
    export_scalar(maps.dD, a.out, prov, summary);
    export_scalar(maps.temperature, a.out, prov, summary);
    if (a.strain_ppm_per_mhz) export_scalar(maps.strain, a.out, prov, summary);
  }
  write_json(a.out / "summary.json", summary);
  write_json(a.out / "manifest.json", manifest);

  const auto s = map.summary();
  log << "analyze: " << s.converged << "/" << s.pixels << " pixels converged; mean omega "
      << s.mean_value[kOmega] << " MHz, mean sigma(omega) " << s.mean_sigma[kOmega] << " MHz\n";
  if (s.converged == 0) {
    log << "analyze: FAILED, no pixel converged\n";
    return kExitNoConvergence;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// stitch
// ---------------------------------------------------------------------------

struct StitchArgs {
  std::vector<fs::path> maps;
  fs::path poses;
  fs::path out;
};

inline int cmd_stitch(const StitchArgs& a, std::ostream& log = std::cout) {
  if (a.maps.empty()) throw CommandError("stitch: no maps");
  const auto poses = load_poses(a.poses);
  std::vector<ParameterMap> tiles;
  for (const auto& path : a.maps) {
    auto m = load_map(path);
    // exact path first, then run-directory/file, then bare file name; each tier must be unambiguous
    const PoseEntry* match = nullptr;
    const std::array<std::function<bool(const fs::path&)>, 3> tiers{
        [&](const fs::path& q) { return q == path || (fs::exists(q) && fs::equivalent(q, path)); },
        [&](const fs::path& q) { return q.parent_path().filename() / q.filename() == path.parent_path().filename() / path.filename(); },
        [&](const fs::path& q) { return q.filename() == path.filename(); }};
    for (const auto& tier : tiers) {
      for (const auto& p : poses)
        if (!p.map.empty() && tier(fs::path(p.map))) {
          if (match) throw CommandError("stitch: several poses match " + path.string());
          match = &p;
        }
      if (match) break;
    }
    if (!match)
      for (const auto& p : poses)
        if (p.map.empty() && p.pose.set_id == m.geometry.pose.set_id) {
          if (match) throw CommandError("stitch: several poses match " + path.string());
          match = &p;
        }
    if (!match) throw CommandError("stitch: no pose for " + path.string());
    m.geometry.pose = match->pose;
    if (m.geometry.pose.set_id.empty()) m.geometry.pose.set_id = path.stem().string();
    tiles.push_back(std::move(m));
  }
  StitchReport rep;
  ParameterMap out;
  try {
    out = stitch(tiles, {}, &rep);
  } catch (const std::invalid_argument& e) {
    throw CommandError(e.what());
  }
  fs::create_directories(a.out);
  save_map(out, a.out / "map.json");
  write_csv(out, a.out / "map.csv");
  for (auto field : {kOmega, kTau, kContrast})
    write_pgm(out, field, a.out / (std::string(kFitParamNames[field]) + ".pgm"));
  json summary;
  summary["provenance"] = hex(out.provenance_hash);
  summary["mode"] = out.mode;
  summary["tiles"] = tiles.size();
  summary["sets"] = out.source_sets;
  summary["gap_pixels"] = rep.gap_pixels;
  summary["invalid_pixels"] = rep.invalid_pixels;
  summary["overlap_pixels"] = rep.overlap_pixels;
  summary["map"] = map_summary_json(out);
  summary["pixels"] = out.pixels.size() - rep.gap_pixels;
  summary["converged"] = summary["map"]["converged"];
  summary["converged_fraction"] =
      out.pixels.size() > rep.gap_pixels
          ? static_cast<double>(out.summary().converged) / static_cast<double>(out.pixels.size() - rep.gap_pixels)
          : 0.0;
  write_json(a.out / "summary.json", summary);
  json manifest{{"format", "nvcam-stitch"}, {"tool_version", kToolVersion}, {"provenance", hex(out.provenance_hash)}};
  for (const auto& p : a.maps) manifest["inputs"].push_back(p.string());
  write_json(a.out / "manifest.json", manifest);
  log << "stitch: " << tiles.size() << " tiles -> " << out.rows << "x" << out.cols << ", " << rep.gap_pixels
      << " gap pixels, " << rep.invalid_pixels << " invalid pixels, " << rep.overlap_pixels << " overlapping\n";
  return out.summary().converged == 0 ? kExitNoConvergence : kExitOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  fs::path run;
  double threshold = 0.9;
};

inline int cmd_report(const ReportArgs& a, std::ostream& log = std::cout) {
  const auto manifest = read_manifest(a.run);
  std::ostringstream os;
  os << "run:        " << a.run.string() << "\n";
  os << "kind:       " << manifest.value("format", "?") << "\n";
  os << "provenance: " << manifest.value("provenance", "?") << "\n";
  int code = kExitOk;
  const auto summary_path = a.run / "summary.json";
  if (manifest.value("format", "") == "nvcam-run") {
    os << "protocol:   " << manifest.value("protocol", "?") << "\n";
    os << "frames:     " << manifest.value("frames", 0) << "\n";
    os << "seed:       " << manifest.value("seed", 0) << "\n";
  } else if (fs::exists(summary_path)) {
    std::ifstream in(summary_path);
    const auto s = json::parse(in);
    const double frac = s.value("converged_fraction", 0.0);
    os << "mode:       " << s.value("mode", "?") << "\n";
    os << "converged:  " << s.value("converged", 0) << " / " << s.value("pixels", 0) << " (" << std::fixed
       << std::setprecision(1) << 100.0 * frac << "%, threshold " << 100.0 * a.threshold << "%)\n";
    os.unsetf(std::ios::fixed);
    os << std::setprecision(6);
    if (s.contains("map")) {
      os << "\n  parameter     mean            mean sigma\n";
      for (const auto* n : kFitParamNames) {
        const auto& mv = s["map"]["mean"][n];
        const auto& ms = s["map"]["mean_sigma"][n];
        os << "  " << std::left << std::setw(12) << n << "  " << std::setw(14)
           << (mv.is_null() ? std::string("-") : std::to_string(mv.get<double>())) << "  "
           << (ms.is_null() ? std::string("-") : std::to_string(ms.get<double>())) << "\n";
      }
      os << std::right;
      os << "  mean frequency sigma: "
         << (s["map"]["mean_sigma"]["omega_mhz"].is_null() ? std::string("-")
                                                            : std::to_string(s["map"]["mean_sigma"]["omega_mhz"].get<double>()))
         << " MHz\n";
      for (const auto& [k, v] : s["map"]["flag_counts"].items())
        if (v.get<std::size_t>() > 0) os << "  flagged " << k << ": " << v.get<std::size_t>() << "\n";
    }
    if (s.contains("derived"))
      for (const auto& [k, v] : s["derived"].items())
        os << "  " << k << ": mean " << (v["mean"].is_null() ? std::string("-") : std::to_string(v["mean"].get<double>()))
           << " " << v["unit"].get<std::string>() << ", mean sigma "
           << (v["mean_sigma"].is_null() ? std::string("-") : std::to_string(v["mean_sigma"].get<double>())) << "\n";
    if (s.contains("area")) {
      const auto& f = s["area"]["fit"];
      os << "  area fit: omega " << f["value"]["omega_mhz"] << " MHz, tau " << f["value"]["tau_us"] << " us\n";
    }
    if (s.contains("gap_pixels"))
      os << "  gaps: " << s["gap_pixels"] << ", invalid: " << s["invalid_pixels"] << "\n";
    if (fs::exists(a.run / "map.json")) {
      const auto map = load_map(a.run / "map.json");
      for (auto field : {kOmega, kTau, kContrast, kC0})
        write_pgm(map, field, a.run / ("report_" + std::string(kFitParamNames[field]) + ".pgm"));
      os << "  images: report_*.pgm\n";
    }
    if (frac < a.threshold) code = kExitBelowThreshold;
  } else {
    throw CommandError(a.run.string() + ": manifest present but no summary.json");
  }
  os << "status:     " << (code == kExitOk ? "OK" : "BELOW THRESHOLD") << "\n";
  std::ofstream(a.run / "report.txt") << os.str();
  log << os.str();
  return code;
}

}  // namespace nvcam::cli
