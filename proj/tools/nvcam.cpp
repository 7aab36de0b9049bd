#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

int main(int argc, char** argv) {
  using namespace nvcam::cli;
  CLI::App app{"nvcam: wide-field NV/SPAD camera simulator and analysis pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SimulateArgs sim;
  std::uint64_t seed = 0;
  auto* s = app.add_subcommand("simulate", "forward-simulate a run into a frame file and manifest");
  s->add_option("--config", sim.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  s->add_option("--out", sim.out, "output directory")->required();
  auto* seed_opt = s->add_option("--seed", seed, "master seed (overrides the config)");

  AnalyzeArgs an;
  double strain = 0;
  auto* a = app.add_subcommand("analyze", "fit per-pixel maps or area signals from simulated runs");
  a->add_option("--in", an.inputs, "run directories (same provenance)")->required()->check(CLI::ExistingDirectory);
  a->add_option("--mode", an.mode, "protocol")
      ->required()
      ->check(CLI::IsMember({"rabi", "sq-ramsey", "dq-ramsey", "dq-echo"}));
  a->add_option("--bin", an.bin, "pixel binning factor")->check(CLI::IsMember({1, 2, 4}));
  a->add_option("--region", an.region,
                "all | full | object | pixel R C | group R0 C0 R1 C1 (rows/cols after binning)")
      ->expected(1, 5);
  a->add_option("--out", an.out, "output directory")->required();
  a->add_flag("--force", an.force, "combine inputs of different provenance or protocol");
  auto* strain_opt = a->add_option("--strain-coefficient", strain, "strain per dD, ppm/MHz (dq-echo)");

  StitchArgs st;
  auto* t = app.add_subcommand("stitch", "assemble stitched composite maps");
  t->add_option("--maps", st.maps, "map.json files from analyze")->required()->check(CLI::ExistingFile);
  t->add_option("--poses", st.poses, "pose file (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", st.out, "output directory")->required();

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "summarize an analysis or stitch directory");
  r->add_option("--run", rp.run, "directory holding manifest.json")->required();
  r->add_option("--threshold", rp.threshold, "minimum converged fraction for exit code 0")
      ->check(CLI::Range(0.0, 1.0));

  CLI11_PARSE(app, argc, argv);

  try {
    if (s->parsed()) {
      if (seed_opt->count() > 0) sim.seed = seed;
      return cmd_simulate(sim);
    }
    if (a->parsed()) {
      if (strain_opt->count() > 0) an.strain_ppm_per_mhz = strain;
      return cmd_analyze(an);
    }
    if (t->parsed()) return cmd_stitch(st);
    if (r->parsed()) return cmd_report(rp);
  } catch (const std::exception& e) {
    std::cerr << "nvcam: error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
