#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "ksm/aiyagari.hpp"
#include "ksm/solver.hpp"

namespace ksm {

// K1, K2 equal-mass cells per level, or explicit breakpoints.
struct GridSpec {
  int k1 = 17;
  int k2 = 10;
  std::optional<Grid> breakpoints;
};

/// Everything a run depends on. `out` and `solver.threads` do not change
/// results and are left out of hash().
struct RunConfig {
  EconomyParams economy;
  GridSpec grid;
  AiyagariConfig aiyagari;
  TransportConfig transport;
  NetSpec net;  // d is derived from the grid
  SamplerConfig sampler;
  SolverConfig solver;
  std::uint64_t seed = 1;
  std::filesystem::path out = "run";

  void validate() const;
  Json to_json() const;
  // Missing keys keep their defaults; unknown top-level keys are rejected.
  static RunConfig from_json(const Json& j);
  std::string hash() const;
};

// JSON, with // and /* */ comments allowed.
RunConfig load_run_config(const std::filesystem::path& path);

// The default configuration as commented JSON.
std::string default_config_text();

// Network spec with d set from the grid.
NetSpec network_spec(const RunConfig& config, const Grid& grid);

Grid run_grid(const RunConfig& config, const AiyagariEquilibrium& eq);

/// Inputs of the fixed point: equilibrium, grid, base measure, training
/// samples and the networks pretrained on the household value.
struct Prepared {
  AiyagariEquilibrium equilibrium;
  std::shared_ptr<const Grid> grid;
  DiscreteMeasure base;  // equilibrium measure projected onto grid
  NetSpec spec;
  SolverContext ctx;
  ValueSet initial;
  SampleSet samples;
};

// Untransported samples first, then the pretrained networks, then the full
// sample set with transported measures under the pretrained policies.
Prepared prepare(const RunConfig& config);

// Writes config.snapshot, aiyagari.json and grid.json under config.out.
AiyagariEquilibrium cmd_aiyagari(const RunConfig& config);

// Writes the sample set of prepare() to config.out/samples.json.
SampleSet cmd_sample_measures(const RunConfig& config);

// Full pipeline into config.out, resuming a run with the same config hash.
SolveHistory cmd_solve(const RunConfig& config);

}  // namespace ksm
