#include "ksm/run.hpp"

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ksm/errors.hpp"

namespace ksm {

namespace fs = std::filesystem;

namespace {

Json net_json(const NetSpec& s) {
  auto j = s.to_json();
  j.erase("d");
  return j;
}

template <typename T>
T section(const Json& j, const char* key) {
  return j.contains(key) ? T::from_json(j.at(key)) : T{};
}

void write_snapshot(const RunConfig& config) {
  fs::create_directories(config.out);
  write_text_file(config.out / "config.snapshot", to_text(config.to_json()));
}

}  // namespace

void RunConfig::validate() const {
  economy.validate();
  if (!grid.breakpoints && (grid.k1 < 1 || grid.k2 < 1)) throw ConfigError("grid: k1 and k2 must be >= 1");
  if (grid.breakpoints) {
    if (grid.breakpoints->lower() != economy.x_lo || grid.breakpoints->upper() != economy.x_hi) {
      throw ConfigError("grid: breakpoints must span [x_lo, x_hi]");
    }
  }
  aiyagari.validate();
  transport.validate();
  NetSpec probe = net;
  probe.d = 1;
  probe.validate();
  sampler.validate();
  solver.validate();
}

Json RunConfig::to_json() const {
  Json g{{"k1", grid.k1}, {"k2", grid.k2}};
  if (grid.breakpoints) g["breakpoints"] = grid.breakpoints->to_json();
  return Json{{"seed", seed},
              {"out", out.string()},
              {"economy", economy.to_json()},
              {"grid", g},
              {"aiyagari", aiyagari.to_json()},
              {"transport", transport.to_json()},
              {"net", net_json(net)},
              {"sampler", sampler.to_json()},
              {"solver", solver.to_json()}};
}

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> known{"seed",      "out",  "economy", "grid",  "aiyagari",
                                           "transport", "net",  "sampler", "solver"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out.string());
    c.economy = section<EconomyParams>(j, "economy");
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      c.grid.k1 = g.value("k1", c.grid.k1);
      c.grid.k2 = g.value("k2", c.grid.k2);
      if (g.contains("breakpoints") && !g.at("breakpoints").is_null()) {
        c.grid.breakpoints = Grid::from_json(g.at("breakpoints"));
      }
    }
    c.aiyagari = section<AiyagariConfig>(j, "aiyagari");
    c.transport = section<TransportConfig>(j, "transport");
    if (j.contains("net")) {
      Json n = j.at("net");
      if (n.contains("d")) throw ConfigError("net: d is derived from the grid and cannot be set");
      n["d"] = 1;
      c.net = NetSpec::from_json(n);
      c.net.d = 0;
    }
    c.sampler = section<SamplerConfig>(j, "sampler");
    c.solver = section<SolverConfig>(j, "solver");
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string RunConfig::hash() const {
  Json j = to_json();
  j.erase("out");
  j["solver"].erase("threads");
  const auto text = to_text(j, -1);
  return hex64(fnv1a(text.data(), text.size()));
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  Json j;
  try {
    j = Json::parse(text.str(), nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

std::string default_config_text() {
  return R"({
  "seed": 1,                // master seed; every random stream is derived from it
  "out": "run",             // run directory
  "economy": {
    "alpha": 0.5,           // capital share
    "delta": 0.05,          // depreciation
    "rho": 0.15,            // discount rate
    "gamma": 2.0,           // CRRA coefficient
    "A": [0.9, 1.1],        // aggregate productivity A_1 < A_2
    "mu": [0.2, 0.2],       // switching intensities of A
    "y": [0.7, 1.4],        // idiosyncratic productivity y_1 < y_2
    "lambda": [0.05, 0.1],  // switching intensities of y
    "x_lo": 0.0,            // borrowing limit
    "x_hi": 30.0,           // truncation of the wealth support
    "dt": 0.25,             // time step (years)
    "eps_p": 1e-10          // floor on the costate in the consumption rule
  },
  "grid": {
    "k1": 17,               // equal-mass cells for y_1
    "k2": 10                // equal-mass cells for y_2
    // "breakpoints": {"y1": [...], "y2": [...]} replaces k1, k2
  },
  "aiyagari": {
    "value_nodes": 401, "value_margin": 10.0, "fine_nodes": 600, "node_growth": 1.01,
    "presolve_tol": 1e-6, "value_tol": 1e-9, "value_max_iter": 50000, "newton_max_iter": 50,
    "measure_tol": 1e-10, "measure_max_iter": 2000000,
    "clearing_tol": 1e-4, "bisection_max_iter": 100
  },
  "transport": {
    "points_per_cell": 10,  // N points per cell
    "mode": "expected",     // or "sampled"
    "rng_seed": 0
  },
  "net": {
    "d0": 1,                // adaptive features F_1..F_d0
    "feature_embed": 80,
    "rate_embed": 20,
    "capital_embed": 150,
    "trunk": [300, 150, 50, 20],
    "capital_stretch": 0.5  // capital enters as asinh((x - x_lo) / 0.5); 0 = linear
  },
  "sampler": {
    "measures": 2000, "points_per_measure": 10,
    "dirichlet_share": 0.25, "transported_share": 0.25,
    "perturbation_weight": 0.5, "dirichlet_concentration": 1.0, "max_transport_steps": 8,
    "near_lo_share": 0.2, "near_lo_min": 1e-3, "near_lo_max": 1.0,
    "holdout_share": 0.1
  },
  "solver": {
    "outer_iterations": 30,
    "policy_tol": 1e-4,     // sup-norm savings change on the probe set
    "train": {
      "optimizer": "adam", "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
      "steps": 2000, "batch": 256, "eval_every": 250, "keep_best": true,
      "lbfgs_rank": 20, "divergence_mse": 1e6
    },
    "refresh_share": 0.25,
    "probe_points": 32, "probe_measures": 8,
    "pretrain_steps": 4000,
    "cap_savings": false,
    "threads": 1            // 0 = all cores; results do not depend on it
  }
}
)";
}

NetSpec network_spec(const RunConfig& config, const Grid& grid) {
  NetSpec spec = config.net;
  spec.d = static_cast<int>(grid.dimension());
  spec.validate();
  return spec;
}

Grid run_grid(const RunConfig& config, const AiyagariEquilibrium& eq) {
  if (config.grid.breakpoints) return *config.grid.breakpoints;
  return equal_mass_grid(eq.measure, config.grid.k1, config.grid.k2);
}

Prepared prepare(const RunConfig& config) {
  config.validate();
  auto eq = equilibrium(config.economy, config.transport, config.aiyagari);
  auto grid = std::make_shared<const Grid>(run_grid(config, eq));
  auto base = project(eq.measure, grid);
  const auto spec = network_spec(config, *grid);
  const SolverContext ctx{config.economy, config.transport, config.solver, config.seed};

  SamplerConfig untransported = config.sampler;
  untransported.transported_share = 0.0;
  std::mt19937_64 rng(derive_seed(config.seed, {100}));
  const auto first = generate_samples(untransported, base, config.economy, config.transport, nullptr,
                                      config.solver.cap_savings, rng);
  auto initial = pretrained_networks(spec, eq.household, first, ctx);

  rng.seed(derive_seed(config.seed, {101}));
  auto samples = generate_samples(config.sampler, base, config.economy, config.transport, &initial,
                                  config.solver.cap_savings, rng);
  return Prepared{std::move(eq), std::move(grid), std::move(base), spec, ctx, std::move(initial), std::move(samples)};
}

AiyagariEquilibrium cmd_aiyagari(const RunConfig& config) {
  config.validate();
  auto eq = equilibrium(config.economy, config.transport, config.aiyagari);
  const auto grid = run_grid(config, eq);
  write_snapshot(config);
  write_json_file(config.out / "aiyagari.json", eq.to_json(config.economy));
  write_json_file(config.out / "grid.json", grid.to_json());
  return eq;
}

SampleSet cmd_sample_measures(const RunConfig& config) {
  auto p = prepare(config);
  write_snapshot(config);
  write_json_file(config.out / "samples.json", p.samples.to_json());
  return std::move(p.samples);
}

SolveHistory cmd_solve(const RunConfig& config) {
  const auto snapshot = config.out / "config.snapshot";
  if (fs::exists(snapshot)) {
    const auto previous = RunConfig::from_json(read_json_file(snapshot));
    if (previous.hash() != config.hash()) {
      throw ConfigError("run directory " + config.out.string() + " holds a run with a different config");
    }
  }
  auto p = prepare(config);
  write_snapshot(config);
  write_json_file(config.out / "aiyagari.json", p.equilibrium.to_json(config.economy));
  write_json_file(config.out / "grid.json", p.grid->to_json());
  write_json_file(config.out / "samples.json", p.samples.to_json());
  return solve(std::move(p.initial), std::move(p.samples), config.sampler, p.ctx, config.out, config.hash());
}

}  // namespace ksm
