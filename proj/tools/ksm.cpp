// ksm: Krusell-Smith master equation solver.
//
//   ksm aiyagari        equilibrium without aggregate shocks, equal-mass grid
//   ksm sample-measures training measures and capital values
//   ksm solve           fitted value iteration with checkpoints
//   ksm export KIND     CSV of a finished run
//   ksm default-config  commented default configuration
//
// Exit codes: 0 ok, 2 configuration, 3 numerical failure, 4 I/O.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ksm/errors.hpp"
#include "ksm/export.hpp"
#include "ksm/run.hpp"

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<int> d0;
  std::optional<int> k1, k2;
};

ksm::RunConfig resolve(const Overrides& o) {
  ksm::RunConfig c = o.config.empty() ? ksm::RunConfig{} : ksm::load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.threads) c.solver.threads = *o.threads;
  if (o.d0) c.net.d0 = *o.d0;
  if (o.k1 || o.k2) {
    if (c.grid.breakpoints) throw ksm::ConfigError("--k1/--k2 conflict with explicit grid breakpoints");
    if (o.k1) c.grid.k1 = *o.k1;
    if (o.k2) c.grid.k2 = *o.k2;
  }
  c.validate();
  return c;
}

void print_report(const ksm::IterationReport& r) {
  std::printf("iter %3d  train %.3e  holdout %.3e  residual %.3e  policy change %.3e  %.1fs\n", r.iteration,
              (r.train_mse[0] + r.train_mse[1] + r.train_mse[2] + r.train_mse[3]) / 4,
              (r.holdout_mse[0] + r.holdout_mse[1] + r.holdout_mse[2] + r.holdout_mse[3]) / 4,
              r.mean_holdout_residual(), r.policy_change, r.wall_seconds);
}

int run(int argc, char** argv) {
  CLI::App app{"Krusell-Smith master equation solver"};
  app.require_subcommand(1);
  Overrides o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config (comments allowed)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "run directory");
    sub->add_option("--threads", o.threads, "worker cap, 0 = all cores; results do not depend on it");
    sub->add_option("--d0", o.d0, "number of adaptive features");
    sub->add_option("--k1", o.k1, "equal-mass cells for y_1");
    sub->add_option("--k2", o.k2, "equal-mass cells for y_2");
  };

  auto* aiyagari = app.add_subcommand("aiyagari", "equilibrium and grid");
  add_common(aiyagari);
  auto* sample = app.add_subcommand("sample-measures", "write the training sample set");
  add_common(sample);
  auto* solve = app.add_subcommand("solve", "full pipeline into the run directory");
  add_common(solve);
  auto* defaults = app.add_subcommand("default-config", "print the default configuration");

  auto* exp = app.add_subcommand("export", "CSV from a run directory");
  std::string kind, run_dir = "run", output;
  ksm::ExportOptions eo;
  exp->add_option("kind", kind, "contour | policy-slice | feature-surface | scatter")->required();
  exp->add_option("--run", run_dir, "run directory");
  exp->add_option("-o,--output", output, "output file (default: stdout)");
  exp->add_option("--iteration", eo.iteration, "outer iteration, 0 = last");
  exp->add_option("--feature", eo.feature, "fixed F1 of the contour (default: sample median)");
  exp->add_option("--nx", eo.x_points, "x resolution");
  exp->add_option("--nr", eo.r_points, "r resolution");
  exp->add_option("--nf", eo.feature_points, "F1 resolution");
  exp->add_option("--x-min", eo.x_min);
  exp->add_option("--x-max", eo.x_max);
  exp->add_option("--r-min", eo.r_min);
  exp->add_option("--r-max", eo.r_max);
  exp->add_option("--f-min", eo.feature_min);
  exp->add_option("--f-max", eo.feature_max);
  exp->add_option("--surface-x", eo.surface_x, "capital values of feature-surface")->delimiter(',');
  exp->add_option("--measure", eo.measure, "policy-slice at this sample measure instead of the Aiyagari one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*defaults) {
    std::cout << ksm::default_config_text();
  } else if (*aiyagari) {
    const auto c = resolve(o);
    const auto eq = ksm::cmd_aiyagari(c);
    std::printf("r* = %.6f  w* = %.6f  K = %.6f  gap = %.2e  -> %s\n", eq.r, eq.w, eq.aggregates.capital,
                eq.clearing_gap, c.out.string().c_str());
  } else if (*sample) {
    const auto c = resolve(o);
    const auto s = ksm::cmd_sample_measures(c);
    std::printf("%zu measures, %zu points -> %s\n", s.groups.size(), s.size(),
                (c.out / "samples.json").string().c_str());
  } else if (*solve) {
    const auto c = resolve(o);
    const auto h = ksm::cmd_solve(c);
    for (const auto& r : h.reports) print_report(r);
    std::printf("%s after %zu iterations -> %s\n", h.converged ? "converged" : "stopped", h.reports.size(),
                c.out.string().c_str());
  } else if (*exp) {
    eo.kind = ksm::parse_export_kind(kind);
    const auto csv = ksm::cmd_export(run_dir, eo);
    if (output.empty()) {
      std::cout << csv;
    } else {
      ksm::write_text_file(output, csv);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ksm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ksm::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ksm::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
