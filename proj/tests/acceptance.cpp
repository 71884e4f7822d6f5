// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--work DIR] [--seed N]
//
// Criteria 6 to 9 share one desk-scale solve (run_a); 9 repeats it (run_b).
// Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "ksm/economy.hpp"
#include "ksm/export.hpp"
#include "ksm/run.hpp"
#include "ksm/transport.hpp"
#include "oracles.hpp"

using namespace ksm;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kMassTol = 1e-12;
constexpr double kDualityTol = 1e-10;
constexpr double kDerivativeTol = 1e-6;
constexpr double kGradientTol = 1e-6;
constexpr double kFrozenTol = 2e-2;
constexpr double kClearingTol = 1e-4;
constexpr double kOrderingShare = 0.9;
constexpr double kResidualRatio = 0.5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Exact mass conservation of push_forward.
Outcome mass_conservation(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const EconomyParams p;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  int negative = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto grid = std::make_shared<const Grid>(oracle::random_grid(p.x_lo, p.x_hi, 1 + trial % 12, 1 + trial % 9, rng));
    const DiscreteMeasure m(grid, oracle::random_coefficients(*grid, rng, 0.2));
    // Lipschitz rule, clipped at the borrowing limit.
    const double a0 = u(rng), b0 = 0.1 * u(rng), c0 = u(rng), a1 = u(rng), b1 = 0.1 * u(rng), c1 = u(rng);
    const PointSavings policy = [=](double x, int level) {
      const double s = level == 0 ? a0 + b0 * x + c0 * std::sin(x) : a1 + b1 * x + c1 * std::cos(x);
      return std::max(s, -(x - p.x_lo) / p.dt);
    };
    for (auto mode : {SplitMode::Expected, SplitMode::Sampled}) {
      TransportConfig cfg;
      cfg.points_per_cell = 1 + trial % 10;
      cfg.mode = mode;
      cfg.rng_seed = static_cast<std::uint64_t>(trial);
      const auto out = push_forward(m, policy, p, cfg);
      worst = std::max(worst, std::abs(out.total_mass() - 1.0));
      for (double c : out.coefficients()) negative += c < 0.0;
    }
  }
  const double t = since(t0);
  return {worst <= kMassTol && negative == 0 && t < 10.0,
          fmt("2000 transports, max |mass - 1| = %.2e (tol %.0e), %d negative coefficients, %.1fs (< 10s)", worst,
              kMassTol, negative, t)};
}

// 2. H(p) = max_c (-p c + u(c)) and H' against finite differences.
Outcome hamiltonian_duality(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> logu(std::log(1e-2), std::log(1e2));
  double worst_gap = 0.0, worst_eq = 0.0, worst_d = 0.0;
  int violations = 0;
  for (double gamma : {0.5, 2.0, 3.0}) {
    EconomyParams e;
    e.gamma = gamma;
    for (int k = 0; k < 100000; ++k) {
      const double p = std::exp(logu(rng)), c = std::exp(logu(rng));
      const double h = hamiltonian(e, p);
      const double lower = -p * c + utility(e, c);
      const double scale = std::max({std::abs(h), std::abs(lower), 1e-300});
      if (h < lower - kDualityTol * scale) ++violations;
      worst_gap = std::max(worst_gap, (lower - h) / scale);
      const double cs = std::pow(p, -1.0 / gamma);
      const double at = -p * cs + utility(e, cs);
      worst_eq = std::max(worst_eq, std::abs(h - at) / std::max(std::abs(h), 1e-300));
      const double dp = 1e-5 * p;
      const double fd = (hamiltonian(e, p + dp) - hamiltonian(e, p - dp)) / (2.0 * dp);
      const double hp = hamiltonian_prime(e, p);
      worst_d = std::max(worst_d, std::abs(hp - fd) / std::max(std::abs(hp), 1e-300));
    }
  }
  return {violations == 0 && worst_eq <= kDualityTol && worst_d <= kDerivativeTol,
          fmt("3 x 1e5 pairs, %d violations (max excess %.1e), equality rel err %.1e (tol %.0e), H' rel err %.1e "
              "(tol %.0e)",
              violations, std::max(0.0, worst_gap), worst_eq, kDualityTol, worst_d, kDerivativeTol)};
}

// 3. Backpropagation against central differences.
Outcome gradient_check(std::uint64_t seed) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(1, 5), depth(0, 3), dd(1, 8), d0(0, 3);
  std::uniform_real_distribution<double> u(0.5, 2.0), ux(0.0, 30.0), ur(0.0, 0.08), um(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Relative to max(|a|, |b|, floor) so cancellation noise in near-zero
  // components does not dominate.
  const double floor = 1e-4;
  double worst_param = 0.0, worst_x = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    NetSpec spec;
    spec.d = dd(rng);
    spec.d0 = d0(rng);
    spec.feature_embed = dim(rng);
    spec.rate_embed = dim(rng);
    spec.capital_embed = dim(rng);
    spec.trunk.clear();
    for (int l = depth(rng); l > 0; --l) spec.trunk.push_back(dim(rng));
    InputScaling sc;
    sc.x_shift = u(rng);
    sc.x_scale = u(rng) / 30.0;
    if (trial % 2 == 1) sc.x_stretch = 0.5 * u(rng);
    sc.r_shift = 0.03;
    sc.r_scale = 20.0 * u(rng);
    for (int k = 0; k < spec.d; ++k) sc.mass_weights.push_back(u(rng));
    sc.value_shift = -3.0;
    sc.value_scale = u(rng);
    ValueNetwork net(spec, sc);
    net.initialize(derive_seed(seed, {static_cast<std::uint64_t>(trial)}));

    NetBatch batch;
    const int n = 4;
    batch.x.resize(n);
    batch.r.resize(n);
    batch.M.resize(spec.d, n);
    for (int c = 0; c < n; ++c) {
      batch.x(c) = c == 0 ? 0.01 : ux(rng);
      batch.r(c) = ur(rng);
      for (int k = 0; k < spec.d; ++k) batch.M(k, c) = um(rng);
    }
    Eigen::VectorXd targets = net.forward(batch);
    for (Eigen::Index k = 0; k < targets.size(); ++k) targets(k) += noise(rng);

    std::vector<double> grad(net.parameter_count()), scratch(net.parameter_count());
    net.mse_gradient(batch, targets, grad);
    const std::vector<double> theta(net.parameters().begin(), net.parameters().end());
    ValueNetwork probe = net;
    auto loss = [&](std::span<const double> th) {
      std::copy(th.begin(), th.end(), probe.parameters().begin());
      return probe.mse_gradient(batch, targets, scratch);
    };
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double fd = oracle::richardson_difference(loss, theta, k, 1e-4);
      worst_param = std::max(worst_param, oracle::relative_error(grad[k], fd, floor));
    }
    Eigen::VectorXd dvdx;
    net.evaluate(batch, nullptr, &dvdx);
    for (int c = 0; c < n; ++c) {
      auto value_at = [&](std::span<const double> xv) {
        NetBatch one{Eigen::RowVectorXd::Constant(1, xv[0]), batch.M.col(c), Eigen::RowVectorXd::Constant(1, batch.r(c))};
        return net.forward(one)(0);
      };
      const double fd = oracle::richardson_difference(value_at, {batch.x(c)}, 0, 1e-4);
      worst_x = std::max(worst_x, oracle::relative_error(dvdx(c), fd, floor));
    }
  }
  const double t = since(t0);
  return {worst_param <= kGradientTol && worst_x <= kGradientTol && t < 30.0,
          fmt("20 random specs, parameter rel err %.1e, x rel err %.1e (tol %.0e), %.1fs (< 30s)", worst_param,
              worst_x, kGradientTol, t)};
}

struct Shared {
  std::uint64_t seed = 1;
  fs::path work;
  std::optional<AiyagariEquilibrium> eq;
  double eq_seconds = 0.0;
  std::optional<SolveHistory> run_a;
  double run_a_seconds = 0.0;
};

const AiyagariEquilibrium& shared_equilibrium(Shared& s) {
  if (!s.eq) {
    const auto t0 = Clock::now();
    s.eq = equilibrium(EconomyParams{}, TransportConfig{}, AiyagariConfig{});
    s.eq_seconds = since(t0);
  }
  return *s.eq;
}

// 5. Aiyagari market clearing and a binding constraint.
Outcome aiyagari_consistency(Shared& s) {
  const auto& eq = shared_equilibrium(s);
  const double dirac = eq.measure.dirac_lo(0);
  return {std::abs(eq.clearing_gap) <= kClearingTol && dirac > 0.0 && s.eq_seconds < 300.0,
          fmt("r* = %.6f, w* = %.6f, clearing gap %.1e (tol %.0e), y1 mass at x_lo %.4f (> 0), %.1fs (< 300s)", eq.r,
              eq.w, eq.clearing_gap, kClearingTol, dirac, s.eq_seconds)};
}

// 4. Frozen-measure mode against the grid value iteration.
Outcome frozen_oracle(Shared& s) {
  const auto& eq = shared_equilibrium(s);
  const auto t0 = Clock::now();
  EconomyParams p;
  p.mu = {0.0, 0.0};
  const auto grid = std::make_shared<const Grid>(equal_mass_grid(eq.measure, 4, 4));
  NetSpec spec;
  spec.d0 = 0;
  spec.rate_embed = 4;
  spec.capital_embed = 64;
  spec.trunk = {32, 16};
  const auto res = frozen_measure_mode(p, Prices{eq.r, eq.w}, project(eq.measure, grid), spec, FrozenConfig{},
                                       derive_seed(s.seed, {4}));
  double worst = 0.0, at = 0.0;
  int level = 0;
  for (int j = 0; j < kLevels; ++j) {
    for (double x : eq.measure.grid().breaks(j)) {
      const double e = std::abs(res.decision_at(x, j, p).savings - eq.household.savings_at(x, j, p));
      if (e > worst) {
        worst = e;
        at = x;
        level = j;
      }
    }
  }
  const double t = since(t0);
  return {worst <= kFrozenTol && t < 600.0,
          fmt("sup |s_net - s_grid| = %.4f at x = %.4f, y%d (tol %.0e) on %zu fine nodes, %d iterations, %.1fs "
              "(< 600s)",
              worst, at, level + 1, kFrozenTol, eq.measure.grid().breaks(0).size(), res.iterations, t)};
}

RunConfig desk_config(const Shared& s, const std::string& name) {
  RunConfig c;
  c.seed = s.seed;
  c.out = s.work / name;
  c.grid.k1 = 4;
  c.grid.k2 = 4;
  c.net.d0 = 1;
  c.net.feature_embed = 16;
  c.net.rate_embed = 16;
  c.net.capital_embed = 64;
  c.net.trunk = {64, 32, 16};
  c.sampler.measures = 500;
  c.sampler.points_per_measure = 10;
  c.solver.outer_iterations = 10;
  c.solver.threads = 0;
  return c;
}

const std::vector<std::pair<std::string, ExportOptions>>& desk_exports() {
  static const std::vector<std::pair<std::string, ExportOptions>> e = [] {
    std::vector<std::pair<std::string, ExportOptions>> v;
    ExportOptions slice{.kind = ExportKind::PolicySlice, .x_points = 100, .x_min = 0.2, .x_max = 25.0};
    v.emplace_back("policy_slice.csv", slice);
    v.emplace_back("scatter.csv", ExportOptions{.kind = ExportKind::Scatter});
    v.emplace_back("contour.csv", ExportOptions{.kind = ExportKind::Contour, .x_points = 31, .r_points = 21});
    v.emplace_back("feature_surface.csv",
                   ExportOptions{.kind = ExportKind::FeatureSurface, .r_points = 21, .feature_points = 21});
    return v;
  }();
  return e;
}

SolveHistory desk_run(const Shared& s, const std::string& name, double* seconds) {
  const auto c = desk_config(s, name);
  fs::remove_all(c.out);
  const auto t0 = Clock::now();
  auto h = cmd_solve(c);
  *seconds = since(t0);
  const auto run = load_run(c.out);
  for (const auto& [file, options] : desk_exports()) write_text_file(c.out / file, export_csv(run, options));
  return h;
}

const SolveHistory& shared_run(Shared& s) {
  if (!s.run_a) s.run_a = desk_run(s, "run_a", &s.run_a_seconds);
  return *s.run_a;
}

std::vector<std::vector<double>> csv_rows(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

// 6. s_fast >= s_Aiyagari >= s_slow at the Aiyagari measure.
Outcome policy_ordering(Shared& s) {
  shared_run(s);
  const auto rows = csv_rows(s.work / "run_a" / "policy_slice.csv");
  std::array<int, kLevels> ok{}, n{};
  for (const auto& r : rows) {
    const int j = static_cast<int>(r[0]) - 1;
    ++n[j];
    ok[j] += r[3] >= r[4] && r[4] >= r[2];
  }
  const double share = static_cast<double>(ok[0] + ok[1]) / static_cast<double>(n[0] + n[1]);
  return {share >= kOrderingShare && s.run_a_seconds < 1800.0,
          fmt("ordering holds at %d/%d points on [0.2, 25] (y1 %d/%d, y2 %d/%d), share %.3f (>= %.2f), solve %.0fs "
              "(< 1800s)",
              ok[0] + ok[1], n[0] + n[1], ok[0], n[0], ok[1], n[1], share, kOrderingShare, s.run_a_seconds)};
}

// 7. Holdout residual after the last iteration against the first.
Outcome training_progress(Shared& s) {
  const auto& h = shared_run(s);
  const double first = h.reports.front().mean_holdout_residual();
  const double last = h.reports.back().mean_holdout_residual();
  return {last <= kResidualRatio * first,
          fmt("mean holdout squared residual %.3e after iteration 1, %.3e after iteration %d, ratio %.3f (<= %.1f)",
              first, last, h.reports.back().iteration, last / first, kResidualRatio)};
}

// 8. Pearson correlation between r and F1 per network.
Outcome scatter_report(Shared& s) {
  shared_run(s);
  std::ifstream in(s.work / "run_a" / "scatter.csv");
  std::string line, values;
  int found = 0;
  bool finite = true;
  while (std::getline(in, line)) {
    const auto at = line.find("pearson=");
    if (line.rfind("# i=", 0) != 0 || at == std::string::npos) continue;
    const double v = std::stod(line.substr(at + 8));
    finite = finite && std::isfinite(v);
    values += (found++ ? ", " : "") + line.substr(2, 7) + " " + fmt("%.3f", v);
  }
  return {found == kNets && finite, fmt("%d correlations recorded: %s", found, values.c_str())};
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. A second identical run reproduces every checkpoint and CSV byte for byte.
Outcome determinism(Shared& s) {
  const auto& a = shared_run(s);
  double seconds = 0.0;
  desk_run(s, "run_b", &seconds);
  const fs::path ra = s.work / "run_a", rb = s.work / "run_b";
  int compared = 0;
  std::vector<std::string> differ;
  auto compare = [&](const fs::path& rel) {
    ++compared;
    if (!fs::exists(rb / rel) || file_bytes(ra / rel) != file_bytes(rb / rel)) differ.push_back(rel.string());
  };
  for (int n = 1; n <= static_cast<int>(a.reports.size()); ++n) {
    const auto dir = iteration_dir({}, n);
    for (int i = 0; i < kAggregateStates; ++i) {
      for (int j = 0; j < kLevels; ++j) compare(dir / net_file_name(i, j));
    }
    compare(dir / "samples.json");
  }
  for (const auto& [file, options] : desk_exports()) compare(file);
  for (const char* f : {"aiyagari.json", "grid.json", "samples.json"}) compare(f);
  return {differ.empty(), fmt("%d files compared, %zu differ%s%s", compared, differ.size(), differ.empty() ? "" : ": ",
                              differ.empty() ? "" : differ.front().c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  Shared shared;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "directory for the desk-scale runs");
  app.add_option("--seed", shared.seed, "master seed");
  CLI11_PARSE(app, argc, argv);
  shared.work = work;

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"mass conservation", [&] { return mass_conservation(derive_seed(shared.seed, {1})); }}},
      {2, {"Hamiltonian duality", [&] { return hamiltonian_duality(derive_seed(shared.seed, {2})); }}},
      {3, {"network gradient check", [&] { return gradient_check(derive_seed(shared.seed, {3})); }}},
      {4, {"frozen-measure oracle", [&] { return frozen_oracle(shared); }}},
      {5, {"Aiyagari self-consistency", [&] { return aiyagari_consistency(shared); }}},
      {6, {"policy ordering", [&] { return policy_ordering(shared); }}},
      {7, {"training progress", [&] { return training_progress(shared); }}},
      {8, {"correlation report", [&] { return scatter_report(shared); }}},
      {9, {"determinism", [&] { return determinism(shared); }}},
  };
  const std::set<int> chosen(only.begin(), only.end());
  int failed = 0;
  for (const auto& [id, c] : criteria) {
    if (!chosen.empty() && !chosen.contains(id)) continue;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %d. %s: %s\n", o.pass ? "PASS" : "FAIL", id, c.first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
