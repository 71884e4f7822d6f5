#include <cmath>

#include "doctest.h"
#include "ksm/aiyagari.hpp"
#include "ksm/errors.hpp"

using namespace ksm;

namespace {

const AiyagariEquilibrium& default_equilibrium() {
  static const AiyagariEquilibrium eq = equilibrium(EconomyParams{}, TransportConfig{}, AiyagariConfig{});
  return eq;
}

}  // namespace

TEST_CASE("node grids") {
  const auto g = geometric_nodes(0.0, 30.0, 600, 1.01);
  REQUIRE(g.size() == 600);
  CHECK(g.front() == 0.0);
  CHECK(g.back() == 30.0);
  CHECK((g[2] - g[1]) / (g[1] - g[0]) == doctest::Approx(1.01));
  const auto u = uniform_nodes(0.0, 30.0, 301);
  CHECK(u[1] == doctest::Approx(0.1));
  CHECK(geometric_nodes(0.0, 1.0, 5, 1.0) == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK_THROWS_AS(geometric_nodes(1.0, 0.0, 5, 1.0), ConfigError);
}

TEST_CASE("household value without switching or returns") {
  EconomyParams p;
  p.lambda = {0.0, 0.0};
  p.mu = {0.0, 0.0};
  const Prices prices{0.0, 0.5};
  const auto h = solve_individual(prices, p, AiyagariConfig{});
  for (int j = 0; j < kLevels; ++j) {
    // Impatient households at the borrowing limit consume w y forever.
    const double stay = utility(p, prices.w * p.y[j]) / p.rho;
    CHECK(h.value_at(p.x_lo, j) == doctest::Approx(stay).epsilon(p.dt * 1e-2));
    CHECK(h.savings_at(p.x_lo, j, p) == 0.0);
  }
}

TEST_CASE("household value is increasing and concave") {
  const EconomyParams p;
  const auto h = solve_individual(prices_from_rate(p, 1.0, 0.05), p, AiyagariConfig{});
  CHECK(h.residual() < 1e-9);
  for (int j = 0; j < kLevels; ++j) {
    const auto& v = h.value(j);
    for (std::size_t k = 1; k < v.size(); ++k) CHECK(v[k] >= v[k - 1]);
    for (std::size_t k = 1; k + 1 < v.size(); ++k) CHECK(v[k + 1] - 2 * v[k] + v[k - 1] <= 1e-9);
  }
  // Productive households are better off at the same wealth.
  for (double x = 0.0; x <= 30.0; x += 0.5) CHECK(h.value_at(x, 1) > h.value_at(x, 0));
  // Feasibility of the rule everywhere; the value grid reaches past x_hi.
  CHECK(h.nodes().back() == doctest::Approx(p.x_hi + AiyagariConfig{}.value_margin));
  for (int j = 0; j < kLevels; ++j) {
    for (double x = 0.0; x <= 30.0; x += 0.01) {
      const double s = h.savings_at(x, j, p);
      CHECK(x + p.dt * s >= p.x_lo - 1e-12);
      CHECK(x + p.dt * s <= h.nodes().back());
    }
  }
  CHECK_THROWS_AS(solve_individual({0.2, 1.0}, p, AiyagariConfig{}), NumericalError);
}

TEST_CASE("stationary measure of pure switching") {
  const EconomyParams p;
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 12, 12));
  BatchSavings still = [](int, std::span<const double>, std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); };
  const auto m = stationary_measure(still, grid, p, TransportConfig{}, AiyagariConfig{});
  const double share_low = p.lambda[1] / (p.lambda[0] + p.lambda[1]);
  CHECK(m.level_mass(0) == doctest::Approx(share_low).epsilon(1e-8));
  CHECK(m.level_mass(1) == doctest::Approx(1.0 - share_low).epsilon(1e-8));
  // With shared breakpoints the uniform start keeps uniform x-marginals.
  for (int j = 0; j < kLevels; ++j) {
    for (int k = 0; k < grid->cells(j); ++k) CHECK(m.density(j, k) == doctest::Approx(m.level_mass(j) / 30.0));
  }
}

TEST_CASE("one-step mass budget at the borrowing limit") {
  EconomyParams p;
  p.lambda = {0.0, 0.0};
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 30, 30));
  const auto m = uniform_measure(grid);
  // Low households dissave one unit per year, high ones hold.
  const PointSavings policy = [&](double x, int j) { return j == 0 ? std::max(-1.0, -x / p.dt) : 0.0; };
  TransportConfig cfg;
  const auto out = push_forward(m, policy, p, cfg);
  // Points of the first cell at (n / 11) reach x_lo when x <= dt * 1.
  double expected = 0.0;
  for (int n = 1; n <= cfg.points_per_cell; ++n) {
    if (n / 11.0 <= p.dt) expected += m.density(0, 0) * 1.0 / cfg.points_per_cell;
  }
  CHECK(expected > 0.0);
  CHECK(out.dirac_lo(0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(out.dirac_lo(1) == 0.0);
}

TEST_CASE("equilibrium") {
  const EconomyParams p;
  const auto& eq = default_equilibrium();
  MESSAGE("r* = " << eq.r << ", w* = " << eq.w << ", X = " << eq.aggregates.capital);
  CHECK(eq.clearing_gap <= 1e-4);
  CHECK(eq.r > -p.delta);
  CHECK(eq.r < p.rho);
  CHECK(eq.household.residual() < 1e-9);

  // Self-consistency with A = 1.
  const auto agg = aggregates(eq.measure, p.y[0], p.y[1]);
  const auto implied = firm_prices(p, 1.0, agg);
  CHECK(std::abs(implied.r - eq.r) <= 1e-4);
  CHECK(eq.w == doctest::Approx(prices_from_rate(p, 1.0, eq.r).w).epsilon(1e-14));

  // The credit constraint binds for the low-productivity household.
  CHECK(eq.measure.dirac_lo(0) > 0.0);
  CHECK(eq.household.savings_at(p.x_lo, 0, p) == 0.0);
  CHECK(eq.household.decision_at(p.x_lo, 0, p).constrained);

  // Stationarity.
  TransportConfig cfg;
  const auto again = push_forward(eq.measure, BatchSavings(household_policy(eq.household, p)), p, cfg);
  CHECK(total_variation(eq.measure.grid(), again.coefficients(), eq.measure.coefficients()) <= 1e-9);

  CHECK_NOTHROW(equal_mass_grid(eq.measure, 17, 10));

  const auto j = eq.to_json(p);
  CHECK(j.at("savings_y1").size() == eq.measure.grid().breaks(0).size());
  CHECK(DiscreteMeasure::from_json(j.at("measure")).total_mass() == doctest::Approx(1.0));
}

TEST_CASE("bisection bracket and refinement") {
  EconomyParams p;
  p.mu = {0.0, 0.0};
  const AiyagariConfig cfg;
  auto fine = std::make_shared<const Grid>(Grid(geometric_nodes(0.0, 30.0, cfg.fine_nodes, cfg.node_growth),
                                                geometric_nodes(0.0, 30.0, cfg.fine_nodes, cfg.node_growth)));
  const double lo = -p.delta + 1e-4, hi = p.rho - 1e-4;
  CHECK(evaluate_rate(lo, fine, p, TransportConfig{}, cfg, false).implied_rate > lo);
  CHECK(evaluate_rate(hi, fine, p, TransportConfig{}, cfg, false).implied_rate < hi);

  // Twice the nodes with the square-root growth, roughly halving every cell.
  AiyagariConfig finer = cfg;
  finer.fine_nodes = 2 * cfg.fine_nodes - 1;
  finer.node_growth = std::sqrt(cfg.node_growth);
  const auto eq2 = equilibrium(EconomyParams{}, TransportConfig{}, finer);
  CHECK(std::abs(eq2.r - default_equilibrium().r) < 1e-3);
}
