#include "ksm/economy.hpp"

#include <cmath>
#include <string>

#include "ksm/errors.hpp"

namespace ksm {

void EconomyParams::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("economy: " + what); };
  if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must lie in (0,1)");
  if (!(gamma > 0.0) || gamma == 1.0) fail("gamma must be positive and different from 1");
  if (!(A[0] < A[1])) fail("A1 < A2 required");
  if (!(y[0] < y[1])) fail("y1 < y2 required");
  if (!(x_lo < x_hi)) fail("x_lo < x_hi required");
  if (!(dt > 0.0)) fail("dt must be positive");
  if (!(eps_p > 0.0)) fail("eps_p must be positive");
  for (int k = 0; k < 2; ++k) {
    if (lambda[k] < 0.0 || mu[k] < 0.0) fail("switching intensities must be nonnegative");
    if (!(lambda[k] * dt < 1.0) || !(mu[k] * dt < 1.0)) fail("intensity * dt must stay below 1");
  }
}

Json EconomyParams::to_json() const {
  return Json{{"alpha", alpha}, {"delta", delta}, {"rho", rho},       {"gamma", gamma},
              {"A", A},         {"mu", mu},       {"y", y},           {"lambda", lambda},
              {"x_lo", x_lo},   {"x_hi", x_hi},   {"dt", dt},         {"eps_p", eps_p}};
}

EconomyParams EconomyParams::from_json(const Json& j) {
  EconomyParams p;
  try {
    p.alpha = j.value("alpha", p.alpha);
    p.delta = j.value("delta", p.delta);
    p.rho = j.value("rho", p.rho);
    p.gamma = j.value("gamma", p.gamma);
    p.A = j.value("A", p.A);
    p.mu = j.value("mu", p.mu);
    p.y = j.value("y", p.y);
    p.lambda = j.value("lambda", p.lambda);
    p.x_lo = j.value("x_lo", p.x_lo);
    p.x_hi = j.value("x_hi", p.x_hi);
    p.dt = j.value("dt", p.dt);
    p.eps_p = j.value("eps_p", p.eps_p);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("economy: ") + e.what());
  }
  p.validate();
  return p;
}

double production(const EconomyParams& p, double capital, double labor, int i) {
  if (!(capital > 0.0) || !(labor > 0.0)) throw NumericalError("production needs positive capital and labor");
  return p.A[i] * std::pow(capital, p.alpha) * std::pow(labor, 1.0 - p.alpha);
}

Prices firm_prices(const EconomyParams& p, double productivity, Aggregates agg) {
  if (!(agg.capital > 0.0) || !(agg.labor > 0.0)) {
    throw NumericalError("degenerate aggregates: X=" + format_double(agg.capital) +
                         " Y=" + format_double(agg.labor));
  }
  const double ratio = agg.labor / agg.capital;
  return {p.alpha * productivity * std::pow(ratio, 1.0 - p.alpha) - p.delta,
          (1.0 - p.alpha) * productivity * std::pow(ratio, -p.alpha)};
}

Prices prices_from_rate(const EconomyParams& p, double productivity, double r) {
  if (!(r + p.delta > 0.0)) throw NumericalError("interest rate must exceed -delta");
  // r + delta = alpha A (Y/X)^(1-alpha)
  const double capital_per_labor = std::pow(p.alpha * productivity / (r + p.delta), 1.0 / (1.0 - p.alpha));
  return {r, (1.0 - p.alpha) * productivity * std::pow(capital_per_labor, p.alpha)};
}

Prices factor_prices(const EconomyParams& p, const Grid& grid, std::span<const double> c, int i) {
  return firm_prices(p, p.A[i], aggregates(grid, c, p.y[0], p.y[1]));
}

Prices factor_prices(const EconomyParams& p, const DiscreteMeasure& m, int i) {
  return factor_prices(p, m.grid(), m.coefficients(), i);
}

std::optional<Prices> try_factor_prices(const EconomyParams& p, const Grid& grid, std::span<const double> c, int i) {
  const auto agg = aggregates(grid, c, p.y[0], p.y[1]);
  if (!(agg.capital > 0.0) || !(agg.labor > 0.0)) return std::nullopt;
  return firm_prices(p, p.A[i], agg);
}

double utility(const EconomyParams& p, double c) {
  if (!(c > 0.0)) throw NumericalError("utility needs positive consumption");
  return std::pow(c, 1.0 - p.gamma) / (1.0 - p.gamma);
}

double marginal_utility(const EconomyParams& p, double c) {
  if (!(c > 0.0)) throw NumericalError("marginal utility needs positive consumption");
  return std::pow(c, -p.gamma);
}

double hamiltonian(const EconomyParams& p, double costate) {
  if (!(costate > 0.0)) throw NumericalError("infinite Hamiltonian for nonpositive co-state");
  return p.gamma / (1.0 - p.gamma) * std::pow(costate, 1.0 - 1.0 / p.gamma);
}

double hamiltonian_prime(const EconomyParams& p, double costate) {
  if (!(costate > 0.0)) throw NumericalError("infinite Hamiltonian for nonpositive co-state");
  return -std::pow(costate, -1.0 / p.gamma);
}

double consumption_budget(const EconomyParams& p, double x, Prices prices, double y) {
  return (x - p.x_lo) / p.dt + prices.w * y + prices.r * x;
}

double optimal_consumption(const EconomyParams& p, double x, double dvdx, Prices prices, double y) {
  return decide(p, x, dvdx, prices, y).consumption;
}

double savings(const EconomyParams& p, double x, Prices prices, double y, double consumption) {
  const double budget = consumption_budget(p, x, prices, y);
  if (consumption >= budget) return -(x - p.x_lo) / p.dt;
  return prices.w * y + prices.r * x - consumption;
}

Decision decide(const EconomyParams& p, double x, double dvdx, Prices prices, double y) {
  const double budget = consumption_budget(p, x, prices, y);
  if (!(budget > 0.0)) {
    throw NumericalError("infeasible state: consumption budget " + format_double(budget) + " at x=" +
                         format_double(x));
  }
  if (std::isnan(dvdx)) throw NumericalError("NaN value gradient at x=" + format_double(x));
  const double free = -hamiltonian_prime(p, std::max(dvdx, p.eps_p));
  if (free >= budget) return {budget, -(x - p.x_lo) / p.dt, true};
  return {free, prices.w * y + prices.r * x - free, false};
}

Decision decide_capped(const EconomyParams& p, double x, double dvdx, Prices prices, double y) {
  const auto d = decide(p, x, dvdx, prices, y);
  const double s_max = (p.x_hi - x) / p.dt;
  if (d.savings <= s_max) return d;
  return {prices.w * y + prices.r * x - s_max, s_max, true};
}

}  // namespace ksm
