#pragma once

#include <array>
#include <optional>

#include "ksm/json_io.hpp"
#include "ksm/measures.hpp"

namespace ksm {

// Aggregate productivity states are indexed 0 (A1, slow) and 1 (A2, fast).
inline constexpr int kAggregateStates = 2;

/// Scalar model constants. Rates are per year.
struct EconomyParams {
  double alpha = 0.5;                       // capital share
  double delta = 0.05;                      // depreciation
  double rho = 0.15;                        // discount rate
  double gamma = 2.0;                       // CRRA coefficient
  std::array<double, 2> A{0.9, 1.1};        // aggregate productivity A1 < A2
  std::array<double, 2> mu{0.2, 0.2};       // aggregate switching intensities
  std::array<double, 2> y{0.7, 1.4};        // idiosyncratic productivity y1 < y2
  std::array<double, 2> lambda{0.05, 0.1};  // idiosyncratic switching intensities
  double x_lo = 0.0;                        // borrowing limit
  double x_hi = 30.0;                       // truncation of the wealth support
  double dt = 0.25;                         // time step
  double eps_p = 1e-10;                     // floor on the co-state in the consumption rule

  void validate() const;
  double discount() const { return 1.0 + rho * dt; }

  Json to_json() const;
  static EconomyParams from_json(const Json& j);
};

struct Prices {
  double r;
  double w;
};

double production(const EconomyParams& p, double capital, double labor, int i);

// Firm first order conditions with an explicit productivity level.
Prices firm_prices(const EconomyParams& p, double productivity, Aggregates agg);
// Inverse of the capital demand: the wage consistent with rate r at productivity A.
Prices prices_from_rate(const EconomyParams& p, double productivity, double r);

Prices factor_prices(const EconomyParams& p, const DiscreteMeasure& m, int i);
Prices factor_prices(const EconomyParams& p, const Grid& grid, std::span<const double> coefficients, int i);
// nullopt when aggregates are degenerate.
std::optional<Prices> try_factor_prices(const EconomyParams& p, const Grid& grid, std::span<const double> coefficients,
                                        int i);

double utility(const EconomyParams& p, double c);
double marginal_utility(const EconomyParams& p, double c);

// H(p) = max_{c >= 0} (-p c + u(c)); finite only for p > 0.
double hamiltonian(const EconomyParams& p, double costate);
double hamiltonian_prime(const EconomyParams& p, double costate);

struct Decision {
  double consumption;
  double savings;
  bool constrained;  // budget branch of the min; x + dt * savings == x_lo exactly
};

// Largest consumption keeping x + dt * s >= x_lo.
double consumption_budget(const EconomyParams& p, double x, Prices prices, double y);

double optimal_consumption(const EconomyParams& p, double x, double dvdx, Prices prices, double y);
double savings(const EconomyParams& p, double x, Prices prices, double y, double consumption);

// Consumption and savings together; constrained savings are -(x - x_lo)/dt.
Decision decide(const EconomyParams& p, double x, double dvdx, Prices prices, double y);

// decide() with savings also capped at (x_hi - x) / dt, so wealth stays in
// [x_lo, x_hi]; a capped decision is flagged constrained.
Decision decide_capped(const EconomyParams& p, double x, double dvdx, Prices prices, double y);

}  // namespace ksm
