#pragma once

#include <array>
#include <memory>
#include <vector>

#include "ksm/economy.hpp"
#include "ksm/measures.hpp"
#include "ksm/transport.hpp"

namespace ksm {

// Stationary no-aggregate-shock economy: A = 1, mu = 0.
struct AiyagariConfig {
  int value_nodes = 401;  // uniform grid of the household value function
  double value_margin = 10.0;  // the value grid extends to x_hi + value_margin
  int fine_nodes = 600;   // geometric grid of the stationary measure
  double node_growth = 1.01;  // ratio of consecutive fine-grid spacings
  double presolve_tol = 1e-6;  // exact-max iteration before Newton
  int value_max_iter = 50000;
  double value_tol = 1e-9;
  int newton_max_iter = 50;
  double measure_tol = 1e-10;  // total variation change per step
  int measure_max_iter = 2000000;
  double clearing_tol = 1e-4;
  int bisection_max_iter = 100;

  void validate() const;
  Json to_json() const;
  static AiyagariConfig from_json(const Json& j);
};

// Geometric nodes on [lo, hi], denser near lo.
std::vector<double> geometric_nodes(double lo, double hi, int n, double growth);

/// Household value on a uniform node grid, one row per productivity level.
///
/// Between nodes the value is a cubic B-spline; decisions anywhere follow the
/// constrained consumption rule with the spline derivative as the costate.
/// The grid reaches past x_hi and savings are capped only at its last node,
/// so on [x_lo, x_hi] the rule is the untruncated one.
class Household {
 public:
  Household() = default;
  Household(Prices prices, std::vector<double> nodes, std::array<std::vector<double>, kLevels> value,
            int iterations = 0, double residual = 0.0);

  Prices prices() const { return prices_; }
  const std::vector<double>& nodes() const { return nodes_; }
  const std::vector<double>& value(int level) const { return value_[level]; }
  int iterations() const { return iterations_; }
  // Sup-norm change of the last Bellman sweep.
  double residual() const { return residual_; }

  double value_at(double x, int level) const;
  double dvdx_at(double x, int level) const;
  Decision decision_at(double x, int level, const EconomyParams& params) const;
  double savings_at(double x, int level, const EconomyParams& params) const {
    return decision_at(x, level, params).savings;
  }

 private:
  struct Splines;
  Prices prices_{};
  std::vector<double> nodes_;
  std::array<std::vector<double>, kLevels> value_;
  int iterations_ = 0;
  double residual_ = 0.0;
  std::shared_ptr<const Splines> splines_;
};

// Uniform nodes on [lo, hi].
std::vector<double> uniform_nodes(double lo, double hi, int n);

// Value of the semi-Lagrangian Bellman operator with the constrained
// consumption rule, to a sup-norm change below config.value_tol. With
// strict = false a stalled Newton stage returns its best iterate instead of
// throwing; check residual().
Household solve_individual(Prices prices, const EconomyParams& params, const AiyagariConfig& config,
                           bool strict = true);

// Expected-split transport iterated to a fixed point from the uniform measure.
DiscreteMeasure stationary_measure(const BatchSavings& policy, std::shared_ptr<const Grid> grid,
                                   const EconomyParams& params, const TransportConfig& transport,
                                   const AiyagariConfig& config, int* iterations = nullptr);

BatchSavings household_policy(const Household& h, const EconomyParams& params);

// Household problem and stationary measure at one candidate rate.
struct RateEvaluation {
  Household household;
  DiscreteMeasure measure;
  double implied_rate = 0.0;  // +inf when no capital is supplied
  int measure_iterations = 0;
};

RateEvaluation evaluate_rate(double r, std::shared_ptr<const Grid> fine_grid, const EconomyParams& params,
                             const TransportConfig& transport, const AiyagariConfig& config, bool strict = true);

struct AiyagariEquilibrium {
  double r = 0.0;
  double w = 0.0;
  Aggregates aggregates{};
  Household household;
  DiscreteMeasure measure;  // on the fine grid
  double clearing_gap = 0.0;
  int bisection_iterations = 0;
  int measure_iterations = 0;

  // Policies are tabulated on the measure grid nodes.
  Json to_json(const EconomyParams& params) const;
};

AiyagariEquilibrium equilibrium(const EconomyParams& params, const TransportConfig& transport,
                                const AiyagariConfig& config);

}  // namespace ksm
