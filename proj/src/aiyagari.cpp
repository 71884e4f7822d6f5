#include "ksm/aiyagari.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/tools/minima.hpp>

#include "ksm/errors.hpp"

namespace ksm {

namespace {

using Spline = boost::math::interpolators::cardinal_cubic_b_spline<double>;

Spline make_spline(const std::vector<double>& nodes, const std::vector<double>& values) {
  return Spline(values.data(), values.size(), nodes.front(), nodes[1] - nodes[0]);
}

}  // namespace

void AiyagariConfig::validate() const {
  if (value_nodes < 5) throw ConfigError("aiyagari: value_nodes must be >= 5");
  if (!(value_margin >= 0)) throw ConfigError("aiyagari: value_margin must be >= 0");
  if (fine_nodes < 3) throw ConfigError("aiyagari: fine_nodes must be >= 3");
  if (!(node_growth >= 1.0)) throw ConfigError("aiyagari: node_growth must be >= 1");
  if (!(value_tol > 0) || !(measure_tol > 0) || !(clearing_tol > 0)) {
    throw ConfigError("aiyagari: tolerances must be positive");
  }
  if (!(presolve_tol > 0)) throw ConfigError("aiyagari: presolve_tol must be positive");
  if (newton_max_iter < 1 || value_max_iter < 1 || measure_max_iter < 1 || bisection_max_iter < 1) {
    throw ConfigError("aiyagari: iteration limits must be positive");
  }
}

Json AiyagariConfig::to_json() const {
  return Json{{"value_nodes", value_nodes},         {"value_margin", value_margin},
              {"presolve_tol", presolve_tol},
              {"newton_max_iter", newton_max_iter}, {"fine_nodes", fine_nodes},
              {"node_growth", node_growth},
              {"value_tol", value_tol},             {"value_max_iter", value_max_iter},
              {"measure_tol", measure_tol},         {"measure_max_iter", measure_max_iter},
              {"clearing_tol", clearing_tol},       {"bisection_max_iter", bisection_max_iter}};
}

AiyagariConfig AiyagariConfig::from_json(const Json& j) {
  AiyagariConfig c;
  try {
    c.value_nodes = j.value("value_nodes", c.value_nodes);
    c.value_margin = j.value("value_margin", c.value_margin);
    c.presolve_tol = j.value("presolve_tol", c.presolve_tol);
    c.newton_max_iter = j.value("newton_max_iter", c.newton_max_iter);
    c.fine_nodes = j.value("fine_nodes", c.fine_nodes);
    c.node_growth = j.value("node_growth", c.node_growth);
    c.value_tol = j.value("value_tol", c.value_tol);
    c.value_max_iter = j.value("value_max_iter", c.value_max_iter);
    c.measure_tol = j.value("measure_tol", c.measure_tol);
    c.measure_max_iter = j.value("measure_max_iter", c.measure_max_iter);
    c.clearing_tol = j.value("clearing_tol", c.clearing_tol);
    c.bisection_max_iter = j.value("bisection_max_iter", c.bisection_max_iter);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("aiyagari: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> geometric_nodes(double lo, double hi, int n, double growth) {
  if (n < 2 || !(hi > lo)) throw ConfigError("geometric_nodes: need n >= 2 and hi > lo");
  std::vector<double> x(static_cast<std::size_t>(n));
  const double total = growth == 1.0 ? n - 1.0 : (std::pow(growth, n - 1) - 1.0) / (growth - 1.0);
  double acc = 0.0, step = 1.0;
  for (int k = 0; k < n; ++k) {
    x[k] = lo + (hi - lo) * acc / total;
    acc += step;
    step *= growth;
  }
  x.back() = hi;
  return x;
}

std::vector<double> uniform_nodes(double lo, double hi, int n) {
  if (n < 2 || !(hi > lo)) throw ConfigError("uniform_nodes: need n >= 2 and hi > lo");
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) x[k] = lo + (hi - lo) * k / (n - 1.0);
  x.back() = hi;
  return x;
}

struct Household::Splines {
  std::array<Spline, kLevels> level;
};

Household::Household(Prices prices, std::vector<double> nodes, std::array<std::vector<double>, kLevels> value,
                     int iterations, double residual)
    : prices_(prices),
      nodes_(std::move(nodes)),
      value_(std::move(value)),
      iterations_(iterations),
      residual_(residual) {
  auto s = std::make_shared<Splines>();
  for (int j = 0; j < kLevels; ++j) s->level[j] = make_spline(nodes_, value_[j]);
  splines_ = std::move(s);
}

double Household::value_at(double x, int level) const {
  return splines_->level[level](std::clamp(x, nodes_.front(), nodes_.back()));
}

double Household::dvdx_at(double x, int level) const {
  return splines_->level[level].prime(std::clamp(x, nodes_.front(), nodes_.back()));
}

Decision Household::decision_at(double x, int level, const EconomyParams& params) const {
  EconomyParams extended = params;
  extended.x_hi = nodes_.back();
  return decide_capped(extended, x, dvdx_at(x, level), prices_, params.y[level]);
}

namespace {

using Values = std::array<std::vector<double>, kLevels>;

// One application of the Bellman operator with consumption from `choose`.
template <typename Choose>
double bellman_sweep(const std::vector<double>& nodes, const Values& v, Values& out, const EconomyParams& params,
                     Prices prices, Choose&& choose) {
  double change = 0.0;
  for (int j = 0; j < kLevels; ++j) {
    const Spline s = make_spline(nodes, v[j]);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const double x = nodes[k];
      const double c = choose(s, x, j);
      const double x_next = std::clamp(x + params.dt * (prices.w * params.y[j] + prices.r * x - c), params.x_lo,
                                       params.x_hi);
      out[j][k] = (s(x_next) - params.lambda[j] * params.dt * (v[j][k] - v[1 - j][k]) +
                   params.dt * utility(params, c)) /
                  params.discount();
      change = std::max(change, std::abs(out[j][k] - v[j][k]));
    }
  }
  if (!std::isfinite(change)) throw NumericalError("household value iteration produced a non-finite value");
  return change;
}

}  // namespace

Household solve_individual(Prices prices, const EconomyParams& economy, const AiyagariConfig& config, bool strict) {
  if (!(prices.w > 0.0)) throw NumericalError("household problem needs a positive wage");
  if (!(prices.r < economy.rho)) throw NumericalError("household problem needs r < rho");
  // Truncation effects stay in the margin above the measure support.
  EconomyParams params = economy;
  params.x_hi = economy.x_hi + config.value_margin;
  const auto nodes = uniform_nodes(params.x_lo, params.x_hi, config.value_nodes);
  const std::size_t n = nodes.size();
  Values v, next;
  for (int j = 0; j < kLevels; ++j) {
    v[j].resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      // Consume labor income plus a rho-annuity of wealth forever.
      v[j][k] = utility(params, prices.w * params.y[j] + params.rho * (nodes[k] - params.x_lo)) / params.rho;
    }
  }
  next = v;

  // Stage 1: consumption maximizing the one-step objective. This operator is
  // monotone, so plain iteration converges from any start.
  auto best = [&](const Spline& s, double x, int j) {
    const double income = prices.w * params.y[j] + prices.r * x;
    const double c_hi = (x - params.x_lo) / params.dt + income;
    const double c_lo = std::max(income - (params.x_hi - x) / params.dt, 1e-9 * c_hi);
    auto negative = [&](double c) {
      return -(s(std::clamp(x + params.dt * (income - c), params.x_lo, params.x_hi)) + params.dt * utility(params, c));
    };
    return boost::math::tools::brent_find_minima(negative, c_lo, c_hi, 40).first;
  };
  int it = 0;
  for (; it < config.value_max_iter; ++it) {
    const double change = bellman_sweep(nodes, v, next, params, prices, best);
    std::swap(v, next);
    if (change < config.presolve_tol) break;
  }

  // Stage 2: Newton on the fixed point of the operator with the constrained
  // consumption rule, whose plain iteration is unstable on fine grids.
  auto rule = [&](const Spline& s, double x, int j) {
    return decide_capped(params, x, s.prime(x), prices, params.y[j]).consumption;
  };
  const auto N = static_cast<Eigen::Index>(kLevels * n);
  auto flatten = [&](const Values& a) {
    Eigen::VectorXd f(N);
    for (int j = 0; j < kLevels; ++j) {
      for (std::size_t k = 0; k < n; ++k) f(j * static_cast<Eigen::Index>(n) + static_cast<Eigen::Index>(k)) = a[j][k];
    }
    return f;
  };
  Values probe = v, image = v, trial = v;
  double change = bellman_sweep(nodes, v, next, params, prices, rule);
  for (int newton = 0; newton < config.newton_max_iter; ++newton, ++it) {
    if (change < config.value_tol) return Household(prices, nodes, std::move(v), it + 1, change);
    const Eigen::VectorXd residual = flatten(next) - flatten(v);
    Eigen::MatrixXd jac(N, N);
    for (int j = 0; j < kLevels; ++j) {
      for (std::size_t m = 0; m < n; ++m) {
        const double h = 1e-7 * std::max(1.0, std::abs(v[j][m]));
        probe[j][m] = v[j][m] + h;
        bellman_sweep(nodes, probe, image, params, prices, rule);
        probe[j][m] = v[j][m];
        jac.col(j * static_cast<Eigen::Index>(n) + static_cast<Eigen::Index>(m)) = (flatten(image) - flatten(next)) / h;
      }
    }
    const Eigen::VectorXd step = (Eigen::MatrixXd::Identity(N, N) - jac).partialPivLu().solve(residual);
    if (!step.allFinite()) throw NumericalError("household Newton step is not finite");
    // Backtrack on the sup-norm residual; the rule has kinks where Newton
    // can overshoot.
    bool accepted = false;
    for (double t = 1.0; t > 1e-4 && !accepted; t *= 0.5) {
      for (int j = 0; j < kLevels; ++j) {
        for (std::size_t k = 0; k < n; ++k) {
          trial[j][k] = v[j][k] + t * step(j * static_cast<Eigen::Index>(n) + static_cast<Eigen::Index>(k));
        }
      }
      const double trial_change = bellman_sweep(nodes, trial, image, params, prices, rule);
      if (trial_change < change) {
        std::swap(v, trial);
        std::swap(next, image);
        change = trial_change;
        accepted = true;
      }
    }
    if (!accepted) break;
    probe = v;
  }
  if (!strict) return Household(prices, nodes, std::move(v), it + 1, change);
  throw NumericalError("household value iteration did not converge in " + std::to_string(config.newton_max_iter) +
                       " Newton steps");
}

BatchSavings household_policy(const Household& h, const EconomyParams& params) {
  return [&h, params](int level, std::span<const double> xs, std::span<double> s) {
    for (std::size_t k = 0; k < xs.size(); ++k) s[k] = h.savings_at(xs[k], level, params);
  };
}

DiscreteMeasure stationary_measure(const BatchSavings& policy, std::shared_ptr<const Grid> grid,
                                   const EconomyParams& params, const TransportConfig& transport,
                                   const AiyagariConfig& config, int* iterations) {
  TransportConfig expected = transport;
  expected.mode = SplitMode::Expected;
  const auto plan = build_plan(grid, policy, params, expected);
  std::vector<double> a = pack(uniform_measure(grid)), b(a.size());
  for (int it = 1; it <= config.measure_max_iter; ++it) {
    plan.apply(a, b);
    const double tv = total_variation(*grid, a, b);
    std::swap(a, b);
    if (tv < config.measure_tol) {
      if (iterations != nullptr) *iterations = it;
      return DiscreteMeasure(grid, std::move(a), MassCheck::Renormalize);
    }
  }
  throw NumericalError("stationary measure did not converge in " + std::to_string(config.measure_max_iter) +
                       " iterations");
}

RateEvaluation evaluate_rate(double r, std::shared_ptr<const Grid> fine_grid, const EconomyParams& params,
                             const TransportConfig& transport, const AiyagariConfig& config, bool strict) {
  const Prices prices = prices_from_rate(params, 1.0, r);
  auto household = solve_individual(prices, params, config, strict);
  int iters = 0;
  auto measure = stationary_measure(household_policy(household, params), fine_grid, params, transport, config, &iters);
  const auto agg = aggregates(measure, params.y[0], params.y[1]);
  const double implied =
      agg.capital > 0.0 ? firm_prices(params, 1.0, agg).r : std::numeric_limits<double>::infinity();
  return {std::move(household), std::move(measure), implied, iters};
}

AiyagariEquilibrium equilibrium(const EconomyParams& economy, const TransportConfig& transport,
                                const AiyagariConfig& config) {
  config.validate();
  EconomyParams params = economy;
  params.mu = {0.0, 0.0};
  auto grid = std::make_shared<const Grid>(
      Grid(geometric_nodes(params.x_lo, params.x_hi, config.fine_nodes, config.node_growth),
           geometric_nodes(params.x_lo, params.x_hi, config.fine_nodes, config.node_growth)));

  double lo = -params.delta + 1e-4, hi = params.rho - 1e-4;
  // Only the sign of the gap matters at the bracket ends, where the household
  // problem is close to degenerate.
  const double f_lo = evaluate_rate(lo, grid, params, transport, config, false).implied_rate - lo;
  const double f_hi = evaluate_rate(hi, grid, params, transport, config, false).implied_rate - hi;
  if (!(f_lo > 0.0 && f_hi < 0.0)) {
    throw NumericalError("no sign change of the capital market gap on [" + format_double(lo) + ", " +
                         format_double(hi) + "]: " + format_double(f_lo) + ", " + format_double(f_hi));
  }
  for (int it = 1; it <= config.bisection_max_iter; ++it) {
    const double mid = 0.5 * (lo + hi);
    auto eval = evaluate_rate(mid, grid, params, transport, config);
    const double gap = eval.implied_rate - mid;
    if (std::abs(gap) <= config.clearing_tol) {
      const auto agg = aggregates(eval.measure, params.y[0], params.y[1]);
      return AiyagariEquilibrium{mid,
                                 eval.household.prices().w,
                                 agg,
                                 std::move(eval.household),
                                 std::move(eval.measure),
                                 std::abs(gap),
                                 it,
                                 eval.measure_iterations};
    }
    (gap > 0.0 ? lo : hi) = mid;
  }
  throw NumericalError("interest rate bisection did not converge in " + std::to_string(config.bisection_max_iter) +
                       " iterations");
}

Json AiyagariEquilibrium::to_json(const EconomyParams& params) const {
  const auto& nodes = measure.grid().breaks(0);
  std::array<std::vector<double>, kLevels> savings, consumption;
  for (int j = 0; j < kLevels; ++j) {
    for (double x : nodes) {
      const auto d = household.decision_at(x, j, params);
      savings[j].push_back(d.savings);
      consumption[j].push_back(d.consumption);
    }
  }
  return Json{{"r", r},
              {"w", w},
              {"capital", aggregates.capital},
              {"labor", aggregates.labor},
              {"clearing_gap", clearing_gap},
              {"bisection_iterations", bisection_iterations},
              {"measure_iterations", measure_iterations},
              {"value_iterations", household.iterations()},
              {"value_nodes", household.nodes()},
              {"value_y1", household.value(0)},
              {"value_y2", household.value(1)},
              {"nodes", nodes},
              {"savings_y1", savings[0]},
              {"savings_y2", savings[1]},
              {"consumption_y1", consumption[0]},
              {"consumption_y2", consumption[1]},
              {"measure", measure.to_json()}};
}

}  // namespace ksm
