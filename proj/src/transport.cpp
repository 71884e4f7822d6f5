#include "ksm/transport.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ksm/errors.hpp"

namespace ksm {

void TransportConfig::validate() const {
  if (points_per_cell < 1) throw ConfigError("transport: points_per_cell must be >= 1");
}

Json TransportConfig::to_json() const {
  return Json{{"points_per_cell", points_per_cell},
              {"mode", mode == SplitMode::Expected ? "expected" : "sampled"},
              {"rng_seed", rng_seed}};
}

TransportConfig TransportConfig::from_json(const Json& j) {
  TransportConfig c;
  try {
    c.points_per_cell = j.value("points_per_cell", c.points_per_cell);
    const auto mode = j.value("mode", std::string("expected"));
    if (mode == "expected") {
      c.mode = SplitMode::Expected;
    } else if (mode == "sampled") {
      c.mode = SplitMode::Sampled;
    } else {
      throw ConfigError("transport: unknown mode '" + mode + "'");
    }
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("transport: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> sample_points(double left, double right, int n) {
  std::vector<double> pts(static_cast<std::size_t>(n));
  const double h = right - left;
  for (int k = 1; k <= n; ++k) pts[k - 1] = left + h * k / (n + 1);
  return pts;
}

std::vector<double> transport_points(const Grid& grid, int level, int points_per_cell) {
  const auto& b = grid.breaks(level);
  std::vector<double> pts;
  pts.reserve(static_cast<std::size_t>(grid.cells(level) * points_per_cell + 2));
  pts.push_back(grid.lower());
  for (int k = 0; k < grid.cells(level); ++k) {
    for (double x : sample_points(b[k], b[k + 1], points_per_cell)) pts.push_back(x);
  }
  pts.push_back(grid.upper());
  return pts;
}

std::size_t bin(double x_hat, int level, const Grid& grid) {
  const double dust = 1e-12 * std::max(1.0, grid.upper() - grid.lower());
  if (x_hat <= grid.lower() + dust) return grid.dirac_lo_slot(level);
  if (x_hat >= grid.upper()) return grid.dirac_hi_slot(level);
  const auto& b = grid.breaks(level);
  const auto it = std::lower_bound(b.begin(), b.end(), x_hat);
  const int cell = static_cast<int>(it - b.begin()) - 1;
  return grid.cell_slot(level, cell);
}

void TransportPlan::apply(std::span<const double> in, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& e : entries_) out[e.target] += e.weight * in[e.source];
}

DiscreteMeasure TransportPlan::apply(const DiscreteMeasure& m) const {
  if (!(m.grid() == *grid_)) throw ConfigError("transport plan and measure live on different grids");
  std::vector<double> out(grid_->dimension());
  apply(m.coefficients(), out);
  return DiscreteMeasure(grid_, std::move(out));
}

TransportPlan build_plan(std::shared_ptr<const Grid> grid_ptr, const BatchSavings& policy,
                         const EconomyParams& params, const TransportConfig& config, std::mt19937_64* rng) {
  config.validate();
  const Grid& grid = *grid_ptr;
  if (config.mode == SplitMode::Sampled && rng == nullptr) {
    throw ConfigError("sampled transport needs a random generator");
  }
  const int n = config.points_per_cell;
  std::vector<TransportPlan::Entry> entries;
  for (int l = 0; l < kLevels; ++l) {
    const auto pts = transport_points(grid, l, n);
    std::vector<double> s(pts.size());
    policy(l, pts, s);
    const double stay = 1.0 - params.lambda[l] * params.dt;
    std::bernoulli_distribution switch_level(params.lambda[l] * params.dt);
    for (std::size_t p = 0; p < pts.size(); ++p) {
      if (!std::isfinite(s[p])) {
        throw NumericalError("non-finite savings at x=" + format_double(pts[p]) + " level " + std::to_string(l + 1));
      }
      std::size_t source;
      double point_mass;  // mass carried per unit of source coefficient
      if (p == 0) {
        source = grid.dirac_lo_slot(l);
        point_mass = 1.0;
      } else if (p + 1 == pts.size()) {
        source = grid.dirac_hi_slot(l);
        point_mass = 1.0;
      } else {
        const int cell = static_cast<int>((p - 1) / static_cast<std::size_t>(n));
        source = grid.cell_slot(l, cell);
        point_mass = grid.width(l, cell) / n;
      }
      const double x_hat = pts[p] + params.dt * s[p];
      auto add = [&](int level, double prob) {
        if (prob <= 0.0) return;
        const std::size_t target = bin(x_hat, level, grid);
        const bool is_cell = target != grid.dirac_lo_slot(level) && target != grid.dirac_hi_slot(level);
        double w = point_mass * prob;
        if (is_cell) w /= grid.width(level, static_cast<int>(target - grid.level_offset(level)) - 1);
        entries.push_back({static_cast<std::uint32_t>(source), static_cast<std::uint32_t>(target), w});
      };
      if (config.mode == SplitMode::Expected) {
        add(l, stay);
        add(1 - l, 1.0 - stay);
      } else {
        add(switch_level(*rng) ? 1 - l : l, 1.0);
      }
    }
  }
  return TransportPlan(std::move(grid_ptr), std::move(entries));
}

DiscreteMeasure push_forward(const DiscreteMeasure& m, const BatchSavings& policy, const EconomyParams& params,
                             const TransportConfig& config, std::mt19937_64* rng) {
  return build_plan(m.grid_ptr(), policy, params, config, rng).apply(m);
}

DiscreteMeasure push_forward(const DiscreteMeasure& m, const PointSavings& policy, const EconomyParams& params,
                             const TransportConfig& config) {
  BatchSavings batch = [&](int level, std::span<const double> xs, std::span<double> s) {
    for (std::size_t k = 0; k < xs.size(); ++k) s[k] = policy(xs[k], level);
  };
  std::mt19937_64 rng(config.rng_seed);
  return push_forward(m, batch, params, config, &rng);
}

}  // namespace ksm
