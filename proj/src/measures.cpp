#include "ksm/measures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ksm/errors.hpp"

namespace ksm {

Grid::Grid(std::vector<double> breaks_low, std::vector<double> breaks_high)
    : breaks_{std::move(breaks_low), std::move(breaks_high)} {
  for (int j = 0; j < kLevels; ++j) {
    const auto& b = breaks_[j];
    if (b.size() < 2) throw ConfigError("grid level " + std::to_string(j + 1) + " needs at least one cell");
    for (std::size_t k = 0; k + 1 < b.size(); ++k) {
      if (!(b[k + 1] > b[k])) {
        throw ConfigError("grid level " + std::to_string(j + 1) + " breakpoints must be strictly increasing");
      }
    }
  }
  if (breaks_[0].front() != breaks_[1].front() || breaks_[0].back() != breaks_[1].back()) {
    throw ConfigError("both grid levels must span the same interval");
  }
}

Grid Grid::uniform(double lower, double upper, int cells_low, int cells_high) {
  if (cells_low < 1 || cells_high < 1) throw ConfigError("grid needs at least one cell per level");
  if (!(upper > lower)) throw ConfigError("grid upper bound must exceed lower bound");
  auto make = [&](int k) {
    std::vector<double> b(static_cast<std::size_t>(k) + 1);
    for (int i = 0; i <= k; ++i) b[i] = lower + (upper - lower) * i / k;
    b.back() = upper;
    return b;
  };
  return Grid(make(cells_low), make(cells_high));
}

std::vector<double> Grid::slot_mass_factors() const {
  std::vector<double> f(dimension(), 1.0);
  for (int j = 0; j < kLevels; ++j) {
    for (int k = 0; k < cells(j); ++k) f[cell_slot(j, k)] = width(j, k);
  }
  return f;
}

Json Grid::to_json() const { return Json{{"y1", breaks_[0]}, {"y2", breaks_[1]}}; }

Grid Grid::from_json(const Json& j) {
  try {
    return Grid(j.at("y1").get<std::vector<double>>(), j.at("y2").get<std::vector<double>>());
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed grid: ") + e.what());
  }
}

double coefficient_mass(const Grid& grid, std::span<const double> c) {
  double mass = 0.0;
  for (int j = 0; j < kLevels; ++j) {
    mass += c[grid.dirac_lo_slot(j)];
    for (int k = 0; k < grid.cells(j); ++k) mass += c[grid.cell_slot(j, k)] * grid.width(j, k);
    mass += c[grid.dirac_hi_slot(j)];
  }
  return mass;
}

DiscreteMeasure::DiscreteMeasure(std::shared_ptr<const Grid> grid, std::vector<double> coefficients,
                                 MassCheck check)
    : grid_(std::move(grid)), coeffs_(std::move(coefficients)) {
  if (!grid_) throw ConfigError("measure needs a grid");
  if (coeffs_.size() != grid_->dimension()) {
    throw ConfigError("dimension mismatch: got " + std::to_string(coeffs_.size()) + " coefficients, grid needs " +
                      std::to_string(grid_->dimension()));
  }
  for (std::size_t s = 0; s < coeffs_.size(); ++s) {
    if (!std::isfinite(coeffs_[s])) throw NumericalError("non-finite coefficient at slot " + std::to_string(s));
    if (coeffs_[s] < 0.0) throw NumericalError("negative coefficient at slot " + std::to_string(s));
  }
  const double mass = coefficient_mass(*grid_, coeffs_);
  if (check == MassCheck::Renormalize) {
    if (!(mass > 0.0)) throw NumericalError("cannot renormalize a measure with zero mass");
    for (auto& c : coeffs_) c /= mass;
  } else if (std::abs(mass - 1.0) > kMassTolerance) {
    throw NumericalError("mass != 1: total mass is " + format_double(mass));
  }
}

double DiscreteMeasure::level_mass(int level) const {
  double mass = dirac_lo(level) + dirac_hi(level);
  for (int k = 0; k < grid_->cells(level); ++k) mass += cell_mass(level, k);
  return mass;
}

double DiscreteMeasure::total_mass() const { return coefficient_mass(*grid_, coeffs_); }

std::vector<double> DiscreteMeasure::slot_masses() const {
  auto f = grid_->slot_mass_factors();
  for (std::size_t s = 0; s < f.size(); ++s) f[s] *= coeffs_[s];
  return f;
}

Json DiscreteMeasure::to_json() const {
  auto cells = [&](int j) {
    std::vector<double> v(static_cast<std::size_t>(grid_->cells(j)));
    for (int k = 0; k < grid_->cells(j); ++k) v[k] = density(j, k);
    return v;
  };
  auto masses = [&](int j) {
    std::vector<double> v(static_cast<std::size_t>(grid_->cells(j)));
    for (int k = 0; k < grid_->cells(j); ++k) v[k] = cell_mass(j, k);
    return v;
  };
  Json out;
  out["grid"] = grid_->to_json();
  out["dirac_lo"] = {dirac_lo(0), dirac_lo(1)};
  out["cells_y1"] = cells(0);
  out["cells_y2"] = cells(1);
  out["dirac_hi"] = {dirac_hi(0), dirac_hi(1)};
  out["cell_mass_y1"] = masses(0);
  out["cell_mass_y2"] = masses(1);
  return out;
}

DiscreteMeasure DiscreteMeasure::from_json(const Json& j, MassCheck check) {
  try {
    auto grid = std::make_shared<const Grid>(Grid::from_json(j.at("grid")));
    const auto lo = j.at("dirac_lo").get<std::vector<double>>();
    const auto hi = j.at("dirac_hi").get<std::vector<double>>();
    const std::array<std::vector<double>, kLevels> cells{j.at("cells_y1").get<std::vector<double>>(),
                                                         j.at("cells_y2").get<std::vector<double>>()};
    if (lo.size() != 2 || hi.size() != 2) throw ConfigError("dirac_lo and dirac_hi need two entries");
    std::vector<double> c(grid->dimension());
    for (int l = 0; l < kLevels; ++l) {
      if (cells[l].size() != static_cast<std::size_t>(grid->cells(l))) {
        throw ConfigError("cell count does not match grid on level " + std::to_string(l + 1));
      }
      c[grid->dirac_lo_slot(l)] = lo[l];
      for (int k = 0; k < grid->cells(l); ++k) c[grid->cell_slot(l, k)] = cells[l][k];
      c[grid->dirac_hi_slot(l)] = hi[l];
    }
    return DiscreteMeasure(std::move(grid), std::move(c), check);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed measure: ") + e.what());
  }
}

std::vector<double> pack(const DiscreteMeasure& m) {
  return {m.coefficients().begin(), m.coefficients().end()};
}

DiscreteMeasure unpack(std::span<const double> coefficients, std::shared_ptr<const Grid> grid, MassCheck check) {
  return DiscreteMeasure(std::move(grid), {coefficients.begin(), coefficients.end()}, check);
}

Aggregates aggregates(const Grid& grid, std::span<const double> c, double y_low, double y_high) {
  const double y[kLevels] = {y_low, y_high};
  Aggregates agg{0.0, 0.0};
  for (int j = 0; j < kLevels; ++j) {
    const auto& b = grid.breaks(j);
    double mass = c[grid.dirac_lo_slot(j)] + c[grid.dirac_hi_slot(j)];
    agg.capital += c[grid.dirac_lo_slot(j)] * grid.lower() + c[grid.dirac_hi_slot(j)] * grid.upper();
    for (int k = 0; k < grid.cells(j); ++k) {
      const double cell = c[grid.cell_slot(j, k)] * grid.width(j, k);
      mass += cell;
      agg.capital += cell * 0.5 * (b[k] + b[k + 1]);
    }
    agg.labor += y[j] * mass;
  }
  return agg;
}

Aggregates aggregates(const DiscreteMeasure& m, double y_low, double y_high) {
  return aggregates(m.grid(), m.coefficients(), y_low, y_high);
}

Grid equal_mass_grid(const DiscreteMeasure& fine, int cells_low, int cells_high) {
  const Grid& g = fine.grid();
  const int wanted[kLevels] = {cells_low, cells_high};
  std::array<std::vector<double>, kLevels> out;
  for (int j = 0; j < kLevels; ++j) {
    const int K = wanted[j];
    if (K < 1) throw ConfigError("equal_mass_grid needs at least one cell per level");
    const auto& b = g.breaks(j);
    const int n = g.cells(j);
    std::vector<double> cdf(static_cast<std::size_t>(n) + 1, 0.0);
    int positive = 0;
    for (int k = 0; k < n; ++k) {
      const double mk = fine.cell_mass(j, k);
      if (mk > 0.0) ++positive;
      cdf[k + 1] = cdf[k] + mk;
    }
    if (K > positive) {
      throw NumericalError("requested " + std::to_string(K) + " cells on level " + std::to_string(j + 1) +
                           " but only " + std::to_string(positive) + " fine cells carry mass");
    }
    const double total = cdf[n];
    std::vector<double> breaks{g.lower()};
    int k = 0;
    for (int q = 1; q < K; ++q) {
      const double target = total * q / K;
      while (k < n && (cdf[k + 1] < target || fine.cell_mass(j, k) <= 0.0)) ++k;
      const double frac = (target - cdf[k]) / fine.cell_mass(j, k);
      double x = b[k] + std::clamp(frac, 0.0, 1.0) * (b[k + 1] - b[k]);
      // Degenerate rounding can repeat a breakpoint; nudge to keep the grid valid.
      if (x <= breaks.back()) x = std::nextafter(breaks.back(), g.upper());
      breaks.push_back(x);
    }
    breaks.push_back(g.upper());
    out[j] = std::move(breaks);
  }
  return Grid(std::move(out[0]), std::move(out[1]));
}

DiscreteMeasure project(const DiscreteMeasure& m, std::shared_ptr<const Grid> target) {
  const Grid& src = m.grid();
  if (target->lower() != src.lower() || target->upper() != src.upper()) {
    throw ConfigError("projection requires grids with identical bounds");
  }
  std::vector<double> c(target->dimension(), 0.0);
  for (int j = 0; j < kLevels; ++j) {
    c[target->dirac_lo_slot(j)] = m.dirac_lo(j);
    c[target->dirac_hi_slot(j)] = m.dirac_hi(j);
    const auto& sb = src.breaks(j);
    const auto& tb = target->breaks(j);
    int s = 0;
    for (int t = 0; t < target->cells(j); ++t) {
      double mass = 0.0;
      while (s < src.cells(j) && sb[s + 1] <= tb[t]) ++s;
      for (int u = s; u < src.cells(j) && sb[u] < tb[t + 1]; ++u) {
        const double overlap = std::min(sb[u + 1], tb[t + 1]) - std::max(sb[u], tb[t]);
        if (overlap > 0.0) mass += m.density(j, u) * overlap;
      }
      c[target->cell_slot(j, t)] = mass / target->width(j, t);
    }
  }
  // Overlap arithmetic can drift by a few ulps.
  return DiscreteMeasure(std::move(target), std::move(c), MassCheck::Renormalize);
}

DiscreteMeasure uniform_measure(std::shared_ptr<const Grid> grid, double mass_low) {
  std::vector<double> c(grid->dimension(), 0.0);
  const double span = grid->upper() - grid->lower();
  const double level_mass[kLevels] = {mass_low, 1.0 - mass_low};
  for (int j = 0; j < kLevels; ++j) {
    for (int k = 0; k < grid->cells(j); ++k) c[grid->cell_slot(j, k)] = level_mass[j] / span;
  }
  return DiscreteMeasure(std::move(grid), std::move(c), MassCheck::Renormalize);
}

double total_variation(const Grid& grid, std::span<const double> a, std::span<const double> b) {
  const auto f = grid.slot_mass_factors();
  double tv = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s) tv += std::abs(a[s] - b[s]) * f[s];
  return 0.5 * tv;
}

}  // namespace ksm
