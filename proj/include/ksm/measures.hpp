#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "ksm/json_io.hpp"

namespace ksm {

// Productivity levels are indexed 0 (y1, low) and 1 (y2, high) throughout.
inline constexpr int kLevels = 2;

// Mass normalization tolerance for every constructed measure.
inline constexpr double kMassTolerance = 1e-12;

/// Two subdivisions of [x_lo, x_hi], one per productivity level.
///
/// Coefficient slots of a measure on this grid are laid out level by level:
/// lower Dirac, K_j cell densities, upper Dirac.
class Grid {
 public:
  Grid(std::vector<double> breaks_low, std::vector<double> breaks_high);

  static Grid uniform(double lower, double upper, int cells_low, int cells_high);

  const std::vector<double>& breaks(int level) const { return breaks_[level]; }
  int cells(int level) const { return static_cast<int>(breaks_[level].size()) - 1; }
  double width(int level, int cell) const { return breaks_[level][cell + 1] - breaks_[level][cell]; }
  double lower() const { return breaks_[0].front(); }
  double upper() const { return breaks_[0].back(); }

  // d = K1 + K2 + 4
  std::size_t dimension() const { return static_cast<std::size_t>(cells(0) + cells(1) + 4); }

  std::size_t level_offset(int level) const { return level == 0 ? 0 : static_cast<std::size_t>(cells(0) + 2); }
  std::size_t dirac_lo_slot(int level) const { return level_offset(level); }
  std::size_t cell_slot(int level, int cell) const { return level_offset(level) + 1 + static_cast<std::size_t>(cell); }
  std::size_t dirac_hi_slot(int level) const { return level_offset(level) + 1 + static_cast<std::size_t>(cells(level)); }

  // Multiplier turning a coefficient into a mass: 1 for Diracs, h for cells.
  std::vector<double> slot_mass_factors() const;

  bool operator==(const Grid& other) const { return breaks_ == other.breaks_; }

  Json to_json() const;
  static Grid from_json(const Json& j);

 private:
  std::array<std::vector<double>, kLevels> breaks_;
};

enum class MassCheck {
  Strict,       // |mass - 1| > kMassTolerance is an error
  Renormalize,  // rescale all coefficients to unit mass
};

/// Probability measure on [x_lo, x_hi] x {y1, y2}: Dirac masses at both ends
/// plus piecewise constant densities on each level's cells.
///
/// Immutable after construction. Cell coefficients are densities (mass per
/// unit length), Dirac coefficients are masses.
class DiscreteMeasure {
 public:
  DiscreteMeasure(std::shared_ptr<const Grid> grid, std::vector<double> coefficients,
                  MassCheck check = MassCheck::Strict);

  const Grid& grid() const { return *grid_; }
  const std::shared_ptr<const Grid>& grid_ptr() const { return grid_; }
  std::span<const double> coefficients() const { return coeffs_; }

  double dirac_lo(int level) const { return coeffs_[grid_->dirac_lo_slot(level)]; }
  double density(int level, int cell) const { return coeffs_[grid_->cell_slot(level, cell)]; }
  double dirac_hi(int level) const { return coeffs_[grid_->dirac_hi_slot(level)]; }
  double cell_mass(int level, int cell) const { return density(level, cell) * grid_->width(level, cell); }

  double level_mass(int level) const;
  double total_mass() const;
  std::vector<double> slot_masses() const;

  Json to_json() const;
  static DiscreteMeasure from_json(const Json& j, MassCheck check = MassCheck::Strict);

 private:
  std::shared_ptr<const Grid> grid_;
  std::vector<double> coeffs_;
};

// Total mass of a raw coefficient vector on a grid.
double coefficient_mass(const Grid& grid, std::span<const double> coefficients);

std::vector<double> pack(const DiscreteMeasure& m);
DiscreteMeasure unpack(std::span<const double> coefficients, std::shared_ptr<const Grid> grid,
                       MassCheck check = MassCheck::Strict);

struct Aggregates {
  double capital;  // X
  double labor;    // Y
};

// Exact for piecewise constant densities (midpoint rule per cell).
Aggregates aggregates(const DiscreteMeasure& m, double y_low, double y_high);
Aggregates aggregates(const Grid& grid, std::span<const double> coefficients, double y_low, double y_high);

/// Grid whose cells carry equal interior mass of `fine` on each level.
///
/// Inverts the piecewise linear interior CDF of each level exactly; Dirac
/// masses are ignored.
Grid equal_mass_grid(const DiscreteMeasure& fine, int cells_low, int cells_high);

// Re-bins a measure onto another grid with the same bounds, conserving the
// Dirac masses and the interior mass of every target cell.
DiscreteMeasure project(const DiscreteMeasure& m, std::shared_ptr<const Grid> target);

// Uniform density on each level with the given level masses.
DiscreteMeasure uniform_measure(std::shared_ptr<const Grid> grid, double mass_low = 0.5);

// 0.5 * sum of absolute slot mass differences.
double total_variation(const Grid& grid, std::span<const double> a, std::span<const double> b);

}  // namespace ksm
