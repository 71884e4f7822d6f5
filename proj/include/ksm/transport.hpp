#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ksm/economy.hpp"
#include "ksm/measures.hpp"

namespace ksm {

enum class SplitMode {
  Expected,  // each point sends fractions (1 - lambda dt, lambda dt) to the two levels
  Sampled,   // each point draws its next level independently
};

struct TransportConfig {
  int points_per_cell = 10;  // N
  SplitMode mode = SplitMode::Expected;
  std::uint64_t rng_seed = 0;

  void validate() const;
  Json to_json() const;
  static TransportConfig from_json(const Json& j);
};

// x_{k} + n/(N+1) h for n = 1..N.
std::vector<double> sample_points(double left, double right, int n);

// Every point transported for one level, in deterministic order: lower
// boundary, then cell-major interior points, then upper boundary.
std::vector<double> transport_points(const Grid& grid, int level, int points_per_cell);

// Coefficient slot receiving a point landing at x_hat on `level`.
// x_hat <= x_lo (within rounding dust) maps to the lower Dirac, cells are
// half-open (x_k, x_{k+1}], x_hat >= x_hi maps to the upper Dirac.
std::size_t bin(double x_hat, int level, const Grid& grid);

// Savings of every transport point of `level` (same order as transport_points).
using BatchSavings = std::function<void(int level, std::span<const double> xs, std::span<double> savings)>;
using PointSavings = std::function<double(double x, int level)>;

/// Linear map alpha -> alpha* of one semi-Lagrangian step.
///
/// Entries are accumulated cell-major then point-major, so applying a plan is
/// bit-reproducible.
class TransportPlan {
 public:
  struct Entry {
    std::uint32_t source;
    std::uint32_t target;
    double weight;  // alpha*_target += weight * alpha_source
  };

  TransportPlan(std::shared_ptr<const Grid> grid, std::vector<Entry> entries)
      : grid_(std::move(grid)), entries_(std::move(entries)) {}

  const Grid& grid() const { return *grid_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Raw application without mass validation.
  void apply(std::span<const double> coefficients, std::span<double> out) const;
  DiscreteMeasure apply(const DiscreteMeasure& m) const;

 private:
  std::shared_ptr<const Grid> grid_;
  std::vector<Entry> entries_;
};

// `rng` is required in sampled mode and ignored otherwise.
TransportPlan build_plan(std::shared_ptr<const Grid> grid, const BatchSavings& policy, const EconomyParams& params,
                         const TransportConfig& config, std::mt19937_64* rng = nullptr);

// Sampled mode seeds its generator from config.rng_seed.
DiscreteMeasure push_forward(const DiscreteMeasure& m, const PointSavings& policy, const EconomyParams& params,
                             const TransportConfig& config);
DiscreteMeasure push_forward(const DiscreteMeasure& m, const BatchSavings& policy, const EconomyParams& params,
                             const TransportConfig& config, std::mt19937_64* rng = nullptr);

}  // namespace ksm
