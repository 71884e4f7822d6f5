#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "ksm/aiyagari.hpp"
#include "ksm/economy.hpp"
#include "ksm/measures.hpp"
#include "ksm/neuralnet.hpp"
#include "ksm/transport.hpp"

namespace ksm {

// Networks are stored i-major: (A1,y1), (A1,y2), (A2,y1), (A2,y2).
inline constexpr int kNets = kAggregateStates * kLevels;
constexpr int net_index(int i, int j) { return i * kLevels + j; }

using ValueSet = std::array<ValueNetwork, kNets>;

// splitmix64 mixing of a master seed with stream tags.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags);

// Runs fn(k) for k in [0, n) on up to `threads` workers (0 = hardware).
// Results must only depend on k for the output to be thread-count independent.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

/// Mixture sampler for the training set.
struct SamplerConfig {
  int measures = 2000;           // distinct measures in the set
  int points_per_measure = 10;   // capital values per measure
  double dirichlet_share = 0.25;     // random admissible coefficient vectors
  double transported_share = 0.25;   // forward transported under current policies
  // The rest are convex perturbations (1 - theta) m_base + theta m_random.
  double perturbation_weight = 0.5;  // theta ~ U(0, perturbation_weight)
  double dirichlet_concentration = 1.0;
  int max_transport_steps = 8;
  double near_lo_share = 0.2;  // capital log-spaced above x_lo
  double near_lo_min = 1e-3;
  double near_lo_max = 1.0;
  double holdout_share = 0.1;

  void validate() const;
  Json to_json() const;
  static SamplerConfig from_json(const Json& j);
};

enum class SampleOrigin { Dirichlet = 0, Perturbed = 1, Transported = 2 };

// One measure with the capital values sampled against it.
struct SampleGroup {
  std::vector<double> M;
  std::vector<double> x;
  SampleOrigin origin = SampleOrigin::Dirichlet;
  bool holdout = false;
};

struct SampleSet {
  std::shared_ptr<const Grid> grid;
  std::vector<SampleGroup> groups;

  std::size_t size() const;
  Json to_json() const;
  static SampleSet from_json(const Json& j);
};

// Savings of network (i, level) at measure M, for transport.
BatchSavings network_policy(const ValueSet& nets, int i, const DiscreteMeasure& m, const EconomyParams& params,
                            bool cap_savings);

// Draws a coefficient vector whose slot masses are Dirichlet distributed.
std::vector<double> dirichlet_measure(const Grid& grid, double concentration, std::mt19937_64& rng);

// Capital values: uniform on [x_lo, x_hi] except a near_lo_share of
// log-uniform offsets above x_lo.
std::vector<double> sample_capital(const SamplerConfig& config, const EconomyParams& params, int n,
                                   std::mt19937_64& rng);

// Transported samples use `nets` (required when transported_share > 0).
SampleSet generate_samples(const SamplerConfig& config, const DiscreteMeasure& base, const EconomyParams& params,
                           const TransportConfig& transport, const ValueSet* nets, bool cap_savings,
                           std::mt19937_64& rng);

/// Bellman targets of all four networks at the capital values of one measure.
struct GroupTargets {
  std::array<Prices, kAggregateStates> prices{};
  std::array<double, kAggregateStates> next_rate{};  // r_i(m*)
  std::array<std::vector<double>, kNets> value;       // v^n at (x, m)
  std::array<std::vector<double>, kNets> savings;     // s* at (x, m)
  std::array<std::vector<double>, kNets> target;
};

// `transport_seed` drives sampled-mode transport only.
GroupTargets group_targets(const ValueSet& nets, const std::shared_ptr<const Grid>& grid, std::span<const double> M,
                           std::span<const double> xs, const EconomyParams& params, const TransportConfig& transport,
                           bool cap_savings, std::uint64_t transport_seed = 0);

// Value V annihilating the residual: frozen continuation at (x', m*) minus
// the switching terms plus dt u(c*), all over 1 + rho dt.
double bellman_target(double x, const DiscreteMeasure& m, const ValueSet& nets, int i, int j,
                      const EconomyParams& params, const TransportConfig& transport, bool cap_savings = false);

// (1 + rho dt) (candidate - target).
double residual(double candidate, double target, const EconomyParams& params);

enum class Optimizer {
  Adam,   // minibatch Adam, `steps` updates
  Lbfgs,  // full-batch L-BFGS with Wolfe line search, `steps` iterations
};

struct TrainConfig {
  Optimizer optimizer = Optimizer::Adam;
  AdamConfig adam{};
  int lbfgs_rank = 20;
  int steps = 2000;
  int batch = 256;
  int eval_every = 250;  // full training-set evaluation
  bool keep_best = true;  // end at the best evaluated snapshot, initial parameters included
  double divergence_mse = 1e6;

  void validate() const;
  Json to_json() const;
  static TrainConfig from_json(const Json& j);
};

struct TrainData {
  NetBatch inputs;
  Eigen::VectorXd targets;
};

struct TrainResult {
  double mse_before = 0.0;
  double mse_after = 0.0;
};

// Adam on minibatches drawn with `seed`, or L-BFGS on the full set. With
// keep_best the parameters end at the best full-set snapshot, so mse_after <=
// mse_before. A non-null `state` carries the Adam moments across calls.
// Throws NumericalError on divergence.
TrainResult train_network(ValueNetwork& net, const TrainData& data, const TrainConfig& config, std::uint64_t seed,
                          AdamState* state = nullptr);

double mean_squared_error(const ValueNetwork& net, const TrainData& data);

struct SolverConfig {
  int outer_iterations = 30;
  double policy_tol = 1e-4;  // sup-norm savings change on the probe set
  TrainConfig train{};
  double refresh_share = 0.25;  // training groups re-drawn per iteration
  int probe_points = 32;
  int probe_measures = 8;
  int pretrain_steps = 4000;
  bool cap_savings = false;  // cap savings so that x + dt s <= x_hi
  int threads = 1;

  void validate() const;
  Json to_json() const;
  static SolverConfig from_json(const Json& j);
};

struct IterationReport {
  int iteration = 0;
  std::array<double, kNets> train_mse_before{};
  std::array<double, kNets> train_mse{};
  std::array<double, kNets> holdout_mse{};
  // Mean squared residual of the new iterate against its own targets.
  std::array<double, kNets> holdout_residual{};
  double policy_change = 0.0;
  double wall_seconds = 0.0;

  double mean_holdout_residual() const;
  Json to_json() const;
  static IterationReport from_json(const Json& j);
};

// Evenly spaced capital values on the first holdout measures; policy
// changes are measured there.
SampleSet probe_set(const SampleSet& samples, const EconomyParams& params, int points, int measures);

// Savings of every network at every probe point, flattened group-major.
std::vector<double> probe_savings(const ValueSet& nets, const SampleSet& probe, const EconomyParams& params,
                                  bool cap_savings);

struct SolverContext {
  EconomyParams params;
  TransportConfig transport;
  SolverConfig config;
  std::uint64_t seed = 0;
};

// Scaling shared by all four networks: capital to [-1, 1] (through asinh
// when capital_stretch > 0), rates around `rate_center`, measure slots to
// masses, values standardized.
InputScaling default_scaling(const Grid& grid, const EconomyParams& params, double rate_center, double value_mean,
                             double value_std, double capital_stretch = 0.0);

// Four networks fitted to the household value of the base economy, ignoring
// the measure and aggregate state.
ValueSet pretrained_networks(const NetSpec& spec, const Household& household, const SampleSet& samples,
                             const SolverContext& ctx);

/// One fitted value iteration: each network regresses on the Bellman targets
/// of the frozen iterate over the training groups.
struct StepResult {
  ValueSet nets;
  IterationReport report;
};
StepResult fixed_point_step(const ValueSet& nets, const SampleSet& samples, const SolverContext& ctx, int iteration);

// Replaces refresh_share of the training groups by one-step transports of
// training measures under the current policies. A transport that leaves no
// capital keeps the old group.
void refresh_samples(SampleSet& samples, const ValueSet& nets, const SamplerConfig& sampler, const SolverContext& ctx,
                     int iteration);

struct SolveHistory {
  ValueSet nets;
  SampleSet samples;
  std::vector<IterationReport> reports;
  bool converged = false;
};

// Outer loop. With a non-empty `run_dir` every iteration writes
// iter_n/net_i_j.ckpt, iter_n/samples.json (the set for iteration n + 1) and
// iter_n/report.json, and an existing complete iteration is resumed from.
SolveHistory solve(ValueSet initial, SampleSet samples, const SamplerConfig& sampler, const SolverContext& ctx,
                   const std::filesystem::path& run_dir = {}, std::string config_hash = {});

// Iteration directory name for outer iteration n (1-based).
std::filesystem::path iteration_dir(const std::filesystem::path& run_dir, int n);
std::string net_file_name(int i, int j);

// Last iteration under run_dir with all four checkpoints and a report, or 0.
int last_complete_iteration(const std::filesystem::path& run_dir);

ValueSet load_networks(const std::filesystem::path& iter_dir, const NetSpec* expected = nullptr);

/// Same fitted value iteration with the measure pinned and the aggregate
/// shock removed (A = 1, mu = 0), at given prices: a one-dimensional
/// household problem per productivity level.
struct FrozenConfig {
  int points = 400;               // training capital values per level, x_lo included
  double near_lo_share = 0.2;
  int max_iterations = 300;
  // Stops once both sup-norm changes on the training points fall below tolerance.
  double policy_tol = 1e-6;
  double value_tol = 1e-7;
  TrainConfig train{.optimizer = Optimizer::Lbfgs, .steps = 60};
  int pretrain_steps = 1000;
  bool cap_savings = false;

  void validate() const;
};

struct FrozenResult {
  std::array<ValueNetwork, kLevels> nets;
  std::vector<double> pinned;  // measure coefficients fed to the networks
  Prices prices{};
  bool cap_savings = false;
  int iterations = 0;
  double policy_change = 0.0;
  double value_change = 0.0;
  std::vector<double> policy_changes;

  double value_at(double x, int level) const;
  Decision decision_at(double x, int level, const EconomyParams& params) const;
};

// Starts from the income-consumption value u(w y + r x) / rho.
FrozenResult frozen_measure_mode(const EconomyParams& params, Prices prices, const DiscreteMeasure& pinned,
                                 NetSpec spec, const FrozenConfig& config, std::uint64_t seed);

}  // namespace ksm
