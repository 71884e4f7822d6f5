#include "ksm/solver.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <glog/logging.h>

#include "ksm/errors.hpp"

namespace ksm {

namespace fs = std::filesystem;
using Eigen::VectorXd;

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Decision decision(const EconomyParams& p, bool cap, double x, double dvdx, Prices prices, double y) {
  return cap ? decide_capped(p, x, dvdx, prices, y) : decide(p, x, dvdx, prices, y);
}

bool has_prices(const EconomyParams& p, const DiscreteMeasure& m) {
  for (int i = 0; i < kAggregateStates; ++i) {
    if (!try_factor_prices(p, m.grid(), m.coefficients(), i)) return false;
  }
  return true;
}

int rounded_share(double share, int n) { return static_cast<int>(std::lround(share * n)); }

const char* origin_name(SampleOrigin o) {
  switch (o) {
    case SampleOrigin::Dirichlet:
      return "dirichlet";
    case SampleOrigin::Perturbed:
      return "perturbed";
    case SampleOrigin::Transported:
      return "transported";
  }
  return "";
}

SampleOrigin origin_from_name(const std::string& s) {
  if (s == "dirichlet") return SampleOrigin::Dirichlet;
  if (s == "perturbed") return SampleOrigin::Perturbed;
  if (s == "transported") return SampleOrigin::Transported;
  throw ConfigError("unknown sample origin '" + s + "'");
}

Json net_array(const std::array<double, kNets>& a) { return Json(std::vector<double>(a.begin(), a.end())); }

std::array<double, kNets> net_array_from(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != kNets) throw ConfigError("report: expected four entries per array");
  std::array<double, kNets> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t state = master;
  std::uint64_t out = splitmix64(state);
  for (std::uint64_t t : tags) {
    state ^= out + t;
    out = splitmix64(state);
  }
  return out;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int k = 0; k < n; ++k) fn(k);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (int k = next++; k < n; k = next++) {
      try {
        fn(k);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------- sampling

void SamplerConfig::validate() const {
  if (measures < 1 || points_per_measure < 1) throw ConfigError("sampler: measures and points must be >= 1");
  if (!(dirichlet_share >= 0) || !(transported_share >= 0) || dirichlet_share + transported_share > 1.0) {
    throw ConfigError("sampler: shares must be nonnegative and sum to at most 1");
  }
  if (!(perturbation_weight >= 0 && perturbation_weight <= 1)) {
    throw ConfigError("sampler: perturbation_weight must lie in [0, 1]");
  }
  if (!(dirichlet_concentration > 0)) throw ConfigError("sampler: dirichlet_concentration must be positive");
  if (max_transport_steps < 1) throw ConfigError("sampler: max_transport_steps must be >= 1");
  if (!(near_lo_share >= 0 && near_lo_share <= 1)) throw ConfigError("sampler: near_lo_share must lie in [0, 1]");
  if (!(near_lo_min > 0 && near_lo_max > near_lo_min)) throw ConfigError("sampler: need 0 < near_lo_min < near_lo_max");
  if (!(holdout_share >= 0 && holdout_share < 1)) throw ConfigError("sampler: holdout_share must lie in [0, 1)");
}

Json SamplerConfig::to_json() const {
  return Json{{"measures", measures},
              {"points_per_measure", points_per_measure},
              {"dirichlet_share", dirichlet_share},
              {"transported_share", transported_share},
              {"perturbation_weight", perturbation_weight},
              {"dirichlet_concentration", dirichlet_concentration},
              {"max_transport_steps", max_transport_steps},
              {"near_lo_share", near_lo_share},
              {"near_lo_min", near_lo_min},
              {"near_lo_max", near_lo_max},
              {"holdout_share", holdout_share}};
}

SamplerConfig SamplerConfig::from_json(const Json& j) {
  SamplerConfig c;
  c.measures = j.value("measures", c.measures);
  c.points_per_measure = j.value("points_per_measure", c.points_per_measure);
  c.dirichlet_share = j.value("dirichlet_share", c.dirichlet_share);
  c.transported_share = j.value("transported_share", c.transported_share);
  c.perturbation_weight = j.value("perturbation_weight", c.perturbation_weight);
  c.dirichlet_concentration = j.value("dirichlet_concentration", c.dirichlet_concentration);
  c.max_transport_steps = j.value("max_transport_steps", c.max_transport_steps);
  c.near_lo_share = j.value("near_lo_share", c.near_lo_share);
  c.near_lo_min = j.value("near_lo_min", c.near_lo_min);
  c.near_lo_max = j.value("near_lo_max", c.near_lo_max);
  c.holdout_share = j.value("holdout_share", c.holdout_share);
  c.validate();
  return c;
}

std::size_t SampleSet::size() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.x.size();
  return n;
}

Json SampleSet::to_json() const {
  Json gs = Json::array();
  for (const auto& g : groups) {
    gs.push_back(Json{{"origin", origin_name(g.origin)}, {"holdout", g.holdout}, {"M", g.M}, {"x", g.x}});
  }
  return Json{{"grid", grid->to_json()}, {"groups", gs}};
}

SampleSet SampleSet::from_json(const Json& j) {
  SampleSet s;
  s.grid = std::make_shared<const Grid>(Grid::from_json(j.at("grid")));
  for (const auto& g : j.at("groups")) {
    SampleGroup group;
    group.origin = origin_from_name(g.at("origin").get<std::string>());
    group.holdout = g.at("holdout").get<bool>();
    group.M = g.at("M").get<std::vector<double>>();
    group.x = g.at("x").get<std::vector<double>>();
    if (group.M.size() != s.grid->dimension()) throw ConfigError("samples: measure length does not match grid");
    s.groups.push_back(std::move(group));
  }
  return s;
}

BatchSavings network_policy(const ValueSet& nets, int i, const DiscreteMeasure& m, const EconomyParams& params,
                            bool cap_savings) {
  const Prices prices = factor_prices(params, m, i);
  std::vector<double> M(m.coefficients().begin(), m.coefficients().end());
  return [&nets, i, prices, M = std::move(M), params, cap_savings](int level, std::span<const double> xs,
                                                                   std::span<double> s) {
    VectorXd g;
    nets[net_index(i, level)].evaluate(broadcast_batch(xs, M, prices.r), nullptr, &g);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      s[k] = decision(params, cap_savings, xs[k], g[static_cast<Eigen::Index>(k)], prices, params.y[level]).savings;
    }
  };
}

std::vector<double> dirichlet_measure(const Grid& grid, double concentration, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> mass(grid.dimension());
  double total = 0.0;
  for (double& m : mass) total += (m = gamma(rng));
  const auto factors = grid.slot_mass_factors();
  std::vector<double> coefficients(mass.size());
  for (std::size_t s = 0; s < mass.size(); ++s) coefficients[s] = mass[s] / total / factors[s];
  return coefficients;
}

std::vector<double> sample_capital(const SamplerConfig& config, const EconomyParams& params, int n,
                                   std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int near = rounded_share(config.near_lo_share, n);
  const double lo = std::log(config.near_lo_min), hi = std::log(config.near_lo_max);
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double u = unit(rng);
    xs[k] = k < near ? std::min(params.x_hi, params.x_lo + std::exp(lo + (hi - lo) * u))
                     : params.x_lo + (params.x_hi - params.x_lo) * u;
  }
  return xs;
}

SampleSet generate_samples(const SamplerConfig& config, const DiscreteMeasure& base, const EconomyParams& params,
                           const TransportConfig& transport, const ValueSet* nets, bool cap_savings,
                           std::mt19937_64& rng) {
  config.validate();
  const int G = config.measures;
  const int n_dirichlet = rounded_share(config.dirichlet_share, G);
  const int n_transported = std::min(G - n_dirichlet, rounded_share(config.transported_share, G));
  const int n_perturbed = G - n_dirichlet - n_transported;
  if (n_transported > 0 && nets == nullptr) throw ConfigError("sampler: transported samples need value networks");
  if (n_transported > 0 && n_dirichlet + n_perturbed == 0) {
    throw ConfigError("sampler: transported samples need untransported sources");
  }

  SampleSet set;
  set.grid = base.grid_ptr();
  const auto& grid = base.grid();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto base_M = pack(base);
  for (int g = 0; g < n_dirichlet + n_perturbed; ++g) {
    SampleGroup group;
    auto random = dirichlet_measure(grid, config.dirichlet_concentration, rng);
    if (g < n_dirichlet) {
      group.origin = SampleOrigin::Dirichlet;
      group.M = std::move(random);
    } else {
      group.origin = SampleOrigin::Perturbed;
      const double theta = config.perturbation_weight * unit(rng);
      group.M.resize(base_M.size());
      for (std::size_t s = 0; s < base_M.size(); ++s) group.M[s] = (1.0 - theta) * base_M[s] + theta * random[s];
    }
    group.x = sample_capital(config, params, config.points_per_measure, rng);
    set.groups.push_back(std::move(group));
  }
  const int sources = n_dirichlet + n_perturbed;
  std::uniform_int_distribution<int> pick(0, sources - 1), steps(1, config.max_transport_steps), state(0, 1);
  for (int g = 0; g < n_transported; ++g) {
    auto m = unpack(set.groups[static_cast<std::size_t>(pick(rng))].M, set.grid, MassCheck::Renormalize);
    for (int k = steps(rng); k > 0; --k) {
      const int i = state(rng);
      auto next = push_forward(m, network_policy(*nets, i, m, params, cap_savings), params, transport, &rng);
      // Stop before a measure without capital, whose prices are undefined.
      if (!has_prices(params, next)) break;
      m = std::move(next);
    }
    SampleGroup group;
    group.origin = SampleOrigin::Transported;
    group.M = pack(m);
    group.x = sample_capital(config, params, config.points_per_measure, rng);
    set.groups.push_back(std::move(group));
  }

  std::vector<int> order(static_cast<std::size_t>(G));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const int holdout = std::min(G - 1, rounded_share(config.holdout_share, G));
  for (int k = 0; k < holdout; ++k) set.groups[static_cast<std::size_t>(order[k])].holdout = true;
  return set;
}

// ---------------------------------------------------------------- targets

GroupTargets group_targets(const ValueSet& nets, const std::shared_ptr<const Grid>& grid, std::span<const double> M,
                           std::span<const double> xs, const EconomyParams& params, const TransportConfig& transport,
                           bool cap_savings, std::uint64_t transport_seed) {
  const DiscreteMeasure m(grid, std::vector<double>(M.begin(), M.end()));
  const std::vector<double> Mv(M.begin(), M.end());
  const auto n = static_cast<Eigen::Index>(xs.size());
  GroupTargets out;
  std::array<VectorXd, kNets> grad;
  for (int i = 0; i < kAggregateStates; ++i) {
    out.prices[i] = factor_prices(params, m, i);
    for (int j = 0; j < kLevels; ++j) {
      VectorXd v;
      nets[net_index(i, j)].evaluate(broadcast_batch(xs, Mv, out.prices[i].r), &v, &grad[net_index(i, j)]);
      out.value[net_index(i, j)].assign(v.data(), v.data() + n);
    }
  }
  const double dt = params.dt;
  for (int i = 0; i < kAggregateStates; ++i) {
    std::mt19937_64 rng(derive_seed(transport_seed, {static_cast<std::uint64_t>(i)}));
    const auto m_next = push_forward(m, network_policy(nets, i, m, params, cap_savings), params, transport, &rng);
    const auto M_next = pack(m_next);
    // All mass at x_lo leaves the rate undefined; the network then sees the current one.
    const auto next = try_factor_prices(params, *grid, M_next, i);
    out.next_rate[i] = next ? next->r : out.prices[i].r;
    for (int j = 0; j < kLevels; ++j) {
      const int q = net_index(i, j);
      std::vector<double> x_next(xs.size()), u(xs.size());
      out.savings[q].resize(xs.size());
      for (Eigen::Index k = 0; k < n; ++k) {
        const auto d = decision(params, cap_savings, xs[k], grad[q][k], out.prices[i], params.y[j]);
        out.savings[q][k] = d.savings;
        x_next[k] = xs[k] + dt * d.savings;
        u[k] = utility(params, d.consumption);
      }
      VectorXd cont;
      nets[q].evaluate(broadcast_batch(x_next, M_next, out.next_rate[i]), &cont, nullptr);
      const auto& v = out.value[q];
      const auto& v_other_level = out.value[net_index(i, 1 - j)];
      const auto& v_other_state = out.value[net_index(1 - i, j)];
      out.target[q].resize(xs.size());
      for (Eigen::Index k = 0; k < n; ++k) {
        out.target[q][k] = (cont[k] - params.lambda[j] * dt * (v[k] - v_other_level[k]) -
                            params.mu[i] * dt * (v[k] - v_other_state[k]) + dt * u[k]) /
                           params.discount();
      }
    }
  }
  return out;
}

double bellman_target(double x, const DiscreteMeasure& m, const ValueSet& nets, int i, int j,
                      const EconomyParams& params, const TransportConfig& transport, bool cap_savings) {
  const double xs[1] = {x};
  const auto t = group_targets(nets, m.grid_ptr(), m.coefficients(), xs, params, transport, cap_savings,
                               transport.rng_seed);
  return t.target[net_index(i, j)][0];
}

double residual(double candidate, double target, const EconomyParams& params) {
  return params.discount() * (candidate - target);
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (steps < 0 || batch < 1 || eval_every < 1) throw ConfigError("train: steps >= 0, batch >= 1, eval_every >= 1");
  if (lbfgs_rank < 1) throw ConfigError("train: lbfgs_rank must be >= 1");
  if (!(adam.lr > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) ||
      !(adam.eps > 0)) {
    throw ConfigError("train: invalid Adam settings");
  }
  if (!(divergence_mse > 0)) throw ConfigError("train: divergence_mse must be positive");
}

Json TrainConfig::to_json() const {
  return Json{{"optimizer", optimizer == Optimizer::Adam ? "adam" : "lbfgs"},
              {"lbfgs_rank", lbfgs_rank},
              {"lr", adam.lr},       {"beta1", adam.beta1},           {"beta2", adam.beta2},
              {"eps", adam.eps},     {"steps", steps},                {"batch", batch},
              {"eval_every", eval_every}, {"keep_best", keep_best}, {"divergence_mse", divergence_mse}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  TrainConfig c;
  const auto optimizer = j.value("optimizer", std::string("adam"));
  if (optimizer == "adam") {
    c.optimizer = Optimizer::Adam;
  } else if (optimizer == "lbfgs") {
    c.optimizer = Optimizer::Lbfgs;
  } else {
    throw ConfigError("train: unknown optimizer '" + optimizer + "'");
  }
  c.lbfgs_rank = j.value("lbfgs_rank", c.lbfgs_rank);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.keep_best = j.value("keep_best", c.keep_best);
  c.divergence_mse = j.value("divergence_mse", c.divergence_mse);
  c.validate();
  return c;
}

double mean_squared_error(const ValueNetwork& net, const TrainData& data) {
  if (data.targets.size() == 0) return 0.0;
  return (net.forward(data.inputs) - data.targets).squaredNorm() / static_cast<double>(data.targets.size());
}

namespace {

class MseCost final : public ceres::FirstOrderFunction {
 public:
  MseCost(ValueNetwork& net, const TrainData& data) : net_(net), data_(data), grad_(net.parameter_count()) {}

  bool Evaluate(const double* parameters, double* cost, double* gradient) const override {
    std::copy(parameters, parameters + NumParameters(), net_.parameters().begin());
    *cost = net_.mse_gradient(data_.inputs, data_.targets, grad_);
    if (gradient != nullptr) std::copy(grad_.begin(), grad_.end(), gradient);
    return std::isfinite(*cost);
  }
  int NumParameters() const override { return static_cast<int>(net_.parameter_count()); }

 private:
  ValueNetwork& net_;
  const TrainData& data_;
  mutable std::vector<double> grad_;
};

double train_lbfgs(ValueNetwork& net, const TrainData& data, const TrainConfig& config) {
  // Line search warnings go through glog; only errors are of interest here.
  FLAGS_minloglevel = std::max(FLAGS_minloglevel, 2);
  std::vector<double> x(net.parameters().begin(), net.parameters().end());
  ceres::GradientProblem problem(new MseCost(net, data));
  ceres::GradientProblemSolver::Options options;
  options.line_search_direction_type = ceres::LBFGS;
  options.max_lbfgs_rank = config.lbfgs_rank;
  options.max_num_iterations = config.steps;
  options.function_tolerance = 0.0;
  options.gradient_tolerance = 0.0;
  options.parameter_tolerance = 0.0;
  options.logging_type = ceres::SILENT;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(options, problem, x.data(), &summary);
  std::copy(x.begin(), x.end(), net.parameters().begin());
  const double mse = mean_squared_error(net, data);
  if (!std::isfinite(mse) || mse > config.divergence_mse) {
    throw NumericalError("training diverged: mean squared error " + format_double(mse));
  }
  return mse;
}

}  // namespace

TrainResult train_network(ValueNetwork& net, const TrainData& data, const TrainConfig& config, std::uint64_t seed,
                          AdamState* state) {
  config.validate();
  const auto n = data.targets.size();
  TrainResult result;
  result.mse_before = result.mse_after = mean_squared_error(net, data);
  if (n == 0 || config.steps == 0) return result;
  if (!std::isfinite(result.mse_before)) throw NumericalError("training started from a non-finite loss");

  if (config.optimizer == Optimizer::Lbfgs) {
    const std::vector<double> start(net.parameters().begin(), net.parameters().end());
    result.mse_after = train_lbfgs(net, data, config);
    if (config.keep_best && !(result.mse_after <= result.mse_before)) {
      std::copy(start.begin(), start.end(), net.parameters().begin());
      result.mse_after = result.mse_before;
    }
    return result;
  }

  std::vector<double> best(net.parameters().begin(), net.parameters().end());
  std::vector<double> grad(net.parameter_count());
  AdamState local;
  AdamState& adam = state != nullptr ? *state : local;
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index batch = std::min<Eigen::Index>(config.batch, n);
  Eigen::Index cursor = n;
  NetBatch mb;
  mb.x.resize(batch);
  mb.r.resize(batch);
  mb.M.resize(data.inputs.M.rows(), batch);
  VectorXd t(batch);
  for (int step = 1; step <= config.steps; ++step) {
    if (cursor + batch > n) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    for (Eigen::Index k = 0; k < batch; ++k) {
      const Eigen::Index c = order[static_cast<std::size_t>(cursor + k)];
      mb.x[k] = data.inputs.x[c];
      mb.r[k] = data.inputs.r[c];
      mb.M.col(k) = data.inputs.M.col(c);
      t[k] = data.targets[c];
    }
    cursor += batch;
    net.mse_gradient(mb, t, grad);
    adam_step(net.parameters(), grad, adam, config.adam);
    if (step % config.eval_every == 0 || step == config.steps) {
      const double mse = mean_squared_error(net, data);
      if (!std::isfinite(mse) || mse > config.divergence_mse) {
        throw NumericalError("training diverged: mean squared error " + format_double(mse) + " at step " +
                             std::to_string(step));
      }
      if (!config.keep_best) {
        result.mse_after = mse;
      } else if (mse < result.mse_after) {
        result.mse_after = mse;
        std::copy(net.parameters().begin(), net.parameters().end(), best.begin());
      }
    }
  }
  if (config.keep_best) std::copy(best.begin(), best.end(), net.parameters().begin());
  return result;
}

// ---------------------------------------------------------------- solver

void SolverConfig::validate() const {
  if (outer_iterations < 1) throw ConfigError("solver: outer_iterations must be >= 1");
  if (!(policy_tol > 0)) throw ConfigError("solver: policy_tol must be positive");
  train.validate();
  if (!(refresh_share >= 0 && refresh_share <= 1)) throw ConfigError("solver: refresh_share must lie in [0, 1]");
  if (probe_points < 2 || probe_measures < 1) throw ConfigError("solver: probe_points >= 2, probe_measures >= 1");
  if (pretrain_steps < 0) throw ConfigError("solver: pretrain_steps must be >= 0");
  if (threads < 0) throw ConfigError("solver: threads must be >= 0");
}

Json SolverConfig::to_json() const {
  return Json{{"outer_iterations", outer_iterations}, {"policy_tol", policy_tol},
              {"train", train.to_json()},             {"refresh_share", refresh_share},
              {"probe_points", probe_points},         {"probe_measures", probe_measures},
              {"pretrain_steps", pretrain_steps},     {"cap_savings", cap_savings},
              {"threads", threads}};
}

SolverConfig SolverConfig::from_json(const Json& j) {
  SolverConfig c;
  c.outer_iterations = j.value("outer_iterations", c.outer_iterations);
  c.policy_tol = j.value("policy_tol", c.policy_tol);
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  c.refresh_share = j.value("refresh_share", c.refresh_share);
  c.probe_points = j.value("probe_points", c.probe_points);
  c.probe_measures = j.value("probe_measures", c.probe_measures);
  c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
  c.cap_savings = j.value("cap_savings", c.cap_savings);
  c.threads = j.value("threads", c.threads);
  c.validate();
  return c;
}

double IterationReport::mean_holdout_residual() const {
  return std::accumulate(holdout_residual.begin(), holdout_residual.end(), 0.0) / kNets;
}

Json IterationReport::to_json() const {
  return Json{{"iteration", iteration},
              {"nets", {"1_1", "1_2", "2_1", "2_2"}},
              {"train_mse_before", net_array(train_mse_before)},
              {"train_mse", net_array(train_mse)},
              {"holdout_mse", net_array(holdout_mse)},
              {"holdout_residual", net_array(holdout_residual)},
              {"mean_holdout_residual", mean_holdout_residual()},
              {"policy_change", policy_change},
              {"wall_seconds", wall_seconds}};
}

IterationReport IterationReport::from_json(const Json& j) {
  IterationReport r;
  r.iteration = j.at("iteration").get<int>();
  r.train_mse_before = net_array_from(j.at("train_mse_before"));
  r.train_mse = net_array_from(j.at("train_mse"));
  r.holdout_mse = net_array_from(j.at("holdout_mse"));
  r.holdout_residual = net_array_from(j.at("holdout_residual"));
  r.policy_change = j.at("policy_change").get<double>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
  return r;
}

SampleSet probe_set(const SampleSet& samples, const EconomyParams& params, int points, int measures) {
  SampleSet probe;
  probe.grid = samples.grid;
  std::vector<double> xs(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k) xs[k] = params.x_lo + (params.x_hi - params.x_lo) * k / (points - 1);
  for (bool holdout : {true, false}) {
    for (const auto& g : samples.groups) {
      if (static_cast<int>(probe.groups.size()) == measures) break;
      if (g.holdout != holdout) continue;
      probe.groups.push_back({g.M, xs, g.origin, g.holdout});
    }
  }
  return probe;
}

std::vector<double> probe_savings(const ValueSet& nets, const SampleSet& probe, const EconomyParams& params,
                                  bool cap_savings) {
  std::vector<double> out;
  for (const auto& g : probe.groups) {
    for (int i = 0; i < kAggregateStates; ++i) {
      const Prices prices = factor_prices(params, *probe.grid, g.M, i);
      for (int j = 0; j < kLevels; ++j) {
        VectorXd grad;
        nets[net_index(i, j)].evaluate(broadcast_batch(g.x, g.M, prices.r), nullptr, &grad);
        for (std::size_t k = 0; k < g.x.size(); ++k) {
          out.push_back(decision(params, cap_savings, g.x[k], grad[static_cast<Eigen::Index>(k)], prices,
                                 params.y[j])
                            .savings);
        }
      }
    }
  }
  return out;
}

InputScaling default_scaling(const Grid& grid, const EconomyParams& params, double rate_center, double value_mean,
                             double value_std, double capital_stretch) {
  InputScaling s;
  if (capital_stretch > 0.0) {
    const double top = capital_stretch * std::asinh((params.x_hi - params.x_lo) / capital_stretch);
    s.x_anchor = params.x_lo;
    s.x_stretch = capital_stretch;
    s.x_shift = 0.5 * top;
    s.x_scale = 2.0 / top;
  } else {
    s.x_shift = 0.5 * (params.x_lo + params.x_hi);
    s.x_scale = 2.0 / (params.x_hi - params.x_lo);
  }
  s.r_shift = rate_center;
  s.r_scale = 10.0;
  s.mass_weights = grid.slot_mass_factors();
  s.value_shift = value_mean;
  s.value_scale = value_std > 0 ? value_std : 1.0;
  return s;
}

namespace {

// Columns (x, M, r_i(M)) of the chosen groups, with a per-point value.
template <typename PointValue>
TrainData assemble(const SampleSet& samples, const std::vector<int>& groups, const std::vector<double>& rates,
                   PointValue&& value) {
  Eigen::Index n = 0;
  for (int g : groups) n += static_cast<Eigen::Index>(samples.groups[g].x.size());
  const auto d = static_cast<Eigen::Index>(samples.grid->dimension());
  TrainData data;
  data.inputs.x.resize(n);
  data.inputs.r.resize(n);
  data.inputs.M.resize(d, n);
  data.targets.resize(n);
  Eigen::Index c = 0;
  for (int g : groups) {
    const auto& group = samples.groups[g];
    const Eigen::Map<const VectorXd> M(group.M.data(), d);
    for (std::size_t k = 0; k < group.x.size(); ++k, ++c) {
      data.inputs.x[c] = group.x[k];
      data.inputs.r[c] = rates[g];
      data.inputs.M.col(c) = M;
      data.targets[c] = value(g, k);
    }
  }
  return data;
}

std::vector<int> split(const SampleSet& samples, bool holdout) {
  std::vector<int> out;
  for (std::size_t g = 0; g < samples.groups.size(); ++g) {
    if (samples.groups[g].holdout == holdout) out.push_back(static_cast<int>(g));
  }
  return out;
}

std::vector<double> rates_of(const SampleSet& samples, const EconomyParams& params, int i) {
  std::vector<double> r(samples.groups.size());
  for (std::size_t g = 0; g < r.size(); ++g) r[g] = factor_prices(params, *samples.grid, samples.groups[g].M, i).r;
  return r;
}

}  // namespace

ValueSet pretrained_networks(const NetSpec& spec, const Household& household, const SampleSet& samples,
                             const SolverContext& ctx) {
  const auto train = split(samples, false);
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (int g : train) {
    for (double x : samples.groups[g].x) {
      for (int j = 0; j < kLevels; ++j) {
        const double v = household.value_at(x, j);
        sum += v;
        sum_sq += v * v;
        ++count;
      }
    }
  }
  const double mean = sum / static_cast<double>(count);
  const double std = std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean));
  const auto scaling =
      default_scaling(*samples.grid, ctx.params, household.prices().r, mean, std, spec.capital_stretch);

  ValueSet nets;
  std::array<TrainData, kNets> data;
  for (int i = 0; i < kAggregateStates; ++i) {
    const auto rates = rates_of(samples, ctx.params, i);
    for (int j = 0; j < kLevels; ++j) {
      const int q = net_index(i, j);
      nets[q] = ValueNetwork(spec, scaling);
      nets[q].initialize(derive_seed(ctx.seed, {1, static_cast<std::uint64_t>(q)}));
      data[q] = assemble(samples, train, rates,
                         [&](int g, std::size_t k) { return household.value_at(samples.groups[g].x[k], j); });
    }
  }
  TrainConfig pre = ctx.config.train;
  pre.steps = ctx.config.pretrain_steps;
  parallel_for(kNets, ctx.config.threads, [&](int q) {
    train_network(nets[q], data[q], pre, derive_seed(ctx.seed, {2, static_cast<std::uint64_t>(q)}));
  });
  return nets;
}

StepResult fixed_point_step(const ValueSet& nets, const SampleSet& samples, const SolverContext& ctx, int iteration) {
  const auto start = std::chrono::steady_clock::now();
  const auto& p = ctx.params;
  const bool cap = ctx.config.cap_savings;
  const auto G = static_cast<int>(samples.groups.size());
  const auto it = static_cast<std::uint64_t>(iteration);

  std::vector<GroupTargets> targets(static_cast<std::size_t>(G));
  parallel_for(G, ctx.config.threads, [&](int g) {
    const auto& group = samples.groups[g];
    targets[g] = group_targets(nets, samples.grid, group.M, group.x, p, ctx.transport, cap,
                               derive_seed(ctx.seed, {3, it, static_cast<std::uint64_t>(g)}));
  });

  const auto train = split(samples, false);
  const auto holdout = split(samples, true);
  StepResult result{nets, {}};
  result.report.iteration = iteration;
  std::array<TrainData, kNets> train_data, holdout_data;
  std::array<std::vector<double>, kAggregateStates> rates;
  for (int i = 0; i < kAggregateStates; ++i) {
    rates[i].resize(targets.size());
    for (std::size_t g = 0; g < targets.size(); ++g) rates[i][g] = targets[g].prices[i].r;
    for (int j = 0; j < kLevels; ++j) {
      const int q = net_index(i, j);
      auto target = [&](int g, std::size_t k) { return targets[g].target[q][k]; };
      train_data[q] = assemble(samples, train, rates[i], target);
      holdout_data[q] = assemble(samples, holdout, rates[i], target);
    }
  }
  const double disc2 = p.discount() * p.discount();
  parallel_for(kNets, ctx.config.threads, [&](int q) {
    const auto r = train_network(result.nets[q], train_data[q], ctx.config.train,
                                 derive_seed(ctx.seed, {4, it, static_cast<std::uint64_t>(q)}));
    result.report.train_mse_before[q] = disc2 * r.mse_before;
    result.report.train_mse[q] = disc2 * r.mse_after;
    result.report.holdout_mse[q] = disc2 * mean_squared_error(result.nets[q], holdout_data[q]);
  });

  // Residual of the new iterate against its own Bellman targets.
  std::vector<GroupTargets> own(holdout.size());
  parallel_for(static_cast<int>(holdout.size()), ctx.config.threads, [&](int k) {
    const auto& group = samples.groups[holdout[k]];
    own[k] = group_targets(result.nets, samples.grid, group.M, group.x, p, ctx.transport, cap,
                           derive_seed(ctx.seed, {5, it, static_cast<std::uint64_t>(holdout[k])}));
  });
  for (int q = 0; q < kNets; ++q) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& t : own) {
      for (std::size_t k = 0; k < t.value[q].size(); ++k, ++count) {
        const double R = residual(t.value[q][k], t.target[q][k], p);
        sum += R * R;
      }
    }
    result.report.holdout_residual[q] = count > 0 ? sum / static_cast<double>(count) : 0.0;
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void refresh_samples(SampleSet& samples, const ValueSet& nets, const SamplerConfig& sampler, const SolverContext& ctx,
                     int iteration) {
  auto train = split(samples, false);
  const int count = rounded_share(ctx.config.refresh_share, static_cast<int>(train.size()));
  if (count == 0) return;
  std::mt19937_64 rng(derive_seed(ctx.seed, {6, static_cast<std::uint64_t>(iteration)}));
  std::vector<int> sources = train;
  std::shuffle(train.begin(), train.end(), rng);
  std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
  std::uniform_int_distribution<int> state(0, 1);
  // Sources are read before any replacement so the result is order independent.
  std::vector<SampleGroup> fresh;
  for (int k = 0; k < count; ++k) {
    const auto m = unpack(samples.groups[sources[pick(rng)]].M, samples.grid, MassCheck::Renormalize);
    const int i = state(rng);
    const auto next = push_forward(m, network_policy(nets, i, m, ctx.params, ctx.config.cap_savings), ctx.params,
                                   ctx.transport, &rng);
    auto x = sample_capital(sampler, ctx.params, sampler.points_per_measure, rng);
    if (!has_prices(ctx.params, next)) {
      fresh.push_back(samples.groups[train[k]]);
      continue;
    }
    SampleGroup group;
    group.origin = SampleOrigin::Transported;
    group.M = pack(next);
    group.x = std::move(x);
    fresh.push_back(std::move(group));
  }
  for (int k = 0; k < count; ++k) samples.groups[train[k]] = std::move(fresh[k]);
}

fs::path iteration_dir(const fs::path& run_dir, int n) { return run_dir / ("iter_" + std::to_string(n)); }

std::string net_file_name(int i, int j) {
  return "net_" + std::to_string(i + 1) + "_" + std::to_string(j + 1) + ".ckpt";
}

int last_complete_iteration(const fs::path& run_dir) {
  int n = 0;
  while (true) {
    const auto dir = iteration_dir(run_dir, n + 1);
    bool complete = fs::exists(dir / "report.json") && fs::exists(dir / "samples.json");
    for (int i = 0; i < kAggregateStates; ++i) {
      for (int j = 0; j < kLevels; ++j) complete = complete && fs::exists(dir / net_file_name(i, j));
    }
    if (!complete) return n;
    ++n;
  }
}

ValueSet load_networks(const fs::path& iter_dir, const NetSpec* expected) {
  ValueSet nets;
  for (int i = 0; i < kAggregateStates; ++i) {
    for (int j = 0; j < kLevels; ++j) nets[net_index(i, j)] = load_checkpoint(iter_dir / net_file_name(i, j), expected);
  }
  return nets;
}

SolveHistory solve(ValueSet initial, SampleSet samples, const SamplerConfig& sampler, const SolverContext& ctx,
                   const fs::path& run_dir, std::string config_hash) {
  ctx.config.validate();
  SolveHistory history;
  history.nets = std::move(initial);
  history.samples = std::move(samples);
  const auto probe = probe_set(history.samples, ctx.params, ctx.config.probe_points, ctx.config.probe_measures);
  const bool cap = ctx.config.cap_savings;

  int start = 1;
  if (!run_dir.empty()) {
    const int done = last_complete_iteration(run_dir);
    if (done > 0) {
      const auto dir = iteration_dir(run_dir, done);
      const NetSpec spec = history.nets[0].spec();
      history.nets = load_networks(dir, &spec);
      history.samples = SampleSet::from_json(read_json_file(dir / "samples.json"));
      for (int n = 1; n <= done; ++n) {
        history.reports.push_back(IterationReport::from_json(read_json_file(iteration_dir(run_dir, n) / "report.json")));
      }
      history.converged = history.reports.back().policy_change < ctx.config.policy_tol;
      start = done + 1;
    }
  }

  auto previous = probe_savings(history.nets, probe, ctx.params, cap);
  for (int n = start; n <= ctx.config.outer_iterations && !history.converged; ++n) {
    const auto begin = std::chrono::steady_clock::now();
    auto step = fixed_point_step(history.nets, history.samples, ctx, n);
    const auto current = probe_savings(step.nets, probe, ctx.params, cap);
    double change = 0.0;
    for (std::size_t k = 0; k < current.size(); ++k) change = std::max(change, std::abs(current[k] - previous[k]));
    step.report.policy_change = change;
    previous = current;
    history.nets = std::move(step.nets);
    history.converged = change < ctx.config.policy_tol;
    // Also after the last iteration, so that a longer resumed run matches an uninterrupted one.
    if (!history.converged) refresh_samples(history.samples, history.nets, sampler, ctx, n);
    step.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count();
    if (!run_dir.empty()) {
      const auto dir = iteration_dir(run_dir, n);
      fs::create_directories(dir);
      for (int i = 0; i < kAggregateStates; ++i) {
        for (int j = 0; j < kLevels; ++j) {
          save_checkpoint(history.nets[net_index(i, j)], dir / net_file_name(i, j), config_hash);
        }
      }
      write_json_file(dir / "samples.json", history.samples.to_json());
      write_json_file(dir / "report.json", step.report.to_json());
    }
    history.reports.push_back(step.report);
  }
  return history;
}

// ---------------------------------------------------------------- frozen measure

void FrozenConfig::validate() const {
  if (points < 2 || max_iterations < 1) throw ConfigError("frozen: points >= 2 and max_iterations >= 1");
  if (!(policy_tol > 0) || !(value_tol > 0)) throw ConfigError("frozen: tolerances must be positive");
  if (!(near_lo_share >= 0 && near_lo_share <= 1)) throw ConfigError("frozen: near_lo_share must lie in [0, 1]");
  if (pretrain_steps < 0) throw ConfigError("frozen: pretrain_steps must be >= 0");
  train.validate();
}

double FrozenResult::value_at(double x, int level) const {
  const double xs[1] = {x};
  return nets[level].forward(broadcast_batch(xs, pinned, prices.r))[0];
}

Decision FrozenResult::decision_at(double x, int level, const EconomyParams& params) const {
  const double xs[1] = {x};
  VectorXd g;
  nets[level].evaluate(broadcast_batch(xs, pinned, prices.r), nullptr, &g);
  return decision(params, cap_savings, x, g[0], prices, params.y[level]);
}

FrozenResult frozen_measure_mode(const EconomyParams& params, Prices prices, const DiscreteMeasure& pinned,
                                 NetSpec spec, const FrozenConfig& config, std::uint64_t seed) {
  config.validate();
  if (!(prices.w > 0)) throw ConfigError("frozen: wage must be positive");
  FrozenResult out;
  out.pinned = pack(pinned);
  out.prices = prices;
  out.cap_savings = config.cap_savings;
  spec.d = static_cast<int>(pinned.grid().dimension());

  SamplerConfig sampler;
  sampler.near_lo_share = config.near_lo_share;
  std::mt19937_64 rng(derive_seed(seed, {7}));
  auto xs = sample_capital(sampler, params, config.points - 1, rng);
  // Constrained households land exactly on x_lo.
  xs.push_back(params.x_lo);
  std::sort(xs.begin(), xs.end());
  const auto n = static_cast<Eigen::Index>(xs.size());

  // u(w y + r x) / rho: consume the income and keep wealth constant.
  std::array<VectorXd, kLevels> v0;
  double sum = 0.0, sum_sq = 0.0;
  for (int j = 0; j < kLevels; ++j) {
    v0[j].resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double income = std::max(prices.w * params.y[j] + prices.r * xs[k], 1e-6);
      v0[j][k] = utility(params, income) / params.rho;
      sum += v0[j][k];
      sum_sq += v0[j][k] * v0[j][k];
    }
  }
  const double count = 2.0 * static_cast<double>(n);
  const double mean = sum / count;
  const double std = std::sqrt(std::max(0.0, sum_sq / count - mean * mean));
  const auto scaling = default_scaling(pinned.grid(), params, prices.r, mean, std, spec.capital_stretch);

  TrainData data;
  data.inputs = broadcast_batch(xs, out.pinned, prices.r);
  TrainConfig pre = config.train;
  pre.steps = config.pretrain_steps;
  for (int j = 0; j < kLevels; ++j) {
    out.nets[j] = ValueNetwork(spec, scaling);
    out.nets[j].initialize(derive_seed(seed, {8, static_cast<std::uint64_t>(j)}));
    data.targets = v0[j];
    train_network(out.nets[j], data, pre, derive_seed(seed, {9, static_cast<std::uint64_t>(j)}));
  }

  std::array<AdamState, kLevels> adam;
  std::vector<double> previous;
  std::array<VectorXd, kLevels> value, grad;
  auto evaluate_all = [&]() {
    std::vector<double> s;
    for (int j = 0; j < kLevels; ++j) {
      out.nets[j].evaluate(data.inputs, &value[j], &grad[j]);
      for (Eigen::Index k = 0; k < n; ++k) {
        s.push_back(decision(params, config.cap_savings, xs[k], grad[j][k], prices, params.y[j]).savings);
      }
    }
    return s;
  };
  previous = evaluate_all();
  for (int it = 1; it <= config.max_iterations; ++it) {
    std::array<VectorXd, kLevels> target, old_value = value;
    for (int j = 0; j < kLevels; ++j) {
      std::vector<double> x_next(xs.size());
      VectorXd u(n);
      for (Eigen::Index k = 0; k < n; ++k) {
        const auto d = decision(params, config.cap_savings, xs[k], grad[j][k], prices, params.y[j]);
        x_next[k] = xs[k] + params.dt * d.savings;
        u[k] = utility(params, d.consumption);
      }
      const VectorXd cont = out.nets[j].forward(broadcast_batch(x_next, out.pinned, prices.r));
      target[j] = (cont.array() - params.lambda[j] * params.dt * (value[j] - value[1 - j]).array() +
                   params.dt * u.array()) /
                  params.discount();
    }
    for (int j = 0; j < kLevels; ++j) {
      data.targets = target[j];
      train_network(out.nets[j], data, config.train,
                    derive_seed(seed, {10, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(j)}), &adam[j]);
    }
    const auto current = evaluate_all();
    double change = 0.0, value_change = 0.0;
    for (std::size_t k = 0; k < current.size(); ++k) change = std::max(change, std::abs(current[k] - previous[k]));
    for (int j = 0; j < kLevels; ++j) value_change = std::max(value_change, (value[j] - old_value[j]).cwiseAbs().maxCoeff());
    previous = current;
    out.iterations = it;
    out.policy_change = change;
    out.value_change = value_change;
    out.policy_changes.push_back(change);
    if (change < config.policy_tol && value_change < config.value_tol) break;
  }
  return out;
}

}  // namespace ksm
