#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "ksm/errors.hpp"
#include "ksm/solver.hpp"

using namespace ksm;
using doctest::Approx;
namespace fs = std::filesystem;

namespace {

NetSpec small_spec(int d) {
  NetSpec s;
  s.d = d;
  s.d0 = 1;
  s.feature_embed = 4;
  s.rate_embed = 4;
  s.capital_embed = 8;
  s.trunk = {8};
  return s;
}

// Zero parameters: the network returns value_shift everywhere with zero slope.
ValueNetwork constant_net(const NetSpec& spec, double c) {
  InputScaling sc;
  sc.mass_weights.assign(static_cast<std::size_t>(spec.d), 1.0);
  sc.value_shift = c;
  return ValueNetwork(spec, sc);
}

ValueSet constant_nets(const NetSpec& spec, std::array<double, kNets> c) {
  ValueSet nets;
  for (int q = 0; q < kNets; ++q) nets[q] = constant_net(spec, c[q]);
  return nets;
}

// Level-1 mass only: a at x_lo and the rest at x_hi, so K = L = 0.7 and, in
// the low aggregate state, r = 0.40 and w = 0.45.
DiscreteMeasure unit_ratio_measure(const EconomyParams& p) {
  auto grid = std::make_shared<const Grid>(Grid::uniform(p.x_lo, p.x_hi, 4, 4));
  std::vector<double> c(grid->dimension(), 0.0);
  const double a = 1.0 - p.y[0] / p.x_hi;
  c[grid->dirac_lo_slot(0)] = a;
  c[grid->dirac_hi_slot(0)] = 1.0 - a;
  return DiscreteMeasure(grid, c);
}

double crra(double c) { return -1.0 / c; }  // gamma = 2

struct Setup {
  EconomyParams params;
  DiscreteMeasure base;
  SampleSet samples;
  NetSpec spec;
};

Setup small_setup(std::uint64_t seed, int measures = 12) {
  Setup s{EconomyParams{}, uniform_measure(std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 4, 4))), {}, {}};
  SamplerConfig sc;
  sc.measures = measures;
  sc.points_per_measure = 6;
  sc.transported_share = 0.0;
  sc.holdout_share = 0.25;
  std::mt19937_64 rng(seed);
  s.samples = generate_samples(sc, s.base, s.params, TransportConfig{}, nullptr, false, rng);
  s.spec = small_spec(static_cast<int>(s.base.grid().dimension()));
  return s;
}

SolverContext small_context(const EconomyParams& p, std::uint64_t seed) {
  SolverContext ctx{p, TransportConfig{}, SolverConfig{}, seed};
  ctx.config.train.steps = 40;
  ctx.config.train.batch = 16;
  ctx.config.train.eval_every = 10;
  ctx.config.train.adam.lr = 1e-2;
  ctx.config.probe_points = 5;
  ctx.config.probe_measures = 2;
  ctx.config.pretrain_steps = 20;
  return ctx;
}

ValueSet random_nets(const NetSpec& spec, const Setup& s, std::uint64_t seed) {
  ValueSet nets;
  const auto sc = default_scaling(s.base.grid(), s.params, 0.04, -10.0, 3.0);
  for (int q = 0; q < kNets; ++q) {
    nets[q] = ValueNetwork(spec, sc);
    nets[q].initialize(derive_seed(seed, {static_cast<std::uint64_t>(q)}));
  }
  return nets;
}

}  // namespace

TEST_CASE("seed derivation") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
  std::vector<int> out(37, -1);
  parallel_for(37, 4, [&](int k) { out[k] = k * k; });
  for (int k = 0; k < 37; ++k) CHECK(out[k] == k * k);
  CHECK_THROWS(parallel_for(5, 3, [](int k) {
    if (k == 3) throw NumericalError("boom");
  }));
}

TEST_CASE("bellman target with zero networks") {
  const EconomyParams p;
  const auto m = unit_ratio_measure(p);
  const Prices prices = factor_prices(p, m, 0);
  REQUIRE(prices.r == Approx(0.40).epsilon(1e-12));
  REQUIRE(prices.w == Approx(0.45).epsilon(1e-12));
  const auto spec = small_spec(static_cast<int>(m.grid().dimension()));
  const auto nets = constant_nets(spec, {0, 0, 0, 0});
  // Zero slope: the consumption rule spends the whole budget, c = w y1 at x_lo.
  const double c = 0.45 * 0.7;
  const double expected = 0.25 * crra(c) / 1.0375;
  CHECK(expected == Approx(-0.764965).epsilon(1e-6));
  CHECK(bellman_target(0.0, m, nets, 0, 0, p, TransportConfig{}) == Approx(expected).epsilon(1e-12));

  // Switching terms are differences of equal values.
  EconomyParams q = p;
  q.lambda = {0.8, 0.8};
  q.mu = {0.9, 0.9};
  CHECK(bellman_target(0.0, m, nets, 0, 0, q, TransportConfig{}) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("bellman target with constant networks") {
  EconomyParams p;
  const auto m = unit_ratio_measure(p);
  const auto spec = small_spec(static_cast<int>(m.grid().dimension()));
  const double x = 2.0;
  for (int i = 0; i < kAggregateStates; ++i) {
    const Prices pr = factor_prices(p, m, i);
    for (int j = 0; j < kLevels; ++j) {
      const double c = (x - p.x_lo) / p.dt + pr.w * p.y[j] + pr.r * x;
      SUBCASE("no switching") {
        p.lambda = {0.0, 0.0};
        p.mu = {0.0, 0.0};
        const auto nets = constant_nets(spec, {-3.0, -3.0, -3.0, -3.0});
        CHECK(bellman_target(x, m, nets, i, j, p, TransportConfig{}) ==
              Approx((-3.0 + p.dt * crra(c)) / p.discount()).epsilon(1e-12));
      }
      SUBCASE("distinct constants") {
        const std::array<double, kNets> C{-4.0, -2.5, -3.5, -1.0};
        const auto nets = constant_nets(spec, C);
        const double v = C[net_index(i, j)];
        const double manual = (v - p.lambda[j] * p.dt * (v - C[net_index(i, 1 - j)]) -
                               p.mu[i] * p.dt * (v - C[net_index(1 - i, j)]) + p.dt * crra(c)) /
                              p.discount();
        CHECK(bellman_target(x, m, nets, i, j, p, TransportConfig{}) == Approx(manual).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("residual arithmetic") {
  const EconomyParams p;
  const double target = 0.25 * crra(0.315) / 1.0375;
  CHECK(residual(0.0, target, p) == Approx(0.793651).epsilon(1e-6));
  CHECK(residual(target, target, p) == 0.0);
  // Affine in the candidate with slope 1 + rho dt.
  CHECK(residual(2.0, 1.0, p) - residual(1.0, 1.0, p) == Approx(p.discount()));
}

TEST_CASE("group targets agree with pointwise targets") {
  auto s = small_setup(3);
  const auto nets = random_nets(s.spec, s, 11);
  const auto& g = s.samples.groups[0];
  const auto t = group_targets(nets, s.samples.grid, g.M, g.x, s.params, TransportConfig{}, false);
  const DiscreteMeasure m(s.samples.grid, g.M);
  for (int i = 0; i < kAggregateStates; ++i) {
    for (int j = 0; j < kLevels; ++j) {
      for (std::size_t k = 0; k < g.x.size(); ++k) {
        CHECK(t.target[net_index(i, j)][k] ==
              Approx(bellman_target(g.x[k], m, nets, i, j, s.params, TransportConfig{})).epsilon(1e-12));
        CHECK(g.x[k] + s.params.dt * t.savings[net_index(i, j)][k] >= s.params.x_lo - 1e-12);
      }
    }
  }
}

TEST_CASE("sampler invariants") {
  const EconomyParams p;
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 5, 3));
  const auto base = uniform_measure(grid, 0.6);
  const auto spec = small_spec(static_cast<int>(grid->dimension()));
  ValueSet nets;
  for (int q = 0; q < kNets; ++q) {
    nets[q] = ValueNetwork(spec, default_scaling(*grid, p, 0.04, -10.0, 3.0));
    nets[q].initialize(static_cast<std::uint64_t>(q));
  }
  SamplerConfig sc;
  sc.measures = 40;
  sc.points_per_measure = 20;
  std::mt19937_64 rng(5);
  const auto set = generate_samples(sc, base, p, TransportConfig{}, &nets, false, rng);
  REQUIRE(set.groups.size() == 40);
  CHECK(set.size() == 800);
  int holdout = 0, transported = 0, dirichlet = 0, near = 0;
  for (const auto& g : set.groups) {
    CHECK(coefficient_mass(*grid, g.M) == Approx(1.0).epsilon(1e-12));
    for (double c : g.M) CHECK(c >= 0.0);
    for (double x : g.x) {
      CHECK(x >= p.x_lo);
      CHECK(x <= p.x_hi);
      near += x - p.x_lo <= sc.near_lo_max ? 1 : 0;
    }
    holdout += g.holdout;
    transported += g.origin == SampleOrigin::Transported;
    dirichlet += g.origin == SampleOrigin::Dirichlet;
  }
  CHECK(holdout == 4);
  CHECK(transported == 10);
  CHECK(dirichlet == 10);
  // 20% log-spaced plus the uniform draws that happen to land in [0, 1].
  CHECK(near >= 160);

  const auto back = SampleSet::from_json(set.to_json());
  REQUIRE(back.groups.size() == set.groups.size());
  CHECK(back.groups[7].M == set.groups[7].M);
  CHECK(back.groups[7].x == set.groups[7].x);
  CHECK(back.groups[7].origin == set.groups[7].origin);
  CHECK(*back.grid == *grid);

  CHECK_THROWS_AS(generate_samples(sc, base, p, TransportConfig{}, nullptr, false, rng), ConfigError);
}

TEST_CASE("zero perturbation weight reproduces the base measure") {
  const EconomyParams p;
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 4, 4));
  const auto base = uniform_measure(grid, 0.3);
  SamplerConfig sc;
  sc.measures = 15;
  sc.dirichlet_share = 0.0;
  sc.transported_share = 0.0;
  sc.perturbation_weight = 0.0;
  std::mt19937_64 rng(8);
  const auto set = generate_samples(sc, base, p, TransportConfig{}, nullptr, false, rng);
  for (const auto& g : set.groups) {
    CHECK(g.origin == SampleOrigin::Perturbed);
    CHECK(g.M == pack(base));
  }
}

TEST_CASE("perturbed sample rates bracket the base rate") {
  const EconomyParams p;
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 30.0, 6, 6));
  // A concentrated base measure, so random perturbations move K both ways.
  std::vector<double> c(grid->dimension(), 0.0);
  c[grid->cell_slot(0, 1)] = 0.5 / grid->width(0, 1);
  c[grid->cell_slot(1, 2)] = 0.5 / grid->width(1, 2);
  const DiscreteMeasure base(grid, c);
  SamplerConfig sc;
  sc.measures = 10000;
  sc.points_per_measure = 1;
  sc.dirichlet_share = 0.0;
  sc.transported_share = 0.0;
  std::mt19937_64 rng(21);
  const auto set = generate_samples(sc, base, p, TransportConfig{}, nullptr, false, rng);

  // Rates recomputed from first principles at A = 1.
  auto rate = [&](const std::vector<double>& M) {
    double K = 0.0, L = 0.0;
    for (int j = 0; j < kLevels; ++j) {
      const double lo = M[grid->dirac_lo_slot(j)], hi = M[grid->dirac_hi_slot(j)];
      double mass = lo + hi, cap = lo * grid->lower() + hi * grid->upper();
      for (int k = 0; k < grid->cells(j); ++k) {
        const double w = grid->width(j, k), mid = 0.5 * (grid->breaks(j)[k] + grid->breaks(j)[k + 1]);
        mass += M[grid->cell_slot(j, k)] * w;
        cap += M[grid->cell_slot(j, k)] * w * mid;
      }
      K += cap;
      L += p.y[j] * mass;
    }
    return p.alpha * std::pow(K / L, p.alpha - 1.0) - p.delta;
  };
  const double r0 = rate(pack(base));
  CHECK(r0 == Approx(firm_prices(p, 1.0, aggregates(base, p.y[0], p.y[1])).r).epsilon(1e-12));
  double lo = 1e300, hi = -1e300, sum = 0.0;
  for (const auto& g : set.groups) {
    const double r = rate(g.M);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
    sum += r;
  }
  CHECK(lo <= r0);
  CHECK(hi >= r0);
  CHECK(std::isfinite(sum / static_cast<double>(set.groups.size())));
}

TEST_CASE("training on constant targets") {
  auto s = small_setup(4);
  const auto sc = default_scaling(s.base.grid(), s.params, 0.04, 0.0, 1.0);
  TrainData data;
  std::vector<double> xs;
  for (int k = 0; k < 64; ++k) xs.push_back(30.0 * k / 63.0);
  data.inputs = broadcast_batch(xs, s.samples.groups[0].M, 0.05);
  data.targets = Eigen::VectorXd::Constant(64, -2.0);
  for (auto opt : {Optimizer::Adam, Optimizer::Lbfgs}) {
    ValueNetwork net(s.spec, sc);
    net.initialize(3);
    TrainConfig tc;
    tc.optimizer = opt;
    tc.steps = opt == Optimizer::Adam ? 3000 : 200;
    tc.batch = 32;
    tc.adam.lr = 1e-2;
    const auto r = train_network(net, data, tc, 9);
    CHECK(r.mse_after <= r.mse_before);
    const Eigen::VectorXd v = net.forward(data.inputs);
    CHECK((v.array() + 2.0).abs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("divergence is reported") {
  auto s = small_setup(4);
  ValueNetwork net(s.spec, default_scaling(s.base.grid(), s.params, 0.04, 0.0, 1.0));
  net.initialize(1);
  TrainData data;
  const double xs[3] = {0.0, 1.0, 2.0};
  data.inputs = broadcast_batch(xs, s.samples.groups[0].M, 0.05);
  data.targets = Eigen::VectorXd::Constant(3, 1e5);
  TrainConfig tc;
  tc.steps = 5;
  CHECK_THROWS_AS(train_network(net, data, tc, 1), NumericalError);
}

TEST_CASE("first step from zero networks fits the hand targets") {
  auto s = small_setup(6);
  auto ctx = small_context(s.params, 1);
  ctx.config.train.optimizer = Optimizer::Lbfgs;
  ctx.config.train.steps = 300;
  // Random hidden layers under a zero head: output 0 with zero slope, but
  // without the symmetry of all-zero parameters.
  ValueSet nets;
  for (int q = 0; q < kNets; ++q) {
    nets[q] = ValueNetwork(s.spec, default_scaling(s.base.grid(), s.params, 0.04, 0.0, 1.0));
    nets[q].initialize(static_cast<std::uint64_t>(q));
    auto theta = nets[q].parameters();
    std::fill(theta.end() - (s.spec.trunk.back() + 1), theta.end(), 0.0);
  }
  const auto step = fixed_point_step(nets, s.samples, ctx, 1);
  const double disc = s.params.discount();
  for (int i = 0; i < kAggregateStates; ++i) {
    for (int j = 0; j < kLevels; ++j) {
      const int q = net_index(i, j);
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& g : s.samples.groups) {
        if (g.holdout) continue;
        const Prices pr = factor_prices(s.params, *s.samples.grid, g.M, i);
        for (double x : g.x) {
          // Zero slope spends the budget.
          const double c = (x - s.params.x_lo) / s.params.dt + pr.w * s.params.y[j] + pr.r * x;
          const double target = s.params.dt * crra(c) / disc;
          sum += target * target;
          ++n;
        }
      }
      CHECK(step.report.train_mse_before[q] == Approx(disc * disc * sum / static_cast<double>(n)).epsilon(1e-10));
      CHECK(step.report.train_mse[q] < 1e-2 * step.report.train_mse_before[q]);
    }
  }
}

TEST_CASE("report MSE matches recomputed residuals") {
  auto s = small_setup(7);
  const auto ctx = small_context(s.params, 2);
  const auto nets = random_nets(s.spec, s, 2);
  const auto step = fixed_point_step(nets, s.samples, ctx, 1);
  for (int i = 0; i < kAggregateStates; ++i) {
    for (int j = 0; j < kLevels; ++j) {
      const int q = net_index(i, j);
      double train = 0.0, hold = 0.0, own = 0.0;
      std::size_t nt = 0, nh = 0;
      for (const auto& g : s.samples.groups) {
        const DiscreteMeasure m(s.samples.grid, g.M);
        const double r = factor_prices(s.params, m, i).r;
        const auto v = step.nets[q].forward(broadcast_batch(g.x, g.M, r));
        const auto t_old = group_targets(nets, s.samples.grid, g.M, g.x, s.params, ctx.transport, false);
        const auto t_new = group_targets(step.nets, s.samples.grid, g.M, g.x, s.params, ctx.transport, false);
        for (std::size_t k = 0; k < g.x.size(); ++k) {
          const double R = residual(v[static_cast<Eigen::Index>(k)], t_old.target[q][k], s.params);
          if (g.holdout) {
            hold += R * R;
            const double Rn = residual(v[static_cast<Eigen::Index>(k)], t_new.target[q][k], s.params);
            own += Rn * Rn;
            ++nh;
          } else {
            train += R * R;
            ++nt;
          }
        }
      }
      CHECK(step.report.train_mse[q] == Approx(train / static_cast<double>(nt)).epsilon(1e-9));
      CHECK(step.report.holdout_mse[q] == Approx(hold / static_cast<double>(nh)).epsilon(1e-9));
      CHECK(step.report.holdout_residual[q] == Approx(own / static_cast<double>(nh)).epsilon(1e-9));
      CHECK(step.report.train_mse[q] <= step.report.train_mse_before[q]);
    }
  }
  const auto back = IterationReport::from_json(step.report.to_json());
  CHECK(back.train_mse == step.report.train_mse);
  CHECK(back.holdout_residual == step.report.holdout_residual);
}

TEST_CASE("refresh replaces only training groups") {
  auto s = small_setup(9, 20);
  const auto ctx = small_context(s.params, 3);
  const auto nets = random_nets(s.spec, s, 3);
  const auto before = s.samples;
  SamplerConfig sampler;
  sampler.points_per_measure = 6;
  refresh_samples(s.samples, nets, sampler, ctx, 1);
  int replaced = 0;
  for (std::size_t g = 0; g < before.groups.size(); ++g) {
    const bool same = s.samples.groups[g].M == before.groups[g].M && s.samples.groups[g].x == before.groups[g].x;
    if (before.groups[g].holdout) {
      CHECK(same);
      CHECK(s.samples.groups[g].holdout);
    } else if (!same) {
      ++replaced;
      CHECK(s.samples.groups[g].origin == SampleOrigin::Transported);
      CHECK(coefficient_mass(*s.samples.grid, s.samples.groups[g].M) == Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(replaced == 4);  // a quarter of the 15 training groups, rounded
}

TEST_CASE("solve is deterministic and resumes") {
  auto s = small_setup(10);
  auto ctx = small_context(s.params, 4);
  ctx.config.outer_iterations = 3;
  ctx.config.policy_tol = 1e-12;
  SamplerConfig sampler;
  sampler.points_per_measure = 6;
  const auto init = random_nets(s.spec, s, 4);

  const auto a = solve(init, s.samples, sampler, ctx);
  ctx.config.threads = 3;
  const auto b = solve(init, s.samples, sampler, ctx);
  REQUIRE(a.reports.size() == 3);
  REQUIRE(b.reports.size() == 3);
  for (int q = 0; q < kNets; ++q) CHECK(a.nets[q].parameter_hash() == b.nets[q].parameter_hash());
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(a.reports[n].train_mse == b.reports[n].train_mse);
    CHECK(a.reports[n].policy_change == b.reports[n].policy_change);
  }

  const auto dir = fs::temp_directory_path() / "ksm_test_resume";
  fs::remove_all(dir);
  ctx.config.threads = 1;
  ctx.config.outer_iterations = 2;
  const auto first = solve(init, s.samples, sampler, ctx, dir, "h");
  CHECK(last_complete_iteration(dir) == 2);
  CHECK(fs::exists(iteration_dir(dir, 2) / net_file_name(1, 1)));
  CHECK(fs::exists(iteration_dir(dir, 2) / "net_2_2.ckpt"));
  ctx.config.outer_iterations = 3;
  const auto resumed = solve(init, s.samples, sampler, ctx, dir, "h");
  REQUIRE(resumed.reports.size() == 3);
  for (int q = 0; q < kNets; ++q) CHECK(resumed.nets[q].parameter_hash() == a.nets[q].parameter_hash());
  CHECK(resumed.reports[2].train_mse == a.reports[2].train_mse);
  const auto loaded = load_networks(iteration_dir(dir, 3));
  for (int q = 0; q < kNets; ++q) CHECK(loaded[q] == a.nets[q]);
  fs::remove_all(dir);
}

TEST_CASE("frozen measure mode with strong discounting is myopic") {
  // With rho above r the budget branch binds everywhere, so
  // V(x) = (u(w y) / rho + dt u(c(x))) / (1 + rho dt), c(x) the whole budget.
  // A short wealth range keeps the slope of V well above fitting noise.
  EconomyParams p;
  p.rho = 10.0;
  p.lambda = {0.0, 0.0};
  p.mu = {0.0, 0.0};
  p.x_hi = 2.0;
  auto grid = std::make_shared<const Grid>(Grid::uniform(0.0, 2.0, 4, 4));
  const auto pinned = uniform_measure(grid);
  const Prices prices{0.04, 1.2};
  NetSpec spec;
  spec.d0 = 0;
  spec.rate_embed = 2;
  spec.capital_embed = 16;
  spec.trunk = {16};
  FrozenConfig fc;
  fc.points = 120;
  fc.max_iterations = 30;
  fc.train.steps = 60;
  fc.pretrain_steps = 200;
  const auto res = frozen_measure_mode(p, prices, pinned, spec, fc, 5);
  for (int j = 0; j < kLevels; ++j) {
    const double income = prices.w * p.y[j];
    double previous = -1e300;
    for (double x = 0.0; x <= 2.0; x += 0.05) {
      const double c = x / p.dt + income + prices.r * x;
      const double v = (crra(income) / p.rho + p.dt * crra(c)) / p.discount();
      CHECK(res.value_at(x, j) == Approx(v).epsilon(2e-2));
      CHECK(res.value_at(x, j) >= previous);
      previous = res.value_at(x, j);
      CHECK(res.decision_at(x, j, p).constrained);
    }
  }
}

TEST_CASE("frozen configuration is validated") {
  FrozenConfig fc;
  fc.points = 1;
  CHECK_THROWS_AS(fc.validate(), ConfigError);
  SolverConfig sc;
  sc.refresh_share = 2.0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  CHECK_THROWS_AS(SolverConfig::from_json(Json{{"outer_iterations", 0}}), ConfigError);
}
