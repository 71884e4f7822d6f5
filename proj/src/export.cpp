#include "ksm/export.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ksm/errors.hpp"

namespace ksm {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace {

// No negative zeros in the CSV.
std::string num(double v) { return format_double(v + 0.0); }

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) v[k] = n == 1 ? lo : lo + (hi - lo) * k / (n - 1);
  return v;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  return 0.5 * (*std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)) + upper);
}

class Csv {
 public:
  Csv(const LoadedRun& run, ExportKind kind, const std::vector<std::string>& columns) {
    for (std::size_t k = 0; k < columns.size(); ++k) out_ << (k ? "," : "") << columns[k];
    out_ << "\n# config_hash=" << run.config_hash << "\n# iteration=" << run.iteration
         << "\n# kind=" << export_kind_name(kind) << "\n";
  }
  void meta(const std::string& line) { out_ << "# " << line << "\n"; }
  void row(std::initializer_list<double> values, std::initializer_list<int> labels = {}) {
    bool first = true;
    for (int l : labels) {
      out_ << (first ? "" : ",") << l;
      first = false;
    }
    for (double v : values) {
      out_ << (first ? "" : ",") << num(v);
      first = false;
    }
    out_ << "\n";
  }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

std::string ij(int i, int j) { return "i=" + std::to_string(i + 1) + " j=" + std::to_string(j + 1); }

/// Per-measure rates and features of the sample set.
struct SampleStats {
  std::array<std::vector<double>, kAggregateStates> rate;   // NaN without prices
  std::array<MatrixXd, kNets> features;                     // d0 x groups
};

SampleStats sample_stats(const LoadedRun& run) {
  const auto& groups = run.samples.groups;
  SampleStats s;
  MatrixXd M(static_cast<Eigen::Index>(run.grid->dimension()), static_cast<Eigen::Index>(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    M.col(static_cast<Eigen::Index>(g)) = Eigen::Map<const VectorXd>(groups[g].M.data(), M.rows());
  }
  for (int i = 0; i < kAggregateStates; ++i) {
    for (const auto& g : groups) {
      const auto p = try_factor_prices(run.config.economy, *run.grid, g.M, i);
      s.rate[i].push_back(p ? p->r : std::numeric_limits<double>::quiet_NaN());
    }
  }
  for (int k = 0; k < kNets; ++k) s.features[k] = run.nets[k].features(M);
  return s;
}

std::pair<double, double> finite_range(const std::vector<double>& v) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double x : v) {
    if (!std::isfinite(x)) continue;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (!(lo <= hi)) throw NumericalError("no sample measure has finite prices");
  return {lo, hi};
}

std::vector<double> row_values(const MatrixXd& F, Eigen::Index row) {
  std::vector<double> v(static_cast<std::size_t>(F.cols()));
  for (Eigen::Index c = 0; c < F.cols(); ++c) v[static_cast<std::size_t>(c)] = F(row, c);
  return v;
}

// Sample medians of every feature.
VectorXd feature_medians(const MatrixXd& F) {
  VectorXd m(F.rows());
  for (Eigen::Index r = 0; r < F.rows(); ++r) m[r] = median(row_values(F, r));
  return m;
}

std::vector<double> network_savings(const LoadedRun& run, int i, int j, const RowVectorXd& x, const RowVectorXd& r,
                                    const MatrixXd& F) {
  VectorXd g;
  run.nets[net_index(i, j)].evaluate_features(x, r, F, nullptr, &g);
  const auto& p = run.config.economy;
  std::vector<double> s(static_cast<std::size_t>(x.size()));
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const Prices prices = prices_from_rate(p, p.A[i], r[k]);
    const auto d = run.config.solver.cap_savings ? decide_capped(p, x[k], g[k], prices, p.y[j])
                                                 : decide(p, x[k], g[k], prices, p.y[j]);
    s[static_cast<std::size_t>(k)] = d.savings;
  }
  return s;
}

std::string contour(const LoadedRun& run, const ExportOptions& o) {
  const auto& p = run.config.economy;
  const auto stats = sample_stats(run);
  const int d0 = run.spec.d0;
  const auto xs = linspace(o.x_min.value_or(p.x_lo), o.x_max.value_or(p.x_hi), o.x_points);
  Csv csv(run, o.kind, {"i", "j", "x", "r", "savings"});
  std::vector<std::string> rows;
  for (int i = 0; i < kAggregateStates; ++i) {
    const auto [r_lo, r_hi] = finite_range(stats.rate[i]);
    const auto rs = linspace(o.r_min.value_or(r_lo), o.r_max.value_or(r_hi), o.r_points);
    for (int j = 0; j < kLevels; ++j) {
      VectorXd fixed = feature_medians(stats.features[net_index(i, j)]);
      if (d0 > 0 && o.feature) fixed[0] = *o.feature;
      csv.meta(ij(i, j) + (d0 > 0 ? " F1=" + num(fixed[0]) : " F1=none"));
      const auto n = static_cast<Eigen::Index>(xs.size() * rs.size());
      RowVectorXd x(n), r(n);
      Eigen::Index k = 0;
      for (double xv : xs) {
        for (double rv : rs) {
          x[k] = xv;
          r[k++] = rv;
        }
      }
      const auto s = network_savings(run, i, j, x, r, fixed.replicate(1, n));
      for (Eigen::Index m = 0; m < n; ++m) {
        std::ostringstream line;
        line << i + 1 << "," << j + 1 << "," << num(x[m]) << "," << num(r[m]) << ","
             << num(s[static_cast<std::size_t>(m)]);
        rows.push_back(line.str());
      }
    }
  }
  std::string text = csv.str();
  for (const auto& l : rows) text += l + "\n";
  return text;
}

std::string policy_slice(const LoadedRun& run, const ExportOptions& o) {
  const auto& p = run.config.economy;
  DiscreteMeasure m = [&] {
    if (!o.measure) return project(DiscreteMeasure::from_json(run.aiyagari.at("measure")), run.grid);
    const int g = *o.measure;
    if (g < 0 || g >= static_cast<int>(run.samples.groups.size())) throw ConfigError("measure index out of range");
    return DiscreteMeasure(run.grid, run.samples.groups[static_cast<std::size_t>(g)].M);
  }();
  const auto household = load_household(run.aiyagari);
  const auto xs = linspace(o.x_min.value_or(p.x_lo), o.x_max.value_or(p.x_hi), o.x_points);
  Csv csv(run, o.kind, {"j", "x", "slow", "fast", "aiyagari"});
  csv.meta(o.measure ? "measure=sample " + std::to_string(*o.measure) : std::string("measure=aiyagari"));
  for (int i = 0; i < kAggregateStates; ++i) {
    const auto prices = factor_prices(p, m, i);
    csv.meta("i=" + std::to_string(i + 1) + " r=" + num(prices.r) + " w=" + num(prices.w));
  }
  std::array<std::array<std::vector<double>, kLevels>, kAggregateStates> s;
  for (int i = 0; i < kAggregateStates; ++i) {
    const auto policy = network_policy(run.nets, i, m, p, run.config.solver.cap_savings);
    for (int j = 0; j < kLevels; ++j) {
      s[i][j].resize(xs.size());
      policy(j, xs, s[i][j]);
    }
  }
  for (int j = 0; j < kLevels; ++j) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      csv.row({xs[k], s[0][j][k], s[1][j][k], household.savings_at(xs[k], j, p)}, {j + 1});
    }
  }
  return csv.str();
}

std::string feature_surface(const LoadedRun& run, const ExportOptions& o) {
  if (run.spec.d0 == 0) throw ConfigError("feature-surface needs adaptive features (d0 >= 1)");
  const auto stats = sample_stats(run);
  Csv csv(run, o.kind, {"i", "j", "x", "r", "F1", "savings"});
  std::vector<std::string> rows;
  for (int i = 0; i < kAggregateStates; ++i) {
    const auto [r_lo, r_hi] = finite_range(stats.rate[i]);
    const auto rs = linspace(o.r_min.value_or(r_lo), o.r_max.value_or(r_hi), o.r_points);
    for (int j = 0; j < kLevels; ++j) {
      const auto& F = stats.features[net_index(i, j)];
      const auto [f_lo, f_hi] = finite_range(row_values(F, 0));
      const auto fs = linspace(o.feature_min.value_or(f_lo), o.feature_max.value_or(f_hi), o.feature_points);
      const VectorXd fixed = feature_medians(F);
      csv.meta(ij(i, j));
      for (double xv : o.surface_x) {
        const auto n = static_cast<Eigen::Index>(rs.size() * fs.size());
        RowVectorXd x = RowVectorXd::Constant(n, xv), r(n);
        MatrixXd Fm = fixed.replicate(1, n);
        Eigen::Index k = 0;
        for (double rv : rs) {
          for (double fv : fs) {
            r[k] = rv;
            Fm(0, k++) = fv;
          }
        }
        const auto s = network_savings(run, i, j, x, r, Fm);
        for (Eigen::Index m = 0; m < n; ++m) {
          std::ostringstream line;
          line << i + 1 << "," << j + 1 << "," << num(xv) << "," << num(r[m]) << ","
               << num(Fm(0, m)) << "," << num(s[static_cast<std::size_t>(m)]);
          rows.push_back(line.str());
        }
      }
    }
  }
  std::string text = csv.str();
  for (const auto& l : rows) text += l + "\n";
  return text;
}

std::string scatter(const LoadedRun& run, const ExportOptions& o) {
  if (run.spec.d0 == 0) throw ConfigError("scatter needs adaptive features (d0 >= 1)");
  const auto stats = sample_stats(run);
  Csv csv(run, o.kind, {"i", "j", "measure", "r", "F1"});
  std::vector<std::string> rows;
  for (int i = 0; i < kAggregateStates; ++i) {
    for (int j = 0; j < kLevels; ++j) {
      const auto f = row_values(stats.features[net_index(i, j)], 0);
      std::vector<double> r, f1;
      for (std::size_t g = 0; g < f.size(); ++g) {
        if (!std::isfinite(stats.rate[i][g])) continue;
        r.push_back(stats.rate[i][g]);
        f1.push_back(f[g]);
        std::ostringstream line;
        line << i + 1 << "," << j + 1 << "," << g << "," << num(stats.rate[i][g]) << ","
             << num(f[g]);
        rows.push_back(line.str());
      }
      csv.meta(ij(i, j) + " pearson=" + num(pearson(r, f1)) + " n=" + std::to_string(r.size()));
    }
  }
  std::string text = csv.str();
  for (const auto& l : rows) text += l + "\n";
  return text;
}

}  // namespace

ExportKind parse_export_kind(const std::string& name) {
  if (name == "contour") return ExportKind::Contour;
  if (name == "policy-slice") return ExportKind::PolicySlice;
  if (name == "feature-surface") return ExportKind::FeatureSurface;
  if (name == "scatter") return ExportKind::Scatter;
  throw ConfigError("unknown export kind '" + name + "'");
}

std::string export_kind_name(ExportKind kind) {
  switch (kind) {
    case ExportKind::Contour: return "contour";
    case ExportKind::PolicySlice: return "policy-slice";
    case ExportKind::FeatureSurface: return "feature-surface";
    case ExportKind::Scatter: return "scatter";
  }
  throw ConfigError("unknown export kind");
}

void ExportOptions::validate() const {
  if (iteration < 0) throw ConfigError("export: iteration must be >= 0");
  if (x_points < 1 || r_points < 1 || feature_points < 1) throw ConfigError("export: resolutions must be >= 1");
  if (surface_x.empty()) throw ConfigError("export: surface_x is empty");
  auto check = [](const std::optional<double>& v) {
    if (v && !std::isfinite(*v)) throw ConfigError("export: range bounds must be finite");
  };
  for (const auto* v : {&feature, &x_min, &x_max, &r_min, &r_max, &feature_min, &feature_max}) check(*v);
}

LoadedRun load_run(const fs::path& run_dir, int iteration) {
  LoadedRun run;
  run.config = RunConfig::from_json(read_json_file(run_dir / "config.snapshot"));
  run.config_hash = run.config.hash();
  run.samples = SampleSet::from_json(read_json_file(run_dir / "samples.json"));
  run.grid = run.samples.grid;
  run.spec = network_spec(run.config, *run.grid);
  const int last = last_complete_iteration(run_dir);
  if (last == 0) throw IoError(run_dir.string() + " has no complete iteration");
  run.iteration = iteration == 0 ? last : iteration;
  if (run.iteration > last) throw IoError("iteration " + std::to_string(iteration) + " is not complete");
  run.nets = load_networks(iteration_dir(run_dir, run.iteration), &run.spec);
  run.aiyagari = read_json_file(run_dir / "aiyagari.json");
  return run;
}

Household load_household(const Json& a) {
  try {
    return Household(Prices{a.at("r").get<double>(), a.at("w").get<double>()},
                     a.at("value_nodes").get<std::vector<double>>(),
                     {a.at("value_y1").get<std::vector<double>>(), a.at("value_y2").get<std::vector<double>>()});
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("aiyagari.json: ") + e.what());
  }
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("pearson: length mismatch");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double ma = 0.0, mb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

std::string export_csv(const LoadedRun& run, const ExportOptions& options) {
  options.validate();
  switch (options.kind) {
    case ExportKind::Contour: return contour(run, options);
    case ExportKind::PolicySlice: return policy_slice(run, options);
    case ExportKind::FeatureSurface: return feature_surface(run, options);
    case ExportKind::Scatter: return scatter(run, options);
  }
  throw ConfigError("unknown export kind");
}

std::string cmd_export(const fs::path& run_dir, const ExportOptions& options) {
  options.validate();
  return export_csv(load_run(run_dir, options.iteration), options);
}

}  // namespace ksm
