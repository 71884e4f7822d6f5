#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ksm/run.hpp"

namespace ksm {

enum class ExportKind {
  Contour,         // savings over an (x, r) lattice at fixed F1
  PolicySlice,     // savings vs x at one measure, both A and the Aiyagari household
  FeatureSurface,  // savings over (r, F1) at fixed x
  Scatter,         // F1(m) vs r over the sample measures
};

// Throws ConfigError for an unknown name.
ExportKind parse_export_kind(const std::string& name);
std::string export_kind_name(ExportKind kind);

struct ExportOptions {
  ExportKind kind = ExportKind::Contour;
  int iteration = 0;  // 0 = last complete iteration
  // Fixed F1 of the contour; defaults to the median over the sample measures.
  std::optional<double> feature;
  int x_points = 61;
  int r_points = 41;
  int feature_points = 41;
  // Ranges default to [x_lo, x_hi] and the sample range of r and F1.
  std::optional<double> x_min, x_max, r_min, r_max, feature_min, feature_max;
  std::vector<double> surface_x{0.5, 1.0, 3.0, 6.0};
  // Policy slice at this sample group instead of the Aiyagari measure.
  std::optional<int> measure;

  void validate() const;
};

/// A finished (or partial) run directory read back from disk.
struct LoadedRun {
  RunConfig config;
  std::string config_hash;
  std::shared_ptr<const Grid> grid;
  NetSpec spec;
  SampleSet samples;  // the initial sample set
  int iteration = 0;
  ValueSet nets;
  Json aiyagari;
};

// Throws IoError when the run has no complete iteration or the requested one
// is missing.
LoadedRun load_run(const std::filesystem::path& run_dir, int iteration = 0);

// Household of aiyagari.json.
Household load_household(const Json& aiyagari);

// NaN when either series is constant.
double pearson(std::span<const double> a, std::span<const double> b);

// CSV text: column names, then # metadata lines, then rows.
std::string export_csv(const LoadedRun& run, const ExportOptions& options);

std::string cmd_export(const std::filesystem::path& run_dir, const ExportOptions& options);

}  // namespace ksm
