#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ksm/json_io.hpp"

namespace ksm {

/// Layer sizes of the structured value network.
///
/// The measure coefficients go through `d0` affine+softplus maps (the adaptive
/// features), which are embedded to `feature_embed` units; the interest rate
/// and the capital are embedded separately. The concatenation feeds a softplus
/// trunk and a final affine head with one output.
struct NetSpec {
  int d = 0;
  int d0 = 1;
  int feature_embed = 80;
  int rate_embed = 20;
  int capital_embed = 150;
  std::vector<int> trunk{300, 150, 50, 20};
  // Capital enters as asinh((x - x_lo) / capital_stretch), which resolves the
  // borrowing constraint; 0 keeps it linear.
  double capital_stretch = 0.5;

  void validate() const;
  int concat_width() const { return (d0 > 0 ? feature_embed : 0) + rate_embed + capital_embed; }
  bool operator==(const NetSpec&) const = default;

  Json to_json() const;
  static NetSpec from_json(const Json& j);
};

// Fixed affine maps applied outside the trainable parameters.
struct InputScaling {
  double x_shift = 0.0;  // x~ = (g(x) - x_shift) * x_scale
  double x_scale = 1.0;
  // g(x) = x_stretch asinh((x - x_anchor) / x_stretch), or g(x) = x when x_stretch == 0.
  double x_anchor = 0.0;
  double x_stretch = 0.0;
  double r_shift = 0.0;  // r~ = (r - r_shift) * r_scale
  double r_scale = 1.0;
  std::vector<double> mass_weights;  // u = mass_weights .* M, length d
  double value_shift = 0.0;          // value = value_shift + value_scale * head
  double value_scale = 1.0;

  bool operator==(const InputScaling&) const = default;
  Json to_json() const;
  static InputScaling from_json(const Json& j);
};

// One sample per column.
struct NetBatch {
  Eigen::RowVectorXd x;
  Eigen::MatrixXd M;  // d x n
  Eigen::RowVectorXd r;

  Eigen::Index size() const { return x.size(); }
};

// Builds a batch of `xs` sharing one measure and rate.
NetBatch broadcast_batch(std::span<const double> xs, std::span<const double> M, double r);

double softplus(double z);

class ValueNetwork {
 public:
  ValueNetwork() = default;
  ValueNetwork(NetSpec spec, InputScaling scaling);

  const NetSpec& spec() const { return spec_; }
  const InputScaling& scaling() const { return scaling_; }
  void set_scaling(InputScaling scaling);

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  // LeCun Gaussian weights; the scalar-input embeddings also get Gaussian
  // biases so their softplus kinks spread over the input range.
  void initialize(std::uint64_t seed);

  Eigen::VectorXd forward(const NetBatch& batch) const;

  // Values and d value / d x, either pointer may be null.
  void evaluate(const NetBatch& batch, Eigen::VectorXd* values, Eigen::VectorXd* dvdx) const;

  // Adaptive features F(M), d0 x n.
  Eigen::MatrixXd features(const Eigen::MatrixXd& M) const;

  // Same as evaluate() but with explicit feature values (d0 x n) in place of
  // the feature layer; used to scan the network over (x, r, F1).
  void evaluate_features(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& r, const Eigen::MatrixXd& F,
                         Eigen::VectorXd* values, Eigen::VectorXd* dvdx) const;

  // Mean squared error against targets; writes its exact parameter gradient.
  double mse_gradient(const NetBatch& batch, const Eigen::VectorXd& targets, std::span<double> grad) const;

  // FNV-1a over the little-endian parameter bytes.
  std::uint64_t parameter_hash() const;

  bool operator==(const ValueNetwork& other) const {
    return spec_ == other.spec_ && scaling_ == other.scaling_ && params_ == other.params_;
  }

 private:
  struct Layer {
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t bias() const { return offset + static_cast<std::size_t>(rows) * cols; }
    std::size_t end() const { return bias() + static_cast<std::size_t>(rows); }
  };
  struct Tape;

  void layout();
  void run(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& r, const Eigen::MatrixXd* M,
           const Eigen::MatrixXd* F, Tape& tape) const;
  Eigen::VectorXd tangent_x(const Tape& tape) const;
  Eigen::VectorXd to_values(const Tape& tape) const;

  NetSpec spec_;
  InputScaling scaling_;
  std::vector<double> params_;
  Layer feature_, feature_embed_, rate_embed_, capital_embed_, head_;
  std::vector<Layer> trunk_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

// One bias-corrected Adam update in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& config);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary checkpoint: 8-byte magic, u32 version, u64 header length, JSON
// header (spec, scaling, hashes), then little-endian doubles in layer order.
void save_checkpoint(const ValueNetwork& net, const std::filesystem::path& path, const std::string& config_hash = "");

// Throws IoError on a bad file and ConfigError when `expected` disagrees with
// the stored spec.
ValueNetwork load_checkpoint(const std::filesystem::path& path, const NetSpec* expected = nullptr,
                             std::string* config_hash = nullptr);

}  // namespace ksm
