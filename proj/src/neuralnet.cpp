#include "ksm/neuralnet.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "ksm/errors.hpp"

namespace ksm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

constexpr char kMagic[8] = {'K', 'S', 'M', 'N', 'E', 'T', '\r', '\n'};

MatrixXd softplus(const MatrixXd& z) {
  return (z.array().max(0.0) + (-z.array().abs()).exp().log1p()).matrix();
}

MatrixXd sigmoid(const MatrixXd& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

template <typename T>
void put_le(std::string& out, T value) {
  auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  out.append(reinterpret_cast<const char*>(bits.data()), bits.size());
}

template <typename T>
T get_le(const unsigned char* p) {
  std::array<unsigned char, sizeof(T)> bits;
  std::memcpy(bits.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  return std::bit_cast<T>(bits);
}

}  // namespace

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

void NetSpec::validate() const {
  if (d < 1) throw ConfigError("net: d must be >= 1");
  if (d0 < 0) throw ConfigError("net: d0 must be >= 0");
  if (feature_embed < 1 || rate_embed < 1 || capital_embed < 1) throw ConfigError("net: embedding dims must be >= 1");
  for (int w : trunk) {
    if (w < 1) throw ConfigError("net: trunk dims must be >= 1");
  }
  if (!(capital_stretch >= 0.0) || !std::isfinite(capital_stretch)) {
    throw ConfigError("net: capital_stretch must be finite and >= 0");
  }
}

Json NetSpec::to_json() const {
  return Json{{"d", d},
              {"d0", d0},
              {"feature_embed", feature_embed},
              {"rate_embed", rate_embed},
              {"capital_embed", capital_embed},
              {"trunk", trunk},
              {"capital_stretch", capital_stretch}};
}

NetSpec NetSpec::from_json(const Json& j) {
  NetSpec s;
  try {
    s.d = j.value("d", s.d);
    s.d0 = j.value("d0", s.d0);
    s.feature_embed = j.value("feature_embed", s.feature_embed);
    s.rate_embed = j.value("rate_embed", s.rate_embed);
    s.capital_embed = j.value("capital_embed", s.capital_embed);
    s.trunk = j.value("trunk", s.trunk);
    s.capital_stretch = j.value("capital_stretch", s.capital_stretch);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("net: ") + e.what());
  }
  return s;
}

Json InputScaling::to_json() const {
  return Json{{"x_shift", x_shift},         {"x_scale", x_scale},         {"x_anchor", x_anchor},
              {"x_stretch", x_stretch},     {"r_shift", r_shift},
              {"r_scale", r_scale},         {"mass_weights", mass_weights}, {"value_shift", value_shift},
              {"value_scale", value_scale}};
}

InputScaling InputScaling::from_json(const Json& j) {
  InputScaling s;
  try {
    s.x_shift = j.at("x_shift").get<double>();
    s.x_scale = j.at("x_scale").get<double>();
    s.x_anchor = j.at("x_anchor").get<double>();
    s.x_stretch = j.at("x_stretch").get<double>();
    s.r_shift = j.at("r_shift").get<double>();
    s.r_scale = j.at("r_scale").get<double>();
    s.mass_weights = j.at("mass_weights").get<std::vector<double>>();
    s.value_shift = j.at("value_shift").get<double>();
    s.value_scale = j.at("value_scale").get<double>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("scaling: ") + e.what());
  }
  return s;
}

NetBatch broadcast_batch(std::span<const double> xs, std::span<const double> M, double r) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  NetBatch b;
  b.x = Eigen::Map<const RowVectorXd>(xs.data(), n);
  b.M = Eigen::Map<const VectorXd>(M.data(), static_cast<Eigen::Index>(M.size())).replicate(1, n);
  b.r = RowVectorXd::Constant(n, r);
  return b;
}

struct ValueNetwork::Tape {
  RowVectorXd xt, dxt, rt;  // dxt = d xt / dx
  MatrixXd u, zf, F, ze, zr, zx, h0;
  std::vector<MatrixXd> z, h;
  RowVectorXd out;
};

ValueNetwork::ValueNetwork(NetSpec spec, InputScaling scaling) : spec_(std::move(spec)) {
  spec_.validate();
  set_scaling(std::move(scaling));
  layout();
}

void ValueNetwork::set_scaling(InputScaling scaling) {
  if (scaling.mass_weights.empty()) scaling.mass_weights.assign(static_cast<std::size_t>(spec_.d), 1.0);
  if (scaling.mass_weights.size() != static_cast<std::size_t>(spec_.d)) {
    throw ConfigError("scaling: mass_weights length must equal d");
  }
  scaling_ = std::move(scaling);
}

void ValueNetwork::layout() {
  std::size_t offset = 0;
  auto next = [&](int rows, int cols) {
    Layer l{offset, rows, cols};
    offset = l.end();
    return l;
  };
  if (spec_.d0 > 0) {
    feature_ = next(spec_.d0, spec_.d);
    feature_embed_ = next(spec_.feature_embed, spec_.d0);
  }
  rate_embed_ = next(spec_.rate_embed, 1);
  capital_embed_ = next(spec_.capital_embed, 1);
  trunk_.clear();
  int width = spec_.concat_width();
  for (int w : spec_.trunk) {
    trunk_.push_back(next(w, width));
    width = w;
  }
  head_ = next(1, width);
  params_.assign(offset, 0.0);
}

void ValueNetwork::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::fill(params_.begin(), params_.end(), 0.0);
  auto fill = [&](const Layer& l, bool random_bias) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(l.cols));
    for (std::size_t k = l.offset; k < l.bias(); ++k) params_[k] = scale * normal(rng);
    if (random_bias) {
      for (std::size_t k = l.bias(); k < l.end(); ++k) params_[k] = normal(rng);
    }
  };
  if (spec_.d0 > 0) {
    fill(feature_, false);
    fill(feature_embed_, false);
  }
  fill(rate_embed_, true);
  fill(capital_embed_, true);
  for (const auto& l : trunk_) fill(l, false);
  fill(head_, false);
}

void ValueNetwork::run(const RowVectorXd& x, const RowVectorXd& r, const MatrixXd* M, const MatrixXd* F,
                       Tape& t) const {
  const double* p = params_.data();
  auto W = [&](const Layer& l) { return Eigen::Map<const RowMat>(p + l.offset, l.rows, l.cols); };
  auto b = [&](const Layer& l) { return Eigen::Map<const VectorXd>(p + l.bias(), l.rows); };
  const Eigen::Index n = x.size();

  if (scaling_.x_stretch > 0.0) {
    const RowVectorXd q = (x.array() - scaling_.x_anchor) / scaling_.x_stretch;
    t.xt = (scaling_.x_stretch * q.array().asinh() - scaling_.x_shift) * scaling_.x_scale;
    t.dxt = scaling_.x_scale / (1.0 + q.array().square()).sqrt();
  } else {
    t.xt = (x.array() - scaling_.x_shift) * scaling_.x_scale;
    t.dxt = RowVectorXd::Constant(n, scaling_.x_scale);
  }
  t.rt = (r.array() - scaling_.r_shift) * scaling_.r_scale;
  t.h0.resize(spec_.concat_width(), n);
  Eigen::Index row = 0;
  if (spec_.d0 > 0) {
    if (M != nullptr) {
      if (M->rows() != spec_.d || M->cols() != n) throw ConfigError("dimension mismatch in network input");
      t.u = Eigen::Map<const VectorXd>(scaling_.mass_weights.data(), spec_.d).asDiagonal() * (*M);
      t.zf = (W(feature_) * t.u).colwise() + b(feature_);
      t.F = softplus(t.zf);
    } else {
      if (F->rows() != spec_.d0 || F->cols() != n) throw ConfigError("dimension mismatch in feature input");
      t.F = *F;
    }
    t.ze = (W(feature_embed_) * t.F).colwise() + b(feature_embed_);
    t.h0.topRows(spec_.feature_embed) = softplus(t.ze);
    row = spec_.feature_embed;
  } else if (M != nullptr && M->rows() != spec_.d) {
    throw ConfigError("dimension mismatch in network input");
  }
  t.zr = (W(rate_embed_) * t.rt).colwise() + b(rate_embed_);
  t.h0.middleRows(row, spec_.rate_embed) = softplus(t.zr);
  row += spec_.rate_embed;
  t.zx = (W(capital_embed_) * t.xt).colwise() + b(capital_embed_);
  t.h0.middleRows(row, spec_.capital_embed) = softplus(t.zx);

  t.z.resize(trunk_.size());
  t.h.resize(trunk_.size());
  const MatrixXd* in = &t.h0;
  for (std::size_t l = 0; l < trunk_.size(); ++l) {
    t.z[l] = (W(trunk_[l]) * (*in)).colwise() + b(trunk_[l]);
    t.h[l] = softplus(t.z[l]);
    in = &t.h[l];
  }
  t.out = (W(head_) * (*in)).array() + p[head_.bias()];
}

VectorXd ValueNetwork::to_values(const Tape& t) const {
  return (scaling_.value_shift + scaling_.value_scale * t.out.array()).transpose();
}

VectorXd ValueNetwork::tangent_x(const Tape& t) const {
  const double* p = params_.data();
  auto W = [&](const Layer& l) { return Eigen::Map<const RowMat>(p + l.offset, l.rows, l.cols); };
  // d h0 / dx is nonzero only on the capital block.
  const MatrixXd dcap =
      ((sigmoid(t.zx).array().colwise() * W(capital_embed_).col(0).array()).rowwise() * t.dxt.array()).matrix();
  MatrixXd dh;
  if (trunk_.empty()) {
    dh = dcap;
    const RowVectorXd dout = W(head_).rightCols(spec_.capital_embed) * dh;
    return scaling_.value_scale * dout.transpose();
  }
  dh = (sigmoid(t.z[0]).array() * (W(trunk_[0]).rightCols(spec_.capital_embed) * dcap).array()).matrix();
  for (std::size_t l = 1; l < trunk_.size(); ++l) {
    dh = (sigmoid(t.z[l]).array() * (W(trunk_[l]) * dh).array()).matrix();
  }
  const RowVectorXd dout = W(head_) * dh;
  return scaling_.value_scale * dout.transpose();
}

VectorXd ValueNetwork::forward(const NetBatch& batch) const {
  VectorXd v;
  evaluate(batch, &v, nullptr);
  return v;
}

void ValueNetwork::evaluate(const NetBatch& batch, VectorXd* values, VectorXd* dvdx) const {
  if (batch.r.size() != batch.x.size()) throw ConfigError("dimension mismatch in network input");
  Tape t;
  run(batch.x, batch.r, &batch.M, nullptr, t);
  if (values != nullptr) *values = to_values(t);
  if (dvdx != nullptr) *dvdx = tangent_x(t);
}

void ValueNetwork::evaluate_features(const RowVectorXd& x, const RowVectorXd& r, const MatrixXd& F, VectorXd* values,
                                     VectorXd* dvdx) const {
  if (spec_.d0 == 0 && F.rows() != 0) throw ConfigError("network has no adaptive features");
  Tape t;
  run(x, r, nullptr, &F, t);
  if (values != nullptr) *values = to_values(t);
  if (dvdx != nullptr) *dvdx = tangent_x(t);
}

MatrixXd ValueNetwork::features(const MatrixXd& M) const {
  if (spec_.d0 == 0) return MatrixXd(0, M.cols());
  if (M.rows() != spec_.d) throw ConfigError("dimension mismatch in feature input");
  const double* p = params_.data();
  const Eigen::Map<const RowMat> W(p + feature_.offset, feature_.rows, feature_.cols);
  const Eigen::Map<const VectorXd> b(p + feature_.bias(), feature_.rows);
  const MatrixXd u = Eigen::Map<const VectorXd>(scaling_.mass_weights.data(), spec_.d).asDiagonal() * M;
  return softplus((W * u).colwise() + b);
}

double ValueNetwork::mse_gradient(const NetBatch& batch, const VectorXd& targets, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw ConfigError("gradient buffer has the wrong size");
  if (targets.size() != batch.size()) throw ConfigError("target count does not match batch");
  Tape t;
  run(batch.x, batch.r, &batch.M, nullptr, t);
  const Eigen::Index n = batch.size();
  const RowVectorXd diff = (scaling_.value_shift + scaling_.value_scale * t.out.array()).matrix() - targets.transpose();
  const double mse = diff.squaredNorm() / static_cast<double>(n);

  std::fill(grad.begin(), grad.end(), 0.0);
  const double* p = params_.data();
  double* g = grad.data();
  auto W = [&](const Layer& l) { return Eigen::Map<const RowMat>(p + l.offset, l.rows, l.cols); };
  auto dW = [&](const Layer& l) { return Eigen::Map<RowMat>(g + l.offset, l.rows, l.cols); };
  auto db = [&](const Layer& l) { return Eigen::Map<VectorXd>(g + l.bias(), l.rows); };

  const RowVectorXd gout = (2.0 * scaling_.value_scale / static_cast<double>(n)) * diff;
  const MatrixXd& last = trunk_.empty() ? t.h0 : t.h.back();
  dW(head_).noalias() = gout * last.transpose();
  g[head_.bias()] = gout.sum();
  MatrixXd gh = W(head_).transpose() * gout;
  for (std::size_t l = trunk_.size(); l-- > 0;) {
    const MatrixXd gz = (gh.array() * sigmoid(t.z[l]).array()).matrix();
    const MatrixXd& in = l == 0 ? t.h0 : t.h[l - 1];
    dW(trunk_[l]).noalias() = gz * in.transpose();
    db(trunk_[l]) = gz.rowwise().sum();
    gh = W(trunk_[l]).transpose() * gz;
  }
  // gh is now d loss / d h0.
  Eigen::Index row = 0;
  if (spec_.d0 > 0) {
    const MatrixXd gze = (gh.topRows(spec_.feature_embed).array() * sigmoid(t.ze).array()).matrix();
    dW(feature_embed_).noalias() = gze * t.F.transpose();
    db(feature_embed_) = gze.rowwise().sum();
    const MatrixXd gF = W(feature_embed_).transpose() * gze;
    const MatrixXd gzf = (gF.array() * sigmoid(t.zf).array()).matrix();
    dW(feature_).noalias() = gzf * t.u.transpose();
    db(feature_) = gzf.rowwise().sum();
    row = spec_.feature_embed;
  }
  const MatrixXd gzr = (gh.middleRows(row, spec_.rate_embed).array() * sigmoid(t.zr).array()).matrix();
  dW(rate_embed_).noalias() = gzr * t.rt.transpose();
  db(rate_embed_) = gzr.rowwise().sum();
  row += spec_.rate_embed;
  const MatrixXd gzx = (gh.middleRows(row, spec_.capital_embed).array() * sigmoid(t.zx).array()).matrix();
  dW(capital_embed_).noalias() = gzx * t.xt.transpose();
  db(capital_embed_) = gzx.rowwise().sum();
  return mse;
}

std::uint64_t ValueNetwork::parameter_hash() const {
  std::string bytes;
  bytes.reserve(params_.size() * 8);
  for (double v : params_) put_le(bytes, v);
  return fnv1a(bytes.data(), bytes.size());
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, const AdamConfig& c) {
  if (grads.size() != params.size()) throw ConfigError("adam: gradient size mismatch");
  if (s.m.size() != params.size()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
    s.step = 0;
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    s.m[k] = c.beta1 * s.m[k] + (1.0 - c.beta1) * grads[k];
    s.v[k] = c.beta2 * s.v[k] + (1.0 - c.beta2) * grads[k] * grads[k];
    params[k] -= c.lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + c.eps);
  }
}

void save_checkpoint(const ValueNetwork& net, const std::filesystem::path& path, const std::string& config_hash) {
  const Json header{{"spec", net.spec().to_json()},
                    {"scaling", net.scaling().to_json()},
                    {"config_hash", config_hash},
                    {"parameter_count", net.parameter_count()},
                    {"parameter_hash", hex64(net.parameter_hash())}};
  const std::string text = to_text(header, -1);
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (double v : net.parameters()) put_le(out, v);
  write_text_file(path, out);
}

ValueNetwork load_checkpoint(const std::filesystem::path& path, const NetSpec* expected, std::string* config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  if (data.size() < 20 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError("not a ksm checkpoint: " + path.string());
  }
  const auto version = get_le<std::uint32_t>(bytes + 8);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_len = get_le<std::uint64_t>(bytes + 12);
  if (20 + header_len > data.size()) throw IoError("truncated checkpoint header in " + path.string());
  Json header;
  try {
    header = Json::parse(data.substr(20, header_len));
  } catch (const Json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  const NetSpec spec = NetSpec::from_json(header.at("spec"));
  if (expected != nullptr && !(spec == *expected)) {
    throw ConfigError("checkpoint spec mismatch in " + path.string() + ": stored " + spec.to_json().dump() +
                      ", expected " + expected->to_json().dump());
  }
  ValueNetwork net(spec, InputScaling::from_json(header.at("scaling")));
  const std::size_t count = header.at("parameter_count").get<std::size_t>();
  if (count != net.parameter_count()) throw IoError("parameter count does not match spec in " + path.string());
  const std::size_t start = 20 + header_len;
  if (data.size() != start + 8 * count) throw IoError("checkpoint size mismatch in " + path.string());
  auto params = net.parameters();
  for (std::size_t k = 0; k < count; ++k) params[k] = get_le<double>(bytes + start + 8 * k);
  if (hex64(net.parameter_hash()) != header.value("parameter_hash", std::string())) {
    throw IoError("parameter hash mismatch in " + path.string());
  }
  if (config_hash != nullptr) *config_hash = header.value("config_hash", std::string());
  return net;
}

}  // namespace ksm
