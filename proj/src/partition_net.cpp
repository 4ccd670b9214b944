#include "nfrecon/partition_net.hpp"

#include <cmath>
#include <random>
#include <string>

#include "nfrecon/common.hpp"

namespace nfrecon {

nlohmann::json to_json(const PartitionNetConfig& cfg) {
  return {{"hidden", cfg.hidden}, {"partitions", cfg.partitions}, {"omega0", cfg.omega0}};
}

PartitionNetConfig partition_config_from_json(const nlohmann::json& doc) {
  PartitionNetConfig cfg;
  try {
    if (doc.contains("hidden")) cfg.hidden = doc.at("hidden").get<std::vector<int>>();
    cfg.partitions = doc.value("partitions", cfg.partitions);
    cfg.omega0 = doc.value("omega0", cfg.omega0);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad network config: ") + e.what());
  }
  return cfg;
}

namespace {

void check_config(const PartitionNetConfig& cfg, double horizon) {
  if (cfg.partitions < 1) throw Error("invalid_network", "need at least one partition");
  if (cfg.hidden.empty()) throw Error("invalid_network", "need at least one hidden layer");
  for (int w : cfg.hidden) {
    if (w < 1) throw Error("invalid_network", "hidden widths must be positive");
  }
  if (!(horizon > 0.0)) throw Error("invalid_network", "horizon must be positive");
}

}  // namespace

PartitionNet::PartitionNet(PartitionNetConfig config, double horizon, std::uint64_t seed)
    : config_(std::move(config)), horizon_(horizon) {
  check_config(config_, horizon_);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  int fan_in = 1;
  const std::size_t n_layers = config_.hidden.size() + 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const bool last = l + 1 == n_layers;
    const int fan_out = last ? config_.partitions : config_.hidden[l];
    // Sinusoidal-network init with the frequency factor folded into the
    // weights: first layer U(-1,1) * omega0, hidden layers U(+-sqrt(6/n)),
    // output layer U(+-sqrt(6/n) / omega0).
    double w_scale = std::sqrt(6.0 / fan_in);
    double b_scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    if (l == 0) {
      w_scale = config_.omega0;
      b_scale = config_.omega0;
    } else if (last) {
      w_scale /= config_.omega0;
      b_scale = 0.0;
    } else {
      b_scale *= config_.omega0;
    }
    Layer layer{Eigen::MatrixXd(fan_out, fan_in), Eigen::VectorXd(fan_out)};
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = w_scale * unif(rng);
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = b_scale * unif(rng);
    layers_.push_back(std::move(layer));
    fan_in = fan_out;
  }
}

PartitionNet PartitionNet::zeros(PartitionNetConfig config, double horizon) {
  PartitionNet net(std::move(config), horizon, 0);
  for (auto& l : net.layers_) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return net;
}

Eigen::Index PartitionNet::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Eigen::VectorXd PartitionNet::parameters() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index off = 0;
  for (const auto& l : layers_) {
    flat.segment(off, l.weight.size()) = l.weight.reshaped();
    off += l.weight.size();
    flat.segment(off, l.bias.size()) = l.bias;
    off += l.bias.size();
  }
  return flat;
}

void PartitionNet::set_parameters(const Eigen::Ref<const Eigen::VectorXd>& flat) {
  if (flat.size() != parameter_count()) {
    throw Error("dimension_mismatch", "network expects " + std::to_string(parameter_count()) +
                                          " parameters, got " + std::to_string(flat.size()));
  }
  if (!flat.allFinite()) throw Error("non_finite_weights", "network parameters must be finite");
  Eigen::Index off = 0;
  for (auto& l : layers_) {
    l.weight.reshaped() = flat.segment(off, l.weight.size());
    off += l.weight.size();
    l.bias = flat.segment(off, l.bias.size());
    off += l.bias.size();
  }
}

PartitionNet::Tape PartitionNet::forward(std::span<const double> times) const {
  const auto n = static_cast<Eigen::Index>(times.size());
  Tape tape;
  Eigen::MatrixXd h(1, n);
  for (Eigen::Index j = 0; j < n; ++j) h(0, j) = 2.0 * times[static_cast<std::size_t>(j)] / horizon_ - 1.0;
  Eigen::MatrixXd hdot = Eigen::MatrixXd::Constant(1, n, 2.0 / horizon_);

  const std::size_t hidden = layers_.size() - 1;
  for (std::size_t l = 0; l < hidden; ++l) {
    const auto& layer = layers_[l];
    Eigen::MatrixXd a = layer.weight * h;
    a.colwise() += layer.bias;
    Eigen::MatrixXd adot = layer.weight * hdot;
    tape.inputs.push_back(std::move(h));
    tape.tangents.push_back(std::move(hdot));
    h = a.array().sin().matrix();
    hdot = (a.array().cos() * adot.array()).matrix();
    tape.pre.push_back(std::move(a));
    tape.pre_tangent.push_back(std::move(adot));
  }
  const auto& out = layers_.back();
  Eigen::MatrixXd z = out.weight * h;
  z.colwise() += out.bias;
  Eigen::MatrixXd zdot = out.weight * hdot;
  tape.inputs.push_back(std::move(h));
  tape.tangents.push_back(std::move(hdot));

  Eigen::MatrixXd psi(z.rows(), n);
  Eigen::MatrixXd dpsi(z.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double zmax = z.col(j).maxCoeff();
    Eigen::VectorXd e = (z.col(j).array() - zmax).exp().matrix();
    e /= e.sum();
    psi.col(j) = e;
    const double mean_rate = e.dot(zdot.col(j));
    dpsi.col(j) = (e.array() * (zdot.col(j).array() - mean_rate)).matrix();
  }
  if (!psi.allFinite() || !dpsi.allFinite()) throw Error("non_finite_weights", "partition evaluation is not finite");
  tape.logit_tangent = std::move(zdot);
  tape.out = {std::move(psi), std::move(dpsi)};
  return tape;
}

PartitionNet::Values PartitionNet::evaluate(std::span<const double> times) const {
  // Chunked so that the activations never scale with the number of times.
  constexpr std::size_t chunk = 64;
  if (times.size() <= chunk) return forward(times).out;
  const auto n = static_cast<Eigen::Index>(times.size());
  Values out{Eigen::MatrixXd(partitions(), n), Eigen::MatrixXd(partitions(), n)};
  for (std::size_t begin = 0; begin < times.size(); begin += chunk) {
    const std::size_t len = std::min(chunk, times.size() - begin);
    const auto part = forward(times.subspan(begin, len)).out;
    const auto b = static_cast<Eigen::Index>(begin);
    const auto l = static_cast<Eigen::Index>(len);
    out.psi.middleCols(b, l) = part.psi;
    out.dpsi.middleCols(b, l) = part.dpsi;
  }
  return out;
}

PartitionNet::Values PartitionNet::evaluate(double t) const { return evaluate(std::span<const double>(&t, 1)); }

Eigen::VectorXd PartitionNet::backward(const Tape& tape, const Eigen::MatrixXd& grad_psi,
                                       const Eigen::MatrixXd& grad_dpsi) const {
  const Eigen::MatrixXd& psi = tape.out.psi;
  const Eigen::MatrixXd& zdot = tape.logit_tangent;
  const Eigen::Index n = psi.cols();

  // Through dpsi = psi * (zdot - <psi, zdot>) and psi = softmax(z).
  Eigen::MatrixXd gz(psi.rows(), n);
  Eigen::MatrixXd gzdot(psi.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto p = psi.col(j).array();
    const auto gd = grad_dpsi.col(j).array();
    const auto zd = zdot.col(j).array();
    const double s = (p * zd).sum();
    const double gd_psi = (gd * p).sum();
    gzdot.col(j) = (p * (gd - gd_psi)).matrix();
    const Eigen::ArrayXd g_total = grad_psi.col(j).array() + gd * (zd - s) - zd * gd_psi;
    gz.col(j) = (p * (g_total - (g_total * p).sum())).matrix();
  }

  Eigen::VectorXd grad(parameter_count());
  // Parameter offsets per layer.
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& l : layers_) {
    offsets.push_back(off);
    off += l.weight.size() + l.bias.size();
  }

  Eigen::MatrixXd ga = std::move(gz);
  Eigen::MatrixXd gadot = std::move(gzdot);
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& layer = layers_[li];
    const Eigen::MatrixXd& h = tape.inputs[li];
    const Eigen::MatrixXd& hdot = tape.tangents[li];
    Eigen::MatrixXd gw = ga * h.transpose() + gadot * hdot.transpose();
    grad.segment(offsets[li], gw.size()) = gw.reshaped();
    grad.segment(offsets[li] + gw.size(), layer.bias.size()) = ga.rowwise().sum();
    if (li == 0) break;
    // Into the previous hidden activation h = sin(a), hdot = cos(a) * adot.
    const Eigen::MatrixXd gh = layer.weight.transpose() * ga;
    const Eigen::MatrixXd ghdot = layer.weight.transpose() * gadot;
    const auto& a = tape.pre[li - 1].array();
    const auto& adot = tape.pre_tangent[li - 1].array();
    ga = (gh.array() * a.cos() - ghdot.array() * a.sin() * adot).matrix();
    gadot = (ghdot.array() * a.cos()).matrix();
  }
  return grad;
}

}  // namespace nfrecon
