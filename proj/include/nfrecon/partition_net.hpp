#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace nfrecon {

struct PartitionNetConfig {
  std::vector<int> hidden{140, 140, 140, 140};
  int partitions = 10;
  /// Frequency scale of the sinusoidal initialisation.
  double omega0 = 30.0;
};

nlohmann::json to_json(const PartitionNetConfig& cfg);
PartitionNetConfig partition_config_from_json(const nlohmann::json& doc);

/// Time-input MLP t -> softmax(z(t)) with sin hidden activations.
///
/// The input is normalised as u = 2 t / T - 1. Next to the partition values
/// the forward pass carries the tangent d/dt through every layer, which gives
/// the exact temporal derivative of the partition.
class PartitionNet {
 public:
  PartitionNet(PartitionNetConfig config, double horizon, std::uint64_t seed);
  /// Net with all weights and biases zero.
  static PartitionNet zeros(PartitionNetConfig config, double horizon);

  const PartitionNetConfig& config() const { return config_; }
  double horizon() const { return horizon_; }
  int partitions() const { return config_.partitions; }
  Eigen::Index parameter_count() const;

  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::Ref<const Eigen::VectorXd>& flat);

  struct Values {
    Eigen::MatrixXd psi;   // P x n
    Eigen::MatrixXd dpsi;  // P x n, derivative in 1/s
  };

  /// Partition values and derivatives at each time (columns follow `times`).
  Values evaluate(std::span<const double> times) const;
  Values evaluate(double t) const;

  /// Forward pass that keeps the activations needed by backward().
  struct Tape {
    std::vector<Eigen::MatrixXd> inputs;      // layer inputs H_l
    std::vector<Eigen::MatrixXd> tangents;    // d/dt of H_l
    std::vector<Eigen::MatrixXd> pre;         // pre-activations A_l (hidden layers)
    std::vector<Eigen::MatrixXd> pre_tangent; // d/dt of A_l
    Eigen::MatrixXd logit_tangent;
    Values out;
  };
  Tape forward(std::span<const double> times) const;

  /// Gradient of a loss w.r.t. the flattened parameters given dL/dpsi and
  /// dL/d(dpsi/dt) for the columns of the tape.
  Eigen::VectorXd backward(const Tape& tape, const Eigen::MatrixXd& grad_psi,
                           const Eigen::MatrixXd& grad_dpsi) const;

 private:
  struct Layer {
    Eigen::MatrixXd weight;
    Eigen::VectorXd bias;
  };

  PartitionNetConfig config_;
  double horizon_;
  std::vector<Layer> layers_;
};

}  // namespace nfrecon
