#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nfrecon/grid.hpp"
#include "nfrecon/partition_net.hpp"

namespace nfrecon {

/// Partition-of-unity neural field over the pixel indicator basis:
/// Phi(r, t) = C[m(r), :] . Psi(t), so the frame-k snapshot is C Psi(t_k).
class PouField {
 public:
  PouField(SpacetimeGrid grid, PartitionNet net, Eigen::MatrixXd coeffs);
  /// Randomly initialised partition net with zero coefficients.
  static PouField create(const SpacetimeGrid& grid, const PartitionNetConfig& config, std::uint64_t seed);

  const SpacetimeGrid& grid() const { return grid_; }
  const PartitionNet& net() const { return net_; }
  PartitionNet& net() { return net_; }
  const Eigen::MatrixXd& coeffs() const { return coeffs_; }
  Eigen::MatrixXd& coeffs() { return coeffs_; }
  int partitions() const { return net_.partitions(); }
  Eigen::Index parameter_count() const { return net_.parameter_count() + coeffs_.size(); }

  /// Partition values/derivatives at every frame time (P x K each).
  PartitionNet::Values frame_partitions() const;
  Eigen::VectorXd snapshot(int k) const;
  /// Continuous evaluator; zero outside the field of view.
  double evaluate(double x, double y, double t) const;
  ImageStack render() const;

 private:
  SpacetimeGrid grid_;
  PartitionNet net_;
  Eigen::MatrixXd coeffs_;
};

/// Per-frame embedding targets y_k with misfit weights w_k, produced lazily.
class FrameTargets {
 public:
  virtual ~FrameTargets() = default;
  virtual int frames() const = 0;
  virtual int pixels() const = 0;
  virtual double weight(int k) const = 0;
  virtual void frame(int k, Eigen::Ref<Eigen::VectorXd> out) const = 0;
  virtual double point(int m, int k) const = 0;
};

/// Targets read from a stored stack with one weight for every frame.
class StackTargets final : public FrameTargets {
 public:
  explicit StackTargets(const ImageStack& stack, double weight = 1.0) : stack_(stack), weight_(weight) {}
  int frames() const override { return stack_.grid.frames(); }
  int pixels() const override { return stack_.grid.pixels(); }
  double weight(int) const override { return weight_; }
  void frame(int k, Eigen::Ref<Eigen::VectorXd> out) const override { out = stack_.coeffs.col(k); }
  double point(int m, int k) const override { return stack_.coeffs(m, k); }

 private:
  const ImageStack& stack_;
  double weight_;
};

/// Tikhonov weights on forward-difference spatial gradients (Neumann
/// boundary) and on the partition time derivative, both summed over frames.
struct Regularization {
  double spatial = 0.0;
  double temporal = 0.0;
};

struct CgOptions {
  double tolerance = 1e-8;
  int max_iterations = 500;
};

struct CgReport {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

struct AdamConfig {
  double learning_rate = 1e-5;
  int steps = 10000;
  int batch_points = 100000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

nlohmann::json to_json(const AdamConfig& cfg);
AdamConfig adam_from_json(const nlohmann::json& doc, AdamConfig defaults = {});

struct EmbeddingObjective {
  double misfit = 0.0;    // sum_k w_k ||C Psi_k - y_k||^2
  double spatial = 0.0;   // lambda_s sum_k ||D C Psi_k||^2
  double temporal = 0.0;  // lambda_t sum_k ||C Psi'_k||^2
  double target_energy = 0.0;  // sum_k w_k ||y_k||^2
  double total() const { return misfit + spatial + temporal; }
  double relative_misfit() const;
};

EmbeddingObjective embedding_objective(const PouField& field, const FrameTargets& targets,
                                       const Regularization& reg);

/// Neumann graph Laplacian D^T D applied to every column (image) of x.
Eigen::MatrixXd apply_laplacian(const SpacetimeGrid& grid, const Eigen::MatrixXd& x);

/// Exact minimiser over C of the embedding objective with Psi fixed, by
/// block-Jacobi preconditioned CG on C A + lambda_s D^T D C B = Y.
CgReport solve_coefficients(PouField& field, const FrameTargets& targets, const Regularization& reg,
                            const CgOptions& cg = {});

struct BatchPoint {
  int pixel = 0;
  int frame = 0;
};

/// Minibatch estimate of the embedding objective (scaled by M K / B) and its
/// gradient with respect to the partition-net parameters.
struct BatchGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};
BatchGradient partition_batch_gradient(const PouField& field, const FrameTargets& targets,
                                       const Regularization& reg, std::span<const BatchPoint> batch);

struct AdamReport {
  int steps = 0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
};

/// Adam on the partition-net parameters with minibatches of uniformly drawn
/// (pixel, frame) points. No momentum carries over between calls.
AdamReport update_partition(PouField& field, const FrameTargets& targets, const Regularization& reg,
                            const AdamConfig& adam, std::mt19937_64& rng);

struct EmbedConfig {
  Regularization reg;
  int rounds = 3;
  CgOptions cg;
  AdamConfig adam;
  /// Start from C = time-averaged target (a time-constant field).
  bool initialize_time_constant = true;
};

struct EmbedRound {
  int round = 0;
  CgReport cg;
  double relative_misfit_after_coefficients = 0.0;
  double objective_after_coefficients = 0.0;
  AdamReport adam;
  double relative_misfit_after_partition = 0.0;
};

struct EmbedReport {
  std::vector<EmbedRound> rounds;
  EmbeddingObjective final_objective;
};

/// Alternating minimisation: per round a coefficient solve then a partition
/// update, and a closing coefficient solve.
EmbedReport embed(PouField& field, const FrameTargets& targets, const EmbedConfig& config, std::mt19937_64& rng);

struct CheckpointMeta {
  nlohmann::json seeds = nlohmann::json::object();
};

void write_checkpoint(const std::filesystem::path& path, const PouField& field, const CheckpointMeta& meta = {});
PouField read_checkpoint(const std::filesystem::path& path);

}  // namespace nfrecon
