#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nfrecon/crt.hpp"
#include "nfrecon/pounet.hpp"

namespace nfrecon {

/// Gradient of (1/2 sigma^2) ||H_k f_k - d_k||^2 at f_k.
Eigen::VectorXd frame_data_gradient(const CrtFrameOperator& op, const Eigen::Ref<const Eigen::VectorXd>& f,
                                    const Eigen::Ref<const Eigen::VectorXd>& d, double sigma);

/// J distinct frames drawn uniformly without replacement, sorted.
std::vector<int> sample_frames(int frames, int batch, std::mt19937_64& rng);

/// Framewise data-fidelity gradients on the sampled frames only. `values`
/// holds scale * g_k in column j for frames[j]; every other frame has zero
/// direction.
struct SampledDirection {
  std::vector<int> frames;
  Eigen::MatrixXd values;
  double scale = 1.0;
};

SampledDirection sampled_update_direction(const PouField& field, const Measurements& meas,
                                          const FrameOperatorSet& ops, std::vector<int> frames,
                                          bool unbiased = true);

/// Settings of the proximal (re-embedding) step.
struct ProxStepConfig {
  Regularization reg;
  int rounds = 1;
  CgOptions cg;
  AdamConfig adam{1e-3, 100, 32768};
  /// Restrict the prox misfit to the sampled frames.
  bool sampled_frames_only = false;
};

/// Lazy prox targets y_k = f_k - alpha * direction_k, built from a frozen
/// copy of the field's coefficients and partition values.
class ProxTargets final : public FrameTargets {
 public:
  ProxTargets(const PouField& field, const SampledDirection& direction, double step, bool sampled_only);
  int frames() const override { return static_cast<int>(psi_.cols()); }
  int pixels() const override { return static_cast<int>(coeffs_.rows()); }
  double weight(int k) const override;
  void frame(int k, Eigen::Ref<Eigen::VectorXd> out) const override;
  double point(int m, int k) const override;

 private:
  Eigen::MatrixXd coeffs_;
  Eigen::MatrixXd psi_;
  const SampledDirection& direction_;
  std::vector<int> slot_;
  double step_;
  bool sampled_only_;
};

/// Replaces the field by the regularized embedding of its gradient-stepped
/// snapshots (misfit weight 1 / (2 alpha)).
EmbedReport prox_step(PouField& field, const SampledDirection& direction, double step, const ProxStepConfig& cfg,
                      std::mt19937_64& rng);

struct ProxConfig {
  /// nullopt resolves to sigma^2 J / (K max_k ||H_k||^2).
  std::optional<double> step;
  int batch = 32;
  int max_iterations = 40;
  double stop_ratio = 0.1;
  int audit_frames = 32;
  /// Multiply sampled gradients by K / J.
  bool unbiased = true;
  ProxStepConfig prox;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;
};

nlohmann::json to_json(const ProxConfig& cfg);
ProxConfig prox_config_from_json(const nlohmann::json& doc, ProxConfig defaults = {});

struct ProxRecord {
  int iteration = 0;
  std::vector<int> frames;
  double data_fidelity = 0.0;
  double regularization = 0.0;
  double prox_gradient_norm = 0.0;
  double wall_seconds = 0.0;
  double objective() const { return data_fidelity + regularization; }
};

struct ProxTrace {
  double step = 0.0;
  double initial_data_fidelity = 0.0;
  double initial_regularization = 0.0;
  std::vector<ProxRecord> records;
  bool stopped = false;
};

/// Trace as CSV, one row per iteration. Wall time is left out unless asked
/// for so that reruns produce identical files.
void write_trace_csv(const std::filesystem::path& path, const ProxTrace& trace, bool with_time = false);

class ProxDivergence : public Error {
 public:
  ProxDivergence(const std::string& message, ProxTrace trace)
      : Error("diverged", message), trace_(std::move(trace)) {}
  const ProxTrace& trace() const { return trace_; }

 private:
  ProxTrace trace_;
};

struct ObjectiveParts {
  double data_fidelity = 0.0;
  double regularization = 0.0;
};

/// (1/2 sigma^2) sum_k ||H_k f_k - d_k||^2 and the regularizer of the field.
ObjectiveParts prox_objective(const PouField& field, const Measurements& meas, const FrameOperatorSet& ops,
                              const Regularization& reg);

double auto_step(const FrameOperatorSet& ops, double sigma, int batch);

/// Best time-constant image: minimises
/// (1/2 sigma^2) sum_k ||H_k f - d_k||^2 + K * spatial * ||D f||^2 by CG.
Eigen::VectorXd static_reconstruction(const SpacetimeGrid& grid, const Measurements& meas,
                                      const FrameOperatorSet& ops, double spatial, const CgOptions& cg = {});

/// Time-constant field C = f 1^T around a freshly initialised partition net.
PouField initialize_field(const SpacetimeGrid& grid, const PartitionNetConfig& net, std::uint64_t seed,
                          const Eigen::VectorXd& image);

using ProxObserver = std::function<void(const ProxRecord&, const PouField&)>;

/// Stochastic proximal-gradient training of the field on the measurements.
/// The observer, if set, sees every record right after it is appended.
ProxTrace run_proxnf(const ProxConfig& config, PouField& field, const Measurements& meas,
                     const FrameOperatorSet& ops, const ProxObserver& observer = {});

}  // namespace nfrecon
