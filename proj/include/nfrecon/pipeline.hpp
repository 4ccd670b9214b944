#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"
#include "nfrecon/baselines.hpp"
#include "nfrecon/crt.hpp"
#include "nfrecon/metrics.hpp"
#include "nfrecon/phantom.hpp"
#include "nfrecon/pounet.hpp"
#include "nfrecon/proxnf.hpp"

namespace nfrecon {

/// Everything a desk experiment needs, resolved from one JSON document.
/// Missing keys keep the defaults below; to_json echoes the resolved values.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  int side = 64;
  double fov_cm = 3.72;
  int frames = 128;
  double horizon_s = 648.0;

  nlohmann::json phantom = nlohmann::json::object();
  int supersample = 4;
  int roi_dilation = 2;

  SensorSchedule schedule;
  int rings = 90;
  ArcSampling sampling;
  double rnl = 0.04;

  PartitionNetConfig net{{48, 48, 48, 48}, 10, 30.0};
  EmbedConfig embed;
  ProxConfig proxnf;
  double init_spatial = -1.0;  // < 0: use proxnf lambda_s
  FistaConfig stirnn;

  std::vector<double> proxnf_scales{0.25, 1.0, 4.0};
  std::vector<double> stirnn_lambdas{1.0, 4.0, 16.0};

  SpacetimeGrid grid() const;
  DynamicPhantom make_phantom() const;
  std::vector<double> radii() const;
  FrameOperatorSet operators() const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Derived seeds so that stages stay independent of each other.
std::uint64_t stage_seed(std::uint64_t seed, const char* stage);

struct Truth {
  ImageStack stack;
  RoiMask roi;
};
Truth make_truth(const ExperimentConfig& cfg);

Measurements simulate(const ExperimentConfig& cfg, const ImageStack& truth, const FrameOperatorSet& ops);

struct EmbedOutcome {
  PouField field;
  EmbedReport report;
};
EmbedOutcome run_embedding(const ExperimentConfig& cfg, const ImageStack& target);

/// Rank of the semiseparable baseline whose parameter count r (M + K + 1)
/// is closest to `parameters`.
int matched_rank(const SpacetimeGrid& grid, Eigen::Index parameters);

struct ProxOutcome {
  PouField field;
  ProxTrace trace;
};
/// Static initialisation followed by the proximal iteration; `scale`
/// multiplies both regularization weights.
ProxOutcome run_reconstruction(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                               double scale = 1.0, const ProxObserver& observer = {});

FistaResult run_stirnn(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                       double lambda, const Eigen::MatrixXd* warm_start = nullptr, double lipschitz = 0.0);

/// Sees every sweep solution (lambda or scale, M x K coefficients).
using SweepVisitor = std::function<void(double, const Eigen::MatrixXd&)>;

MorozovReport sweep_proxnf(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                           const SweepVisitor& visit = {});
/// Each lambda warm-starts from the previous solution.
MorozovReport sweep_stirnn(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                           const SweepVisitor& visit = {});

}  // namespace nfrecon
