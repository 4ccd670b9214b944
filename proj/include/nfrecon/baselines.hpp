#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nfrecon/crt.hpp"
#include "nfrecon/grid.hpp"

namespace nfrecon {

/// Rank-r truncated SVD U diag(s) V^T of an M x K coefficient matrix.
struct SemiseparableApprox {
  Eigen::MatrixXd u;
  Eigen::VectorXd s;
  Eigen::MatrixXd v;

  Eigen::MatrixXd reconstruct() const { return u * s.asDiagonal() * v.transpose(); }
  Eigen::Index parameter_count() const { return u.size() + s.size() + v.size(); }
};

SemiseparableApprox ss_embed(const Eigen::MatrixXd& coeffs, int rank);
SemiseparableApprox ss_embed(const ImageStack& stack, int rank);

/// Singular-value soft thresholding U max(s - tau, 0) V^T.
Eigen::MatrixXd svt(const Eigen::MatrixXd& a, double tau);

struct FistaConfig {
  double lambda_nuc = 0.0;
  int max_iterations = 2000;
  double tolerance = 1e-6;
  bool restart = true;
  double divergence_factor = 10.0;
};

nlohmann::json to_json(const FistaConfig& cfg);
FistaConfig fista_config_from_json(const nlohmann::json& doc, FistaConfig defaults = {});

struct FistaResult {
  ImageStack stack;
  std::vector<double> objective;
  int restarts = 0;
  bool converged = false;
  double step = 0.0;
};

/// FISTA on (1/2 sigma^2) sum_k ||H_k f_k - d_k||^2 + lambda_nuc ||F||_* with
/// step 1/L, L = max_k ||H_k||^2 / sigma^2. A nonzero `warm_start` seeds the
/// iterate; `lipschitz` <= 0 triggers the power-iteration estimate.
FistaResult stirnn_reconstruct(const SpacetimeGrid& grid, const Measurements& meas, const FrameOperatorSet& ops,
                               const FistaConfig& cfg, const Eigen::MatrixXd* warm_start = nullptr,
                               double lipschitz = 0.0);

/// Frame-by-frame minimum-norm least squares by CGLS from zero, no
/// regularization and no coupling between frames.
ImageStack framewise_least_squares(const SpacetimeGrid& grid, const Measurements& meas, const FrameOperatorSet& ops,
                                   int max_iterations = 500, double tolerance = 1e-8);

/// Standard deviation of all entries of H_k f_k - d_k.
double residual_std(const Eigen::MatrixXd& coeffs, const Measurements& meas, const FrameOperatorSet& ops);

struct MorozovEntry {
  double lambda = 0.0;
  double residual_std = 0.0;
};

struct MorozovReport {
  double sigma = 0.0;
  double chosen = 0.0;
  std::vector<MorozovEntry> table;
  std::string warning;
};

/// Runs `residual_at` for every lambda (positive, increasing) and keeps the
/// one whose residual std is closest to sigma.
MorozovReport morozov_sweep(const std::function<double(double)>& residual_at, double sigma,
                            const std::vector<double>& lambdas);

/// Sweep over any stack solver lambda -> M x K coefficients.
MorozovReport morozov_sweep(const std::function<Eigen::MatrixXd(double)>& solver, const Measurements& meas,
                            const FrameOperatorSet& ops, const std::vector<double>& lambdas);

nlohmann::json to_json(const MorozovReport& report);

}  // namespace nfrecon
