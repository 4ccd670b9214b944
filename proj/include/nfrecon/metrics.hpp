#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nfrecon/grid.hpp"

namespace nfrecon {

/// ||est - truth||_F / ||truth||_F, restricted to the mask pixels if given.
double rrmse(const ImageStack& est, const ImageStack& truth, const RoiMask* mask = nullptr);
double rrmse(const Eigen::VectorXd& est, const Eigen::VectorXd& truth);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean local SSIM over frames. D = max - min of the whole truth stack.
/// With a mask only windows centered on mask pixels are averaged.
double ssim(const ImageStack& est, const ImageStack& truth, const RoiMask* mask = nullptr,
            const SsimOptions& opt = {});

/// Per-frame mean over the roi pixels.
Eigen::VectorXd lesion_activity_curve(const ImageStack& stack, const RoiMask& roi);

struct MetricsReport {
  double rrmse = 0.0;
  double ssim = 0.0;
  double roi_rrmse = 0.0;
  double roi_ssim = 0.0;
  double lac_rrmse = 0.0;
  std::vector<double> frame_rrmse;
};

MetricsReport evaluate_metrics(const ImageStack& est, const ImageStack& truth, const RoiMask& roi);
nlohmann::json to_json(const MetricsReport& report);
void write_frame_csv(const std::filesystem::path& path, const MetricsReport& report);

/// 8-bit PGM of frame k on a log scale clamped to [lo, hi]; +y points up.
void write_pgm(const std::filesystem::path& path, const ImageStack& stack, int frame, double lo = 1e-4,
               double hi = 0.06);

}  // namespace nfrecon
