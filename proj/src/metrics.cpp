#include "nfrecon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace nfrecon {

namespace {

void check_pair(const ImageStack& est, const ImageStack& truth) {
  require_same_grid(est.grid, truth.grid, "metrics");
  if (est.coeffs.rows() != truth.coeffs.rows() || est.coeffs.cols() != truth.coeffs.cols()) {
    throw Error("shape_mismatch", "metric inputs differ in shape");
  }
}

// Separable Gaussian filter restricted to fully covered ("valid") windows.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& img, const Eigen::VectorXd& g) {
  const Eigen::Index w = g.size();
  const Eigen::Index n = img.rows() - w + 1;
  const Eigen::Index c = img.cols() - w + 1;
  Eigen::MatrixXd rows(n, img.cols());
  for (Eigen::Index i = 0; i < n; ++i) rows.row(i) = g.transpose() * img.middleRows(i, w);
  Eigen::MatrixXd out(n, c);
  for (Eigen::Index j = 0; j < c; ++j) out.col(j) = rows.middleCols(j, w) * g;
  return out;
}

}  // namespace

double rrmse(const Eigen::VectorXd& est, const Eigen::VectorXd& truth) {
  if (est.size() != truth.size()) throw Error("shape_mismatch", "rrmse inputs differ in length");
  const double denom = truth.norm();
  if (denom == 0.0) throw Error("zero_truth", "reference has zero norm");
  return (est - truth).norm() / denom;
}

double rrmse(const ImageStack& est, const ImageStack& truth, const RoiMask* mask) {
  check_pair(est, truth);
  if (!mask) {
    const double denom = truth.coeffs.norm();
    if (denom == 0.0) throw Error("zero_truth", "reference has zero norm");
    return (est.coeffs - truth.coeffs).norm() / denom;
  }
  mask->validate(truth.grid);
  double num = 0.0;
  double den = 0.0;
  for (int m : mask->pixels) {
    num += (est.coeffs.row(m) - truth.coeffs.row(m)).squaredNorm();
    den += truth.coeffs.row(m).squaredNorm();
  }
  if (den == 0.0) throw Error("zero_truth", "reference has zero norm on the mask");
  return std::sqrt(num / den);
}

double ssim(const ImageStack& est, const ImageStack& truth, const RoiMask* mask, const SsimOptions& opt) {
  check_pair(est, truth);
  const int side = truth.grid.side();
  if (side < opt.window) {
    throw Error("frame_too_small", "frame of " + std::to_string(side) + " pixels is smaller than the " +
                                       std::to_string(opt.window) + "-pixel window");
  }
  Eigen::VectorXd g(opt.window);
  const int half = opt.window / 2;
  for (int i = 0; i < opt.window; ++i) g[i] = std::exp(-0.5 * (i - half) * (i - half) / (opt.sigma * opt.sigma));
  g /= g.sum();

  double range = truth.coeffs.maxCoeff() - truth.coeffs.minCoeff();
  if (range <= 0.0) range = 1.0;
  const double c1 = (opt.k1 * range) * (opt.k1 * range);
  const double c2 = (opt.k2 * range) * (opt.k2 * range);

  const int valid = side - opt.window + 1;
  // Window (a, b) is centered on map entry (a + half, b + half), i.e. pixel
  // m = (a + half) + (b + half) * side in the column-major frame map.
  Eigen::ArrayXXd use = Eigen::ArrayXXd::Ones(valid, valid);
  double count = static_cast<double>(valid) * valid;
  if (mask) {
    mask->validate(truth.grid);
    use.setZero();
    for (int m : mask->pixels) {
      const int a = m % side - half;
      const int b = m / side - half;
      if (a >= 0 && a < valid && b >= 0 && b < valid) use(a, b) = 1.0;
    }
    count = use.sum();
    if (count == 0.0) throw Error("empty_roi", "no full SSIM window is centered inside the mask");
  }

  const int frames = truth.grid.frames();
  std::vector<double> per_frame(static_cast<std::size_t>(frames));
  parallel_for(static_cast<std::size_t>(frames), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const Eigen::Map<const Eigen::MatrixXd> x(est.coeffs.col(k).data(), side, side);
    const Eigen::Map<const Eigen::MatrixXd> y(truth.coeffs.col(k).data(), side, side);
    const Eigen::ArrayXXd mx = filter_valid(x, g).array();
    const Eigen::ArrayXXd my = filter_valid(y, g).array();
    const Eigen::ArrayXXd xx = filter_valid(x.cwiseProduct(x), g).array() - mx * mx;
    const Eigen::ArrayXXd yy = filter_valid(y.cwiseProduct(y), g).array() - my * my;
    const Eigen::ArrayXXd xy = filter_valid(x.cwiseProduct(y), g).array() - mx * my;
    const Eigen::ArrayXXd map =
        ((2.0 * mx * my + c1) * (2.0 * xy + c2)) / ((mx * mx + my * my + c1) * (xx + yy + c2));
    per_frame[kk] = (map * use).sum() / count;
  });
  double total = 0.0;
  for (double v : per_frame) total += v;
  return total / frames;
}

Eigen::VectorXd lesion_activity_curve(const ImageStack& stack, const RoiMask& roi) {
  roi.validate(stack.grid);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(stack.grid.frames());
  for (int m : roi.pixels) out += stack.coeffs.row(m).transpose();
  return out / static_cast<double>(roi.pixels.size());
}

MetricsReport evaluate_metrics(const ImageStack& est, const ImageStack& truth, const RoiMask& roi) {
  MetricsReport r;
  r.rrmse = rrmse(est, truth);
  r.ssim = ssim(est, truth);
  r.roi_rrmse = rrmse(est, truth, &roi);
  r.roi_ssim = ssim(est, truth, &roi);
  r.lac_rrmse = rrmse(lesion_activity_curve(est, roi), lesion_activity_curve(truth, roi));
  r.frame_rrmse.resize(static_cast<std::size_t>(truth.grid.frames()));
  for (int k = 0; k < truth.grid.frames(); ++k) {
    const double den = truth.coeffs.col(k).norm();
    r.frame_rrmse[static_cast<std::size_t>(k)] =
        den > 0.0 ? (est.coeffs.col(k) - truth.coeffs.col(k)).norm() / den : 0.0;
  }
  for (double v : {r.rrmse, r.ssim, r.roi_rrmse, r.roi_ssim, r.lac_rrmse}) {
    if (!std::isfinite(v)) throw Error("non_finite_metric", "metric evaluated to a non-finite value");
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& report) {
  return {{"rrmse", report.rrmse},         {"ssim", report.ssim},
          {"roi_rrmse", report.roi_rrmse}, {"roi_ssim", report.roi_ssim},
          {"lac_rrmse", report.lac_rrmse}, {"frame_rrmse", report.frame_rrmse}};
}

void write_frame_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  out.precision(17);
  out << "frame,rrmse\n";
  for (std::size_t k = 0; k < report.frame_rrmse.size(); ++k) out << k << ',' << report.frame_rrmse[k] << '\n';
  if (!out) throw Error("io_error", "failed writing " + path.string());
}

void write_pgm(const std::filesystem::path& path, const ImageStack& stack, int frame, double lo, double hi) {
  if (frame < 0 || frame >= stack.grid.frames()) throw Error("out_of_range", "frame index out of range");
  if (!(lo > 0.0 && hi > lo)) throw Error("invalid_argument", "log scale needs 0 < lo < hi");
  const int side = stack.grid.side();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  out << "P5\n" << side << ' ' << side << "\n255\n";
  const double span = std::log(hi) - std::log(lo);
  for (int row = 0; row < side; ++row) {
    const int iy = side - 1 - row;
    for (int ix = 0; ix < side; ++ix) {
      const double v = std::clamp(stack.coeffs(ix * side + iy, frame), lo, hi);
      const auto byte = static_cast<unsigned char>(std::lround(255.0 * (std::log(v) - std::log(lo)) / span));
      out.put(static_cast<char>(byte));
    }
  }
  if (!out) throw Error("io_error", "failed writing " + path.string());
}

}  // namespace nfrecon
