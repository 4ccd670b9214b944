#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "nfrecon/metrics.hpp"

using namespace nfrecon;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Direct per-window SSIM with an explicit 2D Gaussian kernel.
double ssim_reference(const ImageStack& x, const ImageStack& y, const RoiMask* mask) {
  const int side = y.grid.side();
  const int win = 11;
  const int half = 5;
  double kernel[11][11];
  double total = 0.0;
  for (int i = 0; i < win; ++i) {
    for (int j = 0; j < win; ++j) {
      kernel[i][j] = std::exp(-((i - half) * (i - half) + (j - half) * (j - half)) / (2.0 * 1.5 * 1.5));
      total += kernel[i][j];
    }
  }
  const double range = y.coeffs.maxCoeff() - y.coeffs.minCoeff();
  const double c1 = std::pow(0.01 * range, 2);
  const double c2 = std::pow(0.03 * range, 2);
  std::vector<bool> in_mask(static_cast<std::size_t>(y.grid.pixels()), mask == nullptr);
  if (mask) {
    for (int m : mask->pixels) in_mask[static_cast<std::size_t>(m)] = true;
  }
  double sum_frames = 0.0;
  for (int k = 0; k < y.grid.frames(); ++k) {
    double sum = 0.0;
    int count = 0;
    for (int cx = half; cx < side - half; ++cx) {
      for (int cy = half; cy < side - half; ++cy) {
        if (!in_mask[static_cast<std::size_t>(cx * side + cy)]) continue;
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < win; ++i) {
          for (int j = 0; j < win; ++j) {
            const int m = (cx + i - half) * side + (cy + j - half);
            const double w = kernel[i][j] / total;
            const double a = x.coeffs(m, k);
            const double b = y.coeffs(m, k);
            mx += w * a;
            my += w * b;
            sxx += w * a * a;
            syy += w * b * b;
            sxy += w * a * b;
          }
        }
        sxx -= mx * mx;
        syy -= my * my;
        sxy -= mx * my;
        sum += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        ++count;
      }
    }
    sum_frames += sum / count;
  }
  return sum_frames / y.grid.frames();
}

}  // namespace

TEST_CASE("rrmse") {
  const SpacetimeGrid g(6, 1.0, 3, 3.0);
  const ImageStack truth(g, random_matrix(36, 3, 1));
  CHECK(rrmse(truth, truth) == 0.0);
  CHECK_THAT(rrmse(ImageStack(g, 2.0 * truth.coeffs), truth), WithinAbs(1.0, 1e-15));
  CHECK_THAT(rrmse(ImageStack(g), truth), WithinAbs(1.0, 1e-15));
  RoiMask roi{{0, 7, 8}, 0};
  ImageStack est = truth;
  est.coeffs.row(20).setConstant(100.0);
  CHECK(rrmse(est, truth, &roi) == 0.0);
  CHECK(rrmse(est, truth) > 1.0);
  CHECK_THROWS_AS(rrmse(truth, ImageStack(g)), Error);
  CHECK_THROWS_AS(rrmse(truth, ImageStack(SpacetimeGrid(5, 1.0, 3, 3.0))), Error);
  CHECK_THAT(rrmse(Eigen::VectorXd::Constant(4, 3.0), Eigen::VectorXd::Constant(4, 2.0)), WithinAbs(0.5, 1e-15));
}

TEST_CASE("ssim") {
  const SpacetimeGrid g(20, 1.0, 3, 3.0);
  const ImageStack truth(g, random_matrix(400, 3, 2));
  CHECK_THAT(ssim(truth, truth), WithinAbs(1.0, 1e-12));

  SECTION("luminance offsets on flat patches") {
    const ImageStack flat(g, Eigen::MatrixXd::Constant(400, 3, 1.0));
    ImageStack ramp = flat;
    ramp.coeffs(0, 0) = 2.0;  // sets the dynamic range
    double previous = 1.0;
    for (double c : {0.01, 0.1, 0.5}) {
      const double v = ssim(ImageStack(g, ramp.coeffs.array() + c), ramp);
      CHECK(v < previous);
      previous = v;
    }
  }
  SECTION("matches a direct sliding-window reference") {
    const ImageStack est(g, truth.coeffs + random_matrix(400, 3, 3, 0.5));
    CHECK_THAT(ssim(est, truth), WithinAbs(ssim_reference(est, truth, nullptr), 1e-10));
    RoiMask roi;
    for (int ix = 4; ix < 12; ++ix) {
      for (int iy = 6; iy < 16; ++iy) roi.pixels.push_back(ix * 20 + iy);
    }
    CHECK_THAT(ssim(est, truth, &roi), WithinAbs(ssim_reference(est, truth, &roi), 1e-10));
  }
  SECTION("asymmetric images") {
    ImageStack est(g, truth.coeffs);
    for (int m = 0; m < 400; ++m) est.coeffs(m, 1) += 0.01 * (m / 20) * (m % 20 < 7 ? 1.0 : -2.0);
    CHECK_THAT(ssim(est, truth), WithinAbs(ssim_reference(est, truth, nullptr), 1e-10));
  }
  CHECK_THROWS_AS(ssim(ImageStack(SpacetimeGrid(8, 1.0, 1, 1.0)), ImageStack(SpacetimeGrid(8, 1.0, 1, 1.0))), Error);
  RoiMask corner{{0}, 0};
  CHECK_THROWS_AS(ssim(truth, truth, &corner), Error);
}

TEST_CASE("lesion activity curve") {
  const SpacetimeGrid g(5, 1.0, 4, 4.0);
  RoiMask roi{{3, 4, 9}, 0};
  CHECK((lesion_activity_curve(ImageStack(g, Eigen::MatrixXd::Constant(25, 4, 2.5)), roi).array() == 2.5).all());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(25, 4);
  c.row(3) << 1, 2, 3, 4;
  c.row(9) << 2, 2, 0, 0;
  const Eigen::VectorXd lac = lesion_activity_curve(ImageStack(g, c), roi);
  CHECK(lac.isApprox(Eigen::Vector4d(1.0, 4.0 / 3, 1.0, 4.0 / 3)));
  CHECK_THROWS_AS(lesion_activity_curve(ImageStack(g), RoiMask{}), Error);
}

TEST_CASE("metrics report") {
  const SpacetimeGrid g(16, 1.0, 4, 4.0);
  const ImageStack truth(g, random_matrix(256, 4, 5).cwiseAbs());
  RoiMask roi;
  for (int m = 100; m < 140; ++m) roi.pixels.push_back(m);
  const auto same = evaluate_metrics(truth, truth, roi);
  CHECK(same.rrmse == 0.0);
  CHECK_THAT(same.ssim, WithinAbs(1.0, 1e-12));
  CHECK(same.lac_rrmse == 0.0);
  CHECK(same.frame_rrmse.size() == 4);

  const auto doc = to_json(same);
  for (const char* key : {"rrmse", "ssim", "roi_rrmse", "roi_ssim", "lac_rrmse", "frame_rrmse"}) CHECK(doc.contains(key));

  const auto path = std::filesystem::temp_directory_path() / "nfrecon_frames.csv";
  write_frame_csv(path, same);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "frame,rrmse");

  const auto pgm = std::filesystem::temp_directory_path() / "nfrecon_frame.pgm";
  write_pgm(pgm, truth, 0);
  CHECK(std::filesystem::file_size(pgm) == std::string("P5\n16 16\n255\n").size() + 256);
}
