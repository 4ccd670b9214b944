#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "nfrecon/grid.hpp"

namespace nfrecon {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor>;

/// Rotating point-sensor layout on a circular aperture.
///
/// Sensor (g, s) at frame k sits at angle
///   g * 360 / groups + s * spacing + k * rotation   (degrees, mod 360)
/// on the circle of radius `radius_cm`. Sensors are enumerated group-major.
struct SensorSchedule {
  double radius_cm = 2.63;
  int groups = 2;
  int sensors_per_group = 5;
  double spacing_deg = 1.0;
  double rotation_deg = 5.0;
  int frames = 1;

  int sensors() const { return groups * sensors_per_group; }
  double frame_rotation_deg(int frame) const;
  double sensor_angle_deg(int group, int sensor, int frame) const;
  Point2 sensor_position(int sensor_index, int frame) const;
  void validate() const;
};

/// `count` radii uniformly spaced from one pixel size to R + L/sqrt(2).
std::vector<double> uniform_radii(const SpacetimeGrid& grid, const SensorSchedule& schedule, int count);

struct ArcSampling {
  /// Arc samples per nominal step h / (2 l); values above one refine the step.
  int oversample = 32;
};

/// Sparse circular-Radon matrix of one frame; row s * rings + i integrates
/// over the circle of radius radii[i] around sensor s.
class CrtFrameOperator {
 public:
  CrtFrameOperator(std::shared_ptr<const SparseMatrix> matrix, std::vector<double> radii, int sensors,
                   int frame);

  const SparseMatrix& matrix() const { return *matrix_; }
  std::shared_ptr<const SparseMatrix> shared_matrix() const { return matrix_; }
  const std::vector<double>& radii() const { return radii_; }
  int sensors() const { return sensors_; }
  int rings() const { return static_cast<int>(radii_.size()); }
  int frame() const { return frame_; }
  Eigen::Index rows() const { return matrix_->rows(); }
  Eigen::Index cols() const { return matrix_->cols(); }

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& image) const;
  Eigen::VectorXd apply_adjoint(const Eigen::Ref<const Eigen::VectorXd>& residual) const;

 private:
  std::shared_ptr<const SparseMatrix> matrix_;
  std::vector<double> radii_;
  int sensors_;
  int frame_;
};

/// Builds H_k by sampling each circle at uniform angles and binning the
/// samples (weight l * dphi) into the pixel that contains them. Samples
/// outside the field of view are dropped.
CrtFrameOperator build_frame_operator(const SpacetimeGrid& grid, const SensorSchedule& schedule,
                                      std::span<const double> radii, int frame,
                                      ArcSampling sampling = {});

/// Per-frame operators for a whole acquisition. Frames whose rotation agrees
/// modulo 360 degrees share one matrix.
class FrameOperatorSet {
 public:
  static FrameOperatorSet build(const SpacetimeGrid& grid, const SensorSchedule& schedule,
                                std::span<const double> radii, ArcSampling sampling = {});
  explicit FrameOperatorSet(std::vector<CrtFrameOperator> frames);

  int frames() const { return static_cast<int>(frames_.size()); }
  const CrtFrameOperator& frame(int k) const { return frames_.at(static_cast<std::size_t>(k)); }
  int distinct_geometries() const;
  int pixels() const;
  int rows_per_frame() const;

 private:
  std::vector<CrtFrameOperator> frames_;
};

/// Per-frame measurement vectors stacked as columns (rows = S * I).
struct Measurements {
  Eigen::MatrixXd data;
  int sensors = 0;
  int rings = 0;
  double sigma = 0.0;
  double rnl = 0.0;
  std::uint64_t seed = 0;

  int frames() const { return static_cast<int>(data.cols()); }
};

Measurements forward(const ImageStack& stack, const FrameOperatorSet& ops);
Eigen::VectorXd adjoint_frame(const CrtFrameOperator& op, const Eigen::Ref<const Eigen::VectorXd>& residual);

/// Adds i.i.d. N(0, sigma^2) noise with sigma = rnl * max |d|.
Measurements add_noise(const Measurements& clean, double rnl, std::uint64_t seed);

/// Largest singular value by power iteration on A^T A.
double spectral_norm_estimate(const SparseMatrix& a, int min_iterations = 50, int max_iterations = 2000,
                              double tolerance = 1e-10);
/// max_k ||H_k||_2 over the distinct geometries of the set.
double operator_norm_estimate(const FrameOperatorSet& ops);

void write_measurements(const std::filesystem::path& path, const Measurements& meas);
Measurements read_measurements(const std::filesystem::path& path);

}  // namespace nfrecon
