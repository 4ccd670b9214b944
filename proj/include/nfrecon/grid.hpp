#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "nfrecon/common.hpp"

namespace nfrecon {

/// Square pixel grid over [-L/2, L/2]^2 times K uniform frames on [0, T).
///
/// Pixels are enumerated row-major with y varying fastest:
/// m = ix * side + iy, center (-L/2 + (ix + 1/2) h, -L/2 + (iy + 1/2) h).
/// Frame k (0-based) samples t_k = k * T / K and owns the interval
/// (t_k - dT/2, t_k + dT/2). Every spatiotemporal voxel has volume h^2 dT.
class SpacetimeGrid {
 public:
  SpacetimeGrid(int side_pixels, double fov_cm, int frames, double horizon_s);

  int side() const { return side_; }
  int pixels() const { return side_ * side_; }
  int frames() const { return frames_; }
  double fov() const { return fov_; }
  double horizon() const { return horizon_; }
  double pixel_size() const { return fov_ / side_; }
  double frame_interval() const { return horizon_ / frames_; }
  double voxel_volume() const { return pixel_size() * pixel_size() * frame_interval(); }

  double frame_time(int k) const { return k * frame_interval(); }
  Point2 pixel_center(int m) const;
  std::vector<Point2> pixel_centers() const;

  /// Pixel containing r; nullopt outside the field of view.
  std::optional<int> pixel_at(Point2 r) const;
  /// Frame whose interval contains t; nullopt outside [0, T] or past the
  /// last frame interval.
  std::optional<int> frame_at(double t) const;

  bool operator==(const SpacetimeGrid&) const = default;

 private:
  int side_;
  double fov_;
  int frames_;
  double horizon_;
};

using SpacetimeFn = std::function<double(double x, double y, double t)>;

/// M x K coefficient matrix of an object expanded in the pixel/frame
/// indicator basis; column k is the frame-k snapshot.
struct ImageStack {
  explicit ImageStack(SpacetimeGrid g)
      : grid(g), coeffs(Eigen::MatrixXd::Zero(g.pixels(), g.frames())) {}
  ImageStack(SpacetimeGrid g, Eigen::MatrixXd c);

  SpacetimeGrid grid;
  Eigen::MatrixXd coeffs;
};

/// Lesion (or any) region of interest as a set of pixel indices.
struct RoiMask {
  std::vector<int> pixels;
  int dilation_px = 0;

  void validate(const SpacetimeGrid& grid) const;
};

/// Indicator-basis projection by pixel-center (midpoint) sampling.
ImageStack project(const SpacetimeGrid& grid, const SpacetimeFn& object);

/// Adjoint of the projection: (r, t) -> f_{m(r),k(t)} / V, zero outside the
/// grid's support.
SpacetimeFn adjoint_embed(const ImageStack& stack);

/// Voxel-volume weighted inner product sum_{m,k} a_{mk} b_{mk} V.
double inner_product(const ImageStack& a, const ImageStack& b);

void require_same_grid(const SpacetimeGrid& a, const SpacetimeGrid& b, const char* what);

void write_stack(const std::filesystem::path& path, const ImageStack& stack);
ImageStack read_stack(const std::filesystem::path& path);

void write_roi(const std::filesystem::path& path, const RoiMask& roi, const SpacetimeGrid& grid);
RoiMask read_roi(const std::filesystem::path& path);

}  // namespace nfrecon
