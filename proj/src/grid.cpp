#include "nfrecon/grid.hpp"

#include <cmath>
#include <set>
#include <string>

#include "nfrecon/blob_io.hpp"

namespace nfrecon {

SpacetimeGrid::SpacetimeGrid(int side_pixels, double fov_cm, int frames, double horizon_s)
    : side_(side_pixels), fov_(fov_cm), frames_(frames), horizon_(horizon_s) {
  if (side_pixels < 1 || frames < 1) throw Error("invalid_grid", "grid needs at least one pixel and one frame");
  if (!(fov_cm > 0.0) || !(horizon_s > 0.0) || !std::isfinite(fov_cm) || !std::isfinite(horizon_s)) {
    throw Error("invalid_grid", "field of view and horizon must be positive");
  }
}

Point2 SpacetimeGrid::pixel_center(int m) const {
  const int ix = m / side_;
  const int iy = m % side_;
  const double h = pixel_size();
  return {-0.5 * fov_ + (ix + 0.5) * h, -0.5 * fov_ + (iy + 0.5) * h};
}

std::vector<Point2> SpacetimeGrid::pixel_centers() const {
  std::vector<Point2> out(static_cast<std::size_t>(pixels()));
  for (int m = 0; m < pixels(); ++m) out[static_cast<std::size_t>(m)] = pixel_center(m);
  return out;
}

std::optional<int> SpacetimeGrid::pixel_at(Point2 r) const {
  const double h = pixel_size();
  const double fx = (r.x + 0.5 * fov_) / h;
  const double fy = (r.y + 0.5 * fov_) / h;
  if (!(fx >= 0.0 && fx <= side_ && fy >= 0.0 && fy <= side_)) return std::nullopt;
  const int ix = std::min(static_cast<int>(fx), side_ - 1);
  const int iy = std::min(static_cast<int>(fy), side_ - 1);
  return ix * side_ + iy;
}

std::optional<int> SpacetimeGrid::frame_at(double t) const {
  if (!(t >= 0.0 && t <= horizon_)) return std::nullopt;
  const int k = static_cast<int>(std::floor(t / frame_interval() + 0.5));
  if (k >= frames_) return std::nullopt;
  return k;
}

ImageStack::ImageStack(SpacetimeGrid g, Eigen::MatrixXd c) : grid(g), coeffs(std::move(c)) {
  if (coeffs.rows() != grid.pixels() || coeffs.cols() != grid.frames()) {
    throw Error("shape_mismatch", "coefficient matrix is " + std::to_string(coeffs.rows()) + "x" +
                                      std::to_string(coeffs.cols()) + ", grid expects " +
                                      std::to_string(grid.pixels()) + "x" +
                                      std::to_string(grid.frames()));
  }
}

void RoiMask::validate(const SpacetimeGrid& grid) const {
  if (pixels.empty()) throw Error("empty_roi", "region of interest has no pixels");
  for (int m : pixels) {
    if (m < 0 || m >= grid.pixels()) {
      throw Error("invalid_roi", "roi pixel " + std::to_string(m) + " outside the grid");
    }
  }
}

void require_same_grid(const SpacetimeGrid& a, const SpacetimeGrid& b, const char* what) {
  if (!(a == b)) throw Error("grid_mismatch", std::string(what) + ": stacks live on different grids");
}

ImageStack project(const SpacetimeGrid& grid, const SpacetimeFn& object) {
  ImageStack out(grid);
  for (int k = 0; k < grid.frames(); ++k) {
    const double t = grid.frame_time(k);
    for (int m = 0; m < grid.pixels(); ++m) {
      const Point2 r = grid.pixel_center(m);
      const double v = object(r.x, r.y, t);
      if (!std::isfinite(v)) {
        throw Error("non_finite_object", "object is not finite at pixel " + std::to_string(m) +
                                             ", frame " + std::to_string(k));
      }
      out.coeffs(m, k) = v;
    }
  }
  return out;
}

SpacetimeFn adjoint_embed(const ImageStack& stack) {
  return [grid = stack.grid, coeffs = stack.coeffs](double x, double y, double t) {
    const auto m = grid.pixel_at({x, y});
    const auto k = grid.frame_at(t);
    if (!m || !k) return 0.0;
    return coeffs(*m, *k) / grid.voxel_volume();
  };
}

double inner_product(const ImageStack& a, const ImageStack& b) {
  require_same_grid(a.grid, b.grid, "inner_product");
  return a.coeffs.cwiseProduct(b.coeffs).sum() * a.grid.voxel_volume();
}

void write_stack(const std::filesystem::path& path, const ImageStack& stack) {
  const nlohmann::json header = {{"magic", "stk1"},
                                 {"M_s", stack.grid.side()},
                                 {"K", stack.grid.frames()},
                                 {"L_cm", stack.grid.fov()},
                                 {"T_s", stack.grid.horizon()}};
  write_blob(path, header, {stack.coeffs.data(), static_cast<std::size_t>(stack.coeffs.size())});
}

ImageStack read_stack(const std::filesystem::path& path) {
  Blob blob = read_blob(path, "stk1");
  try {
    const SpacetimeGrid grid(blob.header.at("M_s").get<int>(), blob.header.at("L_cm").get<double>(),
                             blob.header.at("K").get<int>(), blob.header.at("T_s").get<double>());
    const auto expected = static_cast<std::size_t>(grid.pixels()) * static_cast<std::size_t>(grid.frames());
    if (blob.payload.size() != expected) {
      throw Error("malformed_file", path.string() + ": payload holds " +
                                        std::to_string(blob.payload.size()) + " values, expected " +
                                        std::to_string(expected));
    }
    return ImageStack(grid, Eigen::Map<Eigen::MatrixXd>(blob.payload.data(), grid.pixels(), grid.frames()));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_file", path.string() + ": bad stack header: " + e.what());
  }
}

void write_roi(const std::filesystem::path& path, const RoiMask& roi, const SpacetimeGrid& grid) {
  write_json(path, {{"kind", "roi"},
                    {"side_pixels", grid.side()},
                    {"dilation_px", roi.dilation_px},
                    {"pixels", roi.pixels}});
}

RoiMask read_roi(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  RoiMask roi;
  try {
    if (doc.is_array()) {
      roi.pixels = doc.get<std::vector<int>>();
    } else {
      roi.pixels = doc.at("pixels").get<std::vector<int>>();
      roi.dilation_px = doc.value("dilation_px", 0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_file", path.string() + ": bad roi file: " + e.what());
  }
  if (roi.pixels.empty()) throw Error("empty_roi", path.string() + ": roi has no pixels");
  return roi;
}

}  // namespace nfrecon
