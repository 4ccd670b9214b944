#include "nfrecon/crt.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>

#include "nfrecon/blob_io.hpp"

namespace nfrecon {
namespace {

constexpr double kPi = std::numbers::pi;

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w < 0.0) w += 360.0;
  return w;
}

// Cache key in micro-degrees so that equal rotations compare exactly.
long long rotation_key(double deg) { return std::llround(wrap_degrees(deg) * 1e6) % 360000000LL; }

}  // namespace

double SensorSchedule::frame_rotation_deg(int frame) const { return wrap_degrees(frame * rotation_deg); }

double SensorSchedule::sensor_angle_deg(int group, int sensor, int frame) const {
  return wrap_degrees(group * 360.0 / groups + sensor * spacing_deg + frame * rotation_deg);
}

Point2 SensorSchedule::sensor_position(int sensor_index, int frame) const {
  const double theta =
      sensor_angle_deg(sensor_index / sensors_per_group, sensor_index % sensors_per_group, frame) * kPi / 180.0;
  return {radius_cm * std::cos(theta), radius_cm * std::sin(theta)};
}

void SensorSchedule::validate() const {
  if (!(radius_cm > 0.0)) throw Error("invalid_schedule", "aperture radius must be positive");
  if (groups < 1 || sensors_per_group < 1) throw Error("invalid_schedule", "need at least one sensor");
  if (frames < 1) throw Error("invalid_schedule", "need at least one frame");
}

std::vector<double> uniform_radii(const SpacetimeGrid& grid, const SensorSchedule& schedule, int count) {
  if (count < 1) throw Error("invalid_radii", "need at least one ring");
  const double lo = grid.pixel_size();
  const double hi = schedule.radius_cm + grid.fov() / std::numbers::sqrt2;
  std::vector<double> radii(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    radii[static_cast<std::size_t>(i)] = count == 1 ? lo : lo + (hi - lo) * i / (count - 1);
  }
  return radii;
}

CrtFrameOperator::CrtFrameOperator(std::shared_ptr<const SparseMatrix> matrix, std::vector<double> radii,
                                   int sensors, int frame)
    : matrix_(std::move(matrix)), radii_(std::move(radii)), sensors_(sensors), frame_(frame) {}

Eigen::VectorXd CrtFrameOperator::apply(const Eigen::Ref<const Eigen::VectorXd>& image) const {
  if (image.size() != cols()) {
    throw Error("dimension_mismatch", "frame operator expects " + std::to_string(cols()) + " pixels, got " +
                                          std::to_string(image.size()));
  }
  return (*matrix_) * image;
}

Eigen::VectorXd CrtFrameOperator::apply_adjoint(const Eigen::Ref<const Eigen::VectorXd>& residual) const {
  if (residual.size() != rows()) {
    throw Error("dimension_mismatch", "frame adjoint expects " + std::to_string(rows()) + " samples, got " +
                                          std::to_string(residual.size()));
  }
  return matrix_->transpose() * residual;
}

CrtFrameOperator build_frame_operator(const SpacetimeGrid& grid, const SensorSchedule& schedule,
                                      std::span<const double> radii, int frame, ArcSampling sampling) {
  schedule.validate();
  if (radii.empty()) throw Error("invalid_radii", "no radii given");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (!(radii[i] > 0.0) || !std::isfinite(radii[i])) {
      throw Error("invalid_radii", "radius " + std::to_string(i) + " is not positive");
    }
    if (i > 0 && !(radii[i] > radii[i - 1])) throw Error("invalid_radii", "radii must be increasing");
  }
  if (sampling.oversample < 1) throw Error("invalid_radii", "oversample must be at least 1");

  const int sensors = schedule.sensors();
  const int rings = static_cast<int>(radii.size());
  const double h = grid.pixel_size();
  const double half = 0.5 * grid.fov();
  const double reach = half * std::numbers::sqrt2;

  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<std::pair<int, double>> row;
  for (int s = 0; s < sensors; ++s) {
    const Point2 c = schedule.sensor_position(s, frame);
    const double theta = std::atan2(c.y, c.x);
    const double dist = std::hypot(c.x, c.y);
    for (int i = 0; i < rings; ++i) {
      const double ell = radii[static_cast<std::size_t>(i)];
      const long long n = static_cast<long long>(std::ceil(4.0 * kPi * ell / h)) * sampling.oversample;
      const double dphi = 2.0 * kPi / static_cast<double>(n);
      const double weight = ell * dphi;

      // Angular window of the circle that can reach the disk enclosing the FOV.
      double lo_angle = 0.0;
      double hi_angle = 2.0 * kPi;
      if (dist > 0.0) {
        const double cmax = (reach * reach - dist * dist - ell * ell) / (2.0 * dist * ell);
        if (cmax < -1.0) continue;
        if (cmax < 1.0) {
          const double a = std::acos(cmax);
          lo_angle = theta + a;
          hi_angle = theta + 2.0 * kPi - a;
        }
      }
      const long long j_lo = static_cast<long long>(std::ceil(lo_angle / dphi - 0.5));
      const long long j_hi = std::min<long long>(static_cast<long long>(std::floor(hi_angle / dphi - 0.5)),
                                                 j_lo + n - 1);

      row.clear();
      int last = -1;
      double acc = 0.0;
      for (long long j = j_lo; j <= j_hi; ++j) {
        const double phi = (static_cast<double>(j) + 0.5) * dphi;
        const double x = c.x + ell * std::cos(phi);
        const double y = c.y + ell * std::sin(phi);
        if (x < -half || x >= half || y < -half || y >= half) {
          continue;
        }
        const int ix = std::min(static_cast<int>((x + half) / h), grid.side() - 1);
        const int iy = std::min(static_cast<int>((y + half) / h), grid.side() - 1);
        const int m = ix * grid.side() + iy;
        if (m != last) {
          if (last >= 0) row.emplace_back(last, acc);
          last = m;
          acc = 0.0;
        }
        acc += weight;
      }
      if (last >= 0) row.emplace_back(last, acc);
      std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      const int r = s * rings + i;
      for (std::size_t q = 0; q < row.size();) {
        double v = 0.0;
        const int col = row[q].first;
        for (; q < row.size() && row[q].first == col; ++q) v += row[q].second;
        triplets.emplace_back(r, col, v);
      }
    }
  }
  auto matrix = std::make_shared<SparseMatrix>(sensors * rings, grid.pixels());
  matrix->setFromTriplets(triplets.begin(), triplets.end());
  matrix->makeCompressed();
  return CrtFrameOperator(std::move(matrix), std::vector<double>(radii.begin(), radii.end()), sensors, frame);
}

FrameOperatorSet::FrameOperatorSet(std::vector<CrtFrameOperator> frames) : frames_(std::move(frames)) {
  if (frames_.empty()) throw Error("invalid_operator", "operator set needs at least one frame");
}

FrameOperatorSet FrameOperatorSet::build(const SpacetimeGrid& grid, const SensorSchedule& schedule,
                                         std::span<const double> radii, ArcSampling sampling) {
  if (schedule.frames != grid.frames()) {
    throw Error("dimension_mismatch", "schedule has " + std::to_string(schedule.frames) + " frames, grid has " +
                                          std::to_string(grid.frames()));
  }
  std::map<long long, int> first_frame_of;
  std::vector<int> unique_frames;
  std::vector<int> slot(static_cast<std::size_t>(grid.frames()));
  for (int k = 0; k < grid.frames(); ++k) {
    const auto key = rotation_key(schedule.frame_rotation_deg(k));
    auto [it, inserted] = first_frame_of.emplace(key, static_cast<int>(unique_frames.size()));
    if (inserted) unique_frames.push_back(k);
    slot[static_cast<std::size_t>(k)] = it->second;
  }
  std::vector<std::shared_ptr<const SparseMatrix>> built(unique_frames.size());
  parallel_for(unique_frames.size(), [&](std::size_t u) {
    built[u] = build_frame_operator(grid, schedule, radii, unique_frames[u], sampling).shared_matrix();
  });
  std::vector<CrtFrameOperator> frames;
  frames.reserve(static_cast<std::size_t>(grid.frames()));
  for (int k = 0; k < grid.frames(); ++k) {
    frames.emplace_back(built[static_cast<std::size_t>(slot[static_cast<std::size_t>(k)])],
                        std::vector<double>(radii.begin(), radii.end()), schedule.sensors(), k);
  }
  return FrameOperatorSet(std::move(frames));
}

int FrameOperatorSet::distinct_geometries() const {
  std::vector<const SparseMatrix*> seen;
  for (const auto& f : frames_) {
    if (std::find(seen.begin(), seen.end(), &f.matrix()) == seen.end()) seen.push_back(&f.matrix());
  }
  return static_cast<int>(seen.size());
}

int FrameOperatorSet::pixels() const { return static_cast<int>(frames_.front().cols()); }
int FrameOperatorSet::rows_per_frame() const { return static_cast<int>(frames_.front().rows()); }

Measurements forward(const ImageStack& stack, const FrameOperatorSet& ops) {
  if (ops.frames() != stack.grid.frames() || ops.pixels() != stack.grid.pixels()) {
    throw Error("dimension_mismatch", "operator set does not match the stack grid");
  }
  Measurements out;
  out.sensors = ops.frame(0).sensors();
  out.rings = ops.frame(0).rings();
  out.data.resize(ops.rows_per_frame(), ops.frames());
  parallel_for(static_cast<std::size_t>(ops.frames()), [&](std::size_t k) {
    const int f = static_cast<int>(k);
    out.data.col(f) = ops.frame(f).apply(stack.coeffs.col(f));
  });
  return out;
}

Eigen::VectorXd adjoint_frame(const CrtFrameOperator& op, const Eigen::Ref<const Eigen::VectorXd>& residual) {
  return op.apply_adjoint(residual);
}

Measurements add_noise(const Measurements& clean, double rnl, std::uint64_t seed) {
  if (!(rnl >= 0.0)) throw Error("invalid_noise", "relative noise level must be nonnegative");
  Measurements out = clean;
  out.rnl = rnl;
  out.seed = seed;
  out.sigma = rnl * clean.data.cwiseAbs().maxCoeff();
  if (out.sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, out.sigma);
  double* p = out.data.data();
  for (Eigen::Index i = 0; i < out.data.size(); ++i) p[i] += normal(rng);
  return out;
}

double spectral_norm_estimate(const SparseMatrix& a, int min_iterations, int max_iterations, double tolerance) {
  if (a.cols() == 0 || a.rows() == 0) return 0.0;
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  Eigen::VectorXd v(a.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = unif(rng);
  v.normalize();
  double estimate = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd av = a * v;
    const double next = av.norm();
    Eigen::VectorXd w = a.transpose() * av;
    const double wn = w.norm();
    if (wn == 0.0) return next;
    v = w / wn;
    const bool settled = std::abs(next - estimate) <= tolerance * next;
    estimate = next;
    if (it + 1 >= min_iterations && settled) break;
  }
  return estimate;
}

double operator_norm_estimate(const FrameOperatorSet& ops) {
  std::vector<const SparseMatrix*> distinct;
  for (int k = 0; k < ops.frames(); ++k) {
    const SparseMatrix* m = &ops.frame(k).matrix();
    if (std::find(distinct.begin(), distinct.end(), m) == distinct.end()) distinct.push_back(m);
  }
  std::vector<double> norms(distinct.size());
  parallel_for(distinct.size(), [&](std::size_t i) { norms[i] = spectral_norm_estimate(*distinct[i]); });
  return *std::max_element(norms.begin(), norms.end());
}

void write_measurements(const std::filesystem::path& path, const Measurements& meas) {
  const nlohmann::json header = {{"magic", "msr1"},   {"K", meas.frames()},  {"S", meas.sensors},
                                 {"I", meas.rings},   {"sigma", meas.sigma}, {"rnl", meas.rnl},
                                 {"seed", meas.seed}};
  write_blob(path, header, {meas.data.data(), static_cast<std::size_t>(meas.data.size())});
}

Measurements read_measurements(const std::filesystem::path& path) {
  Blob blob = read_blob(path, "msr1");
  Measurements meas;
  try {
    const int frames = blob.header.at("K").get<int>();
    meas.sensors = blob.header.at("S").get<int>();
    meas.rings = blob.header.at("I").get<int>();
    meas.sigma = blob.header.at("sigma").get<double>();
    meas.rnl = blob.header.at("rnl").get<double>();
    meas.seed = blob.header.at("seed").get<std::uint64_t>();
    const auto rows = static_cast<std::size_t>(meas.sensors) * static_cast<std::size_t>(meas.rings);
    if (blob.payload.size() != rows * static_cast<std::size_t>(frames)) {
      throw Error("malformed_file", path.string() + ": measurement payload size does not match header");
    }
    meas.data = Eigen::Map<Eigen::MatrixXd>(blob.payload.data(), static_cast<Eigen::Index>(rows), frames);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_file", path.string() + ": bad measurement header: " + e.what());
  }
  return meas;
}

}  // namespace nfrecon
