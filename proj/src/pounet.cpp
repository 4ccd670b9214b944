#include "nfrecon/pounet.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "nfrecon/blob_io.hpp"

namespace nfrecon {

PouField::PouField(SpacetimeGrid grid, PartitionNet net, Eigen::MatrixXd coeffs)
    : grid_(grid), net_(std::move(net)), coeffs_(std::move(coeffs)) {
  if (coeffs_.rows() != grid_.pixels() || coeffs_.cols() != net_.partitions()) {
    throw Error("dimension_mismatch", "coefficient matrix must be pixels x partitions");
  }
  if (net_.horizon() != grid_.horizon()) throw Error("dimension_mismatch", "network horizon differs from grid");
}

PouField PouField::create(const SpacetimeGrid& grid, const PartitionNetConfig& config, std::uint64_t seed) {
  return PouField(grid, PartitionNet(config, grid.horizon(), seed),
                  Eigen::MatrixXd::Zero(grid.pixels(), config.partitions));
}

PartitionNet::Values PouField::frame_partitions() const {
  std::vector<double> times(static_cast<std::size_t>(grid_.frames()));
  for (int k = 0; k < grid_.frames(); ++k) times[static_cast<std::size_t>(k)] = grid_.frame_time(k);
  return net_.evaluate(times);
}

Eigen::VectorXd PouField::snapshot(int k) const {
  if (k < 0 || k >= grid_.frames()) {
    throw Error("out_of_range", "frame " + std::to_string(k) + " outside [0, " + std::to_string(grid_.frames()) + ")");
  }
  return coeffs_ * net_.evaluate(grid_.frame_time(k)).psi.col(0);
}

double PouField::evaluate(double x, double y, double t) const {
  const auto m = grid_.pixel_at({x, y});
  if (!m) return 0.0;
  return coeffs_.row(*m).dot(net_.evaluate(t).psi.col(0));
}

ImageStack PouField::render() const { return ImageStack(grid_, coeffs_ * frame_partitions().psi); }

nlohmann::json to_json(const AdamConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate}, {"steps", cfg.steps}, {"batch_points", cfg.batch_points},
          {"beta1", cfg.beta1},                 {"beta2", cfg.beta2}, {"epsilon", cfg.epsilon}};
}

AdamConfig adam_from_json(const nlohmann::json& doc, AdamConfig cfg) {
  try {
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.steps = doc.value("steps", cfg.steps);
    cfg.batch_points = doc.value("batch_points", cfg.batch_points);
    cfg.beta1 = doc.value("beta1", cfg.beta1);
    cfg.beta2 = doc.value("beta2", cfg.beta2);
    cfg.epsilon = doc.value("epsilon", cfg.epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad adam config: ") + e.what());
  }
  return cfg;
}

double EmbeddingObjective::relative_misfit() const {
  return target_energy > 0.0 ? std::sqrt(misfit / target_energy) : std::sqrt(misfit);
}

Eigen::MatrixXd apply_laplacian(const SpacetimeGrid& grid, const Eigen::MatrixXd& x) {
  const int side = grid.side();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  // Each edge (m, n) of the 4-neighbour graph adds x_m - x_n to m and x_n - x_m to n.
  for (int ix = 0; ix < side; ++ix) {
    for (int iy = 0; iy < side; ++iy) {
      const int m = ix * side + iy;
      if (ix + 1 < side) {
        const int n = m + side;
        const auto d = (x.row(m) - x.row(n)).eval();
        out.row(m) += d;
        out.row(n) -= d;
      }
      if (iy + 1 < side) {
        const int n = m + 1;
        const auto d = (x.row(m) - x.row(n)).eval();
        out.row(m) += d;
        out.row(n) -= d;
      }
    }
  }
  return out;
}

namespace {

double gradient_energy(const SpacetimeGrid& grid, const Eigen::VectorXd& f) {
  const int side = grid.side();
  double e = 0.0;
  for (int ix = 0; ix < side; ++ix) {
    for (int iy = 0; iy < side; ++iy) {
      const int m = ix * side + iy;
      if (ix + 1 < side) e += (f[m + side] - f[m]) * (f[m + side] - f[m]);
      if (iy + 1 < side) e += (f[m + 1] - f[m]) * (f[m + 1] - f[m]);
    }
  }
  return e;
}

int neighbour_count(const SpacetimeGrid& grid, int m) {
  const int side = grid.side();
  const int ix = m / side;
  const int iy = m % side;
  return (ix > 0) + (ix + 1 < side) + (iy > 0) + (iy + 1 < side);
}

Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
  const Eigen::VectorXd& ev = eig.eigenvalues();
  const double cut = 1e-14 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv[i] = ev[i] > cut ? 1.0 / ev[i] : 0.0;
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

void check_targets(const PouField& field, const FrameTargets& targets) {
  if (targets.frames() != field.grid().frames() || targets.pixels() != field.grid().pixels()) {
    throw Error("dimension_mismatch", "targets do not match the field grid");
  }
}

}  // namespace

EmbeddingObjective embedding_objective(const PouField& field, const FrameTargets& targets,
                                       const Regularization& reg) {
  check_targets(field, targets);
  const auto part = field.frame_partitions();
  EmbeddingObjective obj;
  Eigen::VectorXd y(field.grid().pixels());
  for (int k = 0; k < field.grid().frames(); ++k) {
    targets.frame(k, y);
    const Eigen::VectorXd f = field.coeffs() * part.psi.col(k);
    const double w = targets.weight(k);
    obj.misfit += w * (f - y).squaredNorm();
    obj.target_energy += w * y.squaredNorm();
    if (reg.spatial > 0.0) obj.spatial += reg.spatial * gradient_energy(field.grid(), f);
    if (reg.temporal > 0.0) obj.temporal += reg.temporal * (field.coeffs() * part.dpsi.col(k)).squaredNorm();
  }
  return obj;
}

CgReport solve_coefficients(PouField& field, const FrameTargets& targets, const Regularization& reg,
                            const CgOptions& cg) {
  check_targets(field, targets);
  if (reg.spatial < 0.0 || reg.temporal < 0.0) throw Error("invalid_argument", "regularization weights must be >= 0");
  const SpacetimeGrid& grid = field.grid();
  const int p = field.partitions();
  const auto part = field.frame_partitions();

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(grid.pixels(), p);
  Eigen::VectorXd y(grid.pixels());
  for (int k = 0; k < grid.frames(); ++k) {
    const double w = targets.weight(k);
    const auto psi = part.psi.col(k);
    b.noalias() += psi * psi.transpose();
    a.noalias() += w * psi * psi.transpose();
    if (reg.temporal > 0.0) a.noalias() += reg.temporal * part.dpsi.col(k) * part.dpsi.col(k).transpose();
    if (w != 0.0) {
      targets.frame(k, y);
      rhs.noalias() += w * y * psi.transpose();
    }
  }

  auto apply = [&](const Eigen::MatrixXd& c) {
    Eigen::MatrixXd out = c * a;
    if (reg.spatial > 0.0) out.noalias() += reg.spatial * apply_laplacian(grid, c * b);
    return out;
  };

  // Block-Jacobi preconditioner: one P x P block per neighbour count.
  std::vector<Eigen::MatrixXd> block_inv(5);
  for (int d = 0; d <= 4; ++d) block_inv[static_cast<std::size_t>(d)] = pseudo_inverse(a + reg.spatial * d * b);
  std::vector<int> degree(static_cast<std::size_t>(grid.pixels()));
  for (int m = 0; m < grid.pixels(); ++m) degree[static_cast<std::size_t>(m)] = neighbour_count(grid, m);
  auto precondition = [&](const Eigen::MatrixXd& r) {
    Eigen::MatrixXd z(r.rows(), r.cols());
    for (Eigen::Index m = 0; m < r.rows(); ++m) {
      z.row(m).noalias() = r.row(m) * block_inv[static_cast<std::size_t>(degree[static_cast<std::size_t>(m)])];
    }
    return z;
  };

  CgReport report;
  const double rhs_norm = rhs.norm();
  Eigen::MatrixXd& c = field.coeffs();
  if (rhs_norm == 0.0) {
    c.setZero();
    report.converged = true;
    return report;
  }
  Eigen::MatrixXd r = rhs - apply(c);
  report.relative_residual = r.norm() / rhs_norm;
  if (report.relative_residual < cg.tolerance) {
    report.converged = true;
    return report;
  }
  Eigen::MatrixXd z = precondition(r);
  Eigen::MatrixXd dir = z;
  double rz = (r.array() * z.array()).sum();
  for (int it = 1; it <= cg.max_iterations; ++it) {
    const Eigen::MatrixXd q = apply(dir);
    const double curvature = (dir.array() * q.array()).sum();
    if (!std::isfinite(curvature) || !std::isfinite(rz) || curvature < 0.0) {
      throw Error("cg_breakdown", "conjugate gradient broke down at iteration " + std::to_string(it));
    }
    if (curvature == 0.0) break;
    const double step = rz / curvature;
    c.noalias() += step * dir;
    r.noalias() -= step * q;
    report.iterations = it;
    report.relative_residual = r.norm() / rhs_norm;
    if (!std::isfinite(report.relative_residual)) {
      throw Error("cg_breakdown", "conjugate gradient residual not finite at iteration " + std::to_string(it));
    }
    if (report.relative_residual < cg.tolerance) {
      report.converged = true;
      break;
    }
    z = precondition(r);
    const double rz_next = (r.array() * z.array()).sum();
    dir = z + (rz_next / rz) * dir;
    rz = rz_next;
  }
  return report;
}

BatchGradient partition_batch_gradient(const PouField& field, const FrameTargets& targets,
                                       const Regularization& reg, std::span<const BatchPoint> batch) {
  check_targets(field, targets);
  const SpacetimeGrid& grid = field.grid();
  const int side = grid.side();
  const Eigen::MatrixXd& c = field.coeffs();

  std::vector<int> frames;
  frames.reserve(batch.size());
  for (const auto& pt : batch) frames.push_back(pt.frame);
  std::sort(frames.begin(), frames.end());
  frames.erase(std::unique(frames.begin(), frames.end()), frames.end());

  // The net runs over chunks of distinct frames so that its activations stay
  // bounded whatever the frame count.
  constexpr std::size_t chunk = 64;
  const std::size_t chunks = (frames.size() + chunk - 1) / chunk;
  std::vector<int> chunk_of(static_cast<std::size_t>(grid.frames()), -1);
  std::vector<int> column_of(static_cast<std::size_t>(grid.frames()), -1);
  for (std::size_t j = 0; j < frames.size(); ++j) {
    chunk_of[static_cast<std::size_t>(frames[j])] = static_cast<int>(j / chunk);
    column_of[static_cast<std::size_t>(frames[j])] = static_cast<int>(j % chunk);
  }
  std::vector<std::vector<std::size_t>> members(chunks);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    members[static_cast<std::size_t>(chunk_of[static_cast<std::size_t>(batch[i].frame)])].push_back(i);
  }

  const double scale = static_cast<double>(grid.pixels()) * grid.frames() / static_cast<double>(batch.size());
  double loss = 0.0;
  Eigen::VectorXd gradient = Eigen::VectorXd::Zero(field.net().parameter_count());
  for (std::size_t ch = 0; ch < chunks; ++ch) {
    const std::size_t begin = ch * chunk;
    const std::size_t len = std::min(chunk, frames.size() - begin);
    std::vector<double> times(len);
    for (std::size_t j = 0; j < len; ++j) times[j] = grid.frame_time(frames[begin + j]);
    const auto tape = field.net().forward(times);
    const Eigen::MatrixXd& psi = tape.out.psi;
    const Eigen::MatrixXd& dpsi = tape.out.dpsi;
    Eigen::MatrixXd g_psi = Eigen::MatrixXd::Zero(psi.rows(), psi.cols());
    Eigen::MatrixXd g_dpsi = Eigen::MatrixXd::Zero(psi.rows(), psi.cols());

    for (const std::size_t i : members[ch]) {
      const auto& pt = batch[i];
      const int j = column_of[static_cast<std::size_t>(pt.frame)];
      const auto cm = c.row(pt.pixel);
      const double w = targets.weight(pt.frame);
      if (w != 0.0) {
        const double e = cm.dot(psi.col(j)) - targets.point(pt.pixel, pt.frame);
        loss += w * e * e;
        g_psi.col(j).noalias() += (2.0 * w * e) * cm.transpose();
      }
      if (reg.spatial > 0.0) {
        const int ix = pt.pixel / side;
        const int iy = pt.pixel % side;
        if (ix + 1 < side) {
          const Eigen::RowVectorXd diff = c.row(pt.pixel + side) - cm;
          const double d = diff.dot(psi.col(j));
          loss += reg.spatial * d * d;
          g_psi.col(j).noalias() += (2.0 * reg.spatial * d) * diff.transpose();
        }
        if (iy + 1 < side) {
          const Eigen::RowVectorXd diff = c.row(pt.pixel + 1) - cm;
          const double d = diff.dot(psi.col(j));
          loss += reg.spatial * d * d;
          g_psi.col(j).noalias() += (2.0 * reg.spatial * d) * diff.transpose();
        }
      }
      if (reg.temporal > 0.0) {
        const double v = cm.dot(dpsi.col(j));
        loss += reg.temporal * v * v;
        g_dpsi.col(j).noalias() += (2.0 * reg.temporal * v) * cm.transpose();
      }
    }
    gradient += field.net().backward(tape, g_psi, g_dpsi);
  }
  BatchGradient out;
  out.loss = scale * loss;
  out.gradient = scale * gradient;
  return out;
}

AdamReport update_partition(PouField& field, const FrameTargets& targets, const Regularization& reg,
                            const AdamConfig& adam, std::mt19937_64& rng) {
  check_targets(field, targets);
  if (adam.batch_points < 1) throw Error("invalid_argument", "batch must contain at least one point");
  AdamReport report;
  report.initial_objective = embedding_objective(field, targets, reg).total();
  report.final_objective = report.initial_objective;
  if (adam.steps <= 0 || adam.learning_rate == 0.0) return report;

  const Eigen::Index n = field.net().parameter_count();
  Eigen::VectorXd theta = field.net().parameters();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(n);
  std::uniform_int_distribution<int> pick_pixel(0, field.grid().pixels() - 1);
  std::uniform_int_distribution<int> pick_frame(0, field.grid().frames() - 1);
  std::vector<BatchPoint> batch(static_cast<std::size_t>(adam.batch_points));
  double b1t = 1.0;
  double b2t = 1.0;
  for (int step = 1; step <= adam.steps; ++step) {
    for (auto& pt : batch) {
      pt.pixel = pick_pixel(rng);
      pt.frame = pick_frame(rng);
    }
    const BatchGradient bg = partition_batch_gradient(field, targets, reg, batch);
    if (!std::isfinite(bg.loss) || !bg.gradient.allFinite()) {
      throw Error("non_finite_loss", "partition update produced a non-finite loss at Adam step " +
                                         std::to_string(step));
    }
    b1t *= adam.beta1;
    b2t *= adam.beta2;
    m1 = adam.beta1 * m1 + (1.0 - adam.beta1) * bg.gradient;
    m2 = adam.beta2 * m2 + (1.0 - adam.beta2) * bg.gradient.cwiseAbs2();
    const Eigen::ArrayXd mhat = m1.array() / (1.0 - b1t);
    const Eigen::ArrayXd vhat = m2.array() / (1.0 - b2t);
    theta.array() -= adam.learning_rate * mhat / (vhat.sqrt() + adam.epsilon);
    field.net().set_parameters(theta);
    report.steps = step;
  }
  report.final_objective = embedding_objective(field, targets, reg).total();
  if (!std::isfinite(report.final_objective)) throw Error("non_finite_loss", "partition update diverged");
  return report;
}

EmbedReport embed(PouField& field, const FrameTargets& targets, const EmbedConfig& config, std::mt19937_64& rng) {
  check_targets(field, targets);
  if (config.rounds < 1) throw Error("invalid_argument", "embedding needs at least one round");
  if (config.initialize_time_constant) {
    // With sum_p psi_p = 1, C = ybar 1^T reproduces the time average exactly.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(field.grid().pixels());
    Eigen::VectorXd y(field.grid().pixels());
    double wsum = 0.0;
    for (int k = 0; k < targets.frames(); ++k) {
      const double w = targets.weight(k);
      if (w == 0.0) continue;
      targets.frame(k, y);
      mean += w * y;
      wsum += w;
    }
    if (wsum > 0.0) mean /= wsum;
    field.coeffs() = mean.replicate(1, field.partitions());
  }
  EmbedReport report;
  for (int r = 0; r < config.rounds; ++r) {
    EmbedRound round;
    round.round = r + 1;
    round.cg = solve_coefficients(field, targets, config.reg, config.cg);
    const auto after_c = embedding_objective(field, targets, config.reg);
    round.relative_misfit_after_coefficients = after_c.relative_misfit();
    round.objective_after_coefficients = after_c.total();
    round.adam = update_partition(field, targets, config.reg, config.adam, rng);
    round.relative_misfit_after_partition = embedding_objective(field, targets, config.reg).relative_misfit();
    report.rounds.push_back(round);
  }
  solve_coefficients(field, targets, config.reg, config.cg);
  report.final_objective = embedding_objective(field, targets, config.reg);
  return report;
}

void write_checkpoint(const std::filesystem::path& path, const PouField& field, const CheckpointMeta& meta) {
  const auto& g = field.grid();
  const nlohmann::json header = {{"magic", "pou1"},
                                 {"architecture", to_json(field.net().config())},
                                 {"P", field.partitions()},
                                 {"M_s", g.side()},
                                 {"K", g.frames()},
                                 {"L_cm", g.fov()},
                                 {"T_s", g.horizon()},
                                 {"eta_count", field.net().parameter_count()},
                                 {"seeds", meta.seeds}};
  std::vector<double> payload;
  const Eigen::VectorXd eta = field.net().parameters();
  payload.reserve(static_cast<std::size_t>(eta.size() + field.coeffs().size()));
  payload.insert(payload.end(), eta.data(), eta.data() + eta.size());
  payload.insert(payload.end(), field.coeffs().data(), field.coeffs().data() + field.coeffs().size());
  write_blob(path, header, payload);
}

PouField read_checkpoint(const std::filesystem::path& path) {
  Blob blob = read_blob(path, "pou1");
  try {
    const SpacetimeGrid grid(blob.header.at("M_s").get<int>(), blob.header.at("L_cm").get<double>(),
                             blob.header.at("K").get<int>(), blob.header.at("T_s").get<double>());
    const auto cfg = partition_config_from_json(blob.header.at("architecture"));
    PartitionNet net = PartitionNet::zeros(cfg, grid.horizon());
    const Eigen::Index n_eta = net.parameter_count();
    const Eigen::Index n_c = static_cast<Eigen::Index>(grid.pixels()) * cfg.partitions;
    if (static_cast<Eigen::Index>(blob.payload.size()) != n_eta + n_c) {
      throw Error("malformed_file", path.string() + ": checkpoint payload size does not match header");
    }
    net.set_parameters(Eigen::Map<const Eigen::VectorXd>(blob.payload.data(), n_eta));
    Eigen::MatrixXd c = Eigen::Map<const Eigen::MatrixXd>(blob.payload.data() + n_eta, grid.pixels(), cfg.partitions);
    return PouField(grid, std::move(net), std::move(c));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_file", path.string() + ": bad checkpoint header: " + e.what());
  }
}

}  // namespace nfrecon
