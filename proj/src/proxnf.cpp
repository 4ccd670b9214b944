#include "nfrecon/proxnf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace nfrecon {

namespace {

void check_problem(const SpacetimeGrid& grid, const Measurements& meas, const FrameOperatorSet& ops) {
  if (ops.frames() != grid.frames() || ops.pixels() != grid.pixels()) {
    throw Error("dimension_mismatch", "operator set does not match the field grid");
  }
  if (meas.frames() != grid.frames() || meas.data.rows() != ops.rows_per_frame()) {
    throw Error("dimension_mismatch", "measurements do not match the operator set");
  }
}

double spatial_energy(const SpacetimeGrid& grid, const Eigen::VectorXd& f) {
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

}  // namespace

Eigen::VectorXd frame_data_gradient(const CrtFrameOperator& op, const Eigen::Ref<const Eigen::VectorXd>& f,
                                    const Eigen::Ref<const Eigen::VectorXd>& d, double sigma) {
  if (!(sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");
  if (d.size() != op.rows()) {
    throw Error("dimension_mismatch", "frame data has " + std::to_string(d.size()) + " samples, operator has " +
                                          std::to_string(op.rows()));
  }
  return op.apply_adjoint(op.apply(f) - d) / (sigma * sigma);
}

std::vector<int> sample_frames(int frames, int batch, std::mt19937_64& rng) {
  if (batch < 1 || batch > frames) {
    throw Error("invalid_batch", "batch " + std::to_string(batch) + " outside [1, " + std::to_string(frames) + "]");
  }
  std::vector<int> all(static_cast<std::size_t>(frames));
  std::iota(all.begin(), all.end(), 0);
  if (batch == frames) return all;
  for (int i = 0; i < batch; ++i) {
    std::uniform_int_distribution<int> pick(i, frames - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  all.resize(static_cast<std::size_t>(batch));
  std::sort(all.begin(), all.end());
  return all;
}

SampledDirection sampled_update_direction(const PouField& field, const Measurements& meas,
                                          const FrameOperatorSet& ops, std::vector<int> frames, bool unbiased) {
  check_problem(field.grid(), meas, ops);
  const int total = field.grid().frames();
  if (frames.empty() || static_cast<int>(frames.size()) > total) {
    throw Error("invalid_batch", "sampled frame count must lie in [1, K]");
  }
  std::vector<int> sorted = frames;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error("invalid_batch", "sampled frames must be distinct");
  }
  if (sorted.front() < 0 || sorted.back() >= total) throw Error("invalid_batch", "sampled frame out of range");

  SampledDirection dir;
  dir.frames = std::move(frames);
  const int batch = static_cast<int>(dir.frames.size());
  dir.scale = unbiased ? static_cast<double>(total) / batch : 1.0;
  std::vector<double> times(dir.frames.size());
  for (std::size_t j = 0; j < times.size(); ++j) times[j] = field.grid().frame_time(dir.frames[j]);
  const Eigen::MatrixXd psi = field.net().evaluate(times).psi;
  dir.values.resize(field.grid().pixels(), batch);
  parallel_for(dir.frames.size(), [&](std::size_t j) {
    const int k = dir.frames[j];
    const Eigen::VectorXd f = field.coeffs() * psi.col(static_cast<Eigen::Index>(j));
    dir.values.col(static_cast<Eigen::Index>(j)) =
        dir.scale * frame_data_gradient(ops.frame(k), f, meas.data.col(k), meas.sigma);
  });
  return dir;
}

ProxTargets::ProxTargets(const PouField& field, const SampledDirection& direction, double step, bool sampled_only)
    : coeffs_(field.coeffs()),
      psi_(field.frame_partitions().psi),
      direction_(direction),
      slot_(static_cast<std::size_t>(field.grid().frames()), -1),
      step_(step),
      sampled_only_(sampled_only) {
  if (!(step > 0.0)) throw Error("invalid_step", "prox step must be positive");
  if (direction.values.rows() != coeffs_.rows() ||
      direction.values.cols() != static_cast<Eigen::Index>(direction.frames.size())) {
    throw Error("dimension_mismatch", "direction does not match the field");
  }
  for (std::size_t j = 0; j < direction.frames.size(); ++j) {
    slot_.at(static_cast<std::size_t>(direction.frames[j])) = static_cast<int>(j);
  }
}

double ProxTargets::weight(int k) const {
  if (sampled_only_ && slot_[static_cast<std::size_t>(k)] < 0) return 0.0;
  return 0.5 / step_;
}

void ProxTargets::frame(int k, Eigen::Ref<Eigen::VectorXd> out) const {
  out.noalias() = coeffs_ * psi_.col(k);
  const int j = slot_[static_cast<std::size_t>(k)];
  if (j >= 0) out.noalias() -= step_ * direction_.values.col(j);
}

double ProxTargets::point(int m, int k) const {
  double v = coeffs_.row(m).dot(psi_.col(k));
  const int j = slot_[static_cast<std::size_t>(k)];
  if (j >= 0) v -= step_ * direction_.values(m, j);
  return v;
}

EmbedReport prox_step(PouField& field, const SampledDirection& direction, double step, const ProxStepConfig& cfg,
                      std::mt19937_64& rng) {
  const ProxTargets targets(field, direction, step, cfg.sampled_frames_only);
  EmbedConfig ec;
  ec.reg = cfg.reg;
  ec.rounds = cfg.rounds;
  ec.cg = cfg.cg;
  ec.adam = cfg.adam;
  ec.initialize_time_constant = false;
  return embed(field, targets, ec, rng);
}

nlohmann::json to_json(const ProxConfig& cfg) {
  nlohmann::json step = cfg.step ? nlohmann::json(*cfg.step) : nlohmann::json("auto");
  return {{"step", step},
          {"batch", cfg.batch},
          {"max_iterations", cfg.max_iterations},
          {"stop_ratio", cfg.stop_ratio},
          {"audit_frames", cfg.audit_frames},
          {"unbiased", cfg.unbiased},
          {"lambda_s", cfg.prox.reg.spatial},
          {"lambda_t", cfg.prox.reg.temporal},
          {"prox_rounds", cfg.prox.rounds},
          {"cg_tolerance", cfg.prox.cg.tolerance},
          {"cg_max_iterations", cfg.prox.cg.max_iterations},
          {"adam", to_json(cfg.prox.adam)},
          {"sampled_frames_only", cfg.prox.sampled_frames_only},
          {"divergence_factor", cfg.divergence_factor},
          {"seed", cfg.seed}};
}

ProxConfig prox_config_from_json(const nlohmann::json& doc, ProxConfig cfg) {
  try {
    if (doc.contains("step")) {
      const auto& s = doc.at("step");
      if (s.is_string()) {
        if (s.get<std::string>() != "auto") throw Error("malformed_config", "step must be a number or \"auto\"");
        cfg.step.reset();
      } else {
        cfg.step = s.get<double>();
      }
    }
    cfg.batch = doc.value("batch", cfg.batch);
    cfg.max_iterations = doc.value("max_iterations", cfg.max_iterations);
    cfg.stop_ratio = doc.value("stop_ratio", cfg.stop_ratio);
    cfg.audit_frames = doc.value("audit_frames", cfg.audit_frames);
    cfg.unbiased = doc.value("unbiased", cfg.unbiased);
    cfg.prox.reg.spatial = doc.value("lambda_s", cfg.prox.reg.spatial);
    cfg.prox.reg.temporal = doc.value("lambda_t", cfg.prox.reg.temporal);
    cfg.prox.rounds = doc.value("prox_rounds", cfg.prox.rounds);
    cfg.prox.cg.tolerance = doc.value("cg_tolerance", cfg.prox.cg.tolerance);
    cfg.prox.cg.max_iterations = doc.value("cg_max_iterations", cfg.prox.cg.max_iterations);
    if (doc.contains("adam")) cfg.prox.adam = adam_from_json(doc.at("adam"), cfg.prox.adam);
    cfg.prox.sampled_frames_only = doc.value("sampled_frames_only", cfg.prox.sampled_frames_only);
    cfg.divergence_factor = doc.value("divergence_factor", cfg.divergence_factor);
    cfg.seed = doc.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad proxnf config: ") + e.what());
  }
  if (cfg.step && !(*cfg.step > 0.0)) throw Error("malformed_config", "step must be positive");
  if (cfg.stop_ratio <= 0.0 || cfg.stop_ratio >= 1.0) throw Error("malformed_config", "stop_ratio must lie in (0, 1)");
  return cfg;
}

void write_trace_csv(const std::filesystem::path& path, const ProxTrace& trace, bool with_time) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  out.precision(17);
  out << "iteration,frames,data_fidelity,regularization,objective,prox_gradient_norm";
  if (with_time) out << ",wall_seconds";
  out << '\n';
  for (const auto& r : trace.records) {
    out << r.iteration << ',';
    for (std::size_t j = 0; j < r.frames.size(); ++j) out << (j ? ";" : "") << r.frames[j];
    out << ',' << r.data_fidelity << ',' << r.regularization << ',' << r.objective() << ',' << r.prox_gradient_norm;
    if (with_time) out << ',' << r.wall_seconds;
    out << '\n';
  }
  if (!out) throw Error("io_error", "failed writing " + path.string());
}

ObjectiveParts prox_objective(const PouField& field, const Measurements& meas, const FrameOperatorSet& ops,
                              const Regularization& reg) {
  check_problem(field.grid(), meas, ops);
  if (!(meas.sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");
  const auto part = field.frame_partitions();
  const int frames = field.grid().frames();
  std::vector<double> fid(static_cast<std::size_t>(frames));
  std::vector<double> regv(static_cast<std::size_t>(frames));
  parallel_for(static_cast<std::size_t>(frames), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const Eigen::VectorXd f = field.coeffs() * part.psi.col(k);
    fid[kk] = (ops.frame(k).apply(f) - meas.data.col(k)).squaredNorm();
    double r = 0.0;
    if (reg.spatial > 0.0) r += reg.spatial * spatial_energy(field.grid(), f);
    if (reg.temporal > 0.0) r += reg.temporal * (field.coeffs() * part.dpsi.col(k)).squaredNorm();
    regv[kk] = r;
  });
  ObjectiveParts out;
  for (int k = 0; k < frames; ++k) {
    out.data_fidelity += fid[static_cast<std::size_t>(k)];
    out.regularization += regv[static_cast<std::size_t>(k)];
  }
  out.data_fidelity *= 0.5 / (meas.sigma * meas.sigma);
  return out;
}

double auto_step(const FrameOperatorSet& ops, double sigma, int batch) {
  if (!(sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");
  const double norm = operator_norm_estimate(ops);
  return sigma * sigma * batch / (static_cast<double>(ops.frames()) * norm * norm);
}

Eigen::VectorXd static_reconstruction(const SpacetimeGrid& grid, const Measurements& meas,
                                      const FrameOperatorSet& ops, double spatial, const CgOptions& cg) {
  check_problem(grid, meas, ops);
  if (!(meas.sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");
  // Frames sharing a matrix contribute count * H^T H to the normal operator.
  std::vector<const SparseMatrix*> mats;
  std::vector<int> counts;
  for (int k = 0; k < ops.frames(); ++k) {
    const SparseMatrix* m = &ops.frame(k).matrix();
    const auto it = std::find(mats.begin(), mats.end(), m);
    if (it == mats.end()) {
      mats.push_back(m);
      counts.push_back(1);
    } else {
      ++counts[static_cast<std::size_t>(it - mats.begin())];
    }
  }
  const double inv_var = 1.0 / (meas.sigma * meas.sigma);
  const double lap_weight = 2.0 * spatial * grid.frames();
  auto normal = [&](const Eigen::VectorXd& x) {
    std::vector<Eigen::VectorXd> parts(mats.size());
    parallel_for(mats.size(), [&](std::size_t i) {
      parts[i] = counts[i] * (mats[i]->transpose() * ((*mats[i]) * x));
    });
    Eigen::VectorXd out = Eigen::VectorXd::Zero(x.size());
    for (const auto& p : parts) out += p;
    out *= inv_var;
    if (lap_weight > 0.0) out += lap_weight * apply_laplacian(grid, x);
    return out;
  };
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(grid.pixels());
  for (int k = 0; k < ops.frames(); ++k) rhs += ops.frame(k).apply_adjoint(meas.data.col(k));
  rhs *= inv_var;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(grid.pixels());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return x;
  Eigen::VectorXd r = rhs;
  Eigen::VectorXd p = r;
  double rr = r.squaredNorm();
  for (int it = 1; it <= cg.max_iterations; ++it) {
    const Eigen::VectorXd q = normal(p);
    const double curvature = p.dot(q);
    if (!std::isfinite(curvature) || curvature <= 0.0) {
      throw Error("cg_breakdown", "static solve broke down at iteration " + std::to_string(it));
    }
    const double a = rr / curvature;
    x += a * p;
    r -= a * q;
    const double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) < cg.tolerance * rhs_norm) break;
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  return x;
}

PouField initialize_field(const SpacetimeGrid& grid, const PartitionNetConfig& net, std::uint64_t seed,
                          const Eigen::VectorXd& image) {
  if (image.size() != grid.pixels()) throw Error("dimension_mismatch", "initial image does not match the grid");
  PouField field = PouField::create(grid, net, seed);
  field.coeffs() = image.replicate(1, field.partitions());
  return field;
}

ProxTrace run_proxnf(const ProxConfig& config, PouField& field, const Measurements& meas,
                     const FrameOperatorSet& ops, const ProxObserver& observer) {
  check_problem(field.grid(), meas, ops);
  const SpacetimeGrid& grid = field.grid();
  if (config.batch < 1 || config.batch > grid.frames()) {
    throw Error("invalid_batch", "batch " + std::to_string(config.batch) + " outside [1, K]");
  }
  if (config.max_iterations < 1) throw Error("malformed_config", "max_iterations must be positive");
  if (!(meas.sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");

  ProxTrace trace;
  trace.step = config.step ? *config.step : auto_step(ops, meas.sigma, config.batch);
  if (!(trace.step > 0.0)) throw Error("invalid_step", "prox step must be positive");
  const auto initial = prox_objective(field, meas, ops, config.prox.reg);
  trace.initial_data_fidelity = initial.data_fidelity;
  trace.initial_regularization = initial.regularization;
  const double initial_objective = initial.data_fidelity + initial.regularization;

  const int audit = std::min(config.audit_frames, grid.frames());
  std::vector<double> audit_times(static_cast<std::size_t>(audit));
  for (int i = 0; i < audit; ++i) {
    audit_times[static_cast<std::size_t>(i)] =
        grid.frame_time(static_cast<int>(static_cast<long long>(i) * grid.frames() / audit));
  }
  auto audit_snapshots = [&] { return Eigen::MatrixXd(field.coeffs() * field.net().evaluate(audit_times).psi); };

  std::mt19937_64 rng(config.seed);
  double reference = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (int n = 1; n <= config.max_iterations; ++n) {
    ProxRecord rec;
    rec.iteration = n;
    rec.frames = sample_frames(grid.frames(), config.batch, rng);
    const Eigen::MatrixXd before = audit_snapshots();
    {
      const SampledDirection dir = sampled_update_direction(field, meas, ops, rec.frames, config.unbiased);
      prox_step(field, dir, trace.step, config.prox, rng);
    }
    rec.prox_gradient_norm = (audit_snapshots() - before).norm() / trace.step;
    const auto obj = prox_objective(field, meas, ops, config.prox.reg);
    rec.data_fidelity = obj.data_fidelity;
    rec.regularization = obj.regularization;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.records.push_back(rec);
    if (observer) observer(rec, field);
    if (!std::isfinite(rec.objective()) || rec.objective() > config.divergence_factor * initial_objective) {
      throw ProxDivergence("objective rose above " + std::to_string(config.divergence_factor) +
                               "x its initial value at iteration " + std::to_string(n),
                           trace);
    }
    if (n == 1) reference = rec.prox_gradient_norm;
    if (rec.prox_gradient_norm < config.stop_ratio * reference) {
      trace.stopped = true;
      break;
    }
  }
  return trace;
}

}  // namespace nfrecon
