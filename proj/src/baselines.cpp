#include "nfrecon/baselines.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/SVD>

namespace nfrecon {

namespace {

double data_term(const Eigen::MatrixXd& f, const Measurements& meas, const FrameOperatorSet& ops,
                 Eigen::MatrixXd* gradient) {
  const int frames = ops.frames();
  std::vector<double> parts(static_cast<std::size_t>(frames));
  parallel_for(static_cast<std::size_t>(frames), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const Eigen::VectorXd r = ops.frame(k).apply(f.col(k)) - meas.data.col(k);
    parts[kk] = r.squaredNorm();
    if (gradient) gradient->col(k) = ops.frame(k).apply_adjoint(r);
  });
  double sum = 0.0;
  for (double p : parts) sum += p;
  const double inv_var = 1.0 / (meas.sigma * meas.sigma);
  if (gradient) *gradient *= inv_var;
  return 0.5 * inv_var * sum;
}

double nuclear_norm(const Eigen::MatrixXd& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  return svd.singularValues().sum();
}

Eigen::MatrixXd shrink(const Eigen::MatrixXd& a, double tau, double* norm) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw Error("svd_failure", "singular value decomposition failed");
  const Eigen::VectorXd s = (svd.singularValues().array() - tau).max(0.0).matrix();
  Eigen::Index keep = 0;
  while (keep < s.size() && s[keep] > 0.0) ++keep;
  if (norm) *norm = s.sum();
  return svd.matrixU().leftCols(keep) * s.head(keep).asDiagonal() * svd.matrixV().leftCols(keep).transpose();
}

}  // namespace

SemiseparableApprox ss_embed(const Eigen::MatrixXd& coeffs, int rank) {
  const Eigen::Index full = std::min(coeffs.rows(), coeffs.cols());
  if (rank < 1 || rank > full) {
    throw Error("invalid_rank", "rank " + std::to_string(rank) + " outside [1, " + std::to_string(full) + "]");
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(coeffs, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw Error("svd_failure", "singular value decomposition failed");
  return {svd.matrixU().leftCols(rank), svd.singularValues().head(rank), svd.matrixV().leftCols(rank)};
}

SemiseparableApprox ss_embed(const ImageStack& stack, int rank) { return ss_embed(stack.coeffs, rank); }

Eigen::MatrixXd svt(const Eigen::MatrixXd& a, double tau) {
  if (!(tau >= 0.0)) throw Error("invalid_argument", "threshold must be nonnegative");
  if (a.size() == 0) return a;
  return shrink(a, tau, nullptr);
}

nlohmann::json to_json(const FistaConfig& cfg) {
  return {{"lambda_nuc", cfg.lambda_nuc},
          {"max_iterations", cfg.max_iterations},
          {"tolerance", cfg.tolerance},
          {"restart", cfg.restart},
          {"divergence_factor", cfg.divergence_factor}};
}

FistaConfig fista_config_from_json(const nlohmann::json& doc, FistaConfig cfg) {
  try {
    cfg.lambda_nuc = doc.value("lambda_nuc", cfg.lambda_nuc);
    cfg.max_iterations = doc.value("max_iterations", cfg.max_iterations);
    cfg.tolerance = doc.value("tolerance", cfg.tolerance);
    cfg.restart = doc.value("restart", cfg.restart);
    cfg.divergence_factor = doc.value("divergence_factor", cfg.divergence_factor);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad fista config: ") + e.what());
  }
  if (cfg.lambda_nuc < 0.0) throw Error("malformed_config", "lambda_nuc must be nonnegative");
  return cfg;
}

FistaResult stirnn_reconstruct(const SpacetimeGrid& grid, const Measurements& meas, const FrameOperatorSet& ops,
                               const FistaConfig& cfg, const Eigen::MatrixXd* warm_start, double lipschitz) {
  if (ops.frames() != grid.frames() || ops.pixels() != grid.pixels() || meas.frames() != grid.frames() ||
      meas.data.rows() != ops.rows_per_frame()) {
    throw Error("dimension_mismatch", "measurements, operators and grid disagree");
  }
  if (!(meas.sigma > 0.0)) throw Error("invalid_sigma", "noise level must be positive");
  if (cfg.max_iterations < 1) throw Error("malformed_config", "max_iterations must be positive");
  if (lipschitz <= 0.0) {
    const double norm = operator_norm_estimate(ops);
    lipschitz = norm * norm / (meas.sigma * meas.sigma);
  }
  const double step = 1.0 / lipschitz;

  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(grid.pixels(), grid.frames());
  if (warm_start) {
    if (warm_start->rows() != x.rows() || warm_start->cols() != x.cols()) {
      throw Error("dimension_mismatch", "warm start does not match the grid");
    }
    x = *warm_start;
  }
  Eigen::MatrixXd y = x;
  Eigen::MatrixXd grad(x.rows(), x.cols());
  double t = 1.0;

  FistaResult res{ImageStack(grid), {}, 0, false, step};
  double current = data_term(x, meas, ops, nullptr) + cfg.lambda_nuc * nuclear_norm(x);
  res.objective.push_back(current);
  const double initial = current;
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    data_term(y, meas, ops, &grad);
    double nuc = 0.0;
    Eigen::MatrixXd next = shrink(y - step * grad, step * cfg.lambda_nuc, &nuc);
    double value = data_term(next, meas, ops, nullptr) + cfg.lambda_nuc * nuc;
    if (cfg.restart && value > current && t > 1.0) {
      // Drop the momentum and redo the step from the last accepted iterate.
      ++res.restarts;
      t = 1.0;
      y = x;
      data_term(y, meas, ops, &grad);
      next = shrink(y - step * grad, step * cfg.lambda_nuc, &nuc);
      value = data_term(next, meas, ops, nullptr) + cfg.lambda_nuc * nuc;
    }
    if (!std::isfinite(value) || value > cfg.divergence_factor * std::max(initial, 1e-300)) {
      throw Error("diverged", "FISTA objective rose above " + std::to_string(cfg.divergence_factor) +
                                  "x its initial value at iteration " + std::to_string(it));
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / t_next) * (next - x);
    x = std::move(next);
    t = t_next;
    const double change = std::abs(current - value) / std::max(std::abs(current), 1e-300);
    current = value;
    res.objective.push_back(value);
    if (change < cfg.tolerance) {
      res.converged = true;
      break;
    }
  }
  res.stack.coeffs = std::move(x);
  return res;
}

ImageStack framewise_least_squares(const SpacetimeGrid& grid, const Measurements& meas, const FrameOperatorSet& ops,
                                   int max_iterations, double tolerance) {
  if (ops.frames() != grid.frames() || meas.frames() != grid.frames() || ops.pixels() != grid.pixels()) {
    throw Error("dimension_mismatch", "measurements, operators and grid disagree");
  }
  ImageStack out(grid);
  parallel_for(static_cast<std::size_t>(grid.frames()), [&](std::size_t kk) {
    const auto& op = ops.frame(static_cast<int>(kk));
    Eigen::VectorXd x = Eigen::VectorXd::Zero(grid.pixels());
    Eigen::VectorXd r = meas.data.col(static_cast<Eigen::Index>(kk));
    Eigen::VectorXd s = op.apply_adjoint(r);
    Eigen::VectorXd p = s;
    double gamma = s.squaredNorm();
    const double stop = tolerance * tolerance * gamma;
    for (int it = 0; it < max_iterations && gamma > stop; ++it) {
      const Eigen::VectorXd q = op.apply(p);
      const double qq = q.squaredNorm();
      if (!(qq > 0.0)) break;
      const double a = gamma / qq;
      x += a * p;
      r -= a * q;
      s = op.apply_adjoint(r);
      const double next = s.squaredNorm();
      p = s + (next / gamma) * p;
      gamma = next;
    }
    out.coeffs.col(static_cast<Eigen::Index>(kk)) = x;
  });
  return out;
}

double residual_std(const Eigen::MatrixXd& coeffs, const Measurements& meas, const FrameOperatorSet& ops) {
  const int frames = ops.frames();
  std::vector<double> sum(static_cast<std::size_t>(frames));
  std::vector<double> sq(static_cast<std::size_t>(frames));
  parallel_for(static_cast<std::size_t>(frames), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const Eigen::VectorXd r = ops.frame(k).apply(coeffs.col(k)) - meas.data.col(k);
    sum[kk] = r.sum();
    sq[kk] = r.squaredNorm();
  });
  double s = 0.0;
  double q = 0.0;
  for (int k = 0; k < frames; ++k) {
    s += sum[static_cast<std::size_t>(k)];
    q += sq[static_cast<std::size_t>(k)];
  }
  const double n = static_cast<double>(meas.data.size());
  const double mean = s / n;
  return std::sqrt(std::max(q / n - mean * mean, 0.0));
}

MorozovReport morozov_sweep(const std::function<double(double)>& residual_at, double sigma,
                            const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw Error("invalid_grid", "lambda grid is empty");
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] > 0.0)) throw Error("invalid_grid", "lambda values must be positive");
    if (i > 0 && !(lambdas[i] > lambdas[i - 1])) throw Error("invalid_grid", "lambda values must increase");
  }
  MorozovReport rep;
  rep.sigma = sigma;
  double best = std::numeric_limits<double>::infinity();
  bool below = false;
  bool above = false;
  for (double lam : lambdas) {
    const double r = residual_at(lam);
    rep.table.push_back({lam, r});
    (r < sigma ? below : above) = true;
    if (std::abs(r - sigma) < best) {
      best = std::abs(r - sigma);
      rep.chosen = lam;
    }
  }
  if (!(below && above)) {
    rep.warning = below ? "all residuals below sigma; chose the largest lambda in the grid"
                        : "all residuals above sigma; chose the smallest lambda in the grid";
    rep.chosen = below ? lambdas.back() : lambdas.front();
  }
  return rep;
}

MorozovReport morozov_sweep(const std::function<Eigen::MatrixXd(double)>& solver, const Measurements& meas,
                            const FrameOperatorSet& ops, const std::vector<double>& lambdas) {
  return morozov_sweep([&](double lam) { return residual_std(solver(lam), meas, ops); }, meas.sigma, lambdas);
}

nlohmann::json to_json(const MorozovReport& report) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& e : report.table) table.push_back({{"lambda", e.lambda}, {"residual_std", e.residual_std}});
  nlohmann::json out = {{"sigma", report.sigma}, {"chosen_lambda", report.chosen}, {"table", table}};
  if (!report.warning.empty()) out["warning"] = report.warning;
  return out;
}

}  // namespace nfrecon
