#include "nfrecon/pipeline.hpp"

#include <cmath>
#include <string>

namespace nfrecon {

namespace {

EmbedConfig embed_from_json(const nlohmann::json& doc, EmbedConfig cfg) {
  cfg.reg.spatial = doc.value("lambda_s", cfg.reg.spatial);
  cfg.reg.temporal = doc.value("lambda_t", cfg.reg.temporal);
  cfg.rounds = doc.value("rounds", cfg.rounds);
  cfg.cg.tolerance = doc.value("cg_tolerance", cfg.cg.tolerance);
  cfg.cg.max_iterations = doc.value("cg_max_iterations", cfg.cg.max_iterations);
  if (doc.contains("adam")) cfg.adam = adam_from_json(doc.at("adam"), cfg.adam);
  return cfg;
}

nlohmann::json to_json(const EmbedConfig& cfg) {
  return {{"lambda_s", cfg.reg.spatial},
          {"lambda_t", cfg.reg.temporal},
          {"rounds", cfg.rounds},
          {"cg_tolerance", cfg.cg.tolerance},
          {"cg_max_iterations", cfg.cg.max_iterations},
          {"adam", to_json(cfg.adam)}};
}

}  // namespace

SpacetimeGrid ExperimentConfig::grid() const { return SpacetimeGrid(side, fov_cm, frames, horizon_s); }

DynamicPhantom ExperimentConfig::make_phantom() const {
  nlohmann::json doc = phantom;
  doc["horizon_s"] = horizon_s;
  return phantom_from_json(doc);
}

std::vector<double> ExperimentConfig::radii() const {
  SensorSchedule s = schedule;
  s.frames = frames;
  return uniform_radii(grid(), s, rings);
}

FrameOperatorSet ExperimentConfig::operators() const {
  SensorSchedule s = schedule;
  s.frames = frames;
  const auto r = radii();
  return FrameOperatorSet::build(grid(), s, r, sampling);
}

ExperimentConfig experiment_from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  cfg.embed.adam = {1e-3, 300, 32768};
  cfg.embed.rounds = 5;
  try {
    cfg.seed = doc.value("seed", cfg.seed);
    if (doc.contains("grid")) {
      const auto& g = doc.at("grid");
      cfg.side = g.value("side_pixels", cfg.side);
      cfg.fov_cm = g.value("fov_cm", cfg.fov_cm);
      cfg.frames = g.value("frames", cfg.frames);
      cfg.horizon_s = g.value("horizon_s", cfg.horizon_s);
    }
    if (doc.contains("phantom")) cfg.phantom = doc.at("phantom");
    cfg.supersample = doc.value("render_supersample", cfg.supersample);
    cfg.roi_dilation = doc.value("roi_dilation_px", cfg.roi_dilation);
    if (doc.contains("acquisition")) {
      const auto& a = doc.at("acquisition");
      cfg.schedule.radius_cm = a.value("radius_cm", cfg.schedule.radius_cm);
      cfg.schedule.groups = a.value("groups", cfg.schedule.groups);
      cfg.schedule.sensors_per_group = a.value("sensors_per_group", cfg.schedule.sensors_per_group);
      cfg.schedule.spacing_deg = a.value("spacing_deg", cfg.schedule.spacing_deg);
      cfg.schedule.rotation_deg = a.value("rotation_deg", cfg.schedule.rotation_deg);
      cfg.rings = a.value("rings", cfg.rings);
      cfg.sampling.oversample = a.value("oversample", cfg.sampling.oversample);
      cfg.rnl = a.value("rnl", cfg.rnl);
    }
    if (doc.contains("network")) {
      const auto& n = doc.at("network");
      if (n.contains("hidden")) cfg.net.hidden = n.at("hidden").get<std::vector<int>>();
      cfg.net.partitions = n.value("partitions", cfg.net.partitions);
      cfg.net.omega0 = n.value("omega0", cfg.net.omega0);
    }
    if (doc.contains("embed")) cfg.embed = embed_from_json(doc.at("embed"), cfg.embed);
    if (doc.contains("proxnf")) cfg.proxnf = prox_config_from_json(doc.at("proxnf"), cfg.proxnf);
    cfg.init_spatial = doc.value("init_lambda_s", cfg.init_spatial);
    if (doc.contains("stirnn")) cfg.stirnn = fista_config_from_json(doc.at("stirnn"), cfg.stirnn);
    if (doc.contains("sweep")) {
      const auto& s = doc.at("sweep");
      if (s.contains("proxnf_scales")) cfg.proxnf_scales = s.at("proxnf_scales").get<std::vector<double>>();
      if (s.contains("stirnn_lambdas")) cfg.stirnn_lambdas = s.at("stirnn_lambdas").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad experiment config: ") + e.what());
  }
  if (cfg.supersample < 1) throw Error("malformed_config", "render_supersample must be positive");
  if (cfg.rings < 1) throw Error("malformed_config", "rings must be positive");
  SensorSchedule s = cfg.schedule;
  s.frames = cfg.frames;
  s.validate();
  cfg.grid();
  cfg.make_phantom();
  return cfg;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  return {{"seed", cfg.seed},
          {"grid", {{"side_pixels", cfg.side}, {"fov_cm", cfg.fov_cm}, {"frames", cfg.frames},
                    {"horizon_s", cfg.horizon_s}}},
          {"phantom", to_json(cfg.make_phantom())},
          {"render_supersample", cfg.supersample},
          {"roi_dilation_px", cfg.roi_dilation},
          {"acquisition",
           {{"radius_cm", cfg.schedule.radius_cm},
            {"groups", cfg.schedule.groups},
            {"sensors_per_group", cfg.schedule.sensors_per_group},
            {"spacing_deg", cfg.schedule.spacing_deg},
            {"rotation_deg", cfg.schedule.rotation_deg},
            {"rings", cfg.rings},
            {"oversample", cfg.sampling.oversample},
            {"rnl", cfg.rnl}}},
          {"network", to_json(cfg.net)},
          {"embed", to_json(cfg.embed)},
          {"proxnf", to_json(cfg.proxnf)},
          {"init_lambda_s", cfg.init_spatial},
          {"stirnn", to_json(cfg.stirnn)},
          {"sweep", {{"proxnf_scales", cfg.proxnf_scales}, {"stirnn_lambdas", cfg.stirnn_lambdas}}}};
}

std::uint64_t stage_seed(std::uint64_t seed, const char* stage) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const char* c = stage; *c; ++c) {
    h ^= static_cast<unsigned char>(*c);
    h *= 1099511628211ULL;
  }
  // splitmix64 finaliser
  std::uint64_t z = seed ^ h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Truth make_truth(const ExperimentConfig& cfg) {
  const auto phantom = cfg.make_phantom();
  const auto grid = cfg.grid();
  return {render(phantom, grid, cfg.supersample), lesion_roi(phantom, grid, cfg.roi_dilation)};
}

Measurements simulate(const ExperimentConfig& cfg, const ImageStack& truth, const FrameOperatorSet& ops) {
  require_same_grid(truth.grid, cfg.grid(), "simulate");
  return add_noise(forward(truth, ops), cfg.rnl, stage_seed(cfg.seed, "noise"));
}

EmbedOutcome run_embedding(const ExperimentConfig& cfg, const ImageStack& target) {
  require_same_grid(target.grid, cfg.grid(), "embed");
  PouField field = PouField::create(target.grid, cfg.net, stage_seed(cfg.seed, "embed-net"));
  std::mt19937_64 rng(stage_seed(cfg.seed, "embed-batches"));
  const StackTargets targets(target);
  EmbedReport report = embed(field, targets, cfg.embed, rng);
  return {std::move(field), std::move(report)};
}

int matched_rank(const SpacetimeGrid& grid, Eigen::Index parameters) {
  const double per_rank = static_cast<double>(grid.pixels()) + grid.frames() + 1.0;
  const int full = std::min(grid.pixels(), grid.frames());
  return std::clamp(static_cast<int>(std::lround(static_cast<double>(parameters) / per_rank)), 1, full);
}

ProxOutcome run_reconstruction(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                               double scale, const ProxObserver& observer) {
  const auto grid = cfg.grid();
  ProxConfig pc = cfg.proxnf;
  pc.prox.reg.spatial *= scale;
  pc.prox.reg.temporal *= scale;
  pc.seed = stage_seed(cfg.seed, "proxnf");
  const double init_spatial = cfg.init_spatial >= 0.0 ? cfg.init_spatial * scale : pc.prox.reg.spatial;
  const Eigen::VectorXd image = static_reconstruction(grid, meas, ops, init_spatial, pc.prox.cg);
  PouField field = initialize_field(grid, cfg.net, stage_seed(cfg.seed, "proxnf-net"), image);
  ProxTrace trace = run_proxnf(pc, field, meas, ops, observer);
  return {std::move(field), std::move(trace)};
}

FistaResult run_stirnn(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                       double lambda, const Eigen::MatrixXd* warm_start, double lipschitz) {
  FistaConfig fc = cfg.stirnn;
  fc.lambda_nuc = lambda;
  return stirnn_reconstruct(cfg.grid(), meas, ops, fc, warm_start, lipschitz);
}

MorozovReport sweep_proxnf(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                           const SweepVisitor& visit) {
  return morozov_sweep(
      [&](double scale) {
        Eigen::MatrixXd coeffs = run_reconstruction(cfg, meas, ops, scale).field.render().coeffs;
        if (visit) visit(scale, coeffs);
        return coeffs;
      },
      meas, ops, cfg.proxnf_scales);
}

MorozovReport sweep_stirnn(const ExperimentConfig& cfg, const Measurements& meas, const FrameOperatorSet& ops,
                           const SweepVisitor& visit) {
  const double norm = operator_norm_estimate(ops);
  const double lipschitz = norm * norm / (meas.sigma * meas.sigma);
  Eigen::MatrixXd previous;
  return morozov_sweep(
      [&](double lambda) {
        auto res = run_stirnn(cfg, meas, ops, lambda, previous.size() ? &previous : nullptr, lipschitz);
        previous = res.stack.coeffs;
        if (visit) visit(lambda, previous);
        return previous;
      },
      meas, ops, cfg.stirnn_lambdas);
}

}  // namespace nfrecon
