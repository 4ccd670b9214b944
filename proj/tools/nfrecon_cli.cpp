// nfrecon: command line front end for the dynamic photoacoustic toolkit.
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "nfrecon/blob_io.hpp"
#include "nfrecon/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nfrecon;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_config(const Common& c) {
  json doc = c.config.empty() ? json::object() : read_json(c.config);
  if (c.seed) doc["seed"] = *c.seed;
  return experiment_from_json(doc);
}

void echo(const std::string& command, const json& config, std::uint64_t seed) {
  std::cout << json{{"command", command}, {"seed", seed}, {"config", config}}.dump() << std::endl;
}

void report(const json& doc) { std::cout << doc.dump() << std::endl; }

Measurements load_measurements(const std::string& path, const ExperimentConfig& cfg, const FrameOperatorSet& ops) {
  Measurements meas = read_measurements(path);
  if (meas.frames() != cfg.frames || meas.data.rows() != ops.rows_per_frame()) {
    throw Error("dimension_mismatch", path + ": measurements do not match the configured acquisition");
  }
  return meas;
}

void write_objective_csv(const fs::path& path, const std::vector<double>& objective) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  out.precision(17);
  out << "iteration,objective\n";
  for (std::size_t i = 0; i < objective.size(); ++i) out << i << ',' << objective[i] << '\n';
}

void maybe_evaluate(const ImageStack& est, const std::string& truth_path, const std::string& roi_path,
                    const fs::path& dir, json& summary) {
  if (truth_path.empty()) return;
  if (roi_path.empty()) throw Error("missing_argument", "--truth needs --roi");
  const ImageStack truth = read_stack(truth_path);
  const RoiMask roi = read_roi(roi_path);
  const MetricsReport m = evaluate_metrics(est, truth, roi);
  write_json(dir / "metrics.json", to_json(m));
  write_frame_csv(dir / "frames.csv", m);
  summary["metrics"] = {{"rrmse", m.rrmse}, {"ssim", m.ssim}, {"lac_rrmse", m.lac_rrmse}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic photoacoustic reconstruction with partition-of-unity neural fields"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment JSON");
    sub->add_option("--seed", common.seed, "override the config seed");
  };

  std::string out, stack_path, roi_path, pgm_dir, meas_path, out_dir, truth_path, est_path, frames_csv,
      metrics_csv, render_path, method = "proxnf";
  std::optional<double> scale, lambda;

  auto* phantom = app.add_subcommand("phantom", "render the dynamic phantom to an image stack");
  add_common(phantom);
  phantom->add_option("--out", out, "output stack (stk1)")->required();
  phantom->add_option("--roi", roi_path, "lesion ROI JSON output");
  phantom->add_option("--pgm-dir", pgm_dir, "write log-scale PGM frames here");

  auto* simulate_cmd = app.add_subcommand("simulate", "noisy circular-Radon measurements of a stack");
  add_common(simulate_cmd);
  simulate_cmd->add_option("--stack", stack_path, "input stack")->required();
  simulate_cmd->add_option("--out", out, "output measurements (msr1)")->required();

  auto* embed_cmd = app.add_subcommand("embed", "fit a neural field to an image stack");
  add_common(embed_cmd);
  embed_cmd->add_option("--stack", stack_path, "target stack")->required();
  embed_cmd->add_option("--out", out, "field checkpoint")->required();
  embed_cmd->add_option("--metrics", metrics_csv, "per-round CSV");
  embed_cmd->add_option("--render", render_path, "rendered stack output");

  auto* prox = app.add_subcommand("reconstruct-proxnf", "neural-field reconstruction by proximal splitting");
  add_common(prox);
  prox->add_option("--measurements", meas_path, "measurements (msr1)")->required();
  prox->add_option("--out-dir", out_dir, "output directory")->required();
  prox->add_option("--truth", truth_path, "ground-truth stack for metrics");
  prox->add_option("--roi", roi_path, "lesion ROI for metrics");
  prox->add_option("--scale", scale, "multiply both regularization weights");

  auto* nn = app.add_subcommand("reconstruct-nn", "nuclear-norm regularized reconstruction (FISTA)");
  add_common(nn);
  nn->add_option("--measurements", meas_path, "measurements (msr1)")->required();
  nn->add_option("--out-dir", out_dir, "output directory")->required();
  nn->add_option("--truth", truth_path, "ground-truth stack for metrics");
  nn->add_option("--roi", roi_path, "lesion ROI for metrics");
  nn->add_option("--lambda", lambda, "nuclear-norm weight (default: config)");

  auto* eval = app.add_subcommand("evaluate", "compare a stack to the ground truth");
  eval->add_option("--est", est_path, "estimated stack")->required();
  eval->add_option("--truth", truth_path, "ground-truth stack")->required();
  eval->add_option("--roi", roi_path, "lesion ROI")->required();
  eval->add_option("--out", out, "metrics JSON")->required();
  eval->add_option("--frames-csv", frames_csv, "per-frame CSV");

  auto* sweep = app.add_subcommand("sweep-reg", "Morozov discrepancy sweep of the regularization weight");
  add_common(sweep);
  sweep->add_option("--measurements", meas_path, "measurements (msr1)")->required();
  sweep->add_option("--method", method, "proxnf or nn")->check(CLI::IsMember({"proxnf", "nn"}));
  sweep->add_option("--out", out, "report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << std::endl;
    return 64;
  }

  try {
    if (phantom->parsed()) {
      const auto cfg = load_config(common);
      echo("phantom", to_json(cfg), cfg.seed);
      const Truth truth = make_truth(cfg);
      write_stack(out, truth.stack);
      if (!roi_path.empty()) write_roi(roi_path, truth.roi, truth.stack.grid);
      if (!pgm_dir.empty()) {
        fs::create_directories(pgm_dir);
        for (int k = 0; k < truth.stack.grid.frames(); ++k) {
          write_pgm(fs::path(pgm_dir) / ("frame_" + std::to_string(k) + ".pgm"), truth.stack, k);
        }
      }
      report({{"stack", out}, {"roi_pixels", truth.roi.pixels.size()}});
    } else if (simulate_cmd->parsed()) {
      const auto cfg = load_config(common);
      echo("simulate", to_json(cfg), cfg.seed);
      const ImageStack truth = read_stack(stack_path);
      const auto ops = cfg.operators();
      const Measurements meas = simulate(cfg, truth, ops);
      write_measurements(out, meas);
      report({{"measurements", out}, {"sigma", meas.sigma}, {"noise_seed", meas.seed},
              {"distinct_geometries", ops.distinct_geometries()}});
    } else if (embed_cmd->parsed()) {
      const auto cfg = load_config(common);
      echo("embed", to_json(cfg), cfg.seed);
      const ImageStack target = read_stack(stack_path);
      const auto result = run_embedding(cfg, target);
      write_checkpoint(out, result.field,
                       {{{"seed", cfg.seed},
                         {"net", stage_seed(cfg.seed, "embed-net")},
                         {"batches", stage_seed(cfg.seed, "embed-batches")}}});
      if (!metrics_csv.empty()) {
        std::ofstream csv(metrics_csv);
        if (!csv) throw Error("io_error", "cannot write " + metrics_csv);
        csv.precision(17);
        csv << "round,cg_iterations,relative_misfit_after_coefficients,relative_misfit_after_partition\n";
        for (const auto& r : result.report.rounds) {
          csv << r.round << ',' << r.cg.iterations << ',' << r.relative_misfit_after_coefficients << ','
              << r.relative_misfit_after_partition << '\n';
        }
      }
      const ImageStack rendered = result.field.render();
      if (!render_path.empty()) write_stack(render_path, rendered);
      report({{"checkpoint", out},
              {"parameters", result.field.parameter_count()},
              {"relative_misfit", result.report.final_objective.relative_misfit()},
              {"rrmse", rrmse(rendered, target)}});
    } else if (prox->parsed()) {
      const auto cfg = load_config(common);
      echo("reconstruct-proxnf", to_json(cfg), cfg.seed);
      const auto ops = cfg.operators();
      const Measurements meas = load_measurements(meas_path, cfg, ops);
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      const auto result = run_reconstruction(cfg, meas, ops, scale.value_or(1.0));
      write_checkpoint(dir / "field.pou", result.field,
                       {{{"seed", cfg.seed},
                         {"net", stage_seed(cfg.seed, "proxnf-net")},
                         {"iterations", stage_seed(cfg.seed, "proxnf")}}});
      const ImageStack est = result.field.render();
      write_stack(dir / "recon.stk", est);
      write_trace_csv(dir / "trace.csv", result.trace);
      write_trace_csv(dir / "timing.csv", result.trace, true);
      json summary = {{"out_dir", out_dir},
                      {"iterations", result.trace.records.size()},
                      {"stopped", result.trace.stopped},
                      {"step", result.trace.step}};
      maybe_evaluate(est, truth_path, roi_path, dir, summary);
      report(summary);
    } else if (nn->parsed()) {
      const auto cfg = load_config(common);
      echo("reconstruct-nn", to_json(cfg), cfg.seed);
      const auto ops = cfg.operators();
      const Measurements meas = load_measurements(meas_path, cfg, ops);
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      const auto result = run_stirnn(cfg, meas, ops, lambda.value_or(cfg.stirnn.lambda_nuc));
      write_stack(dir / "recon.stk", result.stack);
      write_objective_csv(dir / "trace.csv", result.objective);
      json summary = {{"out_dir", out_dir},
                      {"iterations", result.objective.size() - 1},
                      {"converged", result.converged},
                      {"restarts", result.restarts}};
      maybe_evaluate(result.stack, truth_path, roi_path, dir, summary);
      report(summary);
    } else if (eval->parsed()) {
      std::cout << json{{"command", "evaluate"}, {"est", est_path}, {"truth", truth_path}, {"roi", roi_path}}.dump()
                << std::endl;
      const MetricsReport m = evaluate_metrics(read_stack(est_path), read_stack(truth_path), read_roi(roi_path));
      write_json(out, to_json(m));
      if (!frames_csv.empty()) write_frame_csv(frames_csv, m);
      report({{"rrmse", m.rrmse}, {"ssim", m.ssim}, {"lac_rrmse", m.lac_rrmse}});
    } else if (sweep->parsed()) {
      const auto cfg = load_config(common);
      echo("sweep-reg", to_json(cfg), cfg.seed);
      const auto ops = cfg.operators();
      const Measurements meas = load_measurements(meas_path, cfg, ops);
      const MorozovReport rep = method == "nn" ? sweep_stirnn(cfg, meas, ops) : sweep_proxnf(cfg, meas, ops);
      json doc = to_json(rep);
      doc["method"] = method;
      write_json(out, doc);
      if (!rep.warning.empty()) std::cerr << json{{"warning", rep.warning}}.dump() << std::endl;
      report({{"chosen_lambda", rep.chosen}});
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", e.code()}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
