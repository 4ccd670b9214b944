#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "alloc_probe.hpp"
#include "nfrecon/proxnf.hpp"

using namespace nfrecon;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct Problem {
  SpacetimeGrid grid;
  FrameOperatorSet ops;
};

Problem make_problem(int side, int frames, int rings = 24, int sensors_per_group = 2, int oversample = 4) {
  const SpacetimeGrid grid(side, 3.72, frames, 648.0);
  SensorSchedule sched;
  sched.sensors_per_group = sensors_per_group;
  sched.frames = frames;
  const auto radii = uniform_radii(grid, sched, rings);
  return {grid, FrameOperatorSet::build(grid, sched, radii, ArcSampling{oversample})};
}

Measurements measure(const ImageStack& stack, const FrameOperatorSet& ops, double sigma) {
  Measurements m = forward(stack, ops);
  m.sigma = sigma;
  return m;
}

PartitionNetConfig small_net() { return {{12, 12}, 3, 5.0}; }

ProxStepConfig plain_prox(Regularization reg = {}) {
  ProxStepConfig cfg;
  cfg.reg = reg;
  cfg.cg = {1e-12, 2000};
  cfg.adam = {0.0, 1, 16};
  return cfg;
}

double frame_loss(const CrtFrameOperator& op, const Eigen::VectorXd& f, const Eigen::VectorXd& d, double sigma) {
  return 0.5 * (op.apply(f) - d).squaredNorm() / (sigma * sigma);
}

// Full-stack framewise gradient as an M x K matrix.
Eigen::MatrixXd full_gradient(const PouField& field, const Measurements& meas, const FrameOperatorSet& ops) {
  Eigen::MatrixXd g(field.grid().pixels(), field.grid().frames());
  for (int k = 0; k < field.grid().frames(); ++k) {
    g.col(k) = frame_data_gradient(ops.frame(k), field.snapshot(k), meas.data.col(k), meas.sigma);
  }
  return g;
}

}  // namespace

TEST_CASE("frame data gradient") {
  const auto prob = make_problem(16, 1);
  const auto& op = prob.ops.frame(0);
  const Eigen::VectorXd f = random_matrix(256, 1, 1);
  const Eigen::VectorXd d = random_matrix(op.rows(), 1, 2);
  const double sigma = 0.7;
  const Eigen::VectorXd g = frame_data_gradient(op, f, d, sigma);

  SECTION("matches central differences") {
    Eigen::VectorXd fd(256);
    const double eps = 1e-3;
    for (int i = 0; i < 256; ++i) {
      Eigen::VectorXd fp = f, fm = f;
      fp[i] += eps;
      fm[i] -= eps;
      fd[i] = (frame_loss(op, fp, d, sigma) - frame_loss(op, fm, d, sigma)) / (2 * eps);
    }
    CHECK((g - fd).norm() <= 1e-6 * fd.norm());
  }
  SECTION("zero residual") {
    CHECK(frame_data_gradient(op, f, op.apply(f), sigma).isZero());
  }
  SECTION("doubling sigma quarters the gradient") {
    CHECK((frame_data_gradient(op, f, d, 2 * sigma) - 0.25 * g).norm() <= 1e-14 * g.norm());
  }
  SECTION("errors") {
    CHECK_THROWS_AS(frame_data_gradient(op, f, d, 0.0), Error);
    CHECK_THROWS_AS(frame_data_gradient(op, f, d.head(3), sigma), Error);
  }
}

TEST_CASE("frame sampling") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = sample_frames(20, 7, rng);
    REQUIRE(s.size() == 7);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<int>(s.begin(), s.end()).size() == 7);
    CHECK(s.front() >= 0);
    CHECK(s.back() < 20);
  }
  const auto all = sample_frames(5, 5, rng);
  CHECK(all == std::vector<int>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(sample_frames(5, 6, rng), Error);
  CHECK_THROWS_AS(sample_frames(5, 0, rng), Error);
}

TEST_CASE("sampled update direction") {
  const auto prob = make_problem(12, 10, 16);
  PouField field = PouField::create(prob.grid, small_net(), 4);
  field.coeffs() = random_matrix(prob.grid.pixels(), 3, 5);
  const ImageStack truth(prob.grid, random_matrix(prob.grid.pixels(), prob.grid.frames(), 6));
  const Measurements meas = measure(truth, prob.ops, 0.5);
  const Eigen::MatrixXd g = full_gradient(field, meas, prob.ops);

  SECTION("full batch equals the full gradient") {
    std::mt19937_64 rng(1);
    const auto dir = sampled_update_direction(field, meas, prob.ops, sample_frames(10, 10, rng));
    CHECK(dir.scale == 1.0);
    CHECK((dir.values - g).norm() <= 1e-13 * g.norm());
  }
  SECTION("stores only the sampled frames") {
    const auto dir = sampled_update_direction(field, meas, prob.ops, {2, 5, 7});
    CHECK(dir.values.cols() == 3);
    CHECK(dir.values.rows() == prob.grid.pixels());
    CHECK_THAT(dir.scale, Catch::Matchers::WithinRel(10.0 / 3.0, 1e-15));
    CHECK((dir.values.col(1) - dir.scale * g.col(5)).norm() <= 1e-13 * g.col(5).norm());
    const auto literal = sampled_update_direction(field, meas, prob.ops, {2, 5, 7}, false);
    CHECK(literal.scale == 1.0);
  }
  SECTION("averages to the full gradient") {
    std::mt19937_64 rng(11);
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(g.rows(), g.cols());
    const int draws = 200;
    for (int i = 0; i < draws; ++i) {
      const auto dir = sampled_update_direction(field, meas, prob.ops, sample_frames(10, 9, rng));
      for (std::size_t j = 0; j < dir.frames.size(); ++j) {
        mean.col(dir.frames[j]) += dir.values.col(static_cast<Eigen::Index>(j)) / draws;
      }
    }
    CHECK((mean - g).norm() <= 0.05 * g.norm());
  }
  SECTION("zero residual gives a zero direction") {
    const Measurements exact = measure(field.render(), prob.ops, 0.5);
    std::mt19937_64 rng(2);
    CHECK(sampled_update_direction(field, exact, prob.ops, sample_frames(10, 4, rng)).values.isZero());
  }
  CHECK_THROWS_AS(sampled_update_direction(field, meas, prob.ops, {1, 1}), Error);
  CHECK_THROWS_AS(sampled_update_direction(field, meas, prob.ops, {10}), Error);
}

TEST_CASE("prox step") {
  const auto prob = make_problem(12, 8, 16);
  PouField field = PouField::create(prob.grid, small_net(), 7);
  field.coeffs() = random_matrix(prob.grid.pixels(), 3, 8);
  const ImageStack truth(prob.grid, random_matrix(prob.grid.pixels(), prob.grid.frames(), 9));
  const Measurements meas = measure(truth, prob.ops, 0.5);
  std::mt19937_64 rng(3);
  const auto all = sample_frames(8, 8, rng);

  SECTION("zero direction without regularization is idempotent") {
    const SampledDirection zero{all, Eigen::MatrixXd::Zero(prob.grid.pixels(), 8), 1.0};
    PouField moved = field;
    ProxStepConfig cfg = plain_prox();
    cfg.adam = {1e-3, 20, 256};
    prox_step(moved, zero, 0.1, cfg, rng);
    const Eigen::MatrixXd a = field.render().coeffs;
    CHECK((moved.render().coeffs - a).norm() <= 1e-6 * a.norm());
  }
  SECTION("change grows with the step and vanishes as it shrinks") {
    const auto dir = sampled_update_direction(field, meas, prob.ops, all);
    const auto cfg = plain_prox({0.3, 0.0});
    const Eigen::MatrixXd base = field.render().coeffs;
    std::vector<double> change;
    for (double alpha : {1e-8, 1e-6, 1e-4, 1e-2}) {
      PouField moved = field;
      prox_step(moved, dir, alpha, cfg, rng);
      change.push_back((moved.render().coeffs - base).norm());
    }
    CHECK(std::is_sorted(change.begin(), change.end()));
    CHECK(change.front() < 1e-5 * change.back());
  }
  SECTION("full-batch step decreases the objective") {
    const Regularization reg{0.2, 1.0};
    const double alpha = auto_step(prob.ops, meas.sigma, 8);
    const auto before = prox_objective(field, meas, prob.ops, reg);
    const auto dir = sampled_update_direction(field, meas, prob.ops, all);
    prox_step(field, dir, alpha, plain_prox(reg), rng);
    const auto after = prox_objective(field, meas, prob.ops, reg);
    CHECK(after.data_fidelity + after.regularization < before.data_fidelity + before.regularization);
  }
  CHECK_THROWS_AS(prox_step(field, SampledDirection{all, Eigen::MatrixXd::Zero(3, 8), 1.0}, 0.1, plain_prox(), rng),
                  Error);
  CHECK_THROWS_AS(
      prox_step(field, SampledDirection{all, Eigen::MatrixXd::Zero(prob.grid.pixels(), 8), 1.0}, 0.0, plain_prox(), rng),
      Error);
}

TEST_CASE("proximal iteration on a noiseless in-class problem") {
  const auto prob = make_problem(16, 12, 24);
  PouField truth = PouField::create(prob.grid, small_net(), 21);
  truth.coeffs() = random_matrix(prob.grid.pixels(), 3, 22).cwiseAbs();
  const ImageStack truth_stack = truth.render();
  const Measurements meas = measure(truth_stack, prob.ops, 1e-2);

  PouField field = initialize_field(prob.grid, small_net(), 23, Eigen::VectorXd::Zero(prob.grid.pixels()));
  const double initial_rrmse = (field.render().coeffs - truth_stack.coeffs).norm() / truth_stack.coeffs.norm();
  ProxConfig cfg;
  cfg.batch = 12;
  cfg.max_iterations = 30;
  cfg.stop_ratio = 1e-9;
  cfg.prox.adam = {1e-3, 5, 512};
  cfg.seed = 4;
  const auto trace = run_proxnf(cfg, field, meas, prob.ops);
  REQUIRE(trace.records.size() == 30);
  int decreases = 0;
  double previous = trace.initial_data_fidelity;
  for (const auto& r : trace.records) {
    decreases += r.data_fidelity < previous;
    previous = r.data_fidelity;
  }
  CHECK(decreases >= 27);
  const double final_rrmse = (field.render().coeffs - truth_stack.coeffs).norm() / truth_stack.coeffs.norm();
  CHECK(final_rrmse < initial_rrmse);
}

TEST_CASE("single frame reduces to static proximal gradient") {
  const auto prob = make_problem(16, 1, 32, 5);
  Eigen::VectorXd image = Eigen::VectorXd::Zero(256);
  for (int m = 0; m < 256; ++m) {
    const Point2 c = prob.grid.pixel_center(m);
    image[m] = (c.x * c.x + 2 * c.y * c.y < 1.0) ? 1.0 : 0.2;
  }
  const ImageStack stack(prob.grid, image);
  Measurements meas = add_noise(forward(stack, prob.ops), 0.02, 5);
  const double spatial = 30.0;
  const Eigen::VectorXd tik = static_reconstruction(prob.grid, meas, prob.ops, spatial, {1e-12, 5000});

  PouField field = initialize_field(prob.grid, PartitionNetConfig{{4}, 1, 1.0}, 1, Eigen::VectorXd::Zero(256));
  ProxConfig cfg;
  cfg.batch = 1;
  cfg.max_iterations = 400;
  cfg.stop_ratio = 1e-6;
  cfg.prox = plain_prox({spatial, 0.0});
  cfg.step = 1.9 * auto_step(prob.ops, meas.sigma, 1);
  run_proxnf(cfg, field, meas, prob.ops);
  CHECK((field.snapshot(0) - tik).norm() <= 0.05 * tik.norm());
}

TEST_CASE("traces are reproducible") {
  const auto prob = make_problem(12, 16, 16);
  const ImageStack truth(prob.grid, random_matrix(prob.grid.pixels(), 16, 30).cwiseAbs());
  const Measurements meas = add_noise(forward(truth, prob.ops), 0.05, 31);
  ProxConfig cfg;
  cfg.batch = 5;
  cfg.max_iterations = 4;
  cfg.stop_ratio = 1e-9;
  cfg.prox.adam = {1e-3, 10, 256};
  cfg.seed = 9;
  cfg.prox.reg = {0.5, 10.0};
  auto run = [&] {
    PouField f = initialize_field(prob.grid, small_net(), 3, Eigen::VectorXd::Constant(prob.grid.pixels(), 0.5));
    auto trace = run_proxnf(cfg, f, meas, prob.ops);
    return std::make_pair(trace, f);
  };
  const auto [ta, fa] = run();
  const auto [tb, fb] = run();
  REQUIRE(ta.records.size() == tb.records.size());
  for (std::size_t i = 0; i < ta.records.size(); ++i) {
    CHECK(ta.records[i].frames == tb.records[i].frames);
    CHECK(ta.records[i].data_fidelity == tb.records[i].data_fidelity);
    CHECK(ta.records[i].prox_gradient_norm == tb.records[i].prox_gradient_norm);
  }
  CHECK(fa.coeffs() == fb.coeffs());
  CHECK(fa.net().parameters() == fb.net().parameters());

  const auto dir = std::filesystem::temp_directory_path();
  write_trace_csv(dir / "nfrecon_trace_a.csv", ta);
  write_trace_csv(dir / "nfrecon_trace_b.csv", tb);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  CHECK(slurp(dir / "nfrecon_trace_a.csv") == slurp(dir / "nfrecon_trace_b.csv"));
  CHECK(slurp(dir / "nfrecon_trace_a.csv").find("iteration") == 0);
}

TEST_CASE("divergence aborts with the trace") {
  const auto prob = make_problem(12, 4, 16);
  const ImageStack truth(prob.grid, random_matrix(prob.grid.pixels(), 4, 40).cwiseAbs());
  const Measurements meas = add_noise(forward(truth, prob.ops), 0.05, 41);
  PouField field = initialize_field(prob.grid, small_net(), 3, Eigen::VectorXd::Zero(prob.grid.pixels()));
  ProxConfig cfg;
  cfg.batch = 4;
  cfg.max_iterations = 50;
  cfg.stop_ratio = 1e-9;
  cfg.prox = plain_prox();
  cfg.step = 50.0 * auto_step(prob.ops, meas.sigma, 4);
  try {
    run_proxnf(cfg, field, meas, prob.ops);
    FAIL("expected divergence");
  } catch (const ProxDivergence& e) {
    CHECK(e.code() == "diverged");
    CHECK(!e.trace().records.empty());
  }
}

TEST_CASE("config json") {
  const auto cfg = prox_config_from_json({{"step", "auto"}, {"batch", 8}, {"lambda_s", 2.0}, {"lambda_t", 3.0}});
  CHECK(!cfg.step);
  CHECK(cfg.batch == 8);
  CHECK(cfg.prox.reg.spatial == 2.0);
  CHECK(cfg.prox.reg.temporal == 3.0);
  const auto back = prox_config_from_json(to_json(cfg));
  CHECK(back.batch == 8);
  CHECK(back.prox.reg.temporal == 3.0);
  CHECK(prox_config_from_json({{"step", 0.5}}).step == 0.5);
  CHECK_THROWS_AS(prox_config_from_json({{"step", "big"}}), Error);
  CHECK_THROWS_AS(prox_config_from_json({{"stop_ratio", 2.0}}), Error);
}

TEST_CASE("transient storage does not grow with the frame count") {
  // Desk-scale pixels; the transient peak of one outer iteration must track
  // M J, not M K.
  const int batch = 32;
  auto peak_for = [&](int frames) {
    const auto prob = make_problem(64, frames, 8, 5, 1);
    const ImageStack truth(prob.grid, Eigen::MatrixXd::Constant(prob.grid.pixels(), frames, 0.01));
    const Measurements meas = add_noise(forward(truth, prob.ops), 0.04, 1);
    PouField field =
        initialize_field(prob.grid, PartitionNetConfig{{48, 48, 48, 48}, 10, 30.0}, 2,
                         Eigen::VectorXd::Constant(prob.grid.pixels(), 0.01));
    ProxConfig cfg;
    cfg.batch = batch;
    cfg.max_iterations = 1;
    cfg.prox.adam = {1e-3, 2, 4096};
    alloc_probe::Window window;
    run_proxnf(cfg, field, meas, prob.ops);
    return window.peak_extra();
  };
  const long long small = peak_for(128);
  const long long large = peak_for(512);
  const long long mj = 64LL * 64 * batch * 8;
  const long long mk_large = 64LL * 64 * 512 * 8;
  INFO("peak K=128 " << small << " B, K=512 " << large << " B, M*J doubles " << mj << " B");
  CHECK(large < small + mj / 2);
  CHECK(large < 8 * mj);
  CHECK(large < mk_large / 2);
  CHECK(small >= mj);
}
