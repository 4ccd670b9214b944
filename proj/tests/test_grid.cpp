#include <catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "nfrecon/blob_io.hpp"
#include "nfrecon/grid.hpp"

using namespace nfrecon;
using Catch::Matchers::WithinRel;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nfrecon_grid_" + name);
}

}  // namespace

TEST_CASE("grid geometry") {
  const SpacetimeGrid g(4, 1.0, 5, 10.0);
  CHECK(g.pixels() == 16);
  CHECK(g.frame_time(0) == 0.0);
  CHECK_THAT(g.frame_time(4), WithinRel(10.0 - 2.0, 1e-15));
  CHECK_THAT(g.voxel_volume(), WithinRel(0.25 * 0.25 * 2.0, 1e-15));
  // m = ix * side + iy, y fastest
  CHECK_THAT(g.pixel_center(0).x, WithinRel(-0.375, 1e-15));
  CHECK_THAT(g.pixel_center(1).y, WithinRel(-0.125, 1e-15));
  CHECK_THAT(g.pixel_center(4).x, WithinRel(-0.125, 1e-15));
  for (const auto& c : g.pixel_centers()) {
    CHECK(std::abs(c.x) <= 0.5);
    CHECK(std::abs(c.y) <= 0.5);
  }
  CHECK(g.pixel_at({0.6, 0.0}) == std::nullopt);
  CHECK(g.frame_at(-1.0) == std::nullopt);
  CHECK(g.frame_at(2.9) == 1);
  CHECK_THROWS_AS(SpacetimeGrid(0, 1.0, 1, 1.0), Error);
  CHECK_THROWS_AS(SpacetimeGrid(4, -1.0, 1, 1.0), Error);
}

TEST_CASE("grid construction is deterministic") {
  const SpacetimeGrid a(37, 3.72, 3, 648.0);
  const SpacetimeGrid b(37, 3.72, 3, 648.0);
  const auto ca = a.pixel_centers();
  const auto cb = b.pixel_centers();
  REQUIRE(ca.size() == cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) {
    CHECK(std::memcmp(&ca[i], &cb[i], sizeof(Point2)) == 0);
  }
}

TEST_CASE("project") {
  SECTION("constant object") {
    const SpacetimeGrid g(5, 2.0, 3, 3.0);
    const auto s = project(g, [](double, double, double) { return 2.5; });
    CHECK((s.coeffs.array() == 2.5).all());
  }
  SECTION("x coordinate on 4x4, L = 1") {
    const SpacetimeGrid g(4, 1.0, 2, 1.0);
    const auto s = project(g, [](double x, double, double) { return x; });
    for (int ix = 0; ix < 4; ++ix) {
      for (int iy = 0; iy < 4; ++iy) {
        const double expect = -0.5 + (ix + 0.5) * 0.25;
        CHECK(s.coeffs(ix * 4 + iy, 0) == expect);
        CHECK(s.coeffs(ix * 4 + iy, 1) == expect);
      }
    }
  }
  SECTION("non-finite values name the voxel") {
    const SpacetimeGrid g(2, 1.0, 2, 1.0);
    try {
      project(g, [](double x, double y, double t) { return (x > 0 && y > 0 && t > 0) ? NAN : 0.0; });
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "non_finite_object");
      CHECK(std::string(e.what()).find("pixel 3, frame 1") != std::string::npos);
    }
  }
}

TEST_CASE("adjoint embedding") {
  const SpacetimeGrid g(8, 2.0, 4, 8.0);
  SECTION("zero stack") {
    const auto f = adjoint_embed(ImageStack(g));
    CHECK(f(0.1, 0.2, 1.0) == 0.0);
  }
  SECTION("unit entry") {
    ImageStack s(g);
    s.coeffs(9, 2) = 1.0;
    const auto f = adjoint_embed(s);
    const Point2 c = g.pixel_center(9);
    CHECK_THAT(f(c.x, c.y, 4.3), WithinRel(1.0 / g.voxel_volume(), 1e-15));
    CHECK(f(c.x, c.y, 2.0) == 0.0);
    CHECK(f(c.x + 0.25, c.y, 4.0) == 0.0);
    CHECK(f(5.0, 5.0, 4.0) == 0.0);
    CHECK(f(c.x, c.y, -1.0) == 0.0);
  }
  SECTION("project after embed is the identity") {
    const ImageStack s(g, random_matrix(g.pixels(), g.frames(), 3));
    const auto back = project(g, [&](double x, double y, double t) {
      return adjoint_embed(s)(x, y, t) * g.voxel_volume();
    });
    CHECK((back.coeffs - s.coeffs).norm() <= 1e-12 * s.coeffs.norm());
  }
  SECTION("inner products of embeddings") {
    const ImageStack a(g, random_matrix(g.pixels(), g.frames(), 4));
    const ImageStack b(g, random_matrix(g.pixels(), g.frames(), 5));
    const auto fa = adjoint_embed(a);
    const auto fb = adjoint_embed(b);
    // (Pi* a, Pi* b) in L2 by midpoint quadrature, exact for piecewise constants.
    double quad = 0.0;
    for (int k = 0; k < g.frames(); ++k) {
      for (int m = 0; m < g.pixels(); ++m) {
        const Point2 c = g.pixel_center(m);
        quad += fa(c.x, c.y, g.frame_time(k)) * fb(c.x, c.y, g.frame_time(k)) * g.voxel_volume();
      }
    }
    double direct = 0.0;
    for (int k = 0; k < g.frames(); ++k) {
      for (int m = 0; m < g.pixels(); ++m) direct += a.coeffs(m, k) * b.coeffs(m, k) / g.voxel_volume();
    }
    CHECK_THAT(quad, WithinRel(direct, 1e-12));
  }
}

TEST_CASE("inner product") {
  const SpacetimeGrid g(2, 2.0, 2, 2.0);
  ImageStack ones(g);
  ones.coeffs.setOnes();
  CHECK_THAT(inner_product(ones, ones), WithinRel(8.0, 1e-15));
  ImageStack e1(g), e2(g);
  e1.coeffs(0, 0) = 1.0;
  e2.coeffs(1, 0) = 1.0;
  CHECK(inner_product(e1, e2) == 0.0);

  const SpacetimeGrid h(8, 1.3, 4, 7.0);
  const ImageStack a(h, random_matrix(h.pixels(), h.frames(), 1));
  const ImageStack b(h, random_matrix(h.pixels(), h.frames(), 2));
  const auto fa = adjoint_embed(a);
  const auto fb = adjoint_embed(b);
  double quad = 0.0;
  for (int k = 0; k < h.frames(); ++k) {
    for (int m = 0; m < h.pixels(); ++m) {
      const Point2 c = h.pixel_center(m);
      quad += fa(c.x, c.y, h.frame_time(k)) * fb(c.x, c.y, h.frame_time(k));
    }
  }
  quad *= h.voxel_volume() * h.voxel_volume() * h.voxel_volume();
  CHECK_THAT(inner_product(a, b), WithinRel(quad, 1e-12));
  CHECK_THAT(inner_product(a, b), WithinRel(inner_product(b, a), 1e-15));
  CHECK(inner_product(a, a) > 0.0);
  CHECK_THROWS_AS(inner_product(a, ImageStack(g)), Error);
}

TEST_CASE("stack files roundtrip bit-exactly") {
  const SpacetimeGrid g(6, 3.72, 3, 648.0);
  const ImageStack s(g, random_matrix(g.pixels(), g.frames(), 9));
  const auto p = temp_path("stack.stk");
  write_stack(p, s);
  const ImageStack r = read_stack(p);
  CHECK(r.grid == g);
  CHECK(std::memcmp(r.coeffs.data(), s.coeffs.data(), sizeof(double) * s.coeffs.size()) == 0);

  std::ifstream in(p, std::ios::binary);
  std::string first;
  std::getline(in, first);
  std::string header(static_cast<std::size_t>(std::stoul(first)), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  const auto doc = nlohmann::json::parse(header);
  CHECK(doc.at("magic") == "stk1");
  CHECK(doc.at("dtype") == "f64le");
  CHECK(doc.at("M_s") == 6);
  CHECK(doc.at("K") == 3);
}

TEST_CASE("bad files are rejected") {
  const auto p = temp_path("bad.stk");
  write_blob(p, {{"magic", "msr1"}}, std::vector<double>{1.0});
  try {
    read_stack(p);
    FAIL("expected bad_magic");
  } catch (const Error& e) {
    CHECK(e.code() == "bad_magic");
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  {
    std::ofstream out(p, std::ios::binary);
    out << "garbage";
  }
  try {
    read_stack(p);
    FAIL("expected malformed_file");
  } catch (const Error& e) {
    CHECK(e.code() == "malformed_file");
  }
  const SpacetimeGrid g(2, 1.0, 2, 1.0);
  write_blob(p, {{"magic", "stk1"}, {"M_s", 2}, {"K", 2}, {"L_cm", 1.0}, {"T_s", 1.0}}, std::vector<double>{1.0});
  CHECK_THROWS_AS(read_stack(p), Error);
}

TEST_CASE("roi files") {
  const SpacetimeGrid g(8, 1.0, 1, 1.0);
  RoiMask roi{{3, 4, 11}, 2};
  roi.validate(g);
  const auto p = temp_path("roi.json");
  write_roi(p, roi, g);
  const RoiMask back = read_roi(p);
  CHECK(back.pixels == roi.pixels);
  CHECK(back.dilation_px == 2);
  write_json(p, nlohmann::json::array({1, 2}));
  CHECK(read_roi(p).pixels == std::vector<int>{1, 2});
  CHECK_THROWS_AS(RoiMask{}.validate(g), Error);
  CHECK_THROWS_AS((RoiMask{{64}, 0}.validate(g)), Error);
}
