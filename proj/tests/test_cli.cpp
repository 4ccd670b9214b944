#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "nfrecon_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& args) {
  const fs::path err = workdir() / "stderr.txt";
  const std::string cmd = std::string(NFRECON_CLI) + " " + args + " 2> " + err.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::array<char, 4096> buf{};
  while (const std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.err = slurp(err);
  return r;
}

// Magic field of a length-prefixed blob header.
std::string magic_of(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  const std::size_t len = std::stoul(bytes.substr(0, nl));
  return json::parse(bytes.substr(nl + 1, len)).at("magic");
}

std::string config() { return std::string("--config ") + NFRECON_SOURCE_DIR + "/configs/tiny.json"; }

std::string path(const char* name) { return (workdir() / name).string(); }

// Writes the tiny phantom and its ROI once.
void ensure_phantom() {
  if (fs::exists(path("truth.stk"))) return;
  const Run r = run("phantom " + config() + " --out " + path("truth.stk") + " --roi " + path("roi.json"));
  REQUIRE(r.status == 0);
}

}  // namespace

TEST_CASE("phantom echoes the resolved config") {
  ensure_phantom();
  const Run r = run("phantom " + config() + " --seed 11 --out " + path("p11.stk"));
  REQUIRE(r.status == 0);
  const json echo = json::parse(r.out.substr(0, r.out.find('\n')));
  CHECK(echo.at("command") == "phantom");
  CHECK(echo.at("seed") == 11);
  CHECK(echo.at("config").at("grid").at("side_pixels") == 16);
  CHECK(magic_of(slurp(path("p11.stk"))) == "stk1");
  CHECK(json::parse(slurp(path("roi.json"))).contains("pixels"));
}

TEST_CASE("evaluate on identical stacks") {
  ensure_phantom();
  const Run r = run("evaluate --est " + path("truth.stk") + " --truth " + path("truth.stk") + " --roi " +
                    path("roi.json") + " --out " + path("same.json") + " --frames-csv " + path("same.csv"));
  REQUIRE(r.status == 0);
  const json m = json::parse(slurp(path("same.json")));
  CHECK(m.at("rrmse") == 0.0);
  CHECK(std::abs(m.at("ssim").get<double>() - 1.0) < 1e-12);
  CHECK(m.at("lac_rrmse") == 0.0);
  CHECK(slurp(path("same.csv")).rfind("frame,rrmse\n", 0) == 0);
}

TEST_CASE("simulate is deterministic and the stack survives file I/O") {
  ensure_phantom();
  REQUIRE(run("simulate " + config() + " --stack " + path("truth.stk") + " --out " + path("a.msr")).status == 0);
  REQUIRE(run("simulate " + config() + " --stack " + path("truth.stk") + " --out " + path("b.msr")).status == 0);
  CHECK(slurp(path("a.msr")) == slurp(path("b.msr")));
  CHECK(magic_of(slurp(path("a.msr"))) == "msr1");
  REQUIRE(run("simulate " + config() + " --seed 8 --stack " + path("truth.stk") + " --out " + path("c.msr")).status == 0);
  CHECK(slurp(path("a.msr")) != slurp(path("c.msr")));
  const Run again = run("phantom " + config() + " --out " + path("truth2.stk"));
  REQUIRE(again.status == 0);
  CHECK(slurp(path("truth.stk")) == slurp(path("truth2.stk")));
}

TEST_CASE("reconstructions write their outputs") {
  ensure_phantom();
  REQUIRE(run("simulate " + config() + " --stack " + path("truth.stk") + " --out " + path("m.msr")).status == 0);
  const std::string common = config() + " --measurements " + path("m.msr") + " --truth " + path("truth.stk") +
                             " --roi " + path("roi.json");
  SECTION("proxnf") {
    const Run r = run("reconstruct-proxnf " + common + " --out-dir " + path("prox"));
    REQUIRE(r.status == 0);
    for (const char* f : {"field.pou", "recon.stk", "trace.csv", "timing.csv", "metrics.json", "frames.csv"}) {
      CHECK(fs::exists(workdir() / "prox" / f));
    }
    CHECK(magic_of(slurp(workdir() / "prox" / "field.pou")) == "pou1");
    const Run r2 = run("reconstruct-proxnf " + common + " --out-dir " + path("prox2"));
    REQUIRE(r2.status == 0);
    for (const char* f : {"field.pou", "recon.stk", "trace.csv"}) {
      CHECK(slurp(workdir() / "prox" / f) == slurp(workdir() / "prox2" / f));
    }
  }
  SECTION("nn") {
    const Run r = run("reconstruct-nn " + common + " --lambda 10 --out-dir " + path("nn"));
    REQUIRE(r.status == 0);
    CHECK(fs::exists(workdir() / "nn" / "recon.stk"));
    CHECK(slurp(workdir() / "nn" / "trace.csv").rfind("iteration,objective\n", 0) == 0);
  }
  SECTION("sweep") {
    const Run r = run("sweep-reg " + config() + " --measurements " + path("m.msr") + " --method nn --out " +
                      path("sweep.json"));
    REQUIRE(r.status == 0);
    const json rep = json::parse(slurp(path("sweep.json")));
    CHECK(rep.at("table").size() == 2);
    CHECK(rep.contains("chosen_lambda"));
  }
  SECTION("embed") {
    const Run r = run("embed " + config() + " --stack " + path("truth.stk") + " --out " + path("emb.pou") +
                      " --render " + path("emb.stk"));
    REQUIRE(r.status == 0);
    CHECK(fs::exists(path("emb.stk")));
  }
}

TEST_CASE("errors are reported as JSON") {
  SECTION("unknown subcommand") {
    const Run r = run("frobnicate");
    CHECK(r.status != 0);
    CHECK(json::parse(r.err).contains("error"));
  }
  SECTION("bad magic") {
    ensure_phantom();
    REQUIRE(run("simulate " + config() + " --stack " + path("truth.stk") + " --out " + path("wrong.msr")).status == 0);
    const Run r = run("evaluate --est " + path("wrong.msr") + " --truth " + path("truth.stk") + " --roi " +
                      path("roi.json") + " --out " + path("junk.json"));
    CHECK(r.status != 0);
    const json e = json::parse(r.err);
    CHECK(e.at("error") == "bad_magic");
    CHECK(e.at("message").get<std::string>().find("offset") != std::string::npos);
  }
  SECTION("garbage file") {
    ensure_phantom();
    std::ofstream(path("junk.stk"), std::ios::binary) << "junkjunkjunkjunk";
    const Run r = run("evaluate --est " + path("junk.stk") + " --truth " + path("junk.stk") + " --roi " +
                      path("roi.json") + " --out " + path("junk.json"));
    CHECK(r.status != 0);
    CHECK(json::parse(r.err).at("error") == "malformed_file");
  }
  SECTION("missing file") {
    const Run r = run("evaluate --est " + path("nope.stk") + " --truth " + path("nope.stk") + " --roi " +
                      path("roi.json") + " --out " + path("x.json"));
    CHECK(r.status != 0);
    CHECK(json::parse(r.err).contains("message"));
  }
}
