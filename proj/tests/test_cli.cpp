#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowrecon/cli.hpp"
#include "flowrecon/error.hpp"

using namespace flowrecon;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowrecon");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("flowrecon_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmallDensity = R"(task = density2d
seed = 11
[problem]
phantom = two_blob
size = 16
[model]
steps = 1
hidden = 16
[optim]
steps = 150
batch_size = 32
learning_rate = 0.003
[eval]
samples = 200
k = 5
)";

}  // namespace

TEST_CASE("config text: sections, comments and duplicates") {
  auto m = cli::parse_config("# header\nseed = 4  # trailing\n[model]\nsteps=3\n\n[optim]\n lr_unused = x\n");
  CHECK(m.at("seed") == "4");
  CHECK(m.at("model.steps") == "3");
  CHECK(m.at("optim.lr_unused") == "x");
  CHECK_THROWS_AS(cli::parse_config("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(cli::parse_config("no equals sign\n"), ConfigError);
  CHECK(cli::parse_config(cli::format_config(m)) == m);
}

TEST_CASE("config resolution names bad fields") {
  cli::ConfigMap m{{"task", "density2d"}};
  try {
    cli::resolve_config(m);
    FAIL("missing seed accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'seed'") != std::string::npos);
  }
  m["seed"] = "1";
  m["model.steps"] = "two";
  try {
    cli::resolve_config(m);
    FAIL("bad model.steps accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.steps") != std::string::npos);
  }
  m.erase("model.steps");
  m["modle.steps"] = "2";
  CHECK_THROWS_AS(cli::resolve_config(m), ConfigError);
  m.erase("modle.steps");

  auto cfg = cli::resolve_config(m);
  CHECK(cfg.resolved.at("problem.phantom") == "two_blob");
  CHECK(cfg.resolved.at("model.output_shift") == "0.5");
  // The snapshot resolves to itself.
  CHECK(cli::resolve_config(cfg.resolved).resolved == cfg.resolved);
}

TEST_CASE("mri sigma defaults to one percent of the DC magnitude") {
  cli::ConfigMap m{{"task", "mri"}, {"seed", "2"}, {"problem.size", "16"}};
  auto cfg = cli::resolve_config(m);
  Image ring = make_phantom(PhantomKind::ring, 16);
  double sum = 0.0;
  for (double v : ring.data) sum += v;
  CHECK(cfg.problem.sigma == doctest::Approx(0.01 * sum / 16.0));
  auto built = cli::build_problem(cfg);
  CHECK(built.problem.y.size() == built.problem.op.output_size());
  CHECK(built.zero_filled.has_value());
}

TEST_CASE("run: missing seed, missing file and unknown key exit 2") {
  fs::path dir = scratch("errors");
  write(dir / "noseed.cfg", "task = density2d\n");
  auto r = run_cli({"run", (dir / "noseed.cfg").string()});
  CHECK(r.code == cli::kExitConfig);
  CHECK(r.err.find("seed") != std::string::npos);

  write(dir / "nofile.cfg", "task = density2d\nseed = 1\nproblem.image = missing.pgm\n");
  r = run_cli({"run", (dir / "nofile.cfg").string()});
  CHECK(r.code == cli::kExitConfig);
  CHECK(r.err.find((dir / "missing.pgm").string()) != std::string::npos);

  r = run_cli({"run", (dir / "absent.cfg").string()});
  CHECK(r.code == cli::kExitConfig);
  CHECK(r.err.find("absent.cfg") != std::string::npos);

  write(dir / "typo.cfg", "task = density2d\nseed = 1\noptim.stpes = 3\n");
  r = run_cli({"run", (dir / "typo.cfg").string()});
  CHECK(r.code == cli::kExitConfig);
  CHECK(r.err.find("optim.stpes") != std::string::npos);

  r = run_cli({"run", (dir / "typo.cfg").string(), "--scheme", "halton"});
  CHECK(r.code == cli::kExitConfig);
}

TEST_CASE("run: divergence exits 3 with the step") {
  fs::path dir = scratch("diverge");
  write(dir / "bad.cfg",
        "task = mri\nseed = 1\nproblem.size = 8\nmodel.steps = 1\nmodel.hidden = 4\n"
        "optim.steps = 50\noptim.batch_size = 4\noptim.learning_rate = 1e300\neval.samples = 4\n");
  auto r = run_cli({"run", (dir / "bad.cfg").string(), "--output", (dir / "out").string()});
  CHECK(r.code == cli::kExitNumeric);
  CHECK(r.err.find("step") != std::string::npos);
}

TEST_CASE("run: density2d artifacts are complete and reproducible") {
  fs::path dir = scratch("density");
  write(dir / "d.cfg", kSmallDensity);
  auto a = run_cli({"run", (dir / "d.cfg").string(), "--output", (dir / "a").string()});
  REQUIRE_MESSAGE(a.code == 0, a.err);
  for (const char* f : {"model.bin", "loss_history.csv", "samples.f32", "samples.json", "mean.pgm", "std.pgm",
                        "abserr.pgm", "mean.f32", "std.f32", "abserr.f32", "maps.json", "metrics.csv",
                        "config.resolved"}) {
    CHECK_MESSAGE(fs::exists(dir / "a" / f), f);
  }
  CHECK(fs::file_size(dir / "a" / "samples.f32") == 200 * 2 * 4);
  // No temporary files are left behind.
  for (const auto& e : fs::directory_iterator(dir / "a")) CHECK(e.path().extension() != ".tmp");

  auto b = run_cli({"run", (dir / "d.cfg").string(), "--output", (dir / "b").string()});
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a" / "samples.f32") == slurp(dir / "b" / "samples.f32"));
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));

  // Re-running from the snapshot reproduces the samples.
  auto c = run_cli({"run", (dir / "a" / "config.resolved").string(), "--output", (dir / "c").string()});
  REQUIRE_MESSAGE(c.code == 0, c.err);
  CHECK(slurp(dir / "a" / "samples.f32") == slurp(dir / "c" / "samples.f32"));

  std::string metrics = slurp(dir / "a" / "metrics.csv");
  CHECK(metrics.rfind("metric,value\n", 0) == 0);
  CHECK(metrics.find("\ncoverage,") != std::string::npos);

  // Ablation flags land in the snapshot.
  auto d = run_cli({"run", (dir / "d.cfg").string(), "--output", (dir / "d").string(), "--coupling", "spline",
                    "--scheme", "lhs", "--stages", "2", "--no-fd-penalty", "--set", "boost.stage_steps=20"});
  REQUIRE_MESSAGE(d.code == 0, d.err);
  auto snap = cli::parse_config(slurp(dir / "d" / "config.resolved"));
  CHECK(snap.at("model.coupling") == "spline");
  CHECK(snap.at("sampler.scheme") == "lhs");
  CHECK(snap.at("boost.stages") == "2");
  CHECK(snap.at("fd.weight") == "0");
}

TEST_CASE("design-study subcommand") {
  auto r = run_cli({"design-study", "--schemes", "SRS,LHS,LPSS,Sobol", "--n", "64", "--d", "2", "--replicates", "100"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "scheme,variance,ratio_to_srs");
  CHECK(rows[2].rfind("lhs,", 0) == 0);
  double lhs_ratio = std::stod(rows[2].substr(rows[2].rfind(',') + 1));
  CHECK(lhs_ratio < 1.0);

  CHECK(run_cli({"design-study", "--replicates", "29"}).code == cli::kExitConfig);
  CHECK(run_cli({"design-study", "--schemes", "srs,halton"}).code == cli::kExitConfig);
}

TEST_CASE("export-design subcommand") {
  auto r = run_cli({"export-design", "--scheme", "lhs", "--n", "4", "--d", "2", "--seed", "9"});
  REQUIRE(r.code == 0);
  auto m = matrix_from_csv(r.out);
  CHECK(r.out.rfind("dim0,dim1\n", 0) == 0);
  REQUIRE(m.rows == 4);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<int> seen(4, 0);
    for (std::size_t i = 0; i < 4; ++i) seen[static_cast<std::size_t>(m(i, c) * 4)]++;
    for (int s : seen) CHECK(s == 1);
  }
  CHECK(run_cli({"export-design", "--scheme", "lhs", "--n", "4", "--d", "2", "--seed", "9"}).out == r.out);

  auto s = run_cli({"export-design", "--scheme", "sobol", "--n", "4", "--d", "2"});
  CHECK(s.out == "dim0,dim1\n0,0\n0.5,0.5\n0.75,0.25\n0.25,0.75\n");

  CHECK(run_cli({"export-design", "--scheme", "lhs", "--n", "4"}).code == cli::kExitConfig);
}

TEST_CASE("bundled two-blob density config reaches coverage 0.7") {
  fs::path dir = scratch("two_blob");
  fs::path cfg = fs::path(FLOWRECON_SOURCE_DIR) / "configs" / "density2d_two_blob.cfg";
  auto r = run_cli({"run", cfg.string(), "--output", (dir / "out").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream in(slurp(dir / "out" / "metrics.csv"));
  std::string line;
  double coverage = -1.0;
  while (std::getline(in, line)) {
    if (line.rfind("coverage,", 0) == 0) coverage = std::stod(line.substr(9));
  }
  MESSAGE("coverage = " << coverage);
  CHECK(coverage >= 0.7);
}
