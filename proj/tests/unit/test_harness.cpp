#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

#include "stale_lab/harness.hpp"

using namespace stale_lab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stale_lab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json minimal_config() {
  return json::parse(R"({
    "version": 1,
    "method": "adam",
    "objective": {"kind": "quadratic", "dim": 6, "noise_std": 0.05, "batch_size": 4},
    "workers": 2, "inner_steps": 2, "rounds": 25,
    "delay": {"kind": "fixed", "tau": 0},
    "seed": 3
  })");
}

json small_sweep() {
  return json::parse(R"({
    "version": 1,
    "name": "unit",
    "base": {"objective": {"kind": "quadratic", "dim": 4, "batch_size": 2},
             "workers": 2, "inner_steps": 1, "rounds": 6},
    "methods": ["cgad", "nesterov"],
    "method_overrides": {"nesterov": {"eta": 0.1}},
    "delays": [{"kind": "fixed", "tau": 0}, {"kind": "fixed", "tau": 2}],
    "seeds": [0, 1, 2]
  })");
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = run_config_from_json(minimal_config());
  CHECK(cfg.outer.method == Method::adam);
  CHECK(cfg.outer.gate.alpha == 0.0);
  CHECK(cfg.workers == 2);
  CHECK(cfg.objective.dim == 6);

  SUBCASE("beta1 = 1 names the field") {
    auto j = minimal_config();
    j["outer"] = {{"beta1", 1.0}};
    try {
      run_config_from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      REQUIRE(e.errors().size() == 1);
      CHECK(e.errors()[0].find("outer.beta1") != std::string::npos);
    }
  }
  SUBCASE("unknown keys are errors") {
    auto j = minimal_config();
    j["worker"] = 3;
    j["objective"]["dims"] = 3;
    try {
      run_config_from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.errors().size() == 2);
    }
  }
  SUBCASE("version is required") {
    auto j = minimal_config();
    j.erase("version");
    CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
    j["version"] = 2;
    CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  }
  SUBCASE("infinite cutoff") {
    auto j = minimal_config();
    j["method"] = "cgad";
    j["outer"] = {{"tau_cut", "inf"}};
    CHECK(run_config_from_json(j).outer.gate.tau_cut == kNoCutoff);
  }
  SUBCASE("round trip") {
    CHECK(run_config_from_json(to_json(cfg)).outer.eta == cfg.outer.eta);
    CHECK(canonical_json(run_config_from_json(to_json(cfg))) == canonical_json(cfg));
  }
}

TEST_CASE("config hash ignores key order and whitespace") {
  const std::string a = R"({"version":1,"method":"cgad","seed":4,"rounds":10,
      "objective":{"kind":"quadratic","dim":5}})";
  const std::string b = R"({
      "objective" : { "dim" : 5 , "kind" : "quadratic" },
      "rounds": 10,   "seed": 4,
      "method": "cgad", "version": 1 })";
  const auto ca = run_config_from_json(json::parse(a));
  const auto cb = run_config_from_json(json::parse(b));
  CHECK(config_hash(ca) == config_hash(cb));
  CHECK(config_hash(ca).size() == 16);
  auto cc = ca;
  cc.seed = 5;
  CHECK(config_hash(cc) != config_hash(ca));
}

TEST_CASE("run results are byte-identical and self-describing") {
  const auto dir = scratch_dir("run");
  const auto cfg = run_config_from_json(minimal_config());
  const auto p1 = write_result(execute_run(cfg), dir / "a");
  const auto p2 = write_result(execute_run(cfg), dir / "b");
  CHECK(p1.filename() == p2.filename());
  CHECK(p1.filename().string() == result_filename(cfg));
  CHECK(slurp(p1) == slurp(p2));

  const json doc = json::parse(slurp(p1));
  CHECK(doc["schema_version"] == kResultSchemaVersion);
  CHECK(doc["config_hash"] == config_hash(cfg));
  CHECK(run_config_from_json(doc["config"]).seed == cfg.seed);
  CHECK(doc["losses"].size() == 25);
  CHECK(doc["final_loss"].get<double>() < doc["initial_loss"].get<double>());
  CHECK(doc["diverged"] == false);
  CHECK(doc["theory"]["step_bound_violations"] == 0);
  fs::remove_all(dir);
}

TEST_CASE("non-finite values serialize as null") {
  auto cfg = run_config_from_json(minimal_config());
  cfg.outer = OuterConfig::defaults(Method::nesterov);
  cfg.outer.eta = 1e300;
  const auto out = execute_run(cfg);
  CHECK(out.result.diverged);
  const std::string text = serialize_document(out.document);
  CHECK(text.find("NaN") == std::string::npos);
  CHECK(json::parse(text)["diverged"] == true);
}

TEST_CASE("mean and std") {
  const auto [mean, sd] = mean_and_std({1.0, 2.0, 4.0});
  CHECK(mean == doctest::Approx(2.3333333333333335).epsilon(1e-15));
  CHECK(sd == doctest::Approx(1.5275252316519468).epsilon(1e-15));
  CHECK(mean_and_std({3.0}).second == 0.0);
  CHECK(std::isnan(mean_and_std({}).first));
}

TEST_CASE("sweep expansion") {
  const auto spec = sweep_spec_from_json(small_sweep());
  const auto cells = expand_sweep(spec);
  REQUIRE(cells.size() == 12);
  CHECK(cells[0].method == "cgad");
  CHECK(cells[0].config.outer.eta == 1e-3);
  CHECK(cells[6].method == "nesterov");
  CHECK(cells[6].config.outer.eta == 0.1);
  CHECK(cells[6].config.outer.mu == 0.9);
  CHECK(cells[3].schedule == "tau=2");

  auto with_grid = small_sweep();
  with_grid["grid"] = {{"alpha", {0.1, 0.2}}, {"gate_placement", {"before", "after"}}};
  const auto grid_cells = expand_sweep(sweep_spec_from_json(with_grid));
  CHECK(grid_cells.size() == 48);
  CHECK(grid_cells[0].variant == "alpha=0.1 placement=before");

  auto bad = small_sweep();
  bad["base"]["seed"] = 3;
  bad["grid"] = {{"lr", {0.1}}};
  try {
    sweep_spec_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.errors().size() == 2);
  }

  auto invalid_cell = small_sweep();
  invalid_cell["method_overrides"] = {{"nesterov", {{"mu", 1.5}}}};
  CHECK_THROWS_AS(expand_sweep(sweep_spec_from_json(invalid_cell)), ConfigError);
}

TEST_CASE("sweep runs, summarizes and resumes") {
  const auto dir = scratch_dir("sweep");
  const auto spec = sweep_spec_from_json(small_sweep());
  const auto report = run_sweep(spec, dir, 3);
  CHECK(report.cells == 12);
  CHECK(report.ran == 12);
  CHECK(report.failures.empty());
  REQUIRE(report.rows.size() == 4);

  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().filename().string().find("_s") != std::string::npos) ++files;
  }
  CHECK(files == 12);
  CHECK(fs::exists(dir / "summary.csv"));
  CHECK(fs::exists(dir / "summary.txt"));

  // Summary is reproducible from the files alone.
  const auto cells = expand_sweep(spec);
  std::vector<double> finals;
  for (std::size_t i = 0; i < 3; ++i) {
    finals.push_back(json::parse(slurp(dir / result_filename(cells[i].config)))["final_loss"].get<double>());
  }
  const auto [mean, sd] = mean_and_std(finals);
  CHECK(report.rows[0].mean == mean);
  CHECK(report.rows[0].stddev == sd);
  CHECK(summarize(cells, dir)[1].mean == report.rows[1].mean);

  const std::string kept = slurp(dir / result_filename(cells[1].config));
  fs::remove(dir / result_filename(cells[4].config));
  const auto again = run_sweep(spec, dir, 2);
  CHECK(again.ran == 1);
  CHECK(again.skipped == 11);
  CHECK(fs::exists(dir / result_filename(cells[4].config)));
  CHECK(slurp(dir / result_filename(cells[1].config)) == kept);

  fs::remove(dir / result_filename(cells[7].config));
  const auto partial = summarize(cells, dir);
  CHECK(partial[2].completed == 2);
  std::ostringstream table;
  write_summary_table(partial, table);
  CHECK(table.str().find("missing 1/3") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("summary marks divergence from the stored flag") {
  std::vector<SummaryRow> rows(1);
  rows[0].method = "nesterov";
  rows[0].schedule = "tau=16";
  rows[0].expected = rows[0].completed = 3;
  rows[0].diverged = 2;
  rows[0].finite = 1;
  rows[0].mean = 4.0;
  std::ostringstream table, csv;
  write_summary_table(rows, table);
  write_summary_csv(rows, csv);
  CHECK(table.str().find("DIVERGED 2/3") != std::string::npos);
  CHECK(csv.str().starts_with("method,schedule,variant,expected,completed,diverged"));
  CHECK(csv.str().find("nesterov,tau=16,\"\",3,3,2,1,4,0") != std::string::npos);
}

TEST_CASE("jobs from the environment") {
  ::unsetenv("STALE_LAB_JOBS");
  CHECK(jobs_from_env(3) == 3);
  ::setenv("STALE_LAB_JOBS", "5", 1);
  CHECK(jobs_from_env(3) == 5);
  ::setenv("STALE_LAB_JOBS", "zero", 1);
  CHECK(jobs_from_env(3) == 3);
  ::setenv("STALE_LAB_JOBS", "0", 1);
  CHECK(jobs_from_env(2) == 2);
  ::unsetenv("STALE_LAB_JOBS");
}

TEST_CASE("gate table") {
  const StalenessGate g{0.2, 32.0};
  const auto rows = gate_table(g, 0, 40);
  REQUIRE(rows.size() == 41);
  CHECK(rows[0].gamma == 1.0);
  CHECK(rows[0].decay == 1.0);
  CHECK(rows[0].sigma == 1.0);
  CHECK(rows[0].tau_sigma == 0.0);
  CHECK(rows[32].sigma == 0.0);
  for (const auto& r : rows) CHECK(r.running_max <= tau_decay_peak(0.2));
  std::ostringstream csv;
  write_gate_csv(rows, g, csv);
  CHECK(csv.str().starts_with("tau,gamma,decay,sigma,tau_sigma,running_max,peak_reference\n"));
  CHECK_THROWS(gate_table(g, 5, 2));
}

#ifdef STALE_LAB_CLI
TEST_CASE("command line") {
  const auto dir = scratch_dir("cli");
  const std::string cli = STALE_LAB_CLI;
  {
    std::ofstream(dir / "cfg.json") << minimal_config().dump(2);
    auto bad = minimal_config();
    bad["outer"] = {{"beta1", 1.0}};
    std::ofstream(dir / "bad.json") << bad.dump();
    std::ofstream(dir / "sweep.json") << small_sweep().dump();
  }
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > " + (dir / "out.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(run("run --config " + (dir / "cfg.json").string() + " --out " + (dir / "r1").string()) == 0);
  CHECK(run("run --config " + (dir / "cfg.json").string() + " --out " + (dir / "r2").string()) == 0);
  const auto cfg = run_config_from_json(minimal_config());
  CHECK(slurp(dir / "r1" / result_filename(cfg)) == slurp(dir / "r2" / result_filename(cfg)));

  CHECK(run("run --config " + (dir / "cfg.json").string() + " --seed-override 9 --out " +
            (dir / "r3").string()) == 0);
  auto seeded = cfg;
  seeded.seed = 9;
  CHECK(fs::exists(dir / "r3" / result_filename(seeded)));

  CHECK(run("run --config " + (dir / "bad.json").string() + " --out " + (dir / "r4").string()) == 2);
  CHECK(slurp(dir / "out.txt").find("outer.beta1") != std::string::npos);

  CHECK(run("sweep --sweep " + (dir / "sweep.json").string() + " --jobs 2 --out " + (dir / "s").string()) == 0);
  CHECK(fs::exists(dir / "s" / "summary.csv"));

  CHECK(run("gate-table --alpha 0.2 --tau-cut 32 --tau-max 40 --csv " + (dir / "gate.csv").string()) == 0);
  CHECK(slurp(dir / "out.txt").find("1/(e*alpha)") != std::string::npos);
  CHECK(fs::exists(dir / "gate.csv"));
  CHECK(run("gate-table --tau-cut nope") == 2);

  CHECK(run("bogus") != 0);
  fs::remove_all(dir);
}
#endif
