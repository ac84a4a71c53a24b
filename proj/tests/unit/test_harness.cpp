#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "latecover/harness.hpp"

using namespace latecover;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("latecover_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliResult {
  int code;
  std::string out;
};

CliResult run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "latecover_test_cli_stdout.txt";
  const std::string cmd = std::string("\"") + LATECOVER_CLI + "\" " + args + " >\"" + out.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = parse_config(
      "# comment\n"
      "experiment = demo\n"
      "statistic = cover_time   # trailing comment\n"
      "n = 6\n"
      "alpha = 0.2, 0.5\n"
      "flavor = ball_in_ball\n"
      "t_star = 1000\n");
  REQUIRE(c.experiment == "demo");
  REQUIRE(c.statistic == "cover_time");
  REQUIRE(c.n == 6);
  REQUIRE(c.alphas == std::vector<double>{0.2, 0.5});
  REQUIRE(c.flavor == Flavor::ball_in_ball);
  REQUIRE(c.t_star == 1000.0);
  REQUIRE_THROWS_AS(parse_config("colour = red\n"), ValidationError);
  REQUIRE_THROWS_AS(parse_config("n = six\n"), ValidationError);
  REQUIRE_THROWS_AS(parse_config("replicas = -3\n"), ValidationError);
  REQUIRE_THROWS_AS(parse_config("just words\n"), ValidationError);
}

TEST_CASE("config hash ignores output location and job count") {
  auto a = parse_config("statistic = cover_time\nn = 5\n");
  auto b = a;
  b.out = "/somewhere/else";
  b.jobs = 7;
  REQUIRE(config_hash(a) == config_hash(b));
  b.seed = 2;
  REQUIRE(config_hash(a) != config_hash(b));
  REQUIRE(config_hash(a).size() == 16);
}

TEST_CASE("unknown statistic and invalid parameters are rejected up front") {
  auto c = parse_config("statistic = nonsense\n");
  try {
    run_experiment(c);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    REQUIRE(std::string(e.what()).find("unknown statistic id 'nonsense'") != std::string::npos);
  }
  REQUIRE_THROWS_AS(run_experiment(parse_config("statistic = cover_time\nn = 1\n")), ValidationError);
  REQUIRE_THROWS_AS(run_experiment(parse_config("statistic = concentration\ndelta = 1.5\n")), ValidationError);
  REQUIRE_THROWS_AS(run_experiment(parse_config("statistic = distinguish\nn = 12\nalpha = 0.4\nepsilon = 0.9\n")),
                    ValidationError);
}

TEST_CASE("zero replicas give an empty but valid record") {
  const auto rec = run_experiment(parse_config("statistic = cover_time\nn = 4\nreplicas = 0\n"));
  REQUIRE(rec.rows.empty());
  REQUIRE(rec.aggregates.empty());
  const auto dir = scratch("empty");
  const auto files = write_results(rec, dir);
  REQUIRE(files.size() == 3);
  REQUIRE(slurp(dir / "results.csv") == "experiment,n,d,replica,statistic,value\n");
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  REQUIRE(m["schema"] == "latecover.manifest/1");
  REQUIRE(m["config_hash"] == rec.hash);
  REQUIRE(nlohmann::json::parse(slurp(dir / "results.json"))["schema"] == "latecover.results/1");
}

TEST_CASE("results are identical across job counts") {
  auto c = parse_config("experiment = cov\nstatistic = cover_time\nn = 4\nreplicas = 40\nseed = 9\n");
  c.jobs = 1;
  const auto one = run_experiment(c);
  c.jobs = 4;
  const auto four = run_experiment(c);
  REQUIRE(results_csv(one) == results_csv(four));
  REQUIRE(one.hash == four.hash);
  // Cover time of Z_4^3 is at least n^d - 1.
  for (const auto& r : one.rows) REQUIRE(r.value >= 63);
}

TEST_CASE("aggregates do not depend on row order") {
  std::vector<ResultRow> rows;
  for (std::size_t i = 0; i < 50; ++i) {
    rows.push_back({i, "a", static_cast<double>(i * i % 17)});
    rows.push_back({i, "b", 0.1 * static_cast<double>(i)});
  }
  const auto base = aggregate_rows(rows);
  std::mt19937 gen(4);
  std::shuffle(rows.begin(), rows.end(), gen);
  const auto shuffled = aggregate_rows(rows);
  REQUIRE(base.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    REQUIRE(base[k].statistic == shuffled[k].statistic);
    REQUIRE(base[k].estimate.value == shuffled[k].estimate.value);
    REQUIRE(base[k].estimate.std_error == shuffled[k].estimate.std_error);
  }
}

TEST_CASE("statistics produce the documented rows") {
  const auto u = run_experiment(parse_config("statistic = uncovered\nn = 6\nreplicas = 3\nalpha = 0.3,0.6\nt_star = 2000\n"));
  std::set<std::string> names;
  for (const auto& r : u.rows) names.insert(r.statistic);
  for (const char* s : {"U_size@alpha=0.3", "Z_gamma@alpha=0.6", "Z_positive@alpha=0.3", "W@alpha=0.6"}) REQUIRE(names.count(s));
  const auto uni = run_experiment(parse_config("statistic = uniformity\nn = 12\ngamma = 0.5\ntargets = 4\nreplicas = 200\n"));
  REQUIRE(uni.extra["uniformity"]["counts"].size() == 4);
  const auto h = run_experiment(parse_config("statistic = hitting_time\nn = 4\nreplicas = 20\n"));
  REQUIRE(h.aggregates.front().statistic == "hit_time");
}

TEST_CASE("report over result directories") {
  const auto empty = scratch("report_empty");
  const auto t0 = build_report(empty);
  REQUIRE(t0.files == 0);
  REQUIRE(t0.scaling == "experiment,statistic,n,d,samples,mean,std_error\n");
  const auto dir = scratch("report");
  for (int n : {4, 6}) {
    auto c = parse_config("experiment = hit\nstatistic = hitting_time\nreplicas = 30\n");
    c.n = n;
    write_results(run_experiment(c), dir / ("n" + std::to_string(n)));
  }
  const auto t = build_report(dir);
  REQUIRE(t.files == 2);
  REQUIRE(t.slopes.find("hit_time,3,2,") != std::string::npos);
  write_report(t, dir / "report");
  REQUIRE(fs::exists(dir / "report" / "scaling.csv"));
  REQUIRE(fs::exists(dir / "report" / "exceedance.csv"));
}

TEST_CASE("command-line exit codes and outputs") {
  const auto cons = run_cli("constants --d 3");
  REQUIRE(cons.code == 0);
  const auto j = nlohmann::json::parse(cons.out);
  REQUIRE(j["p_d"].get<double>() == Approx(0.34).margin(0.01));
  REQUIRE(run_cli("constants --d 2").code == 2);
  REQUIRE(run_cli("no-such-command").code == 2);
  REQUIRE(run_cli("simulate --config /nonexistent/file.conf").code == 2);
  const auto dir = scratch("cli");
  {
    std::ofstream f(dir / "bad.conf");
    f << "statistic = cover_time\nwibble = 1\n";
  }
  REQUIRE(run_cli("simulate --config \"" + (dir / "bad.conf").string() + "\"").code == 2);
  {
    std::ofstream f(dir / "ok.conf");
    f << "experiment = cli\nstatistic = cover_time\nn = 4\nreplicas = 5\n";
  }
  const auto ok = run_cli("simulate --config \"" + (dir / "ok.conf").string() + "\" --out \"" + (dir / "res").string() + "\"");
  REQUIRE(ok.code == 0);
  REQUIRE(fs::exists(dir / "res" / "results.csv"));
  const auto first = slurp(dir / "res" / "results.csv");
  REQUIRE(run_cli("simulate --config \"" + (dir / "ok.conf").string() + "\" --jobs 1 --out \"" + (dir / "res2").string() + "\"").code == 0);
  REQUIRE(slurp(dir / "res2" / "results.csv") == first);
  REQUIRE(run_cli("report \"" + dir.string() + "\"").code == 0);
  REQUIRE(run_cli("excursions --n 16 --r 2 --R 6 --replicas 2 --t 5000").code == 0);
  REQUIRE(run_cli("excursions --n 8 --r 2 --R 6 --replicas 2").code == 2);
}
