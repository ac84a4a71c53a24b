// Command-line front end for the experiment harness.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "latecover/harness.hpp"
#include "latecover/oracle.hpp"
#include "latecover/potential.hpp"

namespace fs = std::filesystem;
using namespace latecover;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> replicas;
  std::optional<unsigned> jobs;
  std::string out;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "experiment config file (key = value lines)");
  app->add_option("--seed", f.seed, "base seed");
  app->add_option("--replicas", f.replicas, "number of replicas");
  app->add_option("--jobs", f.jobs, "worker threads (default: all cores)");
  app->add_option("--out", f.out, "output directory");
}

ExperimentConfig base_config(const CommonFlags& f, const std::string& statistic) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (!statistic.empty()) {
    if (!f.config.empty() && !c.statistic.empty() && c.statistic != statistic)
      throw ValidationError("config statistic '" + c.statistic + "' does not match this subcommand ('" + statistic + "')");
    c.statistic = statistic;
  }
  if (f.seed) c.seed = *f.seed;
  if (f.replicas) c.replicas = *f.replicas;
  if (f.jobs) c.jobs = *f.jobs;
  if (!f.out.empty()) c.out = f.out;
  return c;
}

int emit(const ResultRecord& rec) {
  if (!rec.config.out.empty()) {
    for (const auto& p : write_results(rec, rec.config.out)) std::cerr << "wrote " << p.string() << '\n';
  }
  std::cout << results_json(rec).dump(2) << '\n';
  return 0;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

json point_json(const TorusGeometry& g, Site s) {
  const Point p = g.point(s);
  return std::vector<int>(p.c.begin(), p.c.begin() + p.dim);
}

/// Exact regression fixtures used by the test suite.
json oracle_fixtures() {
  json out = json::array();
  const std::string ts = timestamp();
  {
    const TorusGeometry g(16, 3);
    const ChainProblem p(g);
    const Site c = g.index(Point{8, 8, 8});
    const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 2, 6);
    const auto chain = exact_exit_chain(p, a);
    const double hit = exact_excursion_hit_probability(p, chain, a, {c});
    const Site c2 = g.index(Point{9, 8, 8});
    const double pair = exact_excursion_hit_probability(p, chain, a, {c, c2});
    out.push_back({{"problem", {{"kind", "excursion_hit_center"}, {"n", 16}, {"d", 3}, {"r", 2}, {"R", 6},
                                {"center", point_json(g, c)}, {"flavor", "ball_in_ball"}}},
                   {"value", hit}, {"residual", 0.0}, {"timestamp", ts}});
    out.push_back({{"problem", {{"kind", "excursion_hit_pair"}, {"n", 16}, {"d", 3}, {"r", 2}, {"R", 6},
                                {"sites", {point_json(g, c), point_json(g, c2)}}, {"flavor", "ball_in_ball"}}},
                   {"value", pair}, {"residual", 0.0}, {"timestamp", ts}});
    out.push_back({{"problem", {{"kind", "excursion_length"}, {"n", 16}, {"d", 3}, {"r", 2}, {"R", 6},
                                {"center", point_json(g, c)}, {"flavor", "ball_in_ball"}}},
                   {"value", chain.T}, {"residual", 0.0}, {"timestamp", ts}});
    const auto split = exact_hitting_probability(p, g.index(Point{8, 8, 11}), {c}, outer_boundary(g, ShapeSpec::ball(c, 6)));
    out.push_back({{"problem", {{"kind", "hit_before_exit"}, {"n", 16}, {"d", 3}, {"R", 6}, {"start", {8, 8, 11}},
                                {"target", point_json(g, c)}}},
                   {"value", split.total}, {"residual", split.residual}, {"timestamp", ts}});
  }
  for (int n : {4, 6, 8}) {
    const TorusGeometry g(n, 3);
    const ChainProblem p(g);
    out.push_back({{"problem", {{"kind", "stationary_hitting_time"}, {"n", n}, {"d", 3}, {"target", {0, 0, 0}}}},
                   {"value", exact_stationary_hitting_time(p, {0})}, {"residual", 0.0}, {"timestamp", ts}});
    const auto m = exact_expected_hitting_times(p, {0});
    const Site far = default_hit_starts(g).front();
    out.push_back({{"problem", {{"kind", "max_hitting_time"}, {"n", n}, {"d", 3}, {"start", point_json(g, far)},
                                {"target", {0, 0, 0}}}},
                   {"value", m[far]}, {"residual", 0.0}, {"timestamp", ts}});
  }
  {
    const TorusGeometry g(16, 3);
    const ChainProblem p(g);
    for (int k = 2; k <= 6; ++k) {
      const Site y = g.index(Point{k, 0, 0});
      out.push_back({{"problem", {{"kind", "truncated_green"}, {"n", 16}, {"d", 3}, {"x", {0, 0, 0}},
                                  {"y", point_json(g, y)}, {"horizon", 256}}},
                     {"value", exact_truncated_green(p, 0, y, 256)}, {"residual", 0.0}, {"timestamp", ts}});
    }
  }
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Random-walk late points and cover statistics on the torus Z_n^d"};
  app.require_subcommand(1);

  CommonFlags sim_f;
  auto* sim = app.add_subcommand("simulate", "run an experiment described by a config file");
  add_common(sim, sim_f);
  sim->callback([&] {
    if (sim_f.config.empty()) throw ValidationError("simulate needs --config");
  });

  int cd = 3, cT = 0;
  auto* cons = app.add_subcommand("constants", "Green function constants and thresholds for dimension d");
  cons->add_option("--d", cd, "dimension (3..12)");
  cons->add_option("--T", cT, "series truncation (default depends on d)");

  CommonFlags ex_f;
  int ex_n = 16, ex_d = 3;
  double ex_r = 2, ex_R = 6;
  std::string ex_flavor = "box_in_ball";
  std::optional<double> ex_t;
  auto* exc = app.add_subcommand("excursions", "count annulus excursions N(r, R, t)");
  add_common(exc, ex_f);
  exc->add_option("--n", ex_n);
  exc->add_option("--d", ex_d);
  exc->add_option("--r", ex_r);
  exc->add_option("--R", ex_R);
  exc->add_option("--flavor", ex_flavor, "box_in_ball | box_in_box | ball_in_ball");
  exc->add_option("--t", ex_t, "horizon (default n^d log n)");

  CommonFlags di_f;
  int di_n = 20, di_d = 3;
  double di_alpha = 0.4, di_eps = 0.05, di_margin = 0.4;
  std::optional<double> di_tstar;
  int di_tr = 0, di_tR = 0;
  auto* dis = app.add_subcommand("distinguish", "neighbour-pair threshold test, walk vs Bernoulli field");
  add_common(dis, di_f);
  dis->add_option("--n", di_n);
  dis->add_option("--d", di_d);
  dis->add_option("--alpha", di_alpha);
  dis->add_option("--epsilon", di_eps);
  dis->add_option("--margin", di_margin);
  dis->add_option("--t-star", di_tstar, "use this t_* instead of calibrating");
  dis->add_option("--tstar-r", di_tr, "calibration inner radius");
  dis->add_option("--tstar-R", di_tR, "calibration outer radius");

  CommonFlags un_f;
  int un_n = 24, un_d = 3;
  double un_gamma = 0.6;
  std::size_t un_targets = 8;
  auto* uni = app.add_subcommand("uniformity", "first-hit law on a random separated set");
  add_common(uni, un_f);
  uni->add_option("--n", un_n);
  uni->add_option("--d", un_d);
  uni->add_option("--gamma", un_gamma);
  uni->add_option("--targets", un_targets);

  std::string fx_out;
  auto* fix = app.add_subcommand("oracle-fixtures", "write exact oracle fixtures as JSON");
  fix->add_option("--out", fx_out, "output file (default: stdout)");

  std::string rp_dir, rp_out;
  auto* rep = app.add_subcommand("report", "aggregate result CSVs into plot-ready tables");
  rep->add_option("dir", rp_dir, "directory holding results")->required();
  rep->add_option("--out", rp_out, "table directory (default: <dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (sim->parsed()) return emit(run_experiment(base_config(sim_f, "")));

  if (cons->parsed()) {
    require(cd >= 3 && cd <= 12, "constants: d must lie in [3, 12]");
    std::cout << compute_constants(cd, cT).to_json().dump(2) << '\n';
    return 0;
  }

  if (exc->parsed()) {
    ExperimentConfig c = base_config(ex_f, "excursion_count");
    if (ex_f.config.empty()) {
      c.experiment = "excursions";
      c.n = ex_n;
      c.d = ex_d;
      c.r = ex_r;
      c.R = ex_R;
      c.flavor = parse_flavor(ex_flavor);
      c.horizon = ex_t;
    }
    return emit(run_experiment(c));
  }

  if (dis->parsed()) {
    ExperimentConfig c = base_config(di_f, "distinguish");
    if (di_f.config.empty()) {
      c.experiment = "distinguish";
      c.n = di_n;
      c.d = di_d;
      c.alphas = {di_alpha};
      c.epsilon = di_eps;
      c.margin = di_margin;
      c.t_star = di_tstar;
      c.tstar_r = di_tr;
      c.tstar_R = di_tR;
      if (!di_tstar && (di_tr == 0 || di_tR == 0)) {
        // Default calibration annulus: the largest ball that fits, r = R/3.
        c.tstar_R = std::max(4, (di_n - 2) / 2);
        c.tstar_r = std::max(2, c.tstar_R / 3);
      }
    }
    return emit(run_experiment(c));
  }

  if (uni->parsed()) {
    ExperimentConfig c = base_config(un_f, "uniformity");
    if (un_f.config.empty()) {
      c.experiment = "uniformity";
      c.n = un_n;
      c.d = un_d;
      c.gamma = un_gamma;
      c.targets = un_targets;
    }
    return emit(run_experiment(c));
  }

  if (fix->parsed()) {
    const std::string body = oracle_fixtures().dump(2) + "\n";
    if (fx_out.empty()) {
      std::cout << body;
    } else {
      std::ofstream f(fx_out, std::ios::binary);
      if (!f) throw ComputationError("cannot write " + fx_out);
      f << body;
    }
    return 0;
  }

  if (rep->parsed()) {
    const fs::path out = rp_out.empty() ? fs::path(rp_dir) / "report" : fs::path(rp_out);
    const auto t = build_report(rp_dir);
    write_report(t, out);
    std::cout << json{{"files", t.files}, {"out", out.string()}}.dump() << '\n';
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
