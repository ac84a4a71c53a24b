#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <vector>

#include "json.hpp"

#include "latecover/excursion.hpp"
#include "latecover/oracle.hpp"
#include "latecover/potential.hpp"

using namespace latecover;
using Catch::Approx;
using nlohmann::json;

namespace {

Point point_of(const json& j) {
  Point p(static_cast<int>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) p[static_cast<int>(i)] = j[i].get<int>();
  return p;
}

// Plain fixed-point iteration u = 1 + P u off the target.
std::vector<double> iterate_hitting_times(const TorusGeometry& g, Site target) {
  std::vector<double> u(g.volume(), 0.0), v(g.volume());
  for (int it = 0; it < 20000; ++it) {
    for (Site x = 0; x < g.volume(); ++x) {
      if (x == target) {
        v[x] = 0;
        continue;
      }
      double s = 0;
      for (int k = 0; k < g.degree(); ++k) s += u[g.neighbor(x, k)];
      v[x] = 1 + s / g.degree();
    }
    u.swap(v);
  }
  return u;
}

}  // namespace

TEST_CASE("stored fixtures are reproduced") {
  std::ifstream f(std::string(LATECOVER_FIXTURE_DIR) + "/oracle_fixtures.json");
  REQUIRE(f.good());
  const json fx = json::parse(f);
  REQUIRE(fx.size() >= 10);
  for (const auto& e : fx) {
    const auto& pr = e["problem"];
    const std::string kind = pr["kind"];
    const TorusGeometry g(pr["n"].get<int>(), pr["d"].get<int>());
    const ChainProblem p(g);
    double got = 0;
    if (kind == "excursion_hit_center" || kind == "excursion_length") {
      const Site c = g.index(point_of(pr["center"]));
      const auto a = AnnulusSpec::make(parse_flavor(pr["flavor"]), c, pr["r"], pr["R"]);
      const auto chain = exact_exit_chain(p, a);
      got = kind == "excursion_length" ? chain.T : exact_excursion_hit_probability(p, chain, a, {c});
    } else if (kind == "excursion_hit_pair") {
      const Site c = g.index(point_of(pr["sites"][0])), c2 = g.index(point_of(pr["sites"][1]));
      const auto a = AnnulusSpec::make(parse_flavor(pr["flavor"]), c, pr["r"], pr["R"]);
      got = exact_excursion_hit_probability(p, exact_exit_chain(p, a), a, {c, c2});
    } else if (kind == "hit_before_exit") {
      const Site c = g.index(point_of(pr["target"]));
      got = exact_hitting_probability(p, g.index(point_of(pr["start"])), {c}, outer_boundary(g, ShapeSpec::ball(c, pr["R"]))).total;
    } else if (kind == "stationary_hitting_time") {
      got = exact_stationary_hitting_time(p, {g.index(point_of(pr["target"]))});
    } else if (kind == "max_hitting_time") {
      got = exact_expected_hitting_time(p, g.index(point_of(pr["start"])), {g.index(point_of(pr["target"]))});
    } else if (kind == "truncated_green") {
      got = exact_truncated_green(p, g.index(point_of(pr["x"])), g.index(point_of(pr["y"])), pr["horizon"]);
    } else {
      FAIL("unknown fixture kind " << kind);
    }
    INFO(kind);
    REQUIRE(got == Approx(e["value"].get<double>()).epsilon(1e-9));
  }
}

TEST_CASE("hitting times agree with plain iteration") {
  const TorusGeometry g(4, 3);
  const auto exact = exact_expected_hitting_times(ChainProblem(g), {0});
  const auto it = iterate_hitting_times(g, 0);
  for (Site x = 0; x < g.volume(); ++x) REQUIRE(exact[x] == Approx(it[x]).epsilon(1e-8));
  // Averaging over the uniform start.
  double avg = 0;
  for (double v : exact) avg += v / 64;
  REQUIRE(exact_stationary_hitting_time(ChainProblem(g), {0}) == Approx(avg));
}

TEST_CASE("stationary hitting time per site grows towards G(0)") {
  const double G0 = green_exact(origin(3)).value;
  double prev = 0;
  for (int n : {4, 6, 8, 10}) {
    const TorusGeometry g(n, 3);
    const double ratio = exact_stationary_hitting_time(ChainProblem(g), {0}) / static_cast<double>(g.volume());
    REQUIRE(ratio > prev);
    REQUIRE(ratio < G0);
    prev = ratio;
  }
}

TEST_CASE("truncated green function") {
  const TorusGeometry g(16, 3);
  const ChainProblem p(g);
  // Below the wrap-around horizon it equals the partial sum on Z^3.
  const auto series = return_kernel_series({2, 1, 0}, 12);
  double partial = 0;
  for (double v : series) partial += v;
  const Site y = g.index(Point{2, 1, 0});
  REQUIRE(exact_truncated_green(p, 0, y, 12) == Approx(partial).epsilon(1e-12));
  // Symmetric, increasing in the horizon, bounded by horizon + 1.
  const Site z = g.index(Point{3, 5, 14});
  REQUIRE(exact_truncated_green(p, 0, z, 100) == Approx(exact_truncated_green(p, z, 0, 100)).epsilon(1e-12));
  double prev = 0;
  for (std::uint64_t h : {10u, 50u, 200u}) {
    const double v = exact_truncated_green(p, 0, z, h);
    REQUIRE(v >= prev);
    REQUIRE(v <= h + 1.0);
    prev = v;
  }
}

TEST_CASE("exit law from the centre of a ball is symmetric") {
  const TorusGeometry g(16, 3);
  const Site c = g.index(Point{8, 8, 8});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 2, 5);
  const auto law = exact_exit_distribution(ChainProblem(g), c, shape_mask(g, a.outer));
  REQUIRE(law.support == outer_boundary(g, a.outer));
  double total = 0;
  for (double v : law.prob) total += v;
  REQUIRE(total == Approx(1.0).epsilon(1e-10));
  const auto sym = symmetrize(g, a, law.support, law.prob);
  for (std::size_t i = 0; i < sym.size(); ++i) REQUIRE(sym[i] == Approx(law.prob[i]).margin(1e-12));
  REQUIRE(law.residual <= 1e-10);
}

TEST_CASE("exact exit chain is a consistent Markov chain") {
  const TorusGeometry g(16, 3);
  const Site c = g.index(Point{8, 8, 8});
  const auto a = AnnulusSpec::make(Flavor::box_in_ball, c, 3, 6);
  const auto ch = exact_exit_chain(ChainProblem(g), a);
  for (Eigen::Index i = 0; i < ch.H.rows(); ++i) REQUIRE(ch.H.row(i).sum() == Approx(1.0).epsilon(1e-9));
  for (Eigen::Index i = 0; i < ch.K.rows(); ++i) REQUIRE(ch.K.row(i).sum() == Approx(1.0).epsilon(1e-9));
  REQUIRE(ch.pi.sum() == Approx(1.0).epsilon(1e-9));
  REQUIRE((ch.pi.transpose() * ch.M - ch.pi.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((ch.pi.transpose() * ch.H - ch.mu.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  double T = 0;
  for (std::size_t i = 0; i < ch.exits.size(); ++i) {
    REQUIRE(ch.duration_from[i] >= 2);
    T += ch.pi[static_cast<Eigen::Index>(i)] * ch.duration_from[i];
  }
  REQUIRE(ch.T == Approx(T));
}

TEST_CASE("single and pair hit probabilities against the leading terms") {
  const TorusGeometry g(16, 3);
  const ChainProblem p(g);
  const Site c = g.index(Point{8, 8, 8});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 2, 6);
  const auto ch = exact_exit_chain(p, a);
  Constants k;
  k.d = 3;
  k.G0 = green_exact(origin(3)).value;
  k.p = 1 - 1 / k.G0;
  k.c_d = green_asymptotic_closed_form(3);
  k.C_d = k.c_d / k.G0;
  const double single = exact_excursion_hit_probability(p, ch, a, {c});
  const auto hs = predict_hit_prob(k, 2, 6);
  REQUIRE(std::abs(single / hs.leading - 1) <= hs.error_band);
  const double adj = exact_excursion_hit_probability(p, ch, a, {c, g.index(Point{9, 8, 8})});
  const auto hp = predict_pair_hit(k, 2, 6, true);
  INFO("pair " << adj << " leading " << hp.leading);
  REQUIRE(std::abs(adj / hp.leading - 1) <= 0.15);
  // Farther pairs are hit more often than adjacent ones.
  const double apart = exact_excursion_hit_probability(p, ch, a, {c, g.index(Point{10, 8, 8})});
  REQUIRE(apart > adj);
  REQUIRE(adj > single);
  REQUIRE(adj < 2 * single);
}

TEST_CASE("conditional hit probabilities average back to the unconditional ones") {
  const TorusGeometry g(16, 3);
  const ChainProblem p(g);
  const Site c = g.index(Point{8, 8, 8});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 2, 6);
  const auto ch = exact_exit_chain(p, a);
  const auto cond = exact_conditional_hit(p, ch, a, {c});
  const auto outer = shape_mask(g, a.outer);
  std::vector<Role> roles(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (outer[x]) roles[x] = Role::free;
  roles[c] = Role::target;
  const auto h = hitting_probability_field(p, roles);
  for (Eigen::Index j = 0; j < cond.rows(); ++j) {
    double avg = 0;
    for (Eigen::Index i = 0; i < cond.cols(); ++i) {
      REQUIRE(cond(j, i) >= -1e-12);
      REQUIRE(cond(j, i) <= 1 + 1e-9);
      avg += ch.K(j, i) * cond(j, i);
    }
    REQUIRE(avg == Approx(h[ch.entries[static_cast<std::size_t>(j)]]).epsilon(1e-8));
  }
}

TEST_CASE("Monte Carlo excursion hit frequency matches the exact value") {
  const TorusGeometry g(12, 3);
  const ChainProblem p(g);
  const Site c = g.index(Point{6, 6, 6});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 1, 3);
  const auto ch = exact_exit_chain(p, a);
  const std::vector<Site> marks{c, g.index(Point{7, 6, 6})};
  ExcursionRunPlan plan;
  plan.replicas = 4;
  plan.excursions_per_replica = 10000;
  plan.seed = 5;
  const auto fr = excursion_hit_frequency(g, a, marks, plan);
  const double e_single = exact_excursion_hit_probability(p, ch, a, {c});
  const double e_pair = exact_excursion_hit_probability(p, ch, a, marks);
  REQUIRE(std::abs(fr.per_target[0].value() - e_single) <= 3.5 * fr.per_target[0].std_error());
  REQUIRE(std::abs(fr.any.value() - e_pair) <= 3.5 * fr.any.std_error());
}

TEST_CASE("Harnack ratio shrinks as the outer radius grows") {
  const TorusGeometry g(20, 3);
  const ChainProblem p(g);
  const Site c = g.index(Point{10, 10, 10});
  const auto near = harnack_ratio(p, c, 1, 4);
  const auto far = harnack_ratio(p, c, 1, 8);
  REQUIRE(near.max_ratio > 1);
  REQUIRE(far.max_ratio > 1);
  REQUIRE(far.max_ratio < near.max_ratio);
}

TEST_CASE("mixing decay inequalities") {
  const TorusGeometry g(6, 3);
  const auto rep = mixing_decay_check(ChainProblem(g, 0.5), {1, 2, 4, 8, 16, 32, 64, 128});
  REQUIRE(rep.pairs_checked > 0);
  REQUIRE(rep.submultiplicative);
  REQUIRE(rep.uniform_decay);
  for (std::size_t i = 1; i < rep.rows.size(); ++i) REQUIRE(rep.rows[i].tv <= rep.rows[i - 1].tv + 1e-15);
  REQUIRE(rep.rows.back().tv < 1e-3);
  REQUIRE_THROWS_AS(mixing_decay_check(ChainProblem(g), {1, 2}), ValidationError);
}

TEST_CASE("solver guards") {
  REQUIRE_THROWS_AS(ChainProblem(TorusGeometry(64, 3)), ValidationError);
  const TorusGeometry g(4, 3);
  const ChainProblem p(g);
  const std::vector<Role> all_free(g.volume(), Role::free);
  REQUIRE_THROWS(RestrictedSolver(p, all_free));
  REQUIRE_THROWS_AS(make_roles(g.volume(), {1}, {1}), ValidationError);
  const auto split = exact_hitting_probability(p, 5, {5, 6}, {});
  REQUIRE(split.total == 1.0);
  REQUIRE(split.per_target[0] == 1.0);
}
