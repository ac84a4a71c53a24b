#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <boost/math/distributions/binomial.hpp>

#include "latecover/excursion.hpp"
#include "latecover/oracle.hpp"

using namespace latecover;
using Catch::Approx;

namespace {

struct NaiveRecord {
  std::uint64_t tau, sigma;
};

// Stopping times straight from the definition: tau_k is the first visit to the
// inner boundary after sigma_{k-1}, sigma_k the first visit outside the outer
// shape after tau_k.
std::vector<NaiveRecord> naive_excursions(const TorusGeometry& g, const std::vector<Site>& traj, const AnnulusSpec& a) {
  std::vector<std::uint8_t> bd(g.volume(), 0);
  for (Site x : shape_boundary(g, a.inner)) bd[x] = 1;
  const auto outer = shape_mask(g, a.outer);
  std::vector<NaiveRecord> out;
  std::size_t t = 0;
  for (;;) {
    while (t < traj.size() && !bd[traj[t]]) ++t;
    if (t == traj.size()) break;
    const std::size_t tau = t;
    while (t < traj.size() && outer[traj[t]]) ++t;
    if (t == traj.size()) break;
    out.push_back({tau, t});
  }
  return out;
}

}  // namespace

TEST_CASE("hand-built path: stopping times, durations, marks and the min rule") {
  const TorusGeometry g(16, 3);
  const Site c = g.index(Point{8, 8, 8});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 1, 3);
  const std::vector<int> xs{5, 4, 3, 2, 1, 2, 3, 4, 3, 2, 1, 0, 1, 2, 3, 4, 5};
  std::vector<Site> traj;
  for (int x : xs) traj.push_back(g.index(Point{8 + x, 8, 8}));
  const auto list = decompose_excursions(g, traj, a, {c});
  REQUIRE(list.records.size() == 2);
  REQUIRE(list.tau0 == 4u);
  REQUIRE(list.records[0].tau == 4);
  REQUIRE(list.records[0].sigma == 7);
  REQUIRE(list.records[0].duration == 3);
  REQUIRE(list.records[0].hits == 0);
  REQUIRE(list.records[1].tau == 10);
  REQUIRE(list.records[1].sigma == 15);
  REQUIRE(list.records[1].duration == 8);
  REQUIRE(list.records[1].hits == 1);
  REQUIRE(list.records[1].entry == g.index(Point{9, 8, 8}));
  REQUIRE(list.records[1].exit == g.index(Point{12, 8, 8}));
  REQUIRE(!list.partial);

  REQUIRE(count_by_min_rule(list, 0) == 0u);
  REQUIRE(count_by_min_rule(list, 3) == 0u);
  REQUIRE(count_by_min_rule(list, 4) == 1u);
  REQUIRE(count_by_min_rule(list, 12) == 2u);
  REQUIRE(!count_by_min_rule(list, 13));

  // A path that never reaches the inner boundary has no tau_0.
  const std::vector<Site> far(5, g.index(Point{0, 0, 0}));
  const auto none = decompose_excursions(g, far, a);
  REQUIRE(none.records.empty());
  REQUIRE(!count_by_min_rule(none, 1));
}

TEST_CASE("scanner agrees with the definition on random paths") {
  const TorusGeometry g(12, 3);
  for (Flavor f : {Flavor::box_in_ball, Flavor::box_in_box, Flavor::ball_in_ball}) {
    const auto a = AnnulusSpec::make(f, g.index(Point{3, 5, 7}), 2, f == Flavor::ball_in_ball ? 4 : 5);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      WalkConfig cfg(g, seed);
      const auto traj = record_trajectory(cfg, 40000);
      const auto list = decompose_excursions(g, traj, a);
      const auto naive = naive_excursions(g, traj, a);
      REQUIRE(list.records.size() == naive.size());
      for (std::size_t k = 0; k < naive.size(); ++k) {
        REQUIRE(list.records[k].k == k);
        REQUIRE(list.records[k].tau == naive[k].tau);
        REQUIRE(list.records[k].sigma == naive[k].sigma);
        REQUIRE(list.records[k].entry == traj[naive[k].tau]);
        REQUIRE(list.records[k].exit == traj[naive[k].sigma]);
        if (k >= 1) REQUIRE(list.records[k].duration >= 2);
      }
      // min rule against a direct scan of the telescoped sums
      for (std::uint64_t t : {1u, 100u, 5000u, 20000u}) {
        const auto n = count_by_min_rule(list, t);
        std::optional<std::size_t> expect;
        for (std::size_t k = 0; k < naive.size() && !expect; ++k)
          if (naive[k].sigma - naive[0].tau >= t) expect = k;
        if (!expect && !naive.empty() && traj.size() - 1 >= naive[0].tau + t) expect = naive.size();
        REQUIRE(n == expect);
      }
    }
  }
}

TEST_CASE("counter is monotone in t for a fixed path") {
  const TorusGeometry g(16, 3);
  const Site x = g.index(Point{8, 8, 8});
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    std::size_t prev = 0;
    for (std::uint64_t t : {0u, 1000u, 5000u, 20000u, 60000u}) {
      const auto c = count_excursions(g, x, 2, 6, t, Flavor::box_in_ball, seed);
      REQUIRE(c.count >= prev);
      REQUIRE(!c.warning.empty());
      prev = c.count;
    }
  }
}

TEST_CASE("radius and delta checks") {
  REQUIRE_THROWS_AS(check_radii(2, 3), ValidationError);
  REQUIRE(check_radii(2, 20).empty());
  REQUIRE(check_radii(2, 6).find("R=6") != std::string::npos);
  REQUIRE_THROWS_AS(validate_delta_single(0.5, 0.7, 64, 3, 2), ValidationError);
  REQUIRE_THROWS_AS(validate_delta_single(1.2, 0.1, 64, 3, 2), ValidationError);
  REQUIRE_NOTHROW(validate_delta_single(0.3, 0.1, 64, 3, 2));
  REQUIRE_THROWS_AS(validate_delta_boxes(0.4, 0.1, 64, 3, 0.6, true), ValidationError);
  REQUIRE(default_delta(4, 64, 3, 0.05) == Approx(0.5 * std::pow(64.0, 0.05)));
}

TEST_CASE("annulus symmetry groups") {
  const TorusGeometry g(16, 3);
  REQUIRE(annulus_symmetries(3, AnnulusSpec::make(Flavor::ball_in_ball, 0, 2, 6)).size() == 48);
  REQUIRE(annulus_symmetries(3, AnnulusSpec::make(Flavor::box_in_ball, 0, 3, 6)).size() == 48);
  // An even box is shifted by half a site, so sign flips are lost.
  REQUIRE(annulus_symmetries(3, AnnulusSpec::make(Flavor::box_in_ball, 0, 2, 6)).size() == 6);
}

TEST_CASE("exit-point law matches the exact exit chain") {
  const TorusGeometry g(12, 3);
  const Site c = g.index(Point{6, 6, 6});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 1, 3);
  const ChainProblem p(g);
  const auto chain = exact_exit_chain(p, a);
  const auto stats = exit_chain_stats(g, a, 150000, 20, 11);
  REQUIRE(stats.support == chain.exits);
  std::vector<double> pi(chain.pi.data(), chain.pi.data() + chain.pi.size());
  // The exact law is invariant under the symmetry group.
  const auto pi_sym = symmetrize(g, a, chain.exits, pi);
  for (std::size_t i = 0; i < pi.size(); ++i) REQUIRE(pi_sym[i] == Approx(pi[i]).margin(1e-10));
  const double tv = tv_distance(symmetrize(g, a, stats.support, stats.pi_hat), pi);
  INFO("TV " << tv);
  REQUIRE(tv <= 0.03);
  REQUIRE(stats.autocorrelation.at(0) == Approx(1.0));
  REQUIRE_THROWS_AS(exit_chain_stats(g, a, 5, 0, 1), ValidationError);
}

TEST_CASE("excursion length agrees with the exact value") {
  const TorusGeometry g(12, 3);
  const Site c = g.index(Point{6, 6, 6});
  const auto a = AnnulusSpec::make(Flavor::ball_in_ball, c, 1, 3);
  const auto chain = exact_exit_chain(ChainProblem(g), a);
  ExcursionRunPlan plan;
  plan.replicas = 8;
  plan.excursions_per_replica = 5000;
  plan.seed = 21;
  const auto st = estimate_T_rR(g, a, plan);
  INFO("exact " << chain.T << " estimate " << st.T_hat.value << " +- " << st.T_hat.std_error);
  REQUIRE(std::abs(st.T_hat.value - chain.T) <= 3.5 * st.T_hat.std_error);
}

TEST_CASE("geometric sums: tail formula and sampler") {
  for (auto [k, p, u] : {std::tuple{3, 0.3, 10u}, std::tuple{1, 0.5, 4u}, std::tuple{5, 0.2, 40u}}) {
    const boost::math::binomial_distribution<double> bin(u, p);
    REQUIRE(geometric_sum_tail(k, p, u) == Approx(boost::math::cdf(bin, k - 1)).epsilon(1e-10));
    Xoshiro256 rng(k);
    Proportion exceed;
    RunningStats mean;
    for (int i = 0; i < 200000; ++i) {
      std::uint64_t s = 0;
      for (int j = 0; j < k; ++j) s += sample_geometric(p, rng);
      ++exceed.trials;
      exceed.hits += s > u;
      mean.push(static_cast<double>(s));
    }
    REQUIRE(std::abs(exceed.value() - geometric_sum_tail(k, p, u)) <= 4 * exceed.std_error() + 1e-12);
    REQUIRE(std::abs(mean.mean() - k / p) <= 4 * mean.std_error());
  }
  REQUIRE(geometric_sum_tail(3, 0.5, 2) == 1.0);
  Xoshiro256 rng(1);
  REQUIRE(sample_geometric(1.0, rng) == 1);
  REQUIRE_THROWS_AS(sample_geometric(0.0, rng), ValidationError);
}

TEST_CASE("W statistic: every big excursion completes a thin one") {
  const TorusGeometry g(32, 3);
  WPlan plan;
  plan.samples = 400;
  plan.outer_factor = max_w_outer_factor(32, 0.6, 0.2);
  plan.seed = 3;
  const auto w = sample_W(g, 0.6, 0.2, plan);
  REQUIRE(w.s == 8);
  REQUIRE(w.h == 2);
  REQUIRE(w.samples.size() == 400);
  for (auto v : w.samples) REQUIRE(v >= 1);
  REQUIRE(w.moments[0] == Approx(1.0));
  REQUIRE(w.moments[2] >= w.moments[1] * w.moments[1]);
  REQUIRE(w.big_T.value > 0);
  plan.outer_factor = 10;
  REQUIRE_THROWS_AS(sample_W(g, 0.6, 0.2, plan), ValidationError);
}

TEST_CASE("nested counts: placement errors and monotonicity") {
  const TorusGeometry g(32, 3);
  const Decomposition dec(g, std::log(14.0) / std::log(32.0), 0.2);
  const NestedInputs in{2.0, 500.0};
  const Site z = dec.box_center(0);
  REQUIRE_THROWS_AS(count_nested_excursions(dec, g.index(Point{0, 0, 0}), 2, 6, 1e4, 0.2, in, 1), ValidationError);
  REQUIRE_THROWS_AS(count_nested_excursions(dec, z, 2, 7, 1e4, 0.2, in, 1), ValidationError);
  REQUIRE(count_nested_excursions(dec, z, 2, 6, 10, 0.2, in, 1).count == 0);
  REQUIRE(thin_lower_count(1e4, 0.2, in) == static_cast<std::size_t>(std::floor(1e4 * 2.0 / (1.2 * 500.0))));
  std::size_t prev = 0;
  for (double t : {1e4, 5e4, 2e5}) {
    const auto nc = count_nested_excursions(dec, z, 2, 6, t, 0.2, in, 9);
    REQUIRE(nc.thin_target == thin_lower_count(t, 0.05, in));
    REQUIRE(nc.count >= prev);
    prev = nc.count;
  }
}

TEST_CASE("concentration bands") {
  CounterSpec c;
  c.T_hat = 100;
  const auto [lo, hi] = concentration_band(c, 1e4, 0.2);
  REQUIRE(lo < hi);
  REQUIRE(lo == Approx(1e4 / 120));
  REQUIRE(hi == Approx(1e4 / 80));
  c.kind = CounterKind::thin_box;
  REQUIRE_THROWS_AS(concentration_band(c, 1e4, 0.2), ValidationError);
  c.nested = {2.0, 400.0};
  const auto [a, b] = concentration_band(c, 1e4, 0.2);
  REQUIRE(a == Approx(1e4 * 2 / (1.2 * 400)));
  REQUIRE(a < b);
  REQUIRE_THROWS_AS(concentration_band(c, 1e4, 1.0), ValidationError);
}
