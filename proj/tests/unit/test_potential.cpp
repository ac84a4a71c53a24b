#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "latecover/potential.hpp"

using namespace latecover;
using Catch::Approx;

namespace {

// Direct dynamic programming for p_t(x) on Z^3 restricted to a cube large
// enough that the walk cannot leave it within T steps.
std::vector<double> brute_return_series(int x0, int x1, int x2, int T) {
  const int L = T + std::max({std::abs(x0), std::abs(x1), std::abs(x2)}) + 1;
  const int W = 2 * L + 1;
  auto idx = [&](int a, int b, int c) { return (static_cast<std::size_t>(a + L) * W + (b + L)) * W + (c + L); };
  std::vector<double> cur(static_cast<std::size_t>(W) * W * W, 0.0), nxt(cur.size());
  cur[idx(0, 0, 0)] = 1.0;
  std::vector<double> out{cur[idx(x0, x1, x2)]};
  for (int t = 1; t <= T; ++t) {
    std::fill(nxt.begin(), nxt.end(), 0.0);
    for (int a = -t + 1; a <= t - 1; ++a)
      for (int b = -t + 1; b <= t - 1; ++b)
        for (int c = -t + 1; c <= t - 1; ++c) {
          const double v = cur[idx(a, b, c)] / 6;
          if (v == 0) continue;
          nxt[idx(a + 1, b, c)] += v;
          nxt[idx(a - 1, b, c)] += v;
          nxt[idx(a, b + 1, c)] += v;
          nxt[idx(a, b - 1, c)] += v;
          nxt[idx(a, b, c + 1)] += v;
          nxt[idx(a, b, c - 1)] += v;
        }
    cur.swap(nxt);
    out.push_back(cur[idx(x0, x1, x2)]);
  }
  return out;
}

}  // namespace

TEST_CASE("return-kernel series matches brute-force dynamic programming") {
  for (auto [a, b, c] : {std::tuple{0, 0, 0}, std::tuple{1, 0, 0}, std::tuple{2, 1, 0}, std::tuple{1, 1, 1}}) {
    const auto exact = brute_return_series(a, b, c, 30);
    const auto fast = return_kernel_series({a, b, c}, 30);
    for (int t = 0; t <= 30; ++t) REQUIRE(fast[static_cast<std::size_t>(t)] == Approx(exact[static_cast<std::size_t>(t)]).margin(1e-13));
  }
}

TEST_CASE("G(0) and the return probability in d = 3") {
  const auto g0 = green_exact(origin(3));
  REQUIRE(g0.value == Approx(1.516386).margin(1e-3));
  REQUIRE(g0.error <= 1e-3);
  const double p3 = return_probability(3);
  REQUIRE(p3 == Approx(0.3405373).margin(1e-3));
  // Monte Carlo with an independent escape correction.
  MonteCarloGreenOptions opt;
  opt.walks = 20000;
  opt.escape_radius = 12;
  const auto mc = green_monte_carlo(origin(3), opt);
  REQUIRE(std::abs(mc.value - g0.value) <= std::max(4 * mc.error, 1e-2));
}

TEST_CASE("return probability decreases with dimension") {
  double prev = 1.0;
  for (int d = 3; d <= 8; ++d) {
    const double p = return_probability(d);
    REQUIRE(p < prev);
    REQUIRE(p > 0);
    prev = p;
  }
  REQUIRE(return_probability(4) == Approx(0.193206).margin(2e-3));
  REQUIRE_THROWS_AS(return_probability(2), ValidationError);
}

TEST_CASE("green function symmetry") {
  const double a = green_exact({2, 1, 0}).value;
  REQUIRE(green_exact({0, 1, -2}).value == Approx(a).epsilon(1e-9));
  REQUIRE(green_exact({-1, 0, 2}).value == Approx(a).epsilon(1e-9));
  REQUIRE(green_exact({1, 0, 0}).value == Approx(green_exact(origin(3)).value - 1.0).epsilon(1e-6));
}

TEST_CASE("thresholds") {
  REQUIRE(kappa_of(3) == 3);
  REQUIRE(kappa_of(9) == 6);
  REQUIRE(alpha1_of(3) == Approx(12.0 / 13.0));
  REQUIRE(alpha1_of(6) == Approx((4.0 * 6 + 36) / (4.0 * 7 + 36)));
  for (int d = 3; d <= 12; ++d) {
    const auto th = thresholds(d);
    REQUIRE(th.alpha0 > 0.5);
    REQUIRE(th.alpha0 <= th.alpha1);
    REQUIRE(th.alpha1 < 1.0);
    if (d > 3) REQUIRE(th.alpha0 < thresholds(d - 1).alpha0);
  }
}

TEST_CASE("constants bundle and hitting predictions") {
  const auto c = compute_constants(3);
  REQUIRE(c.p == Approx(return_probability(3)));
  // c_3 = 3 / (2 pi) to leading order.
  REQUIRE(c.c_d == Approx(green_asymptotic_closed_form(3)).epsilon(0.01));
  REQUIRE(c.C_d == Approx(c.c_d / c.G0));
  REQUIRE(c.to_json()["schema"] == "latecover.constants/1");
  const auto h = predict_hit_prob(c, 4, 40);
  REQUIRE(h.leading == Approx(c.C_d / 4));
  REQUIRE(h.error_band == Approx(0.1 + 1.0 / 16));
  const auto pn = predict_pair_hit(c, 4, 40, true);
  REQUIRE(pn.leading == Approx(2 * c.C_d / ((1 + c.p) * 4)));
  REQUIRE(!pn.lower_bound_only);
  REQUIRE(predict_pair_hit(c, 4, 40, false).lower_bound_only);
  REQUIRE_THROWS_AS(predict_hit_prob(c, 4, 6), ValidationError);
  REQUIRE_THROWS_AS(predict_hit_prob(c, 4, 40, 2.0), ValidationError);
}

TEST_CASE("t_star scaling and radii") {
  REQUIRE(t_star(16, 3, 100, 0.5) == Approx(3 * std::log(16.0) * 200));
  REQUIRE(t_star(16, 3, 200, 0.5) == Approx(2 * t_star(16, 3, 100, 0.5)));
  REQUIRE_THROWS_AS(t_star(16, 3, 0, 0.5), ValidationError);
  const auto r = t_star_radii(32, 3, 0.7);
  REQUIRE(r.r == 5);
  REQUIRE(r.R == 11);
  REQUIRE_THROWS_AS(t_star_radii(4, 3, 0.5), ValidationError);
}
