#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "latecover/parallel.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"

using namespace latecover;
using Catch::Approx;

TEST_CASE("xoshiro streams are reproducible and distinct") {
  Xoshiro256 a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    REQUIRE(x == b());
    (void)c();
  }
  REQUIRE(!(a == c));
  REQUIRE(stream_key(1, 0) != stream_key(1, 1));
  REQUIRE(stream_key(1, 0) != stream_key(2, 0));
  REQUIRE(replica_stream(5, 3) == replica_stream(5, 3));
}

TEST_CASE("below() is unbiased on a small range") {
  Xoshiro256 rng(7);
  std::vector<std::size_t> counts(6, 0);
  for (int i = 0; i < 600000; ++i) ++counts[rng.below(6)];
  REQUIRE(chi_square_uniform(counts).p_value > 1e-3);
}

TEST_CASE("uniform() lies in [0,1) with mean 1/2") {
  Xoshiro256 rng(9);
  RunningStats s;
  for (int i = 0; i < 200000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    s.push(u);
  }
  REQUIRE(std::abs(s.mean() - 0.5) < 3 * s.std_error() + 1e-12);
}

TEST_CASE("jump() gives a non-overlapping stream") {
  Xoshiro256 a(1), b(1);
  b.jump();
  REQUIRE(!(a == b));
}

TEST_CASE("running stats merge equals a single pass") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd(2.0, 3.0);
  std::vector<double> xs(1000);
  for (auto& x : xs) x = nd(gen);
  RunningStats all, left, right;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    all.push(xs[i]);
    (i < 400 ? left : right).push(xs[i]);
  }
  left.merge(right);
  REQUIRE(left.count() == all.count());
  REQUIRE(left.mean() == Approx(all.mean()).epsilon(1e-12));
  REQUIRE(left.variance() == Approx(all.variance()).epsilon(1e-10));
}

TEST_CASE("linear and log-log fits recover exact slopes") {
  std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9};
  const auto f = linear_fit(x, y);
  REQUIRE(f.slope == Approx(2.0));
  REQUIRE(f.intercept == Approx(1.0));
  std::vector<double> n{8, 12, 16, 20}, v;
  for (double k : n) v.push_back(5 * k * k * k);
  REQUIRE(log_log_fit(n, v).slope == Approx(3.0));
}

TEST_CASE("tv distance and chi-square basics") {
  std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  REQUIRE(tv_distance(p, q) == Approx(0.5));
  std::vector<std::size_t> even{100, 100, 100, 100};
  REQUIRE(chi_square_uniform(even).statistic == Approx(0.0));
  REQUIRE(chi_square_uniform(even).p_value == Approx(1.0));
  std::vector<std::size_t> skew{1000, 0, 0, 0};
  REQUIRE(chi_square_uniform(skew).p_value < 1e-10);
}

TEST_CASE("round half up") {
  REQUIRE(round_half_up(2.5) == 3);
  REQUIRE(round_half_up(2.49) == 2);
  REQUIRE(round_half_up(-0.5) == 0);
}

TEST_CASE("parallel_map is order independent and propagates errors") {
  auto f = [](std::size_t i) { return static_cast<double>(stream_key(11, i) % 1000); };
  const auto one = parallel_map(200, 1, f);
  const auto four = parallel_map(200, 4, f);
  REQUIRE(one == four);
  REQUIRE_THROWS(parallel_map(10, 3, [](std::size_t i) -> int {
    if (i == 7) throw std::runtime_error("boom");
    return 0;
  }));
}

TEST_CASE("batch means on iid data agrees with the plain estimate") {
  Xoshiro256 rng(5);
  std::vector<double> xs(20000);
  for (auto& x : xs) x = rng.uniform();
  const auto a = estimate_mean(xs), b = batch_means(xs);
  REQUIRE(a.value == Approx(b.value));
  REQUIRE(b.std_error == Approx(a.std_error).epsilon(0.5));
}
