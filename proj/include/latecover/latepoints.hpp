#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "latecover/errors.hpp"
#include "latecover/excursion.hpp"
#include "latecover/lattice.hpp"
#include "latecover/oracle.hpp"
#include "latecover/parallel.hpp"
#include "latecover/potential.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"
#include "latecover/walk.hpp"

namespace latecover {

enum class FieldKind : std::uint32_t {
  walk_uncovered = 0,
  walk_uncovered_excursion_stopped = 1,
  bernoulli = 2,
  uniform_subset = 3,
};

inline std::string to_string(FieldKind k) {
  switch (k) {
    case FieldKind::walk_uncovered: return "walk_uncovered";
    case FieldKind::walk_uncovered_excursion_stopped: return "walk_uncovered_excursion_stopped";
    case FieldKind::bernoulli: return "bernoulli";
    case FieldKind::uniform_subset: return "uniform_subset";
  }
  return "unknown";
}

inline FieldKind parse_field_kind(const std::string& s) {
  for (auto k : {FieldKind::walk_uncovered, FieldKind::walk_uncovered_excursion_stopped, FieldKind::bernoulli,
                 FieldKind::uniform_subset})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown field kind '" + s + "'");
}

/// A random site set with the parameters that produced it. `param` is alpha
/// for walk fields, p for Bernoulli and m for uniform subsets.
struct FieldSample {
  FieldKind kind = FieldKind::walk_uncovered;
  int n = 0, d = 0;
  std::vector<Site> sites;  // ascending
  double param = 0;
  std::uint64_t seed = 0;
  std::uint64_t t = 0;  // walk time used; 0 for reference fields

  std::size_t size() const { return sites.size(); }
  friend bool operator==(const FieldSample&, const FieldSample&) = default;
};

inline std::uint64_t alpha_time(double alpha, double t_star_value) {
  require(alpha >= 0 && t_star_value >= 0, "alpha * t_star must be >= 0");
  return static_cast<std::uint64_t>(round_half_up(alpha * t_star_value));
}

/// m = round(n^{d - alpha d}), at least 1.
inline std::size_t late_point_count(int n, int d, double alpha) {
  const double m = std::pow(static_cast<double>(n), d - alpha * d);
  return static_cast<std::size_t>(std::max<long long>(1, round_half_up(m)));
}

/// U(alpha t_*) for a fresh stationary-start walk.
inline FieldSample sample_uncovered_at(const TorusGeometry& g, double alpha, double t_star_value, std::uint64_t seed) {
  const std::uint64_t horizon = alpha_time(alpha, t_star_value);
  WalkConfig cfg(g, seed);
  Walk w(cfg);
  VisitTracker tracker(g.volume(), false);
  tracker.visit(w.position(), 0);
  while (w.time() < horizon && tracker.unvisited_count() > 0) tracker.visit(w.step(), w.time());
  return {FieldKind::walk_uncovered, g.n(), g.d(), tracker.unvisited(), alpha, seed, horizon};
}

/// U(alpha t_*) for several alphas along one trajectory.
inline std::vector<FieldSample> sample_uncovered_curve(const TorusGeometry& g, const std::vector<double>& alphas,
                                                       double t_star_value, std::uint64_t seed) {
  std::uint64_t horizon = 0;
  for (double a : alphas) horizon = std::max(horizon, alpha_time(a, t_star_value));
  WalkConfig cfg(g, seed);
  const TrackedRun run = run_tracked(cfg, horizon);
  std::vector<FieldSample> out;
  for (double a : alphas) {
    const std::uint64_t t = alpha_time(a, t_star_value);
    out.push_back({FieldKind::walk_uncovered, g.n(), g.d(), uncovered_set(run, t), a, seed, t});
  }
  return out;
}

/// U(tau_alpha): the walk stops when exactly round(n^{d - alpha d}) sites remain.
inline FieldSample sample_tau_alpha(const TorusGeometry& g, double alpha, std::uint64_t seed) {
  const std::size_t m = late_point_count(g.n(), g.d(), alpha);
  require(m + 1 <= g.volume(), "tau_alpha: n^{d - alpha d} must be below n^d - 1; increase alpha");
  WalkConfig cfg(g, seed);
  auto stop = run_until_uncovered_count(cfg, m);
  return {FieldKind::walk_uncovered, g.n(), g.d(), std::move(stop.unvisited), alpha, seed, stop.time};
}

/// The uncovered set restricted to the complement of A, and its
/// excursion-stopped counterpart, from one trajectory.
struct CoupledFields {
  FieldSample q_tilde;  // sites outside A unvisited by time alpha t_*
  FieldSample y;        // sites outside A unvisited when their box clock stops
  std::size_t target_excursions = 0;
  std::vector<std::uint64_t> box_stop_times;
  bool agree() const { return q_tilde.sites == y.sites; }
};

/// Each box S of the decomposition carries a clock: the thin excursions
/// from the inner boundary of S until the walk leaves S's tile. The clock
/// stops at the completion of the `target`-th excursion, with target =
/// floor(alpha t_* E[W] / ((1 + delta/4) T)).
inline CoupledFields sample_uncovered_excursion_stopped(const Decomposition& dec, double alpha, double t_star_value,
                                                        double delta, const NestedInputs& in, std::uint64_t seed,
                                                        std::uint64_t horizon_cap_factor = 200) {
  const TorusGeometry& g = dec.geometry();
  require(delta > 0 && delta < 1, "delta must lie in (0,1)");
  const std::uint64_t t_alpha = alpha_time(alpha, t_star_value);
  CoupledFields out;
  out.target_excursions = thin_lower_count(static_cast<double>(t_alpha), delta / 4.0, in);
  const std::size_t boxes = dec.box_count();
  out.box_stop_times.assign(boxes, kNever);
  std::vector<std::uint8_t> active(boxes, 0);
  std::vector<std::size_t> completed(boxes, 0);
  std::size_t stopped = 0;
  if (out.target_excursions == 0) {
    std::fill(out.box_stop_times.begin(), out.box_stop_times.end(), 0);
    stopped = boxes;
  }

  WalkConfig cfg(g, seed);
  Walk w(cfg);
  VisitTracker tracker(g.volume(), true);
  Site prev = w.position();
  tracker.visit(prev, 0);
  auto enter = [&](Site x) {
    const auto b = dec.box_of(x);
    if (!active[b] && out.box_stop_times[b] == kNever && dec.on_middle_boundary(x)) active[b] = 1;
  };
  enter(prev);
  const std::uint64_t cap = std::max<std::uint64_t>(t_alpha, 1) * horizon_cap_factor + g.volume() * 100ULL;
  while (stopped < boxes || w.time() < t_alpha) {
    if (w.time() >= cap) throw ComputationError("excursion-stopped sampler: box clocks did not stop within the horizon cap");
    const Site x = w.step();
    tracker.visit(x, w.time());
    const auto b0 = dec.box_of(prev), b1 = dec.box_of(x);
    if (b0 != b1 && active[b0]) {
      active[b0] = 0;
      if (++completed[b0] == out.target_excursions) {
        out.box_stop_times[b0] = w.time();
        ++stopped;
      }
    }
    enter(x);
    prev = x;
  }

  out.q_tilde = {FieldKind::walk_uncovered, g.n(), g.d(), {}, alpha, seed, t_alpha};
  out.y = {FieldKind::walk_uncovered_excursion_stopped, g.n(), g.d(), {}, alpha, seed, t_alpha};
  for (Site x = 0; x < g.volume(); ++x) {
    if (dec.in_annular_region(x)) continue;
    const std::uint64_t tau = tracker.first_hit(x);
    if (tau > t_alpha) out.q_tilde.sites.push_back(x);
    if (tau > out.box_stop_times[dec.box_of(x)]) out.y.sites.push_back(x);
  }
  return out;
}

/// I.i.d. Bernoulli(p) field.
inline FieldSample sample_bernoulli_field(const TorusGeometry& g, double p, std::uint64_t seed) {
  require(p >= 0 && p <= 1, "Bernoulli parameter must lie in [0,1]");
  Xoshiro256 rng(seed);
  FieldSample out{FieldKind::bernoulli, g.n(), g.d(), {}, p, seed, 0};
  for (Site x = 0; x < g.volume(); ++x)
    if (rng.uniform() < p) out.sites.push_back(x);
  return out;
}

/// Uniform m-subset by a partial Fisher-Yates shuffle.
inline FieldSample sample_uniform_subset(const TorusGeometry& g, std::size_t m, std::uint64_t seed) {
  require(m <= g.volume(), "uniform subset size must be <= n^d");
  Xoshiro256 rng(seed);
  std::vector<Site> all(g.volume());
  std::iota(all.begin(), all.end(), Site{0});
  for (std::size_t i = 0; i < m; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
  all.resize(m);
  std::sort(all.begin(), all.end());
  return {FieldKind::uniform_subset, g.n(), g.d(), std::move(all), static_cast<double>(m), seed, 0};
}

// ---------------------------------------------------------------------------
// Pair statistics

/// Calls fn(x, y, distance) for every ordered pair of distinct sites at torus
/// distance <= radius. Uses a cell grid when it pays off.
template <class Fn>
void for_each_close_pair(const TorusGeometry& g, const std::vector<Site>& sites, double radius, Metric metric, Fn&& fn) {
  const std::size_t m = sites.size();
  if (m < 2 || radius < 1) return;
  const int d = g.d(), n = g.n();
  const int width = static_cast<int>(std::ceil(radius));
  const int K = n / std::max(width, 1);
  double cells_visited = 1;
  for (int i = 0; i < d; ++i) cells_visited *= 3;
  if (K < 3 || static_cast<double>(m) * cells_visited >= static_cast<double>(m) * static_cast<double>(m)) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        const double dist = torus_distance(g, sites[i], sites[j], metric);
        if (dist <= radius) fn(sites[i], sites[j], dist);
      }
    return;
  }
  // Cell c(x)_i = floor(x_i K / n): every cell is at least `width` wide.
  auto cell_of = [&](Site x, std::array<int, kMaxDim>& c) {
    for (int i = 0; i < d; ++i) c[static_cast<std::size_t>(i)] = g.coord(x, i) * K / n;
  };
  auto cell_index = [&](const std::array<int, kMaxDim>& c) {
    std::size_t idx = 0;
    for (int i = d - 1; i >= 0; --i) idx = idx * static_cast<std::size_t>(K) + static_cast<std::size_t>(c[static_cast<std::size_t>(i)]);
    return idx;
  };
  std::size_t cells = 1;
  for (int i = 0; i < d; ++i) cells *= static_cast<std::size_t>(K);
  std::vector<std::uint32_t> start(cells + 1, 0), order(m);
  std::vector<std::size_t> cell_of_site(m);
  std::array<int, kMaxDim> c{};
  for (std::size_t i = 0; i < m; ++i) {
    cell_of(sites[i], c);
    cell_of_site[i] = cell_index(c);
    ++start[cell_of_site[i] + 1];
  }
  for (std::size_t i = 0; i < cells; ++i) start[i + 1] += start[i];
  {
    std::vector<std::uint32_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < m; ++i) order[fill[cell_of_site[i]]++] = static_cast<std::uint32_t>(i);
  }
  std::array<int, kMaxDim> shift{}, nc{};
  for (std::size_t i = 0; i < m; ++i) {
    cell_of(sites[i], c);
    std::fill(shift.begin(), shift.begin() + d, -1);
    for (;;) {
      for (int a = 0; a < d; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        nc[ua] = ((c[ua] + shift[ua]) % K + K) % K;
      }
      const std::size_t ci = cell_index(nc);
      for (std::uint32_t k = start[ci]; k < start[ci + 1]; ++k) {
        const std::size_t j = order[k];
        if (j == i) continue;
        const double dist = torus_distance(g, sites[i], sites[j], metric);
        if (dist <= radius) fn(sites[i], sites[j], dist);
      }
      int a = 0;
      while (a < d && shift[static_cast<std::size_t>(a)] == 1) shift[static_cast<std::size_t>(a++)] = -1;
      if (a == d) break;
      ++shift[static_cast<std::size_t>(a)];
    }
  }
}

/// Smallest torus distance between two distinct sites; +inf for fewer than two.
inline double min_pair_distance(const TorusGeometry& g, const std::vector<Site>& sites, Metric metric = Metric::euclidean) {
  double best = std::numeric_limits<double>::infinity();
  if (sites.size() < 2) return best;
  // Grow the search radius until some pair is found.
  for (double radius = 1.0;; radius *= 2) {
    for_each_close_pair(g, sites, radius, metric, [&](Site, Site, double dist) { best = std::min(best, dist); });
    if (best < std::numeric_limits<double>::infinity()) return best;
    if (radius > g.n() * std::sqrt(static_cast<double>(g.d()))) return best;
  }
}

struct SeparationReport {
  double gamma = 0;
  double radius = 0;  // n^gamma
  std::uint64_t Z = 0;  // ordered pairs of distinct sites at distance <= n^gamma
  std::vector<std::pair<Site, Site>> violating_pairs;  // first few, x < y
  double min_pair_distance = std::numeric_limits<double>::infinity();
};

inline SeparationReport separation_statistic(const TorusGeometry& g, const std::vector<Site>& sites, double gamma,
                                             Metric metric = Metric::euclidean, std::size_t keep_pairs = 16) {
  SeparationReport rep;
  rep.gamma = gamma;
  rep.radius = std::pow(static_cast<double>(g.n()), gamma);
  for_each_close_pair(g, sites, rep.radius, metric, [&](Site x, Site y, double dist) {
    ++rep.Z;
    rep.min_pair_distance = std::min(rep.min_pair_distance, dist);
    if (x < y && rep.violating_pairs.size() < keep_pairs) rep.violating_pairs.emplace_back(x, y);
  });
  if (rep.Z == 0) rep.min_pair_distance = min_pair_distance(g, sites, metric);
  return rep;
}

/// W = #{ordered (x, y) : |x - y| = 1, both in the set}.
inline std::uint64_t neighbor_pair_statistic(const TorusGeometry& g, const std::vector<Site>& sites) {
  std::vector<std::uint8_t> mask(g.volume(), 0);
  for (Site x : sites) mask.at(x) = 1;
  std::uint64_t w = 0;
  for (Site x : sites)
    for (int k = 0; k < g.degree(); ++k) w += mask[g.neighbor(x, k)];
  return w;
}

// ---------------------------------------------------------------------------
// Distinguisher

/// n^{d - 2 alpha d / (1 + p) - eps d}.
inline double neighbor_pair_threshold(int n, int d, double alpha, double eps, double p) {
  const double hi = 2 * alpha * p / (1 + p);
  if (!(eps > 0 && eps < hi)) {
    std::ostringstream os;
    os << "epsilon must lie in (0, 2 alpha p/(1+p)) = (0, " << hi << ")";
    throw ValidationError(os.str());
  }
  return std::pow(static_cast<double>(n), d - 2 * alpha * d / (1 + p) - eps * d);
}

struct DistinguisherResult {
  double threshold = 0;
  Proportion walk_exceed;
  Proportion ref_exceed;
  double gap = 0;  // walk frequency minus reference frequency
  double margin = 0.4;
  bool distinguishable = false;
};

inline DistinguisherResult distinguisher_test(const std::vector<double>& walk_W, const std::vector<double>& ref_W, int n,
                                              int d, double alpha, double eps, double p, double margin = 0.4) {
  DistinguisherResult r;
  r.threshold = neighbor_pair_threshold(n, d, alpha, eps, p);
  r.margin = margin;
  for (double w : walk_W) {
    ++r.walk_exceed.trials;
    r.walk_exceed.hits += w >= r.threshold;
  }
  for (double w : ref_W) {
    ++r.ref_exceed.trials;
    r.ref_exceed.hits += w >= r.threshold;
  }
  r.gap = r.walk_exceed.value() - r.ref_exceed.value();
  r.distinguishable = r.gap >= margin;
  return r;
}

// ---------------------------------------------------------------------------
// Uniform hitting of separated sets

inline double separation_radius(int n, double gamma) { return std::pow(static_cast<double>(n), gamma); }

inline void validate_separated(const TorusGeometry& g, const std::vector<Site>& A, double gamma) {
  require(A.size() >= 2, "uniformity test needs at least two target sites");
  const double rho = separation_radius(g.n(), gamma);
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = i + 1; j < A.size(); ++j)
      if (A[i] == A[j] || torus_distance(g, A[i], A[j]) < rho) {
        std::ostringstream os;
        os << "target set is not " << gamma << "-separated: two sites closer than n^gamma = " << rho;
        throw ValidationError(os.str());
      }
}

inline double distance_to_set(const TorusGeometry& g, Site x, const std::vector<Site>& A) {
  double best = std::numeric_limits<double>::infinity();
  for (Site a : A) best = std::min(best, torus_distance(g, x, a));
  return best;
}

/// Sites at distance >= n^gamma from every target.
inline std::vector<Site> admissible_starts(const TorusGeometry& g, const std::vector<Site>& A, double gamma) {
  const double rho = separation_radius(g.n(), gamma);
  std::vector<Site> out;
  for (Site x = 0; x < g.volume(); ++x)
    if (distance_to_set(g, x, A) >= rho) out.push_back(x);
  return out;
}

/// k sites with pairwise distance >= n^gamma, by sequential rejection.
inline std::vector<Site> random_separated_set(const TorusGeometry& g, std::size_t k, double gamma, Xoshiro256& rng,
                                              std::size_t max_attempts = 1000000) {
  const double rho = separation_radius(g.n(), gamma);
  std::vector<Site> out;
  for (std::size_t attempt = 0; out.size() < k; ++attempt) {
    if (attempt >= max_attempts) throw ComputationError("random_separated_set: no separated set found; lower gamma or k");
    const Site x = static_cast<Site>(rng.below(g.volume()));
    if (distance_to_set(g, x, out) >= rho) out.push_back(x);
  }
  return out;
}

struct StartPolicy {
  std::optional<Site> fixed;  // empty: uniform over admissible starts
};

struct UniformityResult {
  std::vector<std::size_t> counts;
  std::vector<double> frequencies;
  double tv = 0;
  ChiSquare chi2;
  std::size_t trials = 0;
};

/// Empirical law of the first site of A reached, against the uniform law.
inline UniformityResult hitting_uniformity_test(const TorusGeometry& g, const std::vector<Site>& A, double gamma,
                                                std::size_t trials, const StartPolicy& policy, std::uint64_t seed,
                                                unsigned jobs = 1) {
  validate_separated(g, A, gamma);
  require(trials >= 1, "uniformity test needs trials >= 1");
  std::vector<Site> starts;
  const double rho = separation_radius(g.n(), gamma);
  if (policy.fixed) {
    require(*policy.fixed < g.volume(), "start site outside the torus");
    if (distance_to_set(g, *policy.fixed, A) < rho)
      throw ValidationError("uniformity test: start is closer than n^gamma to the target set");
    starts.push_back(*policy.fixed);
  } else {
    starts = admissible_starts(g, A, gamma);
    if (starts.empty()) throw ValidationError("uniformity test: no start at distance >= n^gamma from the target set");
  }
  std::vector<std::int32_t> target_index(g.volume(), -1);
  for (std::size_t i = 0; i < A.size(); ++i) target_index[A[i]] = static_cast<std::int32_t>(i);

  const std::size_t chunks = std::min<std::size_t>(trials, 64);
  auto partial = parallel_map(chunks, jobs, [&](std::size_t c) {
    std::vector<std::size_t> counts(A.size(), 0);
    Xoshiro256 rng = replica_stream(seed, c);
    const std::size_t lo = trials * c / chunks, hi = trials * (c + 1) / chunks;
    WalkConfig cfg(g);
    for (std::size_t i = lo; i < hi; ++i) {
      cfg.start = starts.size() == 1 ? starts[0] : starts[rng.below(starts.size())];
      Walk w(cfg, rng);
      Site x = w.position();
      while (target_index[x] < 0) x = w.step();
      ++counts[static_cast<std::size_t>(target_index[x])];
      rng = w.rng();
    }
    return counts;
  });
  UniformityResult r;
  r.trials = trials;
  r.counts.assign(A.size(), 0);
  for (const auto& p : partial)
    for (std::size_t i = 0; i < A.size(); ++i) r.counts[i] += p[i];
  std::vector<double> uni(A.size(), 1.0 / static_cast<double>(A.size()));
  for (auto c : r.counts) r.frequencies.push_back(static_cast<double>(c) / static_cast<double>(trials));
  r.tv = tv_distance(r.frequencies, uni);
  r.chi2 = chi_square_uniform(r.counts);
  return r;
}

struct ExactUniformity {
  std::vector<double> law;  // averaged over the start policy
  double tv = 0;
  double max_deviation = 0;  // max_z |P(hit z first) - 1/|A||
  double max_pointwise_deviation = 0;  // same, maximised over individual starts
};

/// Exact first-hit law on A, averaged over the same start policy.
inline ExactUniformity exact_hitting_uniformity(const ChainProblem& p, const std::vector<Site>& A, double gamma,
                                                const StartPolicy& policy) {
  const auto& g = p.geometry;
  validate_separated(g, A, gamma);
  std::vector<Site> starts = policy.fixed ? std::vector<Site>{*policy.fixed} : admissible_starts(g, A, gamma);
  require(!starts.empty(), "exact uniformity: no admissible start");
  const auto fields = exact_first_hit_fields(p, A);
  ExactUniformity out;
  const double u = 1.0 / static_cast<double>(A.size());
  out.law.assign(A.size(), 0.0);
  for (std::size_t i = 0; i < A.size(); ++i) {
    for (Site x : starts) {
      out.law[i] += fields[i][x];
      out.max_pointwise_deviation = std::max(out.max_pointwise_deviation, std::abs(fields[i][x] - u));
    }
    out.law[i] /= static_cast<double>(starts.size());
    out.max_deviation = std::max(out.max_deviation, std::abs(out.law[i] - u));
  }
  std::vector<double> uni(A.size(), u);
  out.tv = tv_distance(out.law, uni);
  return out;
}

// ---------------------------------------------------------------------------
// t_* calibration

enum class CalibrationMethod { exact, monte_carlo };

struct TStarCalibration {
  double value = 0;
  double T = 0;
  double p = 0;
  double T_error = 0, p_error = 0;
  int r = 0, R = 0;
  CalibrationMethod method = CalibrationMethod::exact;
};

/// t_* = log(n^d) T / p for the ball annulus B(0,R) \ B(0,r), where p is
/// the chance that a stationary excursion visits the centre.
inline TStarCalibration calibrate_t_star(const TorusGeometry& g, int r, int R, std::optional<CalibrationMethod> method = {},
                                         const ExcursionRunPlan& plan = {}, std::size_t oracle_cap = 200000) {
  require(r >= 1 && R > r, "t_star calibration needs 1 <= r < R");
  const AnnulusSpec a = AnnulusSpec::make(Flavor::ball_in_ball, 0, r, R);
  validate_annulus(g, a);
  TStarCalibration c;
  c.r = r;
  c.R = R;
  c.method = method.value_or(g.volume() <= oracle_cap ? CalibrationMethod::exact : CalibrationMethod::monte_carlo);
  if (c.method == CalibrationMethod::exact) {
    const ChainProblem prob(g, 0.0, oracle_cap);
    const ExitChain chain = exact_exit_chain(prob, a);
    c.T = chain.T;
    c.p = exact_excursion_hit_probability(prob, chain, a, {0});
  } else {
    const auto T = estimate_T_rR(g, a, plan);
    const auto h = excursion_hit_frequency(g, a, {0}, plan);
    c.T = T.T_hat.value;
    c.T_error = T.T_hat.std_error;
    c.p = h.any.value();
    c.p_error = h.any.std_error();
  }
  c.value = t_star(g.n(), g.d(), c.T, c.p);
  return c;
}

inline TStarCalibration calibrate_t_star(const TorusGeometry& g, double phi, std::optional<CalibrationMethod> method = {},
                                         const ExcursionRunPlan& plan = {}) {
  const auto rr = t_star_radii(g.n(), g.d(), phi);
  return calibrate_t_star(g, rr.r, rr.R, method, plan);
}

// ---------------------------------------------------------------------------
// Serialisation

inline constexpr char kFieldMagic[4] = {'L', 'C', 'F', 'S'};
inline constexpr std::uint32_t kFieldVersion = 1;

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::uint64_t u;
  if constexpr (std::is_floating_point_v<T>) {
    std::memcpy(&u, &v, sizeof(T));
  } else {
    u = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw ValidationError("field bitmap: truncated header");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  if constexpr (std::is_floating_point_v<T>) {
    T v;
    std::memcpy(&v, &u, sizeof(T));
    return v;
  } else {
    return static_cast<T>(u);
  }
}
}  // namespace detail

/// Little-endian header then n^d bits, site i at bit i % 8 of byte i / 8.
inline void write_field_bitmap(std::ostream& os, const FieldSample& f) {
  os.write(kFieldMagic, 4);
  detail::put_le<std::uint32_t>(os, kFieldVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.n));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.d));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.kind));
  detail::put_le<std::uint64_t>(os, f.seed);
  detail::put_le<double>(os, f.param);
  detail::put_le<std::uint64_t>(os, f.t);
  const TorusGeometry g(f.n, f.d);
  std::vector<unsigned char> bits((g.volume() + 7) / 8, 0);
  for (Site x : f.sites) bits.at(x / 8) |= static_cast<unsigned char>(1u << (x % 8));
  os.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
}

inline FieldSample read_field_bitmap(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kFieldMagic, 4) != 0) throw ValidationError("field bitmap: bad magic");
  if (detail::get_le<std::uint32_t>(is) != kFieldVersion) throw ValidationError("field bitmap: unsupported version");
  FieldSample f;
  f.n = static_cast<int>(detail::get_le<std::uint32_t>(is));
  f.d = static_cast<int>(detail::get_le<std::uint32_t>(is));
  const auto kind = detail::get_le<std::uint32_t>(is);
  if (kind > 3) throw ValidationError("field bitmap: unknown kind");
  f.kind = static_cast<FieldKind>(kind);
  f.seed = detail::get_le<std::uint64_t>(is);
  f.param = detail::get_le<double>(is);
  f.t = detail::get_le<std::uint64_t>(is);
  const TorusGeometry g(f.n, f.d);
  std::vector<unsigned char> bits((g.volume() + 7) / 8);
  if (!is.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size())))
    throw ValidationError("field bitmap: truncated payload");
  for (Site x = 0; x < g.volume(); ++x)
    if ((bits[x / 8] >> (x % 8)) & 1) f.sites.push_back(x);
  return f;
}

inline nlohmann::json field_to_json(const FieldSample& f) {
  const TorusGeometry g(f.n, f.d);
  nlohmann::json sites = nlohmann::json::array();
  for (Site x : f.sites) {
    const Point p = g.point(x);
    std::vector<int> c(p.c.begin(), p.c.begin() + p.dim);
    sites.push_back(c);
  }
  return {{"schema", "latecover.field/1"}, {"kind", to_string(f.kind)}, {"n", f.n},       {"d", f.d},
          {"seed", f.seed},                {"param", f.param},          {"t", f.t},       {"sites", sites}};
}

inline FieldSample field_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "latecover.field/1") throw ValidationError("field JSON: unsupported schema");
  FieldSample f;
  f.kind = parse_field_kind(j.at("kind").get<std::string>());
  f.n = j.at("n").get<int>();
  f.d = j.at("d").get<int>();
  f.seed = j.at("seed").get<std::uint64_t>();
  f.param = j.at("param").get<double>();
  f.t = j.at("t").get<std::uint64_t>();
  const TorusGeometry g(f.n, f.d);
  for (const auto& c : j.at("sites")) {
    Point p(f.d);
    require(c.size() == static_cast<std::size_t>(f.d), "field JSON: coordinate length mismatch");
    for (int i = 0; i < f.d; ++i) p[i] = c.at(static_cast<std::size_t>(i)).get<int>();
    f.sites.push_back(g.index(p));
  }
  std::sort(f.sites.begin(), f.sites.end());
  return f;
}

}  // namespace latecover
