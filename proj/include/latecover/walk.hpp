#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "latecover/errors.hpp"
#include "latecover/lattice.hpp"
#include "latecover/parallel.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"

namespace latecover {

struct WalkConfig {
  TorusGeometry geometry;
  double laziness = 0.0;
  std::uint64_t seed = 0;
  std::optional<Site> start;  // empty: stationary (uniform) start

  explicit WalkConfig(TorusGeometry g, std::uint64_t s = 0) : geometry(std::move(g)), seed(s) {}

  void validate() const {
    require(laziness >= 0.0 && laziness <= 0.5, "laziness must lie in [0, 1/2]");
    if (start) require(*start < geometry.volume(), "start site outside the torus");
  }
};

/// Uniform over all sites: the stationary law of a walk on a regular graph.
inline Site sample_stationary_start(const TorusGeometry& g, Xoshiro256& rng) {
  return static_cast<Site>(rng.below(g.volume()));
}

inline Site sample_start(const WalkConfig& cfg, Xoshiro256& rng) {
  return cfg.start ? *cfg.start : sample_stationary_start(cfg.geometry, rng);
}

/// Walk state X(t). Owned by one worker; replay is bit-exact for a given seed.
class Walk {
 public:
  explicit Walk(const WalkConfig& cfg) : Walk(cfg, Xoshiro256(cfg.seed)) {}

  Walk(const WalkConfig& cfg, Xoshiro256 rng)
      : g_(&cfg.geometry), nbr_(cfg.geometry.neighbors().data()), degree_(static_cast<std::uint64_t>(cfg.geometry.degree())),
        laziness_(cfg.laziness), rng_(rng) {
    cfg.validate();
    pos_ = sample_start(cfg, rng_);
  }

  Site position() const { return pos_; }
  std::uint64_t time() const { return time_; }
  Xoshiro256& rng() { return rng_; }
  const TorusGeometry& geometry() const { return *g_; }

  Site step() {
    ++time_;
    if (laziness_ > 0.0 && rng_.uniform() < laziness_) return pos_;
    pos_ = nbr_[static_cast<std::size_t>(pos_) * degree_ + rng_.below(degree_)];
    return pos_;
  }

 private:
  const TorusGeometry* g_;
  const Site* nbr_;
  std::uint64_t degree_;
  double laziness_;
  Xoshiro256 rng_;
  Site pos_ = 0;
  std::uint64_t time_ = 0;
};

inline constexpr std::uint64_t kNever = ~std::uint64_t{0};

/// Bit-packed visited mask with a live count of unvisited sites. First-hit
/// times are kept only when requested.
class VisitTracker {
 public:
  VisitTracker(std::size_t volume, bool record_first_hits)
      : bits_((volume + 63) / 64, 0), volume_(volume), unvisited_(volume) {
    if (record_first_hits) first_hit_.assign(volume, kNever);
  }

  /// Returns true when x is visited for the first time.
  bool visit(Site x, std::uint64_t t) {
    std::uint64_t& w = bits_[x >> 6];
    const std::uint64_t bit = std::uint64_t{1} << (x & 63);
    if (w & bit) return false;
    w |= bit;
    --unvisited_;
    if (!first_hit_.empty()) first_hit_[x] = t;
    return true;
  }

  bool visited(Site x) const { return (bits_[x >> 6] >> (x & 63)) & 1; }
  std::size_t unvisited_count() const { return unvisited_; }
  std::size_t volume() const { return volume_; }
  bool records_first_hits() const { return !first_hit_.empty(); }
  std::uint64_t first_hit(Site x) const { return first_hit_.at(x); }

  std::size_t popcount() const {
    std::size_t c = 0;
    for (auto w : bits_) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }

  /// Sites currently unvisited, ascending.
  std::vector<Site> unvisited() const {
    std::vector<Site> out;
    out.reserve(unvisited_);
    for (Site x = 0; x < volume_; ++x)
      if (!visited(x)) out.push_back(x);
    return out;
  }

 private:
  std::vector<std::uint64_t> bits_;
  std::size_t volume_;
  std::size_t unvisited_;
  std::vector<std::uint64_t> first_hit_;
};

/// A walk run to a fixed horizon with first-hit times recorded.
struct TrackedRun {
  std::uint64_t horizon = 0;
  VisitTracker tracker;
  std::vector<Site> trajectory;  // X(0..horizon) when requested, else empty
};

inline TrackedRun run_tracked(const WalkConfig& cfg, std::uint64_t horizon, bool keep_trajectory = false) {
  Walk w(cfg);
  TrackedRun run{horizon, VisitTracker(cfg.geometry.volume(), true), {}};
  if (keep_trajectory) run.trajectory.reserve(horizon + 1);
  run.tracker.visit(w.position(), 0);
  if (keep_trajectory) run.trajectory.push_back(w.position());
  for (std::uint64_t t = 1; t <= horizon; ++t) {
    const Site x = w.step();
    run.tracker.visit(x, t);
    if (keep_trajectory) run.trajectory.push_back(x);
  }
  return run;
}

/// Stored trajectory of length horizon+1.
inline std::vector<Site> record_trajectory(const WalkConfig& cfg, std::uint64_t horizon) {
  Walk w(cfg);
  std::vector<Site> out;
  out.reserve(horizon + 1);
  out.push_back(w.position());
  for (std::uint64_t t = 0; t < horizon; ++t) out.push_back(w.step());
  return out;
}

/// U(t): sites with first hitting time > t.
inline std::vector<Site> uncovered_set(const VisitTracker& tracker, std::uint64_t t, std::uint64_t horizon) {
  if (!tracker.records_first_hits()) throw ValidationError("uncovered_set needs a tracker with first-hit times");
  if (t > horizon) throw ValidationError("uncovered_set: requested time beyond the simulated horizon");
  std::vector<Site> out;
  for (Site x = 0; x < tracker.volume(); ++x) {
    const std::uint64_t tau = tracker.first_hit(x);
    if (tau == kNever || tau > t) out.push_back(x);
  }
  return out;
}

inline std::vector<Site> uncovered_set(const TrackedRun& run, std::uint64_t t) {
  return uncovered_set(run.tracker, t, run.horizon);
}

struct StoppedWalk {
  Site position = 0;
  std::uint64_t time = 0;
  std::vector<Site> unvisited;
};

/// Runs until exactly m sites remain unvisited. The count drops by at most
/// one per step, so every m below the initial count is hit.
inline StoppedWalk run_until_uncovered_count(const WalkConfig& cfg, std::size_t m) {
  const std::size_t vol = cfg.geometry.volume();
  require(m >= 1 && m + 1 <= vol, "run_until_uncovered_count: need 1 <= m <= n^d - 1");
  Walk w(cfg);
  VisitTracker tracker(vol, false);
  tracker.visit(w.position(), 0);
  while (tracker.unvisited_count() > m) tracker.visit(w.step(), w.time());
  return {w.position(), w.time(), tracker.unvisited()};
}

/// Number of steps until every site has been visited.
inline std::uint64_t cover_time(const WalkConfig& cfg) {
  Walk w(cfg);
  VisitTracker tracker(cfg.geometry.volume(), false);
  tracker.visit(w.position(), 0);
  while (tracker.unvisited_count() > 0) tracker.visit(w.step(), w.time());
  return w.time();
}

/// Steps until `target` is first visited from the walk's current state.
inline std::uint64_t hitting_time(Walk& w, Site target) {
  const std::uint64_t t0 = w.time();
  Site x = w.position();
  while (x != target) x = w.step();
  return w.time() - t0;
}

struct HitTimeEstimate {
  Estimate estimate;     // the maximum over candidate starts
  Site argmax_start = 0;
  std::vector<std::pair<Site, Estimate>> per_start;
};

/// Candidate starts for max_x E_x tau_0: far corners of the torus.
inline std::vector<Site> default_hit_starts(const TorusGeometry& g) {
  std::vector<Site> out;
  for (int k = g.d(); k >= 1; k -= std::max(1, g.d() / 3)) {
    Point p(g.d());
    for (int i = 0; i < k; ++i) p[i] = g.n() / 2;
    out.push_back(g.index(p));
  }
  return out;
}

/// Monte Carlo t_hit = max_{x,y} E_x tau_y. By transitivity the target is
/// fixed at site 0 and the maximum is taken over candidate starts.
inline HitTimeEstimate estimate_t_hit(const TorusGeometry& g, std::size_t replicas, std::uint64_t seed,
                                      unsigned jobs = 1, std::vector<Site> starts = {}) {
  require(replicas >= 1, "estimate_t_hit: replicas must be >= 1");
  if (starts.empty()) starts = default_hit_starts(g);
  HitTimeEstimate out;
  for (std::size_t s = 0; s < starts.size(); ++s) {
    const auto times = parallel_map(replicas, jobs, [&](std::size_t i) {
      WalkConfig cfg(g);
      cfg.start = starts[s];
      Walk w(cfg, replica_stream(seed, s * 1'000'003ULL + i));
      return static_cast<double>(hitting_time(w, 0));
    });
    const Estimate e = estimate_mean(times);
    out.per_start.emplace_back(starts[s], e);
    if (s == 0 || e.value > out.estimate.value) {
      out.estimate = e;
      out.argmax_start = starts[s];
    }
  }
  return out;
}

}  // namespace latecover
