#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "latecover/errors.hpp"
#include "latecover/lattice.hpp"
#include "latecover/parallel.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"
#include "latecover/walk.hpp"

namespace latecover {

/// One excursion: first entrance to the inner boundary at tau, first exit
/// from the outer shape at sigma. duration is sigma_k - sigma_{k-1} for k >= 1
/// and sigma_0 - tau_0 for k = 0.
struct ExcursionRecord {
  std::size_t k = 0;
  std::uint64_t tau = 0;
  std::uint64_t sigma = 0;
  Site entry = 0;
  Site exit = 0;
  std::uint64_t duration = 0;
  std::uint64_t hits = 0;  // bit i set if marked site i was visited in [tau, sigma]

  friend bool operator==(const ExcursionRecord&, const ExcursionRecord&) = default;
};

/// Per-site lookup for an annulus: inner-boundary and inside-outer flags,
/// plus the index of each marked site (at most 64).
class AnnulusIndex {
 public:
  static constexpr std::uint8_t kInnerBoundary = 1;
  static constexpr std::uint8_t kInsideOuter = 2;
  static constexpr std::uint8_t kMarked = 4;

  AnnulusIndex(const TorusGeometry& g, const AnnulusSpec& a, std::vector<Site> marked = {}, bool validate = true)
      : spec_(a), marked_(std::move(marked)) {
    if (validate) validate_annulus(g, a);
    require(marked_.size() <= 64, "at most 64 marked sites are supported");
    auto flags = std::make_shared<std::vector<std::uint8_t>>(g.volume(), 0);
    for (Site x : shape_sites(g, a.outer)) (*flags)[x] |= kInsideOuter;
    for (Site x : shape_boundary(g, a.inner)) (*flags)[x] |= kInnerBoundary;
    for (Site x : marked_) {
      require(x < g.volume(), "marked site outside the torus");
      (*flags)[x] |= kMarked;
    }
    flags_ = std::move(flags);
  }

  std::uint8_t flags(Site x) const { return (*flags_)[x]; }
  const AnnulusSpec& spec() const { return spec_; }
  const std::vector<Site>& marked() const { return marked_; }

  std::uint64_t mark_bit(Site x) const {
    for (std::size_t i = 0; i < marked_.size(); ++i)
      if (marked_[i] == x) return std::uint64_t{1} << i;
    return 0;
  }

 private:
  AnnulusSpec spec_;
  std::vector<Site> marked_;
  std::shared_ptr<const std::vector<std::uint8_t>> flags_;
};

/// Streaming realisation of the alternating stopping times. Feed X(t) for
/// consecutive t; a record is returned at each sigma.
class ExcursionScanner {
 public:
  explicit ExcursionScanner(AnnulusIndex index) : index_(std::move(index)) {}

  std::optional<ExcursionRecord> feed(std::uint64_t t, Site x) {
    const std::uint8_t f = index_.flags(x);
    if (!inside_) {
      if (!(f & AnnulusIndex::kInnerBoundary)) return std::nullopt;
      inside_ = true;
      cur_ = ExcursionRecord{};
      cur_.k = completed_;
      cur_.tau = t;
      cur_.entry = x;
      if (completed_ == 0) tau0_ = t;
    }
    if (f & AnnulusIndex::kMarked) cur_.hits |= index_.mark_bit(x);
    if (f & AnnulusIndex::kInsideOuter) return std::nullopt;
    inside_ = false;
    cur_.sigma = t;
    cur_.exit = x;
    cur_.duration = completed_ == 0 ? t - cur_.tau : t - last_sigma_;
    last_sigma_ = t;
    ++completed_;
    return cur_;
  }

  bool in_progress() const { return inside_; }
  std::size_t completed() const { return completed_; }
  std::optional<std::uint64_t> tau0() const { return tau0_; }
  std::uint64_t last_sigma() const { return last_sigma_; }
  /// The excursion underway, sigma unset.
  const ExcursionRecord& partial() const { return cur_; }
  const AnnulusIndex& index() const { return index_; }

 private:
  AnnulusIndex index_;
  bool inside_ = false;
  std::size_t completed_ = 0;
  std::uint64_t last_sigma_ = 0;
  std::optional<std::uint64_t> tau0_;
  ExcursionRecord cur_;
};

struct ExcursionList {
  std::vector<ExcursionRecord> records;
  std::optional<ExcursionRecord> partial;  // started but not finished by the horizon; never counted
  std::optional<std::uint64_t> tau0;
  std::uint64_t horizon = 0;
};

/// Excursions of a stored trajectory X(0), ..., X(horizon).
inline ExcursionList decompose_excursions(const TorusGeometry& g, const std::vector<Site>& trajectory, const AnnulusSpec& a,
                                          std::vector<Site> marked = {}) {
  require(!trajectory.empty(), "decompose_excursions: empty trajectory");
  ExcursionScanner scan(AnnulusIndex(g, a, std::move(marked)));
  ExcursionList out;
  out.horizon = trajectory.size() - 1;
  for (std::size_t t = 0; t < trajectory.size(); ++t)
    if (auto rec = scan.feed(t, trajectory[t])) out.records.push_back(*rec);
  if (scan.in_progress()) out.partial = scan.partial();
  out.tau0 = scan.tau0();
  return out;
}

/// N = min{k >= 0 : sum_{i=1..k} (sigma_i - sigma_{i-1}) + (sigma_0 - tau_0) >= t}.
/// The sum telescopes to sigma_k - tau_0. Returns nullopt when the stored
/// records and horizon do not determine N.
inline std::optional<std::size_t> count_by_min_rule(const ExcursionList& list, std::uint64_t t) {
  if (t == 0) return 0;
  if (!list.tau0) return std::nullopt;
  const std::uint64_t tau0 = *list.tau0;
  for (const auto& rec : list.records)
    if (rec.sigma - tau0 >= t) return rec.k;
  if (list.horizon >= tau0 + t) return list.records.size();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Parameter checks

/// Admissibility of (r, R) for a user-facing counter. Returns a warning text
/// when R < 10 r (the chain results are stated for R >= 10 r).
inline std::string check_radii(double r, double R) {
  require(r > 0 && R > 0, "radii must be positive");
  require(R >= 2 * r, "outer radius R must be at least 2r");
  if (R < 10 * r) {
    std::ostringstream os;
    os << "R=" << R << " < 10r=" << 10 * r << ": exit-chain mixing bounds are only claimed for R >= 10r";
    return os.str();
  }
  return {};
}

/// delta = r^{(2-d)/2} n^psi.
inline double default_delta(double r, int n, int d, double psi = 0.05) {
  return std::pow(r, (2.0 - d) / 2.0) * std::pow(static_cast<double>(n), psi);
}

inline void validate_delta_single(double delta, double psi, int n, int d, double r) {
  require(psi > 0 && psi < 0.5, "psi must lie in (0, 1/2)");
  require(delta > 0 && delta < 1, "delta must lie in (0, 1)");
  const double nn = n;
  if (delta * std::pow(r, d - 2.0) * std::pow(nn, -psi - 0.5) > 1.0)
    throw ValidationError("delta*r^(d-2)*n^(-psi-1/2) <= 1 violated (single-annulus concentration hypothesis)");
  if (delta * std::pow(nn, psi) > 1.0)
    throw ValidationError("delta*n^psi <= 1 violated (single-annulus concentration hypothesis)");
}

inline void validate_delta_boxes(double delta, double psi, int n, int d, double beta, bool nested) {
  require(psi > 0 && psi < 0.5, "psi must lie in (0, 1/2)");
  require(delta > 0 && delta < 1, "delta must lie in (0, 1)");
  if (nested) require(delta < 1.0 / 3.0, "delta < 1/3 violated (nested-counter hypothesis)");
  const double nn = n;
  if (delta * std::pow(nn, beta * (d - 2.0) - psi - 0.5) > 1.0)
    throw ValidationError("delta*n^(beta(d-2)-psi-1/2) <= 1 violated (box-annulus concentration hypothesis)");
  if (delta * std::pow(nn, psi) > 1.0)
    throw ValidationError("delta*n^psi <= 1 violated (box-annulus concentration hypothesis)");
}

// ---------------------------------------------------------------------------
// Counting along a live walk

struct ExcursionCounts {
  AnnulusSpec annulus;
  Flavor flavor = Flavor::box_in_ball;
  std::uint64_t horizon = 0;
  std::size_t count = 0;
  std::string warning;
};

/// Runs the walk until the min-rule resolves and returns N.
inline std::size_t run_min_rule(Walk& w, ExcursionScanner& scan, std::uint64_t t) {
  if (t == 0) return 0;
  scan.feed(w.time(), w.position());
  for (;;) {
    const Site x = w.step();
    if (auto rec = scan.feed(w.time(), x)) {
      if (rec->sigma - *scan.tau0() >= t) return rec->k;
    }
  }
}

/// N^{flavor}_x(r, R, t) for a walk started from the stationary law.
inline ExcursionCounts count_excursions(const TorusGeometry& g, Site x, double r, double R, std::uint64_t t, Flavor flavor,
                                        std::uint64_t seed) {
  ExcursionCounts out;
  out.warning = check_radii(r, R);
  out.annulus = AnnulusSpec::make(flavor, x, r, R);
  out.flavor = flavor;
  out.horizon = t;
  ExcursionScanner scan(AnnulusIndex(g, out.annulus));
  WalkConfig cfg(g, seed);
  Walk w(cfg);
  out.count = run_min_rule(w, scan, t);
  return out;
}

/// Walks until `burn_in + count` excursions complete; returns the last `count`.
inline std::vector<ExcursionRecord> collect_excursions(Walk& w, ExcursionScanner& scan, std::size_t count,
                                                       std::size_t burn_in) {
  std::vector<ExcursionRecord> out;
  out.reserve(count);
  if (auto rec = scan.feed(w.time(), w.position()); rec && rec->k >= burn_in) out.push_back(*rec);
  while (out.size() < count) {
    const Site x = w.step();
    if (auto rec = scan.feed(w.time(), x); rec && rec->k >= burn_in) out.push_back(*rec);
  }
  return out;
}

struct ExcursionLengthStats {
  Estimate T_hat;                                // mean of sigma_i - sigma_{i-1}, i > burn_in
  std::map<Site, RunningStats> by_start;        // keyed by the preceding exit point b_{i-1}
  std::vector<double> replica_means;
};

struct ExcursionRunPlan {
  std::size_t replicas = 1;
  std::size_t excursions_per_replica = 1000;
  std::size_t burn_in = 10;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

/// T_{r,R}: mean excursion length with the start point following the exit
/// chain after burn-in. The CI is across replicas when there are several,
/// else from batch means.
inline ExcursionLengthStats estimate_T_rR(const TorusGeometry& g, const AnnulusSpec& a, const ExcursionRunPlan& plan) {
  require(plan.burn_in >= 1, "estimate_T_rR: burn_in must be >= 1");
  require(plan.replicas >= 1 && plan.excursions_per_replica >= 2, "estimate_T_rR: too few excursions");
  const AnnulusIndex index(g, a);
  struct Rep {
    std::vector<double> durations;
    std::vector<Site> starts;
  };
  auto reps = parallel_map(plan.replicas, plan.jobs, [&](std::size_t i) {
    WalkConfig cfg(g);
    Walk w(cfg, replica_stream(plan.seed, i));
    ExcursionScanner scan(index);
    // One extra record so every kept duration has its starting exit point.
    auto recs = collect_excursions(w, scan, plan.excursions_per_replica + 1, plan.burn_in - 1);
    Rep r;
    for (std::size_t j = 1; j < recs.size(); ++j) {
      r.durations.push_back(static_cast<double>(recs[j].duration));
      r.starts.push_back(recs[j - 1].exit);
    }
    return r;
  });
  ExcursionLengthStats out;
  std::vector<double> all;
  for (const auto& r : reps) {
    all.insert(all.end(), r.durations.begin(), r.durations.end());
    out.replica_means.push_back(std::accumulate(r.durations.begin(), r.durations.end(), 0.0) / static_cast<double>(r.durations.size()));
    for (std::size_t j = 0; j < r.durations.size(); ++j) out.by_start[r.starts[j]].push(r.durations[j]);
  }
  if (plan.replicas >= 2) {
    out.T_hat = estimate_mean(out.replica_means);
    out.T_hat.samples = all.size();
  } else {
    out.T_hat = batch_means(all);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hit frequencies per excursion

struct HitFrequency {
  Proportion any;                     // at least one marked site hit
  std::vector<Proportion> per_target;
};

/// Fraction of excursions (after burn-in) during which marked sites are hit.
inline HitFrequency excursion_hit_frequency(const TorusGeometry& g, const AnnulusSpec& a, const std::vector<Site>& marked,
                                            const ExcursionRunPlan& plan) {
  const AnnulusIndex index(g, a, marked);
  auto reps = parallel_map(plan.replicas, plan.jobs, [&](std::size_t i) {
    WalkConfig cfg(g);
    Walk w(cfg, replica_stream(plan.seed, i));
    ExcursionScanner scan(index);
    HitFrequency h;
    h.per_target.resize(marked.size());
    for (const auto& rec : collect_excursions(w, scan, plan.excursions_per_replica, plan.burn_in)) {
      ++h.any.trials;
      h.any.hits += rec.hits != 0;
      for (std::size_t j = 0; j < marked.size(); ++j) {
        ++h.per_target[j].trials;
        h.per_target[j].hits += (rec.hits >> j) & 1;
      }
    }
    return h;
  });
  HitFrequency out;
  out.per_target.resize(marked.size());
  for (const auto& h : reps) {
    out.any.hits += h.any.hits;
    out.any.trials += h.any.trials;
    for (std::size_t j = 0; j < marked.size(); ++j) {
      out.per_target[j].hits += h.per_target[j].hits;
      out.per_target[j].trials += h.per_target[j].trials;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exit-point chain

/// Symmetries of Z^d (axis permutations with sign flips) that preserve both
/// shapes of the annulus about its centre. Each is a signed permutation:
/// image[i] = sign[i] * o[perm[i]].
struct SignedPermutation {
  std::array<int, kMaxDim> perm{};
  std::array<int, kMaxDim> sign{};

  Point apply(const Point& o) const {
    Point r(o.dim);
    for (int i = 0; i < o.dim; ++i) r[i] = sign[static_cast<std::size_t>(i)] * o[perm[static_cast<std::size_t>(i)]];
    return r;
  }
};

inline std::vector<SignedPermutation> annulus_symmetries(int d, const AnnulusSpec& a) {
  require(d <= 6, "symmetry enumeration limited to d <= 6");
  std::vector<int> p(static_cast<std::size_t>(d));
  std::iota(p.begin(), p.end(), 0);
  const auto inner = shape_offsets(d, a.inner);
  const auto outer = shape_offsets(d, a.outer);
  const ShapeSpec in0{a.inner.kind, 0, a.inner.size};
  const ShapeSpec out0{a.outer.kind, 0, a.outer.size};
  std::vector<SignedPermutation> out;
  do {
    for (int mask = 0; mask < (1 << d); ++mask) {
      SignedPermutation sp;
      for (int i = 0; i < d; ++i) {
        sp.perm[static_cast<std::size_t>(i)] = p[static_cast<std::size_t>(i)];
        sp.sign[static_cast<std::size_t>(i)] = (mask >> i) & 1 ? -1 : 1;
      }
      bool ok = true;
      for (const auto& o : inner)
        if (!in0.contains_offset(sp.apply(o))) ok = false;
      for (const auto& o : outer)
        if (ok && !out0.contains_offset(sp.apply(o))) ok = false;
      if (ok) out.push_back(sp);
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return out;
}

struct ExitChainStats {
  std::vector<Site> support;                 // outer vertex boundary, ascending
  std::vector<std::size_t> counts;           // visits per support site
  std::vector<double> pi_hat;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> transitions;
  std::vector<std::size_t> sequence;         // exit points as support indices
  std::size_t k0_hat = 0;
  std::vector<double> autocorrelation;       // lags 0..max_lag

  std::size_t index_of(Site x) const {
    auto it = std::lower_bound(support.begin(), support.end(), x);
    return static_cast<std::size_t>(it - support.begin());
  }
};

/// Average of a distribution over the support under the annulus symmetries.
inline std::vector<double> symmetrize(const TorusGeometry& g, const AnnulusSpec& a, const std::vector<Site>& support,
                                      const std::vector<double>& p) {
  const auto syms = annulus_symmetries(g.d(), a);
  std::vector<double> out(p.size(), 0.0);
  for (std::size_t i = 0; i < support.size(); ++i) {
    const Point o = g.offset(a.outer.center, support[i]);
    for (const auto& sp : syms) {
      const Site y = g.translate(a.outer.center, sp.apply(o));
      auto it = std::lower_bound(support.begin(), support.end(), y);
      if (it == support.end() || *it != y) throw ComputationError("symmetrize: support is not closed under symmetry");
      out[static_cast<std::size_t>(it - support.begin())] += p[i] / static_cast<double>(syms.size());
    }
  }
  return out;
}

/// Lag autocorrelation of the exit direction (unit vector from the centre).
inline std::vector<double> exit_direction_acf(const TorusGeometry& g, Site center, const std::vector<Site>& exits,
                                              std::size_t max_lag) {
  const int d = g.d();
  const std::size_t m = exits.size();
  std::vector<std::array<double, kMaxDim>> u(m);
  std::array<double, kMaxDim> mean{};
  for (std::size_t k = 0; k < m; ++k) {
    const Point o = g.offset(center, exits[k]);
    double norm = 0.0;
    for (int i = 0; i < d; ++i) norm += static_cast<double>(o[i]) * o[i];
    norm = std::sqrt(norm);
    for (int i = 0; i < d; ++i) {
      u[k][static_cast<std::size_t>(i)] = o[i] / norm;
      mean[static_cast<std::size_t>(i)] += u[k][static_cast<std::size_t>(i)] / static_cast<double>(m);
    }
  }
  std::vector<double> acf;
  double c0 = 0.0;
  for (std::size_t lag = 0; lag <= max_lag && lag < m; ++lag) {
    double c = 0.0;
    for (std::size_t k = 0; k + lag < m; ++k)
      for (std::size_t i = 0; i < static_cast<std::size_t>(d); ++i) c += (u[k][i] - mean[i]) * (u[k + lag][i] - mean[i]);
    c /= static_cast<double>(m - lag);
    if (lag == 0) c0 = c;
    acf.push_back(c0 > 0 ? c / c0 : 0.0);
  }
  return acf;
}

/// Smallest lag >= 1 with |acf| below the threshold.
inline std::size_t k0_from_acf(const std::vector<double>& acf, double threshold = 0.05) {
  for (std::size_t lag = 1; lag < acf.size(); ++lag)
    if (std::abs(acf[lag]) < threshold) return lag;
  return acf.size();
}

inline ExitChainStats exit_chain_stats(const TorusGeometry& g, const AnnulusSpec& a, std::size_t num_excursions,
                                       std::size_t burn_in, std::uint64_t seed, std::size_t max_lag = 20) {
  require(num_excursions >= 10, "exit_chain_stats: insufficient samples (need >= 10 excursions)");
  ExitChainStats s;
  s.support = outer_boundary(g, a.outer);
  s.counts.assign(s.support.size(), 0);
  WalkConfig cfg(g);
  Walk w(cfg, replica_stream(seed, 0));
  ExcursionScanner scan(AnnulusIndex(g, a));
  const auto recs = collect_excursions(w, scan, num_excursions, burn_in);
  std::vector<Site> exits;
  for (const auto& rec : recs) {
    const std::size_t i = s.index_of(rec.exit);
    if (i >= s.support.size() || s.support[i] != rec.exit) throw ComputationError("exit point outside the outer boundary");
    ++s.counts[i];
    if (!s.sequence.empty()) ++s.transitions[{s.sequence.back(), i}];
    s.sequence.push_back(i);
    exits.push_back(rec.exit);
  }
  s.pi_hat.resize(s.support.size());
  for (std::size_t i = 0; i < s.support.size(); ++i)
    s.pi_hat[i] = static_cast<double>(s.counts[i]) / static_cast<double>(recs.size());
  s.autocorrelation = exit_direction_acf(g, a.outer.center, exits, max_lag);
  s.k0_hat = k0_from_acf(s.autocorrelation);
  return s;
}

// ---------------------------------------------------------------------------
// Nested counts: W and the box decomposition

struct WStats {
  std::vector<std::uint32_t> samples;
  double mean = 0.0;
  std::array<double, 7> moments{};  // E[W^j], j = 0..6
  Estimate big_T;                   // excursion length of the big annulus, same run
  int s = 0, h = 0;
  double big_radius = 0;

  Estimate mean_estimate() const {
    std::vector<double> xs(samples.begin(), samples.end());
    return estimate_mean(xs);
  }
};

struct WPlan {
  std::size_t samples = 1000;
  std::size_t burn_in = 10;
  double outer_factor = 10.0;  // big ball radius = outer_factor * round(n^beta)
  std::size_t replicas = 1;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

/// Annuli used by the W statistic about `center`: the thin box annulus
/// S(s+h) \ S(s) and the big annulus B(factor*s) \ S(s).
inline std::pair<AnnulusSpec, AnnulusSpec> w_annuli(const TorusGeometry& g, Site center, double beta, double phi,
                                                    double outer_factor) {
  const auto z = decomposition_sizes(g.n(), beta, phi);
  require(z.s > z.h && z.h >= 1, "W statistic: need round(n^beta) > round(n^phi) >= 1");
  const AnnulusSpec thin{ShapeSpec::box(center, z.s), ShapeSpec::box(center, z.outer)};
  const AnnulusSpec big{ShapeSpec::box(center, z.s), ShapeSpec::ball(center, outer_factor * z.s)};
  if (big.outer.extent() > g.n() - 1) {
    std::ostringstream os;
    os << "W statistic: big ball radius " << outer_factor * z.s << " does not fit the torus of side " << g.n()
       << "; lower the outer factor";
    throw ValidationError(os.str());
  }
  validate_annulus(g, thin);
  validate_annulus(g, big);
  const auto ball = shape_mask(g, big.outer);
  for (Site x : shape_sites(g, thin.outer)) {
    bool interior = ball[x] != 0;
    for (int k = 0; k < g.degree() && interior; ++k) interior = ball[g.neighbor(x, k)] != 0;
    require(interior, "W statistic: the big ball must contain the thin outer box with its neighbours");
  }
  return {thin, big};
}

/// Largest outer factor whose ball fits the torus.
inline double max_w_outer_factor(int n, double beta, double phi) {
  const auto z = decomposition_sizes(n, beta, phi);
  return std::floor((n - 2) / 2.0) / z.s;
}

/// W: thin-annulus excursions completed during one big-annulus excursion.
/// Big excursion k spans (sigma_{k-1}, sigma_k]; W_k counts thin exits in it.
inline WStats sample_W(const TorusGeometry& g, double beta, double phi, const WPlan& plan) {
  const auto [thin, big] = w_annuli(g, 0, beta, phi, plan.outer_factor);
  const AnnulusIndex thin_idx(g, thin), big_idx(g, big);
  require(plan.replicas >= 1 && plan.samples >= plan.replicas, "sample_W: need samples >= replicas >= 1");
  const std::size_t per = plan.samples / plan.replicas;
  struct Rep {
    std::vector<std::uint32_t> w;
    std::vector<double> durations;
  };
  auto reps = parallel_map(plan.replicas, plan.jobs, [&](std::size_t i) {
    WalkConfig cfg(g);
    Walk w(cfg, replica_stream(plan.seed, i));
    ExcursionScanner ts(thin_idx), bs(big_idx);
    Rep r;
    std::uint32_t thin_count = 0;
    auto feed = [&](std::uint64_t t, Site x) {
      if (ts.feed(t, x)) ++thin_count;
      if (auto rec = bs.feed(t, x)) {
        if (rec->k >= plan.burn_in) {
          r.w.push_back(thin_count);
          r.durations.push_back(static_cast<double>(rec->duration));
        }
        thin_count = 0;
      }
    };
    feed(0, w.position());
    while (r.w.size() < per) feed(w.time() + 1, w.step());
    return r;
  });
  WStats out;
  const auto z = decomposition_sizes(g.n(), beta, phi);
  out.s = z.s;
  out.h = z.h;
  out.big_radius = plan.outer_factor * z.s;
  std::vector<double> durations, rep_T;
  for (auto& r : reps) {
    out.samples.insert(out.samples.end(), r.w.begin(), r.w.end());
    durations.insert(durations.end(), r.durations.begin(), r.durations.end());
    rep_T.push_back(std::accumulate(r.durations.begin(), r.durations.end(), 0.0) / static_cast<double>(r.durations.size()));
  }
  for (std::size_t j = 0; j < out.moments.size(); ++j) {
    double acc = 0.0;
    for (auto v : out.samples) acc += std::pow(static_cast<double>(v), static_cast<double>(j));
    out.moments[j] = acc / static_cast<double>(out.samples.size());
  }
  out.mean = out.moments[1];
  out.big_T = plan.replicas >= 2 ? estimate_mean(rep_T) : batch_means(durations);
  out.big_T.samples = durations.size();
  return out;
}

/// P(G_1 + ... + G_k > u) for i.i.d. geometric G_i on {1,2,...} with success
/// probability p, i.e. P(Binomial(u, p) < k).
inline double geometric_sum_tail(int k, double p, std::uint64_t u) {
  if (u < static_cast<std::uint64_t>(k)) return 1.0;
  double acc = 0.0;
  const double lu = static_cast<double>(u);
  for (int j = 0; j < k; ++j) {
    const double lc = std::lgamma(lu + 1) - std::lgamma(j + 1.0) - std::lgamma(lu - j + 1);
    acc += std::exp(lc + j * std::log(p) + (lu - j) * std::log1p(-p));
  }
  return std::min(1.0, acc);
}

inline std::uint64_t sample_geometric(double p, Xoshiro256& rng) {
  require(p > 0 && p <= 1, "geometric parameter must lie in (0,1]");
  if (p == 1.0) return 1;
  const double u = 1.0 - rng.uniform();  // (0,1]
  return 1 + static_cast<std::uint64_t>(std::floor(std::log(u) / std::log1p(-p)));
}

struct NestedCount {
  std::size_t count = 0;          // ball-annulus excursions completed
  std::size_t thin_target = 0;    // floor(E_lower(t, delta/4))
  std::uint64_t stop_time = 0;    // completion of the thin_target-th thin excursion
};

struct NestedInputs {
  double EW_hat = 0;         // estimate of E[W]
  double T_box_ball_hat = 0; // big-annulus excursion length
};

/// floor(t E[W] / ((1 + delta) T)).
inline std::size_t thin_lower_count(double t, double delta, const NestedInputs& in) {
  require(in.EW_hat > 0 && in.T_box_ball_hat > 0, "nested count needs positive E[W] and T estimates");
  return static_cast<std::size_t>(std::floor(t * in.EW_hat / ((1.0 + delta) * in.T_box_ball_hat)));
}

/// N_z(r, R, t): excursions across B(z,R) \ B(z,r) completed while the first
/// floor(E_lower(t, delta/4)) excursions across the thin annulus around z's
/// box complete.
inline NestedCount count_nested_excursions(const Decomposition& dec, Site z, double r, double R, double t, double delta,
                                           const NestedInputs& in, std::uint64_t seed) {
  const TorusGeometry& g = dec.geometry();
  if (dec.in_annular_region(z)) throw ValidationError("nested count: z lies in the annular region A");
  const Site c = dec.box_center(dec.box_of(z));
  const AnnulusSpec thin{ShapeSpec::box(c, dec.sizes().s), ShapeSpec::box(c, dec.sizes().outer)};
  const AnnulusSpec balls = AnnulusSpec::make(Flavor::ball_in_ball, z, r, R);
  validate_annulus(g, balls);
  const auto middle = shape_mask(g, thin.inner);
  for (Site x : shape_sites(g, balls.outer))
    require(middle[x] != 0, "nested count: B(z,R) must lie inside the box S_z");
  NestedCount out;
  out.thin_target = thin_lower_count(t, delta / 4.0, in);
  if (out.thin_target == 0) return out;
  ExcursionScanner ts(AnnulusIndex(g, thin, {}, false)), bs(AnnulusIndex(g, balls));
  WalkConfig cfg(g, seed);
  Walk w(cfg);
  std::size_t balls_done = 0;
  auto feed = [&](std::uint64_t tt, Site x) {
    if (bs.feed(tt, x)) ++balls_done;
    if (auto rec = ts.feed(tt, x); rec && rec->k + 1 == out.thin_target) {
      out.count = balls_done;
      out.stop_time = tt;
      return true;
    }
    return false;
  };
  if (feed(0, w.position())) return out;
  while (!feed(w.time() + 1, w.step())) {
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concentration

enum class CounterKind { annulus, thin_box, nested };

struct CounterSpec {
  CounterKind kind = CounterKind::annulus;
  Flavor flavor = Flavor::box_in_ball;
  double r = 2, R = 6;           // annulus and nested ball radii
  double beta = 0.6, phi = 0.2;  // thin and nested
  double T_hat = 0;              // band denominator: T of the counted annulus (nested: ball-in-ball)
  NestedInputs nested;           // thin and nested: E[W] and big-annulus T
  Site site = 0;                 // x or z
};

struct ConcentrationReport {
  double lower = 0, upper = 0;
  std::vector<double> values;
  Proportion outside;
};

inline std::pair<double, double> concentration_band(const CounterSpec& c, double t, double delta) {
  require(delta > 0 && delta < 1, "delta must lie in (0,1)");
  switch (c.kind) {
    case CounterKind::annulus:
    case CounterKind::nested:
      require(c.T_hat > 0, "concentration band needs T_hat > 0");
      return {t / ((1 + delta) * c.T_hat), t / ((1 - delta) * c.T_hat)};
    case CounterKind::thin_box:
      require(c.nested.EW_hat > 0 && c.nested.T_box_ball_hat > 0, "thin band needs E[W] and T estimates");
      return {t * c.nested.EW_hat / ((1 + delta) * c.nested.T_box_ball_hat),
              t * c.nested.EW_hat / ((1 - delta) * c.nested.T_box_ball_hat)};
  }
  return {0, 0};
}

/// Fraction of replicas whose counter falls outside its concentration band.
inline ConcentrationReport concentration_report(const TorusGeometry& g, const CounterSpec& c, double t, double delta,
                                                std::size_t replicas, std::uint64_t seed, unsigned jobs = 1) {
  ConcentrationReport out;
  std::tie(out.lower, out.upper) = concentration_band(c, t, delta);
  const auto ht = static_cast<std::uint64_t>(std::llround(t));
  std::optional<Decomposition> dec;
  std::optional<AnnulusIndex> idx;
  if (c.kind == CounterKind::nested) dec.emplace(g, c.beta, c.phi);
  if (c.kind == CounterKind::annulus) idx.emplace(g, AnnulusSpec::make(c.flavor, c.site, c.r, c.R));
  if (c.kind == CounterKind::thin_box) {
    const auto z = decomposition_sizes(g.n(), c.beta, c.phi);
    idx.emplace(g, AnnulusSpec{ShapeSpec::box(c.site, z.s), ShapeSpec::box(c.site, z.outer)});
  }
  out.values = parallel_map(replicas, jobs, [&](std::size_t i) -> double {
    const std::uint64_t s = stream_key(seed, i);
    if (c.kind == CounterKind::nested)
      return static_cast<double>(count_nested_excursions(*dec, c.site, c.r, c.R, t, delta, c.nested, s).count);
    ExcursionScanner scan(*idx);
    WalkConfig cfg(g, s);
    Walk w(cfg);
    return static_cast<double>(run_min_rule(w, scan, ht));
  });
  out.outside.trials = replicas;
  for (double v : out.values) out.outside.hits += (v < out.lower || v > out.upper);
  return out;
}

}  // namespace latecover
