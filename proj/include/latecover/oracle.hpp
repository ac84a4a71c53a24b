#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "latecover/errors.hpp"
#include "latecover/lattice.hpp"
#include "latecover/stats.hpp"

namespace latecover {

/// A finite-chain problem on the torus: every site is free, absorbing
/// (a target whose hitting we record) or stopping (absorbing, recorded as
/// failure). Transitions are SRW with optional holding probability.
struct ChainProblem {
  TorusGeometry geometry;
  double laziness = 0.0;
  std::size_t cap = 200000;

  explicit ChainProblem(TorusGeometry g, double lazy = 0.0, std::size_t state_cap = 200000)
      : geometry(std::move(g)), laziness(lazy), cap(state_cap) {
    require(laziness >= 0.0 && laziness < 1.0, "oracle: laziness must lie in [0,1)");
    if (geometry.volume() > cap) {
      std::ostringstream os;
      os << "oracle: " << geometry.volume() << " states exceed the cap of " << cap;
      throw ValidationError(os.str());
    }
  }

  double move_prob() const { return (1.0 - laziness) / geometry.degree(); }
};

enum class Role : std::uint8_t { free, target, stop };

/// Factorised restriction of I - P to the free sites. The matrix is
/// symmetric (P is symmetric for SRW) and positive definite whenever every
/// free site can reach a non-free one.
class RestrictedSolver {
 public:
  RestrictedSolver(const ChainProblem& p, const std::vector<Role>& roles) : p_(p), roles_(roles) {
    const auto& g = p.geometry;
    require(roles.size() == g.volume(), "oracle: role vector size mismatch");
    local_.assign(g.volume(), -1);
    for (Site x = 0; x < g.volume(); ++x)
      if (roles[x] == Role::free) {
        local_[x] = static_cast<int>(free_.size());
        free_.push_back(x);
      }
    check_reachability();
    const int m = static_cast<int>(free_.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(free_.size() * static_cast<std::size_t>(g.degree() + 1));
    const double q = p.move_prob();
    for (int i = 0; i < m; ++i) {
      trip.emplace_back(i, i, 1.0 - p.laziness);
      for (int k = 0; k < g.degree(); ++k) {
        const int j = local_[g.neighbor(free_[static_cast<std::size_t>(i)], k)];
        if (j >= 0) trip.emplace_back(i, j, -q);
      }
    }
    A_.resize(m, m);
    A_.setFromTriplets(trip.begin(), trip.end());
    if (m > 0) {
      ldlt_.compute(A_);
      if (ldlt_.info() != Eigen::Success) throw ComputationError("oracle: factorisation failed (singular system)");
    }
  }

  const std::vector<Site>& free_sites() const { return free_; }
  int local(Site x) const { return local_[x]; }
  const ChainProblem& problem() const { return p_; }

  /// Solves (I - P_FF) u = b, verifying the residual.
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    if (b.size() == 0) return b;
    Eigen::VectorXd u = ldlt_.solve(b);
    const double rn = (A_ * u - b).norm(), bn = b.norm();
    last_residual_ = bn > 0 ? rn / bn : rn;
    if (!(rn <= 1e-10 * std::max(bn, 1e-300))) {
      std::ostringstream os;
      os << "oracle: residual " << rn << " exceeds 1e-10 * |rhs| = " << 1e-10 * bn;
      throw ComputationError(os.str());
    }
    return u;
  }

  double last_relative_residual() const { return last_residual_; }

  /// Harmonic extension of boundary data: u = P u on free sites,
  /// u = data on non-free sites.
  std::vector<double> harmonic(const std::vector<double>& data) const {
    const auto& g = p_.geometry;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(free_.size()));
    const double q = p_.move_prob();
    for (std::size_t i = 0; i < free_.size(); ++i)
      for (int k = 0; k < g.degree(); ++k) {
        const Site y = g.neighbor(free_[i], k);
        if (local_[y] < 0) b[static_cast<Eigen::Index>(i)] += q * data[y];
      }
    const Eigen::VectorXd u = solve(b);
    std::vector<double> out(data);
    for (std::size_t i = 0; i < free_.size(); ++i) out[free_[i]] = u[static_cast<Eigen::Index>(i)];
    return out;
  }

  /// Expected visits to each free site before leaving the free set, from x.
  /// Uses the symmetry of I - P_FF: the Green row equals the column.
  Eigen::VectorXd green_row(Site x) const {
    require(local_[x] >= 0, "green_row: start must be a free site");
    Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(free_.size()));
    e[local_[x]] = 1.0;
    return solve(e);
  }

 private:
  void check_reachability() const {
    const auto& g = p_.geometry;
    std::vector<std::uint8_t> ok(g.volume(), 0);
    std::deque<Site> queue;
    for (Site x = 0; x < g.volume(); ++x)
      if (roles_[x] != Role::free) {
        ok[x] = 1;
        queue.push_back(x);
      }
    while (!queue.empty()) {
      const Site x = queue.front();
      queue.pop_front();
      for (int k = 0; k < g.degree(); ++k) {
        const Site y = g.neighbor(x, k);
        if (!ok[y]) {
          ok[y] = 1;
          queue.push_back(y);
        }
      }
    }
    for (Site x : free_)
      if (!ok[x]) throw ComputationError("oracle: singular system, some free sites never reach the target or stop set");
  }

  const ChainProblem& p_;
  std::vector<Role> roles_;
  std::vector<int> local_;
  std::vector<Site> free_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
  mutable double last_residual_ = 0.0;
};

inline std::vector<Role> make_roles(std::size_t volume, const std::vector<Site>& targets, const std::vector<Site>& stops) {
  std::vector<Role> roles(volume, Role::free);
  for (Site s : stops) roles.at(s) = Role::stop;
  for (Site t : targets) {
    if (roles.at(t) == Role::stop) throw ValidationError("oracle: target and stop sets must be disjoint");
    roles[t] = Role::target;
  }
  return roles;
}

struct HittingSplit {
  std::vector<double> per_target;  // P_start(first non-free site reached is target i)
  double total = 0;
  double residual = 0;
};

/// P_start(hit target i before any other target or the stop set), per target.
inline HittingSplit exact_hitting_probability(const ChainProblem& p, Site start, const std::vector<Site>& targets,
                                              const std::vector<Site>& stops) {
  require(!targets.empty(), "oracle: target set must be non-empty");
  const auto roles = make_roles(p.geometry.volume(), targets, stops);
  HittingSplit out;
  out.per_target.assign(targets.size(), 0.0);
  if (roles[start] != Role::free) {
    for (std::size_t i = 0; i < targets.size(); ++i) out.per_target[i] = targets[i] == start;
    out.total = std::accumulate(out.per_target.begin(), out.per_target.end(), 0.0);
    return out;
  }
  const RestrictedSolver solver(p, roles);
  const Eigen::VectorXd g = solver.green_row(start);
  out.residual = solver.last_relative_residual();
  const double q = p.move_prob();
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (int k = 0; k < p.geometry.degree(); ++k) {
      const int j = solver.local(p.geometry.neighbor(targets[i], k));
      if (j >= 0) out.per_target[i] += g[j] * q;
    }
  out.total = std::accumulate(out.per_target.begin(), out.per_target.end(), 0.0);
  return out;
}

/// h(x) = P_x(hit the target set before the stop set) for every site x.
inline std::vector<double> hitting_probability_field(const ChainProblem& p, const std::vector<Role>& roles) {
  const RestrictedSolver solver(p, roles);
  std::vector<double> data(p.geometry.volume(), 0.0);
  for (Site x = 0; x < data.size(); ++x) data[x] = roles[x] == Role::target ? 1.0 : 0.0;
  return solver.harmonic(data);
}

/// fields[i][x] = P_x(the first site of `targets` reached is targets[i]).
/// One factorisation serves every target.
inline std::vector<std::vector<double>> exact_first_hit_fields(const ChainProblem& p, const std::vector<Site>& targets) {
  require(!targets.empty(), "oracle: target set must be non-empty");
  const auto roles = make_roles(p.geometry.volume(), targets, {});
  const RestrictedSolver solver(p, roles);
  std::vector<std::vector<double>> out;
  for (Site z : targets) {
    std::vector<double> data(p.geometry.volume(), 0.0);
    data[z] = 1.0;
    out.push_back(solver.harmonic(data));
  }
  return out;
}

/// E_x tau_A for every site x.
inline std::vector<double> exact_expected_hitting_times(const ChainProblem& p, const std::vector<Site>& targets) {
  require(!targets.empty(), "oracle: target set must be non-empty");
  const auto roles = make_roles(p.geometry.volume(), targets, {});
  const RestrictedSolver solver(p, roles);
  const Eigen::VectorXd u = solver.solve(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(solver.free_sites().size())));
  std::vector<double> out(p.geometry.volume(), 0.0);
  for (std::size_t i = 0; i < solver.free_sites().size(); ++i) out[solver.free_sites()[i]] = u[static_cast<Eigen::Index>(i)];
  return out;
}

inline double exact_expected_hitting_time(const ChainProblem& p, Site start, const std::vector<Site>& targets) {
  return exact_expected_hitting_times(p, targets).at(start);
}

/// E_pi tau_A under the uniform law.
inline double exact_stationary_hitting_time(const ChainProblem& p, const std::vector<Site>& targets) {
  const auto m = exact_expected_hitting_times(p, targets);
  return std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
}

struct ExitDistribution {
  std::vector<Site> support;  // sites outside the region adjacent to it, ascending
  std::vector<double> prob;
  double residual = 0;
};

/// Law of the first site outside `region` (a membership mask) from start.
inline ExitDistribution exact_exit_distribution(const ChainProblem& p, Site start, const std::vector<std::uint8_t>& region) {
  const auto& g = p.geometry;
  require(region.size() == g.volume() && region[start], "oracle: start must lie in the region");
  std::vector<Role> roles(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (region[x]) roles[x] = Role::free;
  const RestrictedSolver solver(p, roles);
  const Eigen::VectorXd gr = solver.green_row(start);
  ExitDistribution out;
  out.residual = solver.last_relative_residual();
  std::vector<double> mass(g.volume(), 0.0);
  const double q = p.move_prob();
  for (std::size_t i = 0; i < solver.free_sites().size(); ++i)
    for (int k = 0; k < g.degree(); ++k) {
      const Site y = g.neighbor(solver.free_sites()[i], k);
      if (!region[y]) mass[y] += gr[static_cast<Eigen::Index>(i)] * q;
    }
  for (Site y = 0; y < g.volume(); ++y)
    if (mass[y] > 0) {
      out.support.push_back(y);
      out.prob.push_back(mass[y]);
    }
  return out;
}

/// sum_{t <= horizon} p^t(x, y).
inline double exact_truncated_green(const ChainProblem& p, Site x, Site y, std::uint64_t horizon) {
  const auto& g = p.geometry;
  std::vector<double> v(g.volume(), 0.0), w(g.volume());
  v[x] = 1.0;
  double acc = v[y];
  const double q = p.move_prob();
  const auto& nb = g.neighbors();
  const auto deg = static_cast<std::size_t>(g.degree());
  for (std::uint64_t t = 1; t <= horizon; ++t) {
    for (Site s = 0; s < g.volume(); ++s) {
      double sum = 0.0;
      for (std::size_t k = 0; k < deg; ++k) sum += v[nb[s * deg + k]];
      w[s] = p.laziness * v[s] + q * sum;
    }
    v.swap(w);
    acc += v[y];
  }
  return acc;
}

struct MixingRow {
  std::uint64_t t = 0;
  double tv = 0;           // max_x |p^t(x,.) - pi|_TV
  double uniform_dev = 0;  // max_{x,y} |p^t(x,y)/pi(y) - 1|
  double max_ratio = 0;    // max_{x,y} p^t(x,y)/pi(y)
};

struct MixingReport {
  std::vector<MixingRow> rows;
  bool submultiplicative = true;  // tv(t+s) <= 4 tv(t) tv(s) on all grid pairs
  bool uniform_decay = true;      // uniform_dev(t+s) <= max_ratio(s) tv(t)
  std::size_t pairs_checked = 0;
};

/// Exact TV curve of the lazy walk on the grid; by transitivity the start
/// is site 0. Checks both decay inequalities for every pair with t+s on
/// the grid.
inline MixingReport mixing_decay_check(const ChainProblem& p, std::vector<std::uint64_t> grid) {
  if (p.laziness <= 0.0)
    throw ValidationError("mixing_decay_check: the walk must be aperiodic; set laziness > 0");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const auto& g = p.geometry;
  const double pi = 1.0 / static_cast<double>(g.volume());
  std::vector<double> v(g.volume(), 0.0), w(g.volume());
  v[0] = 1.0;
  const double q = p.move_prob();
  const auto& nb = g.neighbors();
  const auto deg = static_cast<std::size_t>(g.degree());
  MixingReport rep;
  std::uint64_t t = 0;
  for (std::uint64_t target : grid) {
    for (; t < target; ++t) {
      for (Site s = 0; s < g.volume(); ++s) {
        double sum = 0.0;
        for (std::size_t k = 0; k < deg; ++k) sum += v[nb[s * deg + k]];
        w[s] = p.laziness * v[s] + q * sum;
      }
      v.swap(w);
    }
    MixingRow row{target, 0.0, 0.0, 0.0};
    for (double x : v) {
      row.tv += std::abs(x - pi);
      row.uniform_dev = std::max(row.uniform_dev, std::abs(x / pi - 1.0));
      row.max_ratio = std::max(row.max_ratio, x / pi);
    }
    row.tv *= 0.5;
    rep.rows.push_back(row);
  }
  auto find = [&](std::uint64_t tt) -> const MixingRow* {
    for (const auto& r : rep.rows)
      if (r.t == tt) return &r;
    return nullptr;
  };
  for (const auto& a : rep.rows)
    for (const auto& b : rep.rows) {
      const MixingRow* c = find(a.t + b.t);
      if (!c) continue;
      ++rep.pairs_checked;
      if (c->tv > 4 * a.tv * b.tv * (1 + 1e-12) + 1e-15) rep.submultiplicative = false;
      if (c->uniform_dev > b.max_ratio * a.tv * (1 + 1e-12) + 1e-15) rep.uniform_decay = false;
    }
  return rep;
}

// ---------------------------------------------------------------------------
// Exit-point chain of an annulus

/// Exact exit-point chain: entry law H(b, a) from exit points to the inner
/// boundary, exit law K(a, b') from the inner boundary, stationary pi~ of
/// M = H K, and excursion lengths.
struct ExitChain {
  std::vector<Site> exits;    // outer vertex boundary, ascending
  std::vector<Site> entries;  // inner vertex boundary, ascending
  Eigen::MatrixXd H;          // exits x entries
  Eigen::MatrixXd K;          // entries x exits
  Eigen::MatrixXd M;          // exits x exits
  Eigen::VectorXd pi;         // stationary law of exit points
  Eigen::VectorXd mu;         // stationary law of entry points
  std::vector<double> duration_from;  // E_b[sigma_1 - sigma_0] per exit b
  double T = 0;               // E_pi~[sigma_1 - sigma_0]
  std::vector<double> entry_to_boundary;  // E_b tau_{inner boundary}
  std::vector<double> exit_time_from_entry;  // E_a sigma_outer
};

inline ExitChain exact_exit_chain(const ChainProblem& p, const AnnulusSpec& a) {
  const auto& g = p.geometry;
  validate_annulus(g, a);
  ExitChain c;
  c.exits = outer_boundary(g, a.outer);
  c.entries = shape_boundary(g, a.inner);
  const auto outer = shape_mask(g, a.outer);
  const std::size_t ne = c.exits.size(), na = c.entries.size();

  // H: first inner-boundary site reached, from each exit point.
  std::vector<Role> to_inner(g.volume(), Role::free);
  for (Site x : c.entries) to_inner[x] = Role::target;
  const RestrictedSolver inner_solver(p, to_inner);
  c.H.resize(static_cast<Eigen::Index>(ne), static_cast<Eigen::Index>(na));
  for (std::size_t j = 0; j < na; ++j) {
    std::vector<double> data(g.volume(), 0.0);
    data[c.entries[j]] = 1.0;
    const auto h = inner_solver.harmonic(data);
    for (std::size_t i = 0; i < ne; ++i) c.H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = h[c.exits[i]];
  }
  {
    const Eigen::VectorXd m = inner_solver.solve(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(inner_solver.free_sites().size())));
    c.entry_to_boundary.resize(ne);
    for (std::size_t i = 0; i < ne; ++i) c.entry_to_boundary[i] = m[inner_solver.local(c.exits[i])];
  }

  // K: first site outside the outer shape, from each entry point.
  std::vector<Role> to_exit(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (outer[x]) to_exit[x] = Role::free;
  const RestrictedSolver outer_solver(p, to_exit);
  c.K = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(ne));
  const double q = p.move_prob();
  for (std::size_t j = 0; j < na; ++j) {
    const Eigen::VectorXd gr = outer_solver.green_row(c.entries[j]);
    for (std::size_t i = 0; i < ne; ++i)
      for (int k = 0; k < g.degree(); ++k) {
        const int l = outer_solver.local(g.neighbor(c.exits[i], k));
        if (l >= 0) c.K(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) += gr[l] * q;
      }
  }
  {
    const Eigen::VectorXd m = outer_solver.solve(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(outer_solver.free_sites().size())));
    c.exit_time_from_entry.resize(na);
    for (std::size_t j = 0; j < na; ++j) c.exit_time_from_entry[j] = m[outer_solver.local(c.entries[j])];
  }

  c.M = c.H * c.K;
  // Stationary vector by power iteration on the row-stochastic M.
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Constant(static_cast<Eigen::Index>(ne), 1.0 / static_cast<double>(ne));
  for (int it = 0; it < 100000; ++it) {
    Eigen::RowVectorXd nv = v * c.M;
    nv /= nv.sum();
    const double diff = (nv - v).lpNorm<1>();
    v = nv;
    if (diff < 1e-15) break;
  }
  c.pi = v.transpose();
  c.mu = (v * c.H).transpose();
  c.duration_from.resize(ne);
  c.T = 0.0;
  for (std::size_t i = 0; i < ne; ++i) {
    double d = c.entry_to_boundary[i];
    for (std::size_t j = 0; j < na; ++j) d += c.H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * c.exit_time_from_entry[j];
    c.duration_from[i] = d;
    c.T += c.pi[static_cast<Eigen::Index>(i)] * d;
  }
  return c;
}

/// Probability that a stationary excursion hits the target set before
/// leaving the outer shape: sum_a mu(a) P_a(hit targets before exit).
inline double exact_excursion_hit_probability(const ChainProblem& p, const ExitChain& c, const AnnulusSpec& a,
                                              const std::vector<Site>& targets) {
  const auto& g = p.geometry;
  const auto outer = shape_mask(g, a.outer);
  std::vector<Role> roles(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (outer[x]) roles[x] = Role::free;
  for (Site t : targets) {
    require(outer[t] != 0, "excursion hit target must lie inside the outer shape");
    roles[t] = Role::target;
  }
  const auto h = hitting_probability_field(p, roles);
  double acc = 0.0;
  for (std::size_t j = 0; j < c.entries.size(); ++j) acc += c.mu[static_cast<Eigen::Index>(j)] * h[c.entries[j]];
  return acc;
}

/// P_a(hit targets before exit | exit at b) for every entry a and exit b:
/// the conditional hitting probabilities across exit points.
inline Eigen::MatrixXd exact_conditional_hit(const ChainProblem& p, const ExitChain& c, const AnnulusSpec& a,
                                             const std::vector<Site>& targets) {
  const auto& g = p.geometry;
  const auto outer = shape_mask(g, a.outer);
  // P_a(hit, exit at b) = sum_z P_a(first target hit is z, before exit) K_z(b).
  std::vector<Role> roles(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (outer[x]) roles[x] = Role::free;
  for (Site t : targets) roles[t] = Role::target;
  const RestrictedSolver first_hit(p, roles);
  std::vector<Role> free_outer(g.volume(), Role::stop);
  for (Site x = 0; x < g.volume(); ++x)
    if (outer[x]) free_outer[x] = Role::free;
  const RestrictedSolver exit_solver(p, free_outer);
  const double q = p.move_prob();
  const auto ne = static_cast<Eigen::Index>(c.exits.size()), na = static_cast<Eigen::Index>(c.entries.size());
  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(na, ne);
  for (Site z : targets) {
    std::vector<double> data(g.volume(), 0.0);
    data[z] = 1.0;
    const auto hz = first_hit.harmonic(data);
    const Eigen::VectorXd gr = exit_solver.green_row(z);
    Eigen::VectorXd kz = Eigen::VectorXd::Zero(ne);
    for (Eigen::Index i = 0; i < ne; ++i)
      for (int k = 0; k < g.degree(); ++k) {
        const int l = exit_solver.local(g.neighbor(c.exits[static_cast<std::size_t>(i)], k));
        if (l >= 0) kz[i] += gr[l] * q;
      }
    for (Eigen::Index j = 0; j < na; ++j) joint.row(j) += hz[c.entries[static_cast<std::size_t>(j)]] * kz.transpose();
  }
  Eigen::MatrixXd cond(na, ne);
  for (Eigen::Index j = 0; j < na; ++j)
    for (Eigen::Index i = 0; i < ne; ++i) cond(j, i) = c.K(j, i) > 0 ? joint(j, i) / c.K(j, i) : 0.0;
  return cond;
}

struct HarnackReport {
  double max_ratio = 1.0;  // max over x, x' in B(0,r) and exit points y of f_y(x)/f_y(x')
  double fitted_C = 0.0;   // (max_ratio - 1) R / r
};

/// Harmonic measure of B(c,R) seen from all starts in B(c,r).
inline HarnackReport harnack_ratio(const ChainProblem& p, Site center, double r, double R) {
  const auto& g = p.geometry;
  const ShapeSpec big = ShapeSpec::ball(center, R);
  validate_shape(g, big);
  const auto region = shape_mask(g, big);
  const auto starts = shape_sites(g, ShapeSpec::ball(center, r));
  std::vector<ExitDistribution> laws;
  for (Site x : starts) laws.push_back(exact_exit_distribution(p, x, region));
  HarnackReport rep;
  const std::size_t ny = laws.front().support.size();
  for (std::size_t yi = 0; yi < ny; ++yi) {
    double lo = laws.front().prob[yi], hi = lo;
    for (const auto& l : laws) {
      lo = std::min(lo, l.prob[yi]);
      hi = std::max(hi, l.prob[yi]);
    }
    if (lo > 0) rep.max_ratio = std::max(rep.max_ratio, hi / lo);
  }
  rep.fitted_C = (rep.max_ratio - 1.0) * R / r;
  return rep;
}

}  // namespace latecover
