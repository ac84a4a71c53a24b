#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "latecover/errors.hpp"
#include "latecover/excursion.hpp"
#include "latecover/latepoints.hpp"
#include "latecover/lattice.hpp"
#include "latecover/oracle.hpp"
#include "latecover/parallel.hpp"
#include "latecover/potential.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"
#include "latecover/walk.hpp"

namespace latecover {

inline constexpr const char* kVersion = "1.0.0";

/// Plain-text experiment description: one `key = value` per line, `#`
/// starts a comment. See docs/formats.md for the key set.
struct ExperimentConfig {
  std::string experiment = "experiment";
  std::string statistic;
  int n = 16, d = 3;
  std::size_t replicas = 10;
  std::uint64_t seed = 1;
  unsigned jobs = 0;  // 0: all cores
  std::string out;

  std::vector<double> alphas{0.5};
  double beta = 0.6, phi = 0.2, gamma = 0.5, delta = 0.3, psi = 0.05, epsilon = 0.05;
  double r = 2, R = 6;
  Flavor flavor = Flavor::box_in_ball;
  std::optional<double> t_star;
  std::optional<double> horizon;  // excursion counters; default n^d log n
  int tstar_r = 0, tstar_R = 0;   // calibration radii; 0: derived from phi
  double margin = 0.4;
  std::size_t targets = 8;
  double outer_factor = 0;  // W statistic; 0: largest that fits
  std::size_t excursions = 1000;
  std::size_t burn_in = 10;
  std::size_t w_samples = 2000;
  std::string counter = "annulus";  // concentration: annulus | thin_box | nested

  double alpha() const { return alphas.front(); }
  unsigned effective_jobs() const { return jobs ? jobs : default_jobs(); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline void set_config_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  auto as_int = [&] { return static_cast<int>(parse_u64(key, value)); };
  auto as_size = [&] { return static_cast<std::size_t>(parse_u64(key, value)); };
  auto as_double = [&] { return parse_double(key, value); };
  if (key == "experiment") c.experiment = value;
  else if (key == "statistic") c.statistic = value;
  else if (key == "n") c.n = as_int();
  else if (key == "d") c.d = as_int();
  else if (key == "replicas") c.replicas = as_size();
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "jobs") c.jobs = static_cast<unsigned>(parse_u64(key, value));
  else if (key == "out") c.out = value;
  else if (key == "alpha" || key == "alphas") {
    c.alphas.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) c.alphas.push_back(parse_double(key, trim(item)));
    if (c.alphas.empty()) throw ValidationError("config key 'alpha': empty list");
  } else if (key == "beta") c.beta = as_double();
  else if (key == "phi") c.phi = as_double();
  else if (key == "gamma") c.gamma = as_double();
  else if (key == "delta") c.delta = as_double();
  else if (key == "psi") c.psi = as_double();
  else if (key == "epsilon") c.epsilon = as_double();
  else if (key == "r") c.r = as_double();
  else if (key == "R") c.R = as_double();
  else if (key == "flavor") c.flavor = parse_flavor(value);
  else if (key == "t_star") c.t_star = as_double();
  else if (key == "horizon") c.horizon = as_double();
  else if (key == "tstar_r") c.tstar_r = as_int();
  else if (key == "tstar_R") c.tstar_R = as_int();
  else if (key == "margin") c.margin = as_double();
  else if (key == "targets") c.targets = as_size();
  else if (key == "outer_factor") c.outer_factor = as_double();
  else if (key == "excursions") c.excursions = as_size();
  else if (key == "burn_in") c.burn_in = as_size();
  else if (key == "w_samples") c.w_samples = as_size();
  else if (key == "counter") c.counter = value;
  else throw ValidationError("unknown config key '" + key + "'");
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_key(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text used for hashing. Omits `out` and `jobs`, which never
/// change results.
inline std::string canonical_config(const ExperimentConfig& c) {
  using detail::fmt;
  std::map<std::string, std::string> kv;
  kv["experiment"] = c.experiment;
  kv["statistic"] = c.statistic;
  kv["n"] = std::to_string(c.n);
  kv["d"] = std::to_string(c.d);
  kv["replicas"] = std::to_string(c.replicas);
  kv["seed"] = std::to_string(c.seed);
  std::string a;
  for (std::size_t i = 0; i < c.alphas.size(); ++i) a += (i ? "," : "") + fmt(c.alphas[i]);
  kv["alpha"] = a;
  kv["beta"] = fmt(c.beta);
  kv["phi"] = fmt(c.phi);
  kv["gamma"] = fmt(c.gamma);
  kv["delta"] = fmt(c.delta);
  kv["psi"] = fmt(c.psi);
  kv["epsilon"] = fmt(c.epsilon);
  kv["r"] = fmt(c.r);
  kv["R"] = fmt(c.R);
  kv["flavor"] = to_string(c.flavor);
  if (c.t_star) kv["t_star"] = fmt(*c.t_star);
  if (c.horizon) kv["horizon"] = fmt(*c.horizon);
  kv["tstar_r"] = std::to_string(c.tstar_r);
  kv["tstar_R"] = std::to_string(c.tstar_R);
  kv["margin"] = fmt(c.margin);
  kv["targets"] = std::to_string(c.targets);
  kv["outer_factor"] = fmt(c.outer_factor);
  kv["excursions"] = std::to_string(c.excursions);
  kv["burn_in"] = std::to_string(c.burn_in);
  kv["w_samples"] = std::to_string(c.w_samples);
  kv["counter"] = c.counter;
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline std::string config_hash(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << detail::fnv1a(canonical_config(c));
  return os.str();
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::size_t replica = 0;
  std::string statistic;
  double value = 0;
};

struct StatAggregate {
  std::string statistic;
  Estimate estimate;
  double min = 0, max = 0;
};

struct ResultRecord {
  ExperimentConfig config;
  std::string hash;
  std::vector<ResultRow> rows;  // sorted by (replica, statistic)
  std::vector<StatAggregate> aggregates;
  nlohmann::json extra = nlohmann::json::object();
  double wall_clock_seconds = 0;
};

/// Aggregates are computed after sorting, so any merge order of the rows
/// gives the same numbers.
inline std::vector<StatAggregate> aggregate_rows(std::vector<ResultRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.statistic, a.replica) < std::tie(b.statistic, b.replica);
  });
  std::vector<StatAggregate> out;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<double> xs;
    while (j < rows.size() && rows[j].statistic == rows[i].statistic) xs.push_back(rows[j++].value);
    StatAggregate a;
    a.statistic = rows[i].statistic;
    a.estimate = estimate_mean(xs);
    a.min = *std::min_element(xs.begin(), xs.end());
    a.max = *std::max_element(xs.begin(), xs.end());
    out.push_back(a);
    i = j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

/// Shared, seed-determined quantities computed once before the replicas.
struct RunContext {
  std::optional<TorusGeometry> geometry;
  std::optional<TStarCalibration> tstar;
  std::optional<Decomposition> decomposition;
  NestedInputs nested;
  double p_d = 0;
  double T_hat = 0;
  std::vector<Site> targets;
  std::vector<Site> starts;
  std::vector<std::int32_t> target_index;
  nlohmann::json info = nlohmann::json::object();
};

using ReplicaFn = std::function<std::vector<std::pair<std::string, double>>(const ExperimentConfig&, const RunContext&,
                                                                              std::uint64_t /*replica seed*/)>;

struct StatisticDef {
  std::function<void(const ExperimentConfig&, RunContext&)> prepare;
  ReplicaFn replica;
  std::function<void(const ExperimentConfig&, const RunContext&, ResultRecord&)> finish;
};

namespace detail {

inline std::uint64_t aux_seed(std::uint64_t seed, std::uint64_t k) { return stream_key(seed, 0x8000000000000000ULL + k); }

inline std::string alpha_tag(double a) {
  std::ostringstream os;
  os << a;
  return os.str();
}

inline void need_t_star(const ExperimentConfig& c, RunContext& ctx) {
  const auto& g = *ctx.geometry;
  if (c.t_star) {
    TStarCalibration t;
    t.value = *c.t_star;
    ctx.tstar = t;
    ctx.info["t_star"] = {{"value", t.value}, {"source", "config"}};
    return;
  }
  ExcursionRunPlan plan;
  plan.replicas = 4;
  plan.excursions_per_replica = 20000;
  plan.seed = aux_seed(c.seed, 1);
  plan.jobs = c.effective_jobs();
  int r = c.tstar_r, R = c.tstar_R;
  if (r == 0 || R == 0) {
    const auto rr = t_star_radii(g.n(), g.d(), c.phi);
    r = rr.r;
    R = rr.R;
  }
  ctx.tstar = calibrate_t_star(g, r, R, std::nullopt, plan);
  ctx.info["t_star"] = {{"value", ctx.tstar->value},
                        {"T", ctx.tstar->T},
                        {"p", ctx.tstar->p},
                        {"r", r},
                        {"R", R},
                        {"method", ctx.tstar->method == CalibrationMethod::exact ? "exact" : "monte_carlo"}};
}

inline double w_outer_factor(const ExperimentConfig& c) {
  return c.outer_factor > 0 ? c.outer_factor : max_w_outer_factor(c.n, c.beta, c.phi);
}

inline void need_nested(const ExperimentConfig& c, RunContext& ctx) {
  WPlan plan;
  plan.samples = c.w_samples;
  plan.burn_in = c.burn_in;
  plan.outer_factor = w_outer_factor(c);
  plan.replicas = 4;
  plan.seed = aux_seed(c.seed, 2);
  plan.jobs = c.effective_jobs();
  const auto ws = sample_W(*ctx.geometry, c.beta, c.phi, plan);
  ctx.nested.EW_hat = ws.mean;
  ctx.nested.T_box_ball_hat = ws.big_T.value;
  ctx.info["nested_inputs"] = {{"EW_hat", ws.mean}, {"T_box_ball_hat", ws.big_T.value}, {"outer_factor", plan.outer_factor}};
}

inline double exact_or_mc_T(const TorusGeometry& g, const AnnulusSpec& a, std::uint64_t seed, unsigned jobs) {
  if (g.volume() <= 200000) {
    const ChainProblem p(g);
    return exact_exit_chain(p, a).T;
  }
  ExcursionRunPlan plan;
  plan.replicas = 4;
  plan.excursions_per_replica = 5000;
  plan.seed = seed;
  plan.jobs = jobs;
  return estimate_T_rR(g, a, plan).T_hat.value;
}

}  // namespace detail

inline const std::map<std::string, StatisticDef>& statistic_registry() {
  using Rows = std::vector<std::pair<std::string, double>>;
  static const std::map<std::string, StatisticDef> reg = [] {
    std::map<std::string, StatisticDef> m;

    m["uncovered"] = {
        [](const ExperimentConfig& c, RunContext& ctx) { detail::need_t_star(c, ctx); },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          Rows rows;
          const auto& g = *ctx.geometry;
          for (const auto& f : sample_uncovered_curve(g, c.alphas, ctx.tstar->value, s)) {
            const std::string tag = "@alpha=" + detail::alpha_tag(f.param);
            const auto sep = separation_statistic(g, f.sites, c.gamma);
            rows.emplace_back("U_size" + tag, static_cast<double>(f.size()));
            rows.emplace_back("Z_gamma" + tag, static_cast<double>(sep.Z));
            rows.emplace_back("Z_positive" + tag, sep.Z > 0 ? 1.0 : 0.0);
            rows.emplace_back("W" + tag, static_cast<double>(neighbor_pair_statistic(g, f.sites)));
          }
          return rows;
        },
        nullptr};

    m["tau_alpha"] = {nullptr,
                      [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
                        const auto f = sample_tau_alpha(*ctx.geometry, c.alpha(), s);
                        return Rows{{"U_size", static_cast<double>(f.size())}, {"tau", static_cast<double>(f.t)}};
                      },
                      nullptr};

    m["cover_time"] = {nullptr,
                       [](const ExperimentConfig&, const RunContext& ctx, std::uint64_t s) {
                         WalkConfig cfg(*ctx.geometry, s);
                         return Rows{{"cover_time", static_cast<double>(cover_time(cfg))}};
                       },
                       nullptr};

    m["hitting_time"] = {nullptr,
                         [](const ExperimentConfig&, const RunContext& ctx, std::uint64_t s) {
                           WalkConfig cfg(*ctx.geometry, s);
                           cfg.start = default_hit_starts(*ctx.geometry).front();
                           Walk w(cfg);
                           return Rows{{"hit_time", static_cast<double>(hitting_time(w, 0))}};
                         },
                         nullptr};

    m["excursion_count"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          ctx.info["warning"] = check_radii(c.r, c.R);
          validate_annulus(*ctx.geometry, AnnulusSpec::make(c.flavor, 0, c.r, c.R));
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          const auto& g = *ctx.geometry;
          const double t = c.horizon.value_or(static_cast<double>(g.volume()) * std::log(static_cast<double>(g.n())));
          const auto r = count_excursions(g, 0, c.r, c.R, static_cast<std::uint64_t>(std::llround(t)), c.flavor, s);
          return Rows{{"N", static_cast<double>(r.count)}};
        },
        nullptr};

    m["excursion_length"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          validate_annulus(*ctx.geometry, AnnulusSpec::make(c.flavor, 0, c.r, c.R));
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          const auto& g = *ctx.geometry;
          ExcursionRunPlan plan;
          plan.excursions_per_replica = c.excursions;
          plan.burn_in = std::max<std::size_t>(c.burn_in, 1);
          plan.seed = s;
          const auto st = estimate_T_rR(g, AnnulusSpec::make(c.flavor, 0, c.r, c.R), plan);
          return Rows{{"T", st.T_hat.value}};
        },
        nullptr};

    m["nested_w"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          w_annuli(*ctx.geometry, 0, c.beta, c.phi, detail::w_outer_factor(c));
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          WPlan plan;
          plan.samples = c.w_samples;
          plan.burn_in = c.burn_in;
          plan.outer_factor = detail::w_outer_factor(c);
          plan.seed = s;
          const auto ws = sample_W(*ctx.geometry, c.beta, c.phi, plan);
          return Rows{{"EW", ws.mean}, {"T_big", ws.big_T.value}};
        },
        nullptr};

    m["distinguish"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          ctx.p_d = return_probability(c.d);
          neighbor_pair_threshold(c.n, c.d, c.alpha(), c.epsilon, ctx.p_d);
          detail::need_t_star(c, ctx);
          ctx.info["p_d"] = ctx.p_d;
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          const auto& g = *ctx.geometry;
          const auto walk = sample_uncovered_at(g, c.alpha(), ctx.tstar->value, s);
          const double p = std::pow(static_cast<double>(c.n), -c.alpha() * c.d);
          const auto ref = sample_bernoulli_field(g, p, stream_key(s, 1));
          return Rows{{"W_walk", static_cast<double>(neighbor_pair_statistic(g, walk.sites))},
                      {"W_ref", static_cast<double>(neighbor_pair_statistic(g, ref.sites))},
                      {"U_size", static_cast<double>(walk.size())},
                      {"ref_size", static_cast<double>(ref.size())}};
        },
        [](const ExperimentConfig& c, const RunContext& ctx, ResultRecord& rec) {
          std::vector<double> w, ref;
          for (const auto& row : rec.rows) {
            if (row.statistic == "W_walk") w.push_back(row.value);
            if (row.statistic == "W_ref") ref.push_back(row.value);
          }
          const auto r = distinguisher_test(w, ref, c.n, c.d, c.alpha(), c.epsilon, ctx.p_d, c.margin);
          rec.extra["distinguisher"] = {{"threshold", r.threshold},
                                        {"walk_exceed", r.walk_exceed.value()},
                                        {"ref_exceed", r.ref_exceed.value()},
                                        {"gap", r.gap},
                                        {"margin", r.margin},
                                        {"distinguishable", r.distinguishable}};
        }};

    m["uniformity"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          Xoshiro256 rng(detail::aux_seed(c.seed, 3));
          ctx.targets = random_separated_set(*ctx.geometry, c.targets, c.gamma, rng);
          validate_separated(*ctx.geometry, ctx.targets, c.gamma);
          ctx.info["targets"] = ctx.targets;
          ctx.starts = admissible_starts(*ctx.geometry, ctx.targets, c.gamma);
          if (ctx.starts.empty()) throw ValidationError("uniformity: no start at distance >= n^gamma from the targets");
          ctx.target_index.assign(ctx.geometry->volume(), -1);
          for (std::size_t i = 0; i < ctx.targets.size(); ++i) ctx.target_index[ctx.targets[i]] = static_cast<std::int32_t>(i);
        },
        [](const ExperimentConfig&, const RunContext& ctx, std::uint64_t s) {
          Xoshiro256 rng(s);
          WalkConfig cfg(*ctx.geometry);
          cfg.start = ctx.starts[rng.below(ctx.starts.size())];
          Walk w(cfg, rng);
          Site x = w.position();
          while (ctx.target_index[x] < 0) x = w.step();
          return Rows{{"first_hit_index", static_cast<double>(ctx.target_index[x])}};
        },
        [](const ExperimentConfig&, const RunContext& ctx, ResultRecord& rec) {
          std::vector<std::size_t> counts(ctx.targets.size(), 0);
          for (const auto& row : rec.rows) ++counts.at(static_cast<std::size_t>(row.value));
          if (rec.rows.empty()) return;
          std::vector<double> f, u(counts.size(), 1.0 / static_cast<double>(counts.size()));
          for (auto k : counts) f.push_back(static_cast<double>(k) / static_cast<double>(rec.rows.size()));
          const auto chi = chi_square_uniform(counts);
          rec.extra["uniformity"] = {{"counts", counts}, {"tv", tv_distance(f, u)}, {"chi2", chi.statistic},
                                     {"chi2_p", chi.p_value}};
        }};

    m["concentration"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          const auto& g = *ctx.geometry;
          if (c.counter == "annulus") {
            const auto a = AnnulusSpec::make(c.flavor, 0, c.r, c.R);
            validate_annulus(g, a);
            validate_delta_single(c.delta, c.psi, c.n, c.d, c.r);
            ctx.T_hat = detail::exact_or_mc_T(g, a, detail::aux_seed(c.seed, 4), c.effective_jobs());
          } else if (c.counter == "thin_box") {
            validate_delta_boxes(c.delta, c.psi, c.n, c.d, c.beta, false);
            detail::need_nested(c, ctx);
          } else if (c.counter == "nested") {
            validate_delta_boxes(c.delta, c.psi, c.n, c.d, c.beta, true);
            ctx.decomposition.emplace(g, c.beta, c.phi);
            detail::need_nested(c, ctx);
            const Site z = ctx.decomposition->box_center(0);
            ctx.T_hat = detail::exact_or_mc_T(g, AnnulusSpec::make(Flavor::ball_in_ball, z, c.r, c.R),
                                              detail::aux_seed(c.seed, 4), c.effective_jobs());
          } else {
            throw ValidationError("unknown counter '" + c.counter + "' (annulus | thin_box | nested)");
          }
          ctx.info["T_hat"] = ctx.T_hat;
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          const auto& g = *ctx.geometry;
          CounterSpec spec;
          spec.kind = c.counter == "annulus" ? CounterKind::annulus : c.counter == "thin_box" ? CounterKind::thin_box : CounterKind::nested;
          spec.flavor = c.flavor;
          spec.r = c.r;
          spec.R = c.R;
          spec.beta = c.beta;
          spec.phi = c.phi;
          spec.T_hat = ctx.T_hat;
          spec.nested = ctx.nested;
          spec.site = ctx.decomposition ? ctx.decomposition->box_center(0) : 0;
          const double t = c.horizon.value_or(static_cast<double>(g.volume()) * std::log(static_cast<double>(g.n())));
          const auto rep = concentration_report(g, spec, t, c.delta, 1, s, 1);
          return Rows{{"count", rep.values.front()}, {"outside", rep.outside.hits ? 1.0 : 0.0},
                      {"band_lower", rep.lower}, {"band_upper", rep.upper}};
        },
        nullptr};

    m["excursion_stopped"] = {
        [](const ExperimentConfig& c, RunContext& ctx) {
          ctx.decomposition.emplace(*ctx.geometry, c.beta, c.phi);
          detail::need_t_star(c, ctx);
          detail::need_nested(c, ctx);
        },
        [](const ExperimentConfig& c, const RunContext& ctx, std::uint64_t s) {
          const auto cf = sample_uncovered_excursion_stopped(*ctx.decomposition, c.alpha(), ctx.tstar->value, c.delta,
                                                             ctx.nested, s);
          return Rows{{"agree", cf.agree() ? 1.0 : 0.0},
                      {"Q_size", static_cast<double>(cf.q_tilde.size())},
                      {"Y_size", static_cast<double>(cf.y.size())}};
        },
        nullptr};
    return m;
  }();
  return reg;
}

inline const StatisticDef& find_statistic(const std::string& id) {
  const auto& reg = statistic_registry();
  const auto it = reg.find(id);
  if (it == reg.end()) {
    std::string known;
    for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
    throw ValidationError("unknown statistic id '" + id + "' (known: " + known + ")");
  }
  return it->second;
}

/// Checks every parameter before any simulation starts.
inline void validate_config(const ExperimentConfig& c) {
  if (c.statistic.empty()) throw ValidationError("config: 'statistic' is required");
  find_statistic(c.statistic);
  const TorusGeometry g(c.n, c.d);
  for (double a : c.alphas) require(a >= 0, "alpha must be >= 0");
  require(c.gamma >= 0, "gamma must be >= 0");
  require(c.delta > 0 && c.delta < 1, "delta must lie in (0,1)");
  require(c.margin >= 0 && c.margin <= 1, "margin must lie in [0,1]");
  if (c.horizon) require(*c.horizon >= 0, "horizon must be >= 0");
  if (c.t_star) require(*c.t_star > 0, "t_star must be > 0");
  if (c.statistic == "excursion_count" || c.statistic == "excursion_length" || c.statistic == "concentration")
    require(c.R > c.r && c.r >= 0, "annulus radii need R > r >= 0");
  if (c.statistic == "uniformity") require(c.targets >= 2, "uniformity needs targets >= 2");
  if (c.statistic == "excursion_stopped" || c.statistic == "nested_w") {
    require(c.beta > 0 && c.beta < 1, "beta must lie in (0,1)");
    require(c.phi > 0 && c.phi < c.beta, "phi must lie in (0, beta)");
  }
}

/// Runs an experiment in memory. Replica i uses stream_key(seed, i) only,
/// so results do not depend on the job count.
inline ResultRecord run_experiment(const ExperimentConfig& c) {
  const auto start = std::chrono::steady_clock::now();
  validate_config(c);
  const StatisticDef& def = find_statistic(c.statistic);
  ResultRecord rec;
  rec.config = c;
  rec.hash = config_hash(c);
  RunContext ctx;
  ctx.geometry.emplace(c.n, c.d);
  if (c.replicas > 0 && def.prepare) def.prepare(c, ctx);
  const auto per = parallel_map(c.replicas, c.effective_jobs(), [&](std::size_t i) {
    return def.replica(c, ctx, stream_key(c.seed, i));
  });
  for (std::size_t i = 0; i < per.size(); ++i)
    for (const auto& [name, v] : per[i]) rec.rows.push_back({i, name, v});
  rec.aggregates = aggregate_rows(rec.rows);
  rec.extra = ctx.info;
  if (def.finish && c.replicas > 0) def.finish(c, ctx, rec);
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

inline std::string results_csv(const ResultRecord& rec) {
  std::ostringstream os;
  os << "experiment,n,d,replica,statistic,value\n";
  for (const auto& r : rec.rows)
    os << rec.config.experiment << ',' << rec.config.n << ',' << rec.config.d << ',' << r.replica << ',' << r.statistic << ','
       << detail::fmt(r.value) << '\n';
  return os.str();
}

inline nlohmann::json results_json(const ResultRecord& rec) {
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& a : rec.aggregates)
    stats[a.statistic] = {{"mean", a.estimate.value}, {"std_error", a.estimate.std_error},
                          {"ci_lo", a.estimate.lo()},  {"ci_hi", a.estimate.hi()},
                          {"samples", a.estimate.samples}, {"min", a.min}, {"max", a.max}};
  return {{"schema", "latecover.results/1"},
          {"experiment", rec.config.experiment},
          {"statistic", rec.config.statistic},
          {"config_hash", rec.hash},
          {"n", rec.config.n},
          {"d", rec.config.d},
          {"replicas", rec.config.replicas},
          {"seed", rec.config.seed},
          {"aggregates", stats},
          {"extra", rec.extra},
          {"wall_clock_seconds", rec.wall_clock_seconds},
          {"versions", {{"latecover", kVersion}, {"compiler", __VERSION__}}}};
}

/// Writes results.json, results.csv and manifest.json into `dir`.
inline std::vector<std::filesystem::path> write_results(const ResultRecord& rec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ComputationError("cannot create output directory " + dir.string() + ": " + ec.message());
  auto write = [&](const fs::path& p, const std::string& body) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ComputationError("cannot write " + p.string());
    out << body;
  };
  const fs::path csv = dir / "results.csv", json = dir / "results.json", manifest = dir / "manifest.json";
  write(csv, results_csv(rec));
  write(json, results_json(rec).dump(2) + "\n");
  const nlohmann::json m = {{"schema", "latecover.manifest/1"},
                            {"config_hash", rec.hash},
                            {"config", canonical_config(rec.config)},
                            {"outputs", {csv.filename().string(), json.filename().string()}}};
  write(manifest, m.dump(2) + "\n");
  return {csv, json, manifest};
}

// ---------------------------------------------------------------------------
// Report

struct ReportTables {
  std::string scaling;     // experiment,statistic,n,d,samples,mean,std_error
  std::string slopes;      // statistic,d,points,slope,slope_std_error
  std::string exceedance;  // experiment,statistic,n,d,threshold,frequency
  std::size_t files = 0;
};

/// Aggregates every results CSV under `dir` into plot-ready tables.
inline ReportTables build_report(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  struct Key {
    std::string experiment, statistic;
    int n, d;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::vector<double>> series;
  ReportTables t;
  if (fs::exists(dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f);
      std::string line;
      if (!std::getline(in, line) || detail::trim(line) != "experiment,n,d,replica,statistic,value") continue;
      ++t.files;
      while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (cols.size() != 6) continue;
        series[{cols[0], cols[4], std::stoi(cols[1]), std::stoi(cols[2])}].push_back(std::stod(cols[5]));
      }
    }
  }
  std::ostringstream sc, sl, ex;
  sc << "experiment,statistic,n,d,samples,mean,std_error\n";
  sl << "statistic,d,points,slope,slope_std_error\n";
  ex << "experiment,statistic,n,d,threshold,frequency\n";
  std::map<std::pair<std::string, int>, std::map<int, std::vector<double>>> by_stat;
  for (auto& [k, xs] : series) {
    const auto e = estimate_mean(xs);
    sc << k.experiment << ',' << k.statistic << ',' << k.n << ',' << k.d << ',' << xs.size() << ',' << detail::fmt(e.value)
       << ',' << detail::fmt(e.std_error) << '\n';
    auto& pooled = by_stat[{k.statistic, k.d}][k.n];
    pooled.insert(pooled.end(), xs.begin(), xs.end());
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t steps = std::min<std::size_t>(sorted.size(), 50);
    std::set<double> thresholds;
    for (std::size_t i = 0; i < steps; ++i) thresholds.insert(sorted[i * sorted.size() / steps]);
    for (double th : thresholds) {
      const auto above = static_cast<double>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), th));
      ex << k.experiment << ',' << k.statistic << ',' << k.n << ',' << k.d << ',' << detail::fmt(th) << ','
         << detail::fmt(above / static_cast<double>(sorted.size())) << '\n';
    }
  }
  for (const auto& [key, per_n] : by_stat) {
    if (per_n.size() < 2) continue;
    std::vector<double> ns, means;
    for (const auto& [n, xs] : per_n) {
      const double m = estimate_mean(xs).value;
      if (m <= 0) continue;
      ns.push_back(n);
      means.push_back(m);
    }
    if (ns.size() < 2) continue;
    const auto fit = log_log_fit(ns, means);
    sl << key.first << ',' << key.second << ',' << ns.size() << ',' << detail::fmt(fit.slope) << ','
       << detail::fmt(fit.slope_std_error) << '\n';
  }
  t.scaling = sc.str();
  t.slopes = sl.str();
  t.exceedance = ex.str();
  return t;
}

inline void write_report(const ReportTables& t, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ComputationError("cannot create report directory " + out.string());
  for (const auto& [name, body] : {std::pair<const char*, const std::string&>{"scaling.csv", t.scaling},
                                   {"slopes.csv", t.slopes},
                                   {"exceedance.csv", t.exceedance}}) {
    std::ofstream f(out / name, std::ios::binary);
    if (!f) throw ComputationError(std::string("cannot write report table ") + name);
    f << body;
  }
}

}  // namespace latecover
