#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>
#include "json.hpp"

#include "latecover/errors.hpp"
#include "latecover/lattice.hpp"
#include "latecover/parallel.hpp"
#include "latecover/rng.hpp"
#include "latecover/stats.hpp"

namespace latecover {

/// Green's function value of SRW on Z^d with an error bound.
struct GreenValue {
  double value = 0.0;
  double error = 0.0;  // exact: bound on the tail-model error; monte carlo: standard error
  std::string method;
};

namespace detail {

inline double log_choose(double n, double k) { return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1); }

/// q_s(k): probability a 1-D SRW is at k after s steps.
inline double one_dim_kernel(int s, long long k) {
  k = std::llabs(k);
  if (k > s || ((s - k) & 1)) return 0.0;
  return std::exp(log_choose(s, static_cast<double>((s + k) / 2)) - s * std::numbers::ln2);
}

/// P(Bin(t, p) = s) for s in a +-12 sigma window, as (first index, weights).
inline std::pair<int, std::vector<double>> binomial_window(int t, double p) {
  const double mean = t * p;
  const double sd = std::sqrt(t * p * (1 - p));
  const int lo = std::max(0, static_cast<int>(std::floor(mean - 12 * sd - 2)));
  const int hi = std::min(t, static_cast<int>(std::ceil(mean + 12 * sd + 2)));
  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(hi - lo + 1));
  const double lp = std::log(p), lq = std::log1p(-p);
  for (int s = lo; s <= hi; ++s) w.push_back(std::exp(log_choose(t, s) + s * lp + (t - s) * lq));
  return {lo, std::move(w)};
}

}  // namespace detail

/// Return-kernel series p_t(x), t = 0..T, for SRW on Z^d at a fixed x.
/// Steps are split among axes by a binomial allocation, one axis at a time;
/// the last two axes use the exact rotation (a+b, a-b) into two
/// independent 1-D walks.
inline std::vector<double> return_kernel_series(const std::vector<long long>& x, int T) {
  const int d = static_cast<int>(x.size());
  require(d >= 3, "return_kernel_series: d must be >= 3");
  require(T >= 1, "return_kernel_series: T must be >= 1");
  std::vector<double> f(static_cast<std::size_t>(T) + 1);
  const long long a = x[static_cast<std::size_t>(d - 2)], b = x[static_cast<std::size_t>(d - 1)];
  for (int u = 0; u <= T; ++u) f[static_cast<std::size_t>(u)] = detail::one_dim_kernel(u, a + b) * detail::one_dim_kernel(u, a - b);
  for (int m = 3; m <= d; ++m) {
    const long long xm = x[static_cast<std::size_t>(d - m)];
    std::vector<double> q(static_cast<std::size_t>(T) + 1);
    for (int s = 0; s <= T; ++s) q[static_cast<std::size_t>(s)] = detail::one_dim_kernel(s, xm);
    std::vector<double> g(static_cast<std::size_t>(T) + 1, 0.0);
    for (int t = 0; t <= T; ++t) {
      if (t == 0) {
        g[0] = q[0] * f[0];
        continue;
      }
      const auto [lo, w] = detail::binomial_window(t, 1.0 / m);
      double acc = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const int s = lo + static_cast<int>(i);
        acc += w[i] * q[static_cast<std::size_t>(s)] * f[static_cast<std::size_t>(t - s)];
      }
      g[static_cast<std::size_t>(t)] = acc;
    }
    f.swap(g);
  }
  return f;
}

/// Gaussian model of sum_{t > T} p_t(x): the integral over t > T of
/// (d / 2 pi t)^{d/2} exp(-d|x|^2 / 2t).
inline double green_tail(int d, double x2, double T) {
  const double pref = std::pow(d / (2 * std::numbers::pi), d / 2.0);
  const double s = d / 2.0 - 1.0;
  if (x2 == 0.0) return pref * std::pow(T, -s) / s;
  const double a = d * x2 / 2.0;
  return pref * std::pow(a, -s) * boost::math::tgamma_lower(s, a / T);
}

struct ExactGreenOptions {
  int T = 10000;
  double tolerance = 1e-3;
};

/// G(x) = sum_t p_t(x) by exact summation to T plus an analytic tail.
/// The error bound is tail * min(1, 4 (1 + |x|^2) / T).
inline GreenValue green_exact(const std::vector<long long>& x, const ExactGreenOptions& opt = {}) {
  const int d = static_cast<int>(x.size());
  const auto f = return_kernel_series(x, opt.T);
  double sum = 0.0;
  for (double v : f) sum += v;
  double x2 = 0.0;
  for (auto c : x) x2 += static_cast<double>(c) * static_cast<double>(c);
  const double tail = green_tail(d, x2, opt.T + 0.5);
  GreenValue out{sum + tail, tail * std::min(1.0, 4.0 * (1.0 + x2) / opt.T), "exact_convolution"};
  if (out.error > opt.tolerance)
    throw ComputationError("green_exact: tail bound " + std::to_string(out.error) + " exceeds tolerance; raise T");
  return out;
}

/// c_d from the closed form d Gamma(d/2 - 1) / (2 pi^{d/2}). Used only for
/// the escape correction of the Monte Carlo estimator.
inline double green_asymptotic_closed_form(int d) {
  return d * std::tgamma(d / 2.0 - 1.0) / (2.0 * std::pow(std::numbers::pi, d / 2.0));
}

struct MonteCarloGreenOptions {
  std::size_t walks = 200000;
  int escape_radius = 20;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
};

/// Visits to x by SRW on Z^d from 0 until |X| > L, plus the expected later
/// visits c_d / |X_exit - x|^{d-2}.
inline GreenValue green_monte_carlo(const std::vector<long long>& x, const MonteCarloGreenOptions& opt = {}) {
  const int d = static_cast<int>(x.size());
  require(d >= 3 && d <= kMaxDim, "green_monte_carlo: bad dimension");
  const double cd = green_asymptotic_closed_form(d);
  const long long L2 = static_cast<long long>(opt.escape_radius) * opt.escape_radius;
  const std::size_t chunks = std::max<std::size_t>(1, std::min<std::size_t>(opt.walks, 64));
  auto parts = parallel_map(chunks, opt.jobs, [&](std::size_t c) {
    Xoshiro256 rng = replica_stream(opt.seed, c);
    const std::size_t count = opt.walks / chunks + (c < opt.walks % chunks ? 1 : 0);
    RunningStats st;
    std::array<long long, kMaxDim> pos{};
    for (std::size_t w = 0; w < count; ++w) {
      pos.fill(0);
      long long r2 = 0;
      double visits = 0;
      for (;;) {
        bool at_x = true;
        for (int i = 0; i < d; ++i) at_x = at_x && pos[static_cast<std::size_t>(i)] == x[static_cast<std::size_t>(i)];
        visits += at_x;
        const auto k = rng.below(static_cast<std::uint64_t>(2 * d));
        const auto axis = static_cast<std::size_t>(k >> 1);
        const long long old = pos[axis];
        pos[axis] += (k & 1) ? -1 : 1;
        r2 += pos[axis] * pos[axis] - old * old;
        if (r2 > L2) break;
      }
      double dx2 = 0;
      for (int i = 0; i < d; ++i) {
        const double dd = static_cast<double>(pos[static_cast<std::size_t>(i)] - x[static_cast<std::size_t>(i)]);
        dx2 += dd * dd;
      }
      st.push(visits + cd / std::pow(dx2, (d - 2) / 2.0));
    }
    return st;
  });
  RunningStats all;
  for (const auto& p : parts) all.merge(p);
  return {all.mean(), all.std_error(), "monte_carlo"};
}

inline std::vector<long long> origin(int d) { return std::vector<long long>(static_cast<std::size_t>(d), 0); }

/// Truncation length used for G(0) per dimension: higher d has a lighter tail.
inline int default_green_T(int d) { return d == 3 ? 10000 : d == 4 ? 4000 : 2000; }

/// p_d = 1 - 1/G(0).
inline double return_probability(int d, int T = 0) {
  require(d >= 3, "return_probability: d must be >= 3");
  const GreenValue g0 = green_exact(origin(d), {T > 0 ? T : default_green_T(d), 1e-3});
  return 1.0 - 1.0 / g0.value;
}

struct AsymptoticFit {
  double c = 0, b = 0;  // G(k e1) k^{d-2} ~ c + b / k^2
  std::vector<double> k, scaled;
};

/// Fits G(k e1) k^{d-2} = c + b/k^2 over the given k values.
inline AsymptoticFit fit_green_asymptotic(int d, const std::vector<int>& ks, int T) {
  AsymptoticFit fit;
  std::vector<double> xs, ys;
  for (int k : ks) {
    std::vector<long long> x = origin(d);
    x[0] = k;
    const double g = green_exact(x, {T, 1.0}).value;
    fit.k.push_back(k);
    fit.scaled.push_back(g * std::pow(k, d - 2.0));
    xs.push_back(1.0 / (static_cast<double>(k) * k));
    ys.push_back(fit.scaled.back());
  }
  const auto lf = linear_fit(xs, ys);
  fit.c = lf.intercept;
  fit.b = lf.slope;
  return fit;
}

struct Constants {
  int d = 3;
  double G0 = 0, G0_error = 0;
  double p = 0;
  double c_d = 0;
  double C_d = 0;
  int kappa = 3;
  double alpha0 = 0, alpha1 = 0;
  std::string method = "exact_convolution";
  int T = 0;

  nlohmann::json to_json() const {
    return {{"schema", "latecover.constants/1"},
            {"d", d},
            {"G0", G0},
            {"p_d", p},
            {"c_d", c_d},
            {"C_d", C_d},
            {"kappa", kappa},
            {"alpha0", alpha0},
            {"alpha1", alpha1},
            {"method", method},
            {"tolerances", {{"G0_error", G0_error}, {"truncation_T", T}}}};
  }
};

struct Thresholds {
  double alpha0 = 0, alpha1 = 0;
  int kappa = 0;
};

inline int kappa_of(int d) { return std::min(d, 6); }

/// alpha1 = ((k-2)d + dk) / ((k-2)(d+1) + dk), k = min(d, 6).
inline double alpha1_of(int d) {
  const double k = kappa_of(d);
  return ((k - 2) * d + d * k) / ((k - 2) * (d + 1) + d * k);
}

inline Thresholds thresholds_from_p(int d, double p) { return {(1 + p) / 2, alpha1_of(d), kappa_of(d)}; }

inline Thresholds thresholds(int d) {
  require(d >= 3, "thresholds: d must be >= 3");
  return thresholds_from_p(d, return_probability(d));
}

/// All constants for dimension d. c_d is fitted from G(k e1), k = 4..12.
inline Constants compute_constants(int d, int T = 0) {
  require(d >= 3, "constants: d must be >= 3");
  Constants c;
  c.d = d;
  c.T = T > 0 ? T : default_green_T(d);
  const auto g0 = green_exact(origin(d), {c.T, 1e-3});
  c.G0 = g0.value;
  c.G0_error = g0.error;
  c.p = 1.0 - 1.0 / c.G0;
  c.c_d = fit_green_asymptotic(d, {4, 5, 6, 7, 8, 9, 10, 11, 12}, std::max(c.T, 20000)).c;
  c.C_d = c.c_d / c.G0;
  const auto th = thresholds_from_p(d, c.p);
  c.kappa = th.kappa;
  c.alpha0 = th.alpha0;
  c.alpha1 = th.alpha1;
  return c;
}

// ---------------------------------------------------------------------------
// Hitting predictions

struct BandConstants {
  double k1 = 1.0, k2 = 1.0, k3 = 1.0;
};

struct HitPrediction {
  double leading = 0;
  double error_band = 0;  // relative
  bool lower_bound_only = false;
};

/// C_d / r^{d-2} with band k1 r/R + k2/r^2 + k3 |z|/r.
inline HitPrediction predict_hit_prob(const Constants& c, double r, double R, double z_norm = 0.0, BandConstants k = {}) {
  require(r > 0, "predict_hit_prob: r must be positive");
  require(R >= 2 * r, "predict_hit_prob: need R >= 2r");
  require(z_norm <= r / 4, "predict_hit_prob: need |z| <= r/4");
  HitPrediction h;
  h.leading = c.C_d / std::pow(r, c.d - 2.0);
  h.error_band = k.k1 * r / R + k.k2 / (r * r) + k.k3 * z_norm / r;
  return h;
}

/// 2 C_d / ((1 + p_d) r^{d-2}). An equality for neighbours, a lower bound otherwise.
inline HitPrediction predict_pair_hit(const Constants& c, double r, double R, bool neighbors, BandConstants k = {}) {
  require(r > 0, "predict_pair_hit: r must be positive");
  require(R > 2 * r, "predict_pair_hit: need R > 2r");
  HitPrediction h;
  h.leading = 2 * c.C_d / ((1 + c.p) * std::pow(r, c.d - 2.0));
  h.error_band = k.k1 * r / R + k.k2 / (r * r);
  h.lower_bound_only = !neighbors;
  return h;
}

struct TStarRadii {
  int r = 0, R = 0;
};

/// r = round(n^{2 phi / kappa}), R = round(n^phi).
inline TStarRadii t_star_radii(int n, int d, double phi) {
  TStarRadii out;
  out.r = static_cast<int>(round_half_up(std::pow(n, 2 * phi / kappa_of(d))));
  out.R = static_cast<int>(round_half_up(std::pow(n, phi)));
  if (out.r < 2) throw ValidationError("t_star: inner radius round(n^(2 phi/kappa)) must be >= 2");
  if (out.R < 2 * out.r) throw ValidationError("t_star: need R = round(n^phi) >= 2r");
  return out;
}

/// t_* = log(n^d) T / p.
inline double t_star(int n, int d, double T_hat, double p_hat) {
  require(T_hat > 0 && p_hat > 0 && p_hat <= 1, "t_star: need T_hat > 0 and p_hat in (0,1]");
  return d * std::log(static_cast<double>(n)) * T_hat / p_hat;
}

}  // namespace latecover
