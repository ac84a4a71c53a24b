#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

namespace latecover {

/// Welford accumulator. merge() is associative, so replica results can be
/// folded in any grouping.
class RunningStats {
 public:
  void push(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  void merge(const RunningStats& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double total = static_cast<double>(n_ + o.n_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.n_) / total;
    m2_ += o.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(o.n_) / total;
    n_ += o.n_;
  }

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double stddev() const { return std::sqrt(variance()); }
  double std_error() const { return n_ > 0 ? stddev() / std::sqrt(static_cast<double>(n_)) : 0.0; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;

  double half_width(double z = 1.96) const { return z * std_error; }
  double lo(double z = 1.96) const { return value - half_width(z); }
  double hi(double z = 1.96) const { return value + half_width(z); }
};

inline Estimate estimate_mean(std::span<const double> xs) {
  RunningStats s;
  for (double x : xs) s.push(x);
  return {s.mean(), s.std_error(), s.count()};
}

/// Mean with a batch-means standard error, for serially correlated sequences.
inline Estimate batch_means(std::span<const double> xs, std::size_t batches = 20) {
  if (xs.size() < 2 * batches) return estimate_mean(xs);
  const std::size_t per = xs.size() / batches;
  RunningStats outer;
  RunningStats all;
  for (std::size_t b = 0; b < batches; ++b) {
    RunningStats inner;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) inner.push(xs[i]);
    outer.push(inner.mean());
  }
  for (double x : xs) all.push(x);
  return {all.mean(), outer.std_error(), xs.size()};
}

struct Proportion {
  std::size_t hits = 0;
  std::size_t trials = 0;

  double value() const { return trials ? static_cast<double>(hits) / static_cast<double>(trials) : 0.0; }
  double std_error() const {
    if (!trials) return 0.0;
    const double p = value();
    return std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  }
  /// Wilson score interval.
  std::pair<double, double> wilson(double z = 1.96) const {
    if (!trials) return {0.0, 1.0};
    const double nt = static_cast<double>(trials);
    const double p = value();
    const double denom = 1.0 + z * z / nt;
    const double centre = (p + z * z / (2.0 * nt)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nt + z * z / (4.0 * nt * nt)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
  }
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_std_error = 0.0;
};

inline LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("linear_fit needs >= 2 paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("linear_fit: degenerate x values");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (x.size() > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      rss += r * r;
    }
    fit.slope_std_error = std::sqrt(rss / (n - 2.0) / sxx);
  }
  return fit;
}

/// Slope of log(y) against log(x).
inline LinearFit log_log_fit(std::span<const double> x, std::span<const double> y) {
  std::vector<double> lx, ly;
  for (double v : x) lx.push_back(std::log(v));
  for (double v : y) ly.push_back(std::log(v));
  return linear_fit(lx, ly);
}

/// Total variation distance between two probability vectors.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

struct ChiSquare {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

/// Pearson chi-square of observed counts against expected probabilities.
inline ChiSquare chi_square(std::span<const std::size_t> observed, std::span<const double> expected_prob) {
  if (observed.size() != expected_prob.size() || observed.size() < 2)
    throw std::invalid_argument("chi_square: need >= 2 matching cells");
  const double total = static_cast<double>(std::accumulate(observed.begin(), observed.end(), std::size_t{0}));
  ChiSquare out;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = total * expected_prob[i];
    if (e <= 0.0) continue;
    const double diff = static_cast<double>(observed[i]) - e;
    out.statistic += diff * diff / e;
    ++cells;
  }
  out.dof = static_cast<double>(cells) - 1.0;
  out.p_value = out.dof > 0 ? boost::math::gamma_q(out.dof / 2.0, out.statistic / 2.0) : 1.0;
  return out;
}

inline ChiSquare chi_square_uniform(std::span<const std::size_t> observed) {
  std::vector<double> p(observed.size(), 1.0 / static_cast<double>(observed.size()));
  return chi_square(observed, p);
}

/// Round half up: the convention used to turn real exponents n^x into sizes.
inline long long round_half_up(double x) { return static_cast<long long>(std::floor(x + 0.5)); }

}  // namespace latecover
