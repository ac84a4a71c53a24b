#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "latecover/errors.hpp"
#include "latecover/stats.hpp"

namespace latecover {

using Site = std::uint32_t;
inline constexpr int kMaxDim = 12;

struct Point {
  std::array<int, kMaxDim> c{};
  int dim = 0;

  Point() = default;
  explicit Point(int d) : dim(d) {}
  Point(std::initializer_list<int> xs) : dim(static_cast<int>(xs.size())) {
    require(xs.size() <= kMaxDim, "Point: too many coordinates");
    std::copy(xs.begin(), xs.end(), c.begin());
  }

  int& operator[](int i) { return c[static_cast<std::size_t>(i)]; }
  int operator[](int i) const { return c[static_cast<std::size_t>(i)]; }

  friend bool operator==(const Point& a, const Point& b) {
    if (a.dim != b.dim) return false;
    for (int i = 0; i < a.dim; ++i)
      if (a[i] != b[i]) return false;
    return true;
  }
};

enum class Metric { euclidean, linf };

/// The torus Z_n^d. Sites are linear indices x_0 + n x_1 + n^2 x_2 + ...
/// Neighbour k of a site is direction k/2 along axis k/2, sign + for even k.
class TorusGeometry {
 public:
  TorusGeometry(int n, int d) : n_(n), d_(d) {
    require(d >= 3, "torus dimension must be >= 3");
    require(d <= kMaxDim, "torus dimension exceeds kMaxDim");
    require(n >= 2, "torus side must be >= 2");
    long double vol = 1;
    for (int i = 0; i < d; ++i) vol *= n;
    require(vol <= static_cast<long double>(1u << 28), "n^d exceeds the supported site count (2^28)");
    volume_ = static_cast<std::size_t>(vol);
    stride_[0] = 1;
    for (int i = 1; i < d; ++i) stride_[static_cast<std::size_t>(i)] = stride_[static_cast<std::size_t>(i - 1)] * static_cast<Site>(n);
    auto t = std::make_shared<std::vector<Site>>(volume_ * static_cast<std::size_t>(degree()));
    for (Site s = 0; s < volume_; ++s)
      for (int k = 0; k < degree(); ++k)
        (*t)[s * static_cast<std::size_t>(degree()) + static_cast<std::size_t>(k)] = neighbor(s, k);
    table_ = std::move(t);
  }

  int n() const { return n_; }
  int d() const { return d_; }
  std::size_t volume() const { return volume_; }
  int degree() const { return 2 * d_; }
  Site stride(int axis) const { return stride_[static_cast<std::size_t>(axis)]; }

  static int wrap(long long x, int n) {
    long long m = x % n;
    return static_cast<int>(m < 0 ? m + n : m);
  }

  Site index(const Point& p) const {
    require(p.dim == d_, "point dimension does not match torus");
    Site s = 0;
    for (int i = 0; i < d_; ++i) s += static_cast<Site>(wrap(p[i], n_)) * stride(i);
    return s;
  }

  Point point(Site s) const {
    Point p(d_);
    for (int i = 0; i < d_; ++i) {
      p[i] = static_cast<int>(s % static_cast<Site>(n_));
      s /= static_cast<Site>(n_);
    }
    return p;
  }

  int coord(Site s, int axis) const { return static_cast<int>((s / stride(axis)) % static_cast<Site>(n_)); }

  Site neighbor(Site s, int dir) const {
    const int axis = dir >> 1;
    const int x = coord(s, axis);
    const Site st = stride(axis);
    if ((dir & 1) == 0) return x + 1 == n_ ? s - st * static_cast<Site>(n_ - 1) : s + st;
    return x == 0 ? s + st * static_cast<Site>(n_ - 1) : s - st;
  }

  /// Dense neighbour table, built at construction and shared by copies.
  const std::vector<Site>& neighbors() const { return *table_; }

  Site translate(Site s, const Point& offset) const {
    Site out = 0;
    for (int i = 0; i < d_; ++i) out += static_cast<Site>(wrap(coord(s, i) + static_cast<long long>(offset[i]), n_)) * stride(i);
    return out;
  }

  /// Minimal-image offset b - a, each component in (-n/2, n/2].
  Point offset(Site a, Site b) const {
    Point o(d_);
    for (int i = 0; i < d_; ++i) o[i] = min_image(coord(b, i) - coord(a, i));
    return o;
  }

  int min_image(int delta) const {
    int m = wrap(delta, n_);
    return m > n_ / 2 ? m - n_ : m;
  }

  friend bool operator==(const TorusGeometry& a, const TorusGeometry& b) { return a.n_ == b.n_ && a.d_ == b.d_; }

 private:
  int n_;
  int d_;
  std::size_t volume_ = 0;
  std::array<Site, kMaxDim> stride_{};
  std::shared_ptr<const std::vector<Site>> table_;
};

inline double torus_distance(const TorusGeometry& g, const Point& a, const Point& b, Metric metric = Metric::euclidean) {
  require(a.dim == g.d() && b.dim == g.d(), "torus_distance: point dimension does not match geometry");
  double acc = 0.0;
  for (int i = 0; i < g.d(); ++i) {
    const int da = std::abs(g.min_image(b[i] - a[i]));
    if (metric == Metric::linf)
      acc = std::max(acc, static_cast<double>(da));
    else
      acc += static_cast<double>(da) * da;
  }
  return metric == Metric::linf ? acc : std::sqrt(acc);
}

inline double torus_distance(const TorusGeometry& g, Site a, Site b, Metric metric = Metric::euclidean) {
  return torus_distance(g, g.point(a), g.point(b), metric);
}

inline long long squared_distance(const TorusGeometry& g, Site a, Site b) {
  long long acc = 0;
  for (int i = 0; i < g.d(); ++i) {
    const long long da = g.min_image(g.coord(b, i) - g.coord(a, i));
    acc += da * da;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Shapes

enum class ShapeKind { box, ball };

/// Box: side length `size` (integer), offsets [-floor(s/2), ceil(s/2)-1] per
/// axis, so boxes with a common centre nest for any sides.
/// Ball: closed Euclidean ball of radius `size`.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::ball;
  Site center = 0;
  double size = 1.0;

  static ShapeSpec box(Site c, int side) { return {ShapeKind::box, c, static_cast<double>(side)}; }
  static ShapeSpec ball(Site c, double radius) { return {ShapeKind::ball, c, radius}; }

  int side() const { return static_cast<int>(size); }
  int lo() const { return -(side() / 2); }
  int hi() const { return (side() + 1) / 2 - 1; }

  /// Number of lattice points the shape spans along one axis.
  int extent() const {
    if (kind == ShapeKind::box) return side();
    return 2 * static_cast<int>(std::floor(size + 1e-12)) + 1;
  }

  bool contains_offset(const Point& o) const {
    if (kind == ShapeKind::box) {
      for (int i = 0; i < o.dim; ++i)
        if (o[i] < lo() || o[i] > hi()) return false;
      return true;
    }
    long long r2 = 0;
    for (int i = 0; i < o.dim; ++i) r2 += static_cast<long long>(o[i]) * o[i];
    return static_cast<double>(r2) <= size * size + 1e-9;
  }

  std::string describe() const {
    std::ostringstream os;
    os << (kind == ShapeKind::box ? "box(side=" : "ball(radius=") << size << ")";
    return os.str();
  }
};

/// Shapes must span at most n-1 sites per axis: they never wrap onto
/// themselves and always leave a non-empty exterior.
inline void validate_shape(const TorusGeometry& g, const ShapeSpec& s) {
  require(s.size > 0, "shape radius/side must be positive");
  require(s.center < g.volume(), "shape centre outside the torus");
  if (s.kind == ShapeKind::box)
    require(std::floor(s.size) == s.size, "box side must be an integer");
  if (s.extent() > g.n() - 1) {
    std::ostringstream os;
    os << s.describe() << " spans " << s.extent() << " sites per axis; the torus of side " << g.n()
       << " allows at most " << g.n() - 1 << " (shape would wrap onto itself)";
    throw ValidationError(os.str());
  }
}

inline bool contains(const TorusGeometry& g, const ShapeSpec& s, Site x) {
  Point o(g.d());
  for (int i = 0; i < g.d(); ++i) {
    int delta = TorusGeometry::wrap(g.coord(x, i) - g.coord(s.center, i), g.n());
    if (s.kind == ShapeKind::box) {
      if (delta > s.hi()) delta -= g.n();
      if (delta < s.lo()) return false;
    } else {
      delta = g.min_image(delta);
    }
    o[i] = delta;
  }
  return s.contains_offset(o);
}

/// All offsets of the shape, in lexicographic order of offset coordinates.
inline std::vector<Point> shape_offsets(int d, const ShapeSpec& s) {
  const int reach = s.kind == ShapeKind::box ? 0 : static_cast<int>(std::floor(s.size + 1e-12));
  const int lo = s.kind == ShapeKind::box ? s.lo() : -reach;
  const int hi = s.kind == ShapeKind::box ? s.hi() : reach;
  std::vector<Point> out;
  Point o(d);
  for (int i = 0; i < d; ++i) o[i] = lo;
  for (;;) {
    if (s.contains_offset(o)) out.push_back(o);
    int i = 0;
    while (i < d && o[i] == hi) o[i++] = lo;
    if (i == d) break;
    ++o[i];
  }
  return out;
}

/// Sites of the shape, sorted ascending.
inline std::vector<Site> shape_sites(const TorusGeometry& g, const ShapeSpec& s) {
  validate_shape(g, s);
  std::vector<Site> out;
  for (const Point& o : shape_offsets(g.d(), s)) out.push_back(g.translate(s.center, o));
  std::sort(out.begin(), out.end());
  return out;
}

/// Membership mask over all n^d sites.
inline std::vector<std::uint8_t> shape_mask(const TorusGeometry& g, const ShapeSpec& s) {
  std::vector<std::uint8_t> mask(g.volume(), 0);
  for (Site x : shape_sites(g, s)) mask[x] = 1;
  return mask;
}

/// Inner vertex boundary: sites of the shape with a neighbour outside it.
inline std::vector<Site> shape_boundary(const TorusGeometry& g, const ShapeSpec& s) {
  const auto mask = shape_mask(g, s);
  std::vector<Site> out;
  for (Site x : shape_sites(g, s)) {
    for (int k = 0; k < g.degree(); ++k) {
      if (!mask[g.neighbor(x, k)]) {
        out.push_back(x);
        break;
      }
    }
  }
  return out;
}

/// Outer vertex boundary: sites outside the shape adjacent to it. These are
/// the possible positions at the first exit time.
inline std::vector<Site> outer_boundary(const TorusGeometry& g, const ShapeSpec& s) {
  const auto mask = shape_mask(g, s);
  std::vector<std::uint8_t> seen(g.volume(), 0);
  std::vector<Site> out;
  for (Site x : shape_sites(g, s))
    for (int k = 0; k < g.degree(); ++k) {
      const Site y = g.neighbor(x, k);
      if (!mask[y] && !seen[y]) {
        seen[y] = 1;
        out.push_back(y);
      }
    }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Annuli

enum class Flavor { box_in_ball, box_in_box, ball_in_ball };

inline const char* to_string(Flavor f) {
  switch (f) {
    case Flavor::box_in_ball: return "box-in-ball";
    case Flavor::box_in_box: return "box-in-box";
    case Flavor::ball_in_ball: return "ball-in-ball";
  }
  return "?";
}

inline Flavor parse_flavor(const std::string& s) {
  if (s == "box-in-ball" || s == "box_in_ball") return Flavor::box_in_ball;
  if (s == "box-in-box" || s == "box_in_box") return Flavor::box_in_box;
  if (s == "ball-in-ball" || s == "ball_in_ball") return Flavor::ball_in_ball;
  throw ValidationError("unknown annulus flavor '" + s + "'");
}

struct AnnulusSpec {
  ShapeSpec inner;
  ShapeSpec outer;

  static AnnulusSpec make(Flavor f, Site center, double r, double R) {
    switch (f) {
      case Flavor::box_in_ball: return {ShapeSpec::box(center, static_cast<int>(r)), ShapeSpec::ball(center, R)};
      case Flavor::box_in_box:
        return {ShapeSpec::box(center, static_cast<int>(r)), ShapeSpec::box(center, static_cast<int>(R))};
      case Flavor::ball_in_ball: return {ShapeSpec::ball(center, r), ShapeSpec::ball(center, R)};
    }
    return {};
  }
};

/// Both shapes fit, share a centre, and inner is a proper subset of outer.
inline void validate_annulus(const TorusGeometry& g, const AnnulusSpec& a) {
  validate_shape(g, a.inner);
  validate_shape(g, a.outer);
  require(a.inner.center == a.outer.center, "annulus shapes must share a centre");
  const auto outer = shape_mask(g, a.outer);
  const auto inner = shape_sites(g, a.inner);
  for (Site x : inner)
    require(outer[x] != 0, "annulus inner shape " + a.inner.describe() + " is not contained in outer shape " +
                               a.outer.describe());
  require(inner.size() < shape_sites(g, a.outer).size(), "annulus inner and outer shapes coincide");
}

// ---------------------------------------------------------------------------
// Box decomposition

struct DecompositionSizes {
  int s = 0;      // middle box side, round(n^beta)
  int h = 0;      // round(n^phi)
  int outer = 0;  // s + h
  int inner = 0;  // s - h
};

inline DecompositionSizes decomposition_sizes(int n, double beta, double phi) {
  DecompositionSizes z;
  z.s = static_cast<int>(round_half_up(std::pow(static_cast<double>(n), beta)));
  z.h = static_cast<int>(round_half_up(std::pow(static_cast<double>(n), phi)));
  z.outer = z.s + z.h;
  z.inner = z.s - z.h;
  return z;
}

/// Partition of the torus into boxes of side s+h, each holding concentric
/// boxes of side s and s-h. Per-site lookup tables make the Y-process and
/// nested counters O(1) per step.
class Decomposition {
 public:
  enum Layer : std::uint8_t { kInner = 0, kMiddle = 1, kOuterShell = 2 };

  Decomposition(TorusGeometry g, double beta, double phi) : g_(g), beta_(beta), phi_(phi) {
    require(beta > 0 && beta < 1, "decomposition: beta must lie in (0,1)");
    require(phi > 0 && phi < beta, "decomposition: phi must lie in (0, beta)");
    sizes_ = decomposition_sizes(g.n(), beta, phi);
    require(sizes_.inner >= 1, "decomposition: round(n^beta) - round(n^phi) must be >= 1");
    if (g.n() % sizes_.outer != 0) {
      std::ostringstream os;
      os << "decomposition: outer box side " << sizes_.outer << " = round(n^beta)+round(n^phi) does not divide n="
         << g.n() << "; admissible n nearby:";
      int found = 0;
      for (int delta = 1; delta < g.n() && found < 4; ++delta)
        for (int cand : {g.n() - delta, g.n() + delta}) {
          if (cand < 2 || found >= 4) continue;
          const auto z = decomposition_sizes(cand, beta, phi);
          if (z.inner >= 1 && cand % z.outer == 0) {
            os << ' ' << cand;
            ++found;
          }
        }
      throw ValidationError(os.str());
    }
    per_axis_ = g.n() / sizes_.outer;
    boxes_ = 1;
    for (int i = 0; i < g.d(); ++i) boxes_ *= static_cast<std::size_t>(per_axis_);

    box_of_.resize(g.volume());
    layer_.resize(g.volume());
    middle_boundary_.assign(g.volume(), 0);
    const ShapeSpec mid_shape = ShapeSpec::box(0, sizes_.s);
    const ShapeSpec low_shape = ShapeSpec::box(0, sizes_.inner);
    for (Site x = 0; x < g.volume(); ++x) {
      std::size_t box = 0, mul = 1;
      Point o(g.d());
      for (int i = 0; i < g.d(); ++i) {
        const int c = g.coord(x, i);
        const int tile = c / sizes_.outer;
        box += static_cast<std::size_t>(tile) * mul;
        mul *= static_cast<std::size_t>(per_axis_);
        o[i] = c - (tile * sizes_.outer + sizes_.outer / 2);
      }
      box_of_[x] = static_cast<std::uint32_t>(box);
      layer_[x] = low_shape.contains_offset(o) ? kInner : mid_shape.contains_offset(o) ? kMiddle : kOuterShell;
    }
    for (Site x = 0; x < g.volume(); ++x) {
      if (layer_[x] == kOuterShell) continue;
      for (int k = 0; k < g.degree(); ++k) {
        const Site y = g.neighbor(x, k);
        if (layer_[y] == kOuterShell || box_of_[y] != box_of_[x]) {
          middle_boundary_[x] = 1;
          break;
        }
      }
    }
  }

  const TorusGeometry& geometry() const { return g_; }
  double beta() const { return beta_; }
  double phi() const { return phi_; }
  const DecompositionSizes& sizes() const { return sizes_; }
  std::size_t box_count() const { return boxes_; }

  std::uint32_t box_of(Site x) const { return box_of_[x]; }
  Layer layer(Site x) const { return static_cast<Layer>(layer_[x]); }
  /// True for sites outside every inner (s-h) box.
  bool in_annular_region(Site x) const { return layer_[x] != kInner; }
  /// Inner vertex boundary of the middle box containing x.
  bool on_middle_boundary(Site x) const { return middle_boundary_[x] != 0; }

  std::size_t annular_region_size() const {
    std::size_t c = 0;
    for (auto l : layer_) c += l != kInner;
    return c;
  }

  /// Centre of box b (centre of all three concentric boxes).
  Site box_center(std::uint32_t b) const {
    Point p(g_.d());
    for (int i = 0; i < g_.d(); ++i) {
      p[i] = static_cast<int>(b % static_cast<std::uint32_t>(per_axis_)) * sizes_.outer + sizes_.outer / 2;
      b /= static_cast<std::uint32_t>(per_axis_);
    }
    return g_.index(p);
  }

 private:
  TorusGeometry g_;
  double beta_;
  double phi_;
  DecompositionSizes sizes_;
  int per_axis_ = 0;
  std::size_t boxes_ = 0;
  std::vector<std::uint32_t> box_of_;
  std::vector<std::uint8_t> layer_;
  std::vector<std::uint8_t> middle_boundary_;
};

inline Decomposition decompose(const TorusGeometry& g, double beta, double phi) { return Decomposition(g, beta, phi); }

}  // namespace latecover
