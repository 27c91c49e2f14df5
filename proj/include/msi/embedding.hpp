#pragma once

// UMAP from scratch for small point sets: exact kNN, smooth-kNN
// memberships, fuzzy union, (a, b) curve fit and SGD with negative
// sampling. Plus KL scoring, the hyperparameter random search and the
// separation diagnostics used to judge before/during clusters.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msi/calibration.hpp"
#include "msi/error.hpp"
#include "msi/io.hpp"
#include "msi/random.hpp"

namespace msi {

struct UmapParams {
  double min_dist = 0.1;
  int n_neighbors = 15;
  int n_components = 2;
  int n_epochs = 500;
  double negative_sample_rate = 5.0;
  double spread = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(min_dist > 0.0 && min_dist < 1.0)) throw ArgumentError("umap: min_dist must be in (0, 1)");
    if (n_neighbors < 2 || n_neighbors > 100) throw ArgumentError("umap: n_neighbors must be in [2, 100]");
    if (n_components != 2) throw ArgumentError("umap: only 2 output components are supported");
    if (n_epochs < 1) throw ArgumentError("umap: n_epochs must be positive");
    if (!(negative_sample_rate >= 0.0)) throw ArgumentError("umap: negative sample rate must be >= 0");
    if (!(spread > 0.0)) throw ArgumentError("umap: spread must be positive");
  }
};

// Rows are points.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline PointMatrix to_points(const SpectrumSeries& series) {
  PointMatrix m(static_cast<Eigen::Index>(series.size()), static_cast<Eigen::Index>(kBandCount));
  for (std::size_t i = 0; i < series.size(); ++i)
    for (std::size_t k = 0; k < kBandCount; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = series[i].bands[k];
  return m;
}

// k nearest neighbors of every point, self excluded, ascending distance;
// ties broken by lower index.
struct KnnGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // n x k
  std::vector<double> distances;

  std::size_t index(std::size_t i, std::size_t j) const { return indices[i * k + j]; }
  double distance(std::size_t i, std::size_t j) const { return distances[i * k + j]; }

  // First k columns of a wider graph.
  KnnGraph truncated(std::size_t kk) const {
    if (kk > k) throw ArgumentError("knn: cannot widen a graph");
    KnnGraph g{n, kk, std::vector<std::size_t>(n * kk), std::vector<double>(n * kk)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < kk; ++j) {
        g.indices[i * kk + j] = index(i, j);
        g.distances[i * kk + j] = distance(i, j);
      }
    return g;
  }
};

inline KnnGraph exact_knn(const PointMatrix& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (k == 0 || k >= n) throw ArgumentError("knn: need more points than neighbors");
  KnnGraph g{n, k, std::vector<std::size_t>(n * k), std::vector<double>(n * k)};
  std::vector<std::pair<double, std::size_t>> row(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      // direct differences keep duplicates at exactly zero
      row[m++] = {(x.row(ii) - x.row(static_cast<Eigen::Index>(j))).squaredNorm(), j};
    }
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
    for (std::size_t j = 0; j < k; ++j) {
      g.indices[i * k + j] = row[j].second;
      g.distances[i * k + j] = std::sqrt(row[j].first);
    }
  }
  return g;
}

struct SmoothKnn {
  std::vector<double> rho;
  std::vector<double> sigma;
  std::vector<double> residual;  // |sum - log2(k)| per point
};

// rho_i = nearest positive distance; sigma_i by bisection so the
// membership sum over the k neighbors hits log2(k).
inline SmoothKnn smooth_knn(const KnnGraph& g, double tolerance = 1e-5) {
  const double target = std::log2(static_cast<double>(g.k));
  SmoothKnn out{std::vector<double>(g.n), std::vector<double>(g.n), std::vector<double>(g.n)};
  for (std::size_t i = 0; i < g.n; ++i) {
    double rho = 0.0;
    for (std::size_t j = 0; j < g.k; ++j)
      if (g.distance(i, j) > 0.0) {
        rho = g.distance(i, j);
        break;
      }
    auto sum_at = [&](double sigma) {
      double s = 0.0;
      for (std::size_t j = 0; j < g.k; ++j) s += std::exp(-std::max(0.0, g.distance(i, j) - rho) / sigma);
      return s;
    };
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), mid = 1.0;
    double s = sum_at(mid);
    for (int it = 0; it < 256 && std::abs(s - target) > 0.1 * tolerance; ++it) {
      if (s > target) {
        hi = mid;
        mid = 0.5 * (lo + hi);
      } else {
        lo = mid;
        mid = std::isinf(hi) ? 2.0 * mid : 0.5 * (lo + hi);
      }
      s = sum_at(mid);
    }
    out.rho[i] = rho;
    out.sigma[i] = mid;
    out.residual[i] = std::abs(s - target);
  }
  return out;
}

struct FuzzyEdge {
  std::size_t i = 0;
  std::size_t j = 0;
  double w = 0.0;
};

// Symmetric membership graph, both directions stored, sorted by (i, j).
struct FuzzyGraph {
  std::size_t n = 0;
  std::vector<FuzzyEdge> edges;

  double weight(std::size_t i, std::size_t j) const {
    const auto it = std::lower_bound(edges.begin(), edges.end(), std::pair{i, j},
                                     [](const FuzzyEdge& e, const std::pair<std::size_t, std::size_t>& key) {
                                       return e.i != key.first ? e.i < key.first : e.j < key.second;
                                     });
    return it != edges.end() && it->i == i && it->j == j ? it->w : 0.0;
  }
};

inline FuzzyGraph fuzzy_union(const KnnGraph& g, const SmoothKnn& sk) {
  std::vector<FuzzyEdge> directed;
  directed.reserve(g.n * g.k);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.k; ++j) {
      const double w = std::exp(-std::max(0.0, g.distance(i, j) - sk.rho[i]) / sk.sigma[i]);
      directed.push_back({i, g.index(i, j), w});
    }
  auto by_key = [](const FuzzyEdge& a, const FuzzyEdge& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; };
  std::vector<FuzzyEdge> both = directed;
  for (const auto& e : directed) both.push_back({e.j, e.i, 0.0});
  std::sort(both.begin(), both.end(), by_key);
  // w(i,j) from i's row, w(j,i) from j's row; union a + b - ab
  FuzzyGraph out{g.n, {}};
  std::sort(directed.begin(), directed.end(), by_key);
  auto directed_weight = [&](std::size_t i, std::size_t j) {
    const auto it = std::lower_bound(directed.begin(), directed.end(), FuzzyEdge{i, j, 0.0}, by_key);
    return it != directed.end() && it->i == i && it->j == j ? it->w : 0.0;
  };
  for (std::size_t e = 0; e < both.size(); ++e) {
    if (e > 0 && both[e].i == both[e - 1].i && both[e].j == both[e - 1].j) continue;
    const double a = directed_weight(both[e].i, both[e].j);
    const double b = directed_weight(both[e].j, both[e].i);
    const double w = a + b - a * b;
    if (w > 0.0) out.edges.push_back({both[e].i, both[e].j, w});
  }
  return out;
}

// ------------------------------------------------------------ curve fit

struct CurveParams {
  double a = 1.0;
  double b = 1.0;
};

inline double low_dim_membership(double dist, const CurveParams& c) {
  return 1.0 / (1.0 + c.a * std::pow(dist, 2.0 * c.b));
}

// Lowest value the fitted curve may take at min_dist.
inline constexpr double kCurveFloorAtMinDist = 0.95;

namespace detail {

inline void curve_target(double min_dist, double spread, Eigen::VectorXd& xs, Eigen::VectorXd& ys) {
  const int m = 300;
  xs.resize(m);
  ys.resize(m);
  for (int i = 0; i < m; ++i) {
    xs[i] = 3.0 * spread * i / (m - 1);
    ys[i] = xs[i] < min_dist ? 1.0 : std::exp(-(xs[i] - min_dist) / spread);
  }
}

// Residuals of 1/(1 + a x^2b) in (log a, log b).
struct FreeCurveResidual {
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  const Eigen::VectorXd& xs;
  const Eigen::VectorXd& ys;
  int inputs() const { return 2; }
  int values() const { return static_cast<int>(xs.size()); }
  int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& r) const {
    const CurveParams c{std::exp(p[0]), std::exp(p[1])};
    for (Eigen::Index i = 0; i < xs.size(); ++i) r[i] = low_dim_membership(xs[i], c) - ys[i];
    return 0;
  }
};

// Same with a pinned so the curve equals `floor` at min_dist.
struct PinnedCurveResidual {
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  const Eigen::VectorXd& xs;
  const Eigen::VectorXd& ys;
  double min_dist;
  double floor;
  int inputs() const { return 1; }
  int values() const { return static_cast<int>(xs.size()); }
  CurveParams params(double log_b) const {
    const double b = std::exp(log_b);
    return {(1.0 / floor - 1.0) / std::pow(min_dist, 2.0 * b), b};
  }
  int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& r) const {
    const CurveParams c = params(p[0]);
    for (Eigen::Index i = 0; i < xs.size(); ++i) r[i] = low_dim_membership(xs[i], c) - ys[i];
    return 0;
  }
};

}  // namespace detail

// Least squares of 1/(1 + a x^2b) against the min_dist target curve, with
// the curve held at >= 0.95 at min_dist.
inline CurveParams fit_curve(double min_dist, double spread = 1.0) {
  if (!(min_dist > 0.0) || !(spread > 0.0)) throw ArgumentError("fit_curve: min_dist and spread must be positive");
  Eigen::VectorXd xs, ys;
  detail::curve_target(min_dist, spread, xs, ys);

  detail::FreeCurveResidual f{xs, ys};
  Eigen::NumericalDiff<detail::FreeCurveResidual> nd(f);
  Eigen::LevenbergMarquardt<Eigen::NumericalDiff<detail::FreeCurveResidual>> lm(nd);
  Eigen::VectorXd p(2);
  p << std::log(1.5), std::log(0.9);
  lm.minimize(p);
  CurveParams free{std::exp(p[0]), std::exp(p[1])};
  if (low_dim_membership(min_dist, free) >= kCurveFloorAtMinDist) return free;

  detail::PinnedCurveResidual g{xs, ys, min_dist, kCurveFloorAtMinDist};
  Eigen::NumericalDiff<detail::PinnedCurveResidual> nd2(g);
  Eigen::LevenbergMarquardt<Eigen::NumericalDiff<detail::PinnedCurveResidual>> lm2(nd2);
  Eigen::VectorXd q(1);
  q << p[1];
  lm2.minimize(q);
  return g.params(q[0]);
}

// ------------------------------------------------------------ gradients

namespace detail {

// Coefficient c with grad_i(-log phi) = -c (y_i - y_j); zero at d2 = 0.
inline double attractive_coeff(double d2, const CurveParams& c) {
  if (!(d2 > 0.0)) return 0.0;
  const double p = std::pow(d2, c.b);
  return -2.0 * c.a * c.b * p / d2 / (c.a * p + 1.0);
}

// Coefficient c with grad_i(-log(1 - phi)) = -c (y_i - y_j).
inline double repulsive_coeff(double d2, const CurveParams& c) {
  if (!(d2 > 0.0)) return 0.0;
  return 2.0 * c.b / (d2 * (c.a * std::pow(d2, c.b) + 1.0));
}

inline constexpr double kGradientClip = 4.0;

inline double clip(double v) { return std::clamp(v, -kGradientClip, kGradientClip); }

}  // namespace detail

// Fuzzy-set cross-entropy of an embedding against a membership graph, over
// all unordered pairs (non-edges have w = 0).
inline double cross_entropy(const PointMatrix& y, const FuzzyGraph& g, const CurveParams& c) {
  const auto n = static_cast<std::size_t>(y.rows());
  double ce = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double w = g.weight(i, j);
      const double phi = low_dim_membership((y.row(static_cast<Eigen::Index>(i)) - y.row(static_cast<Eigen::Index>(j))).norm(), c);
      if (w > 0.0) ce -= w * std::log(phi);
      if (w < 1.0) ce -= (1.0 - w) * std::log1p(-phi);
    }
  return ce;
}

// Analytic gradient of cross_entropy, assembled from the same per-pair
// coefficients the optimizer applies.
inline PointMatrix cross_entropy_gradient(const PointMatrix& y, const FuzzyGraph& g, const CurveParams& c) {
  const auto n = static_cast<std::size_t>(y.rows());
  PointMatrix grad = PointMatrix::Zero(y.rows(), y.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      const Eigen::RowVectorXd diff = y.row(ii) - y.row(jj);
      const double d2 = diff.squaredNorm();
      const double w = g.weight(i, j);
      const double coeff = w * detail::attractive_coeff(d2, c) + (1.0 - w) * detail::repulsive_coeff(d2, c);
      grad.row(ii) -= coeff * diff;
      grad.row(jj) += coeff * diff;
    }
  return grad;
}

// ------------------------------------------------------------ fitting

struct EmbeddingModel {
  UmapParams params;
  KnnGraph knn;
  SmoothKnn smooth;
  FuzzyGraph graph;
  CurveParams curve;
  PointMatrix coords;  // n x 2

  bool fitted() const { return coords.rows() > 0 && static_cast<std::size_t>(coords.rows()) == graph.n; }
  std::size_t size() const { return static_cast<std::size_t>(coords.rows()); }
};

namespace detail {

// Top two principal components scaled to a 10-unit box, plus a tiny jitter
// so duplicates start apart.
inline PointMatrix pca_init(const PointMatrix& x, std::uint64_t seed) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  PointMatrix y(x.rows(), 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = d > c ? Eigen::VectorXd(es.eigenvectors().col(d - 1 - c)) : Eigen::VectorXd::Zero(d);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    y.col(c) = centered * v;
  }
  const double m = y.cwiseAbs().maxCoeff();
  if (m > 0.0) y *= 10.0 / m;
  const CounterRng rng(seed, fnv1a("umap.init"));
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (int c = 0; c < 2; ++c) y(i, c) += 1e-4 * rng.normal(static_cast<std::uint64_t>(i * 2 + c));
  return y;
}

// splitmix stream for the sampler; plain modulo keeps results identical
// across standard libraries
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() { return mix64(state_ += 0x9e3779b97f4a7c15ULL); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }

 private:
  std::uint64_t state_;
};

inline void optimize_layout(PointMatrix& y, const FuzzyGraph& g, const CurveParams& c, const UmapParams& p) {
  const std::size_t n = static_cast<std::size_t>(y.rows());
  const auto& edges = g.edges;
  if (edges.empty()) return;
  double wmax = 0.0;
  for (const auto& e : edges) wmax = std::max(wmax, e.w);
  const double epochs = static_cast<double>(p.n_epochs);
  std::vector<std::size_t> active;
  std::vector<double> eps, next_pos, eps_neg, next_neg;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    // edges too weak to be sampled even once are dropped
    if (edges[e].w < wmax / epochs) continue;
    active.push_back(e);
    const double per = wmax / edges[e].w;
    eps.push_back(per);
    next_pos.push_back(per);
    const double per_neg = p.negative_sample_rate > 0.0 ? per / p.negative_sample_rate : 0.0;
    eps_neg.push_back(per_neg);
    next_neg.push_back(per_neg);
  }
  SplitMix rng(derive_seed(p.seed, "umap.sgd"));
  double* Y = y.data();  // row-major n x 2
  for (int epoch = 0; epoch < p.n_epochs; ++epoch) {
    const double alpha = 1.0 - static_cast<double>(epoch) / epochs;
    const double now = static_cast<double>(epoch);
    for (std::size_t a = 0; a < active.size(); ++a) {
      if (next_pos[a] > now) continue;
      const auto& e = edges[active[a]];
      double* yi = Y + 2 * e.i;
      double* yj = Y + 2 * e.j;
      double dx = yi[0] - yj[0], dy = yi[1] - yj[1];
      const double ca = attractive_coeff(dx * dx + dy * dy, c);
      const double gx = clip(ca * dx) * alpha, gy = clip(ca * dy) * alpha;
      yi[0] += gx;
      yi[1] += gy;
      yj[0] -= gx;
      yj[1] -= gy;
      next_pos[a] += eps[a];

      if (eps_neg[a] > 0.0) {
        const auto n_neg = static_cast<long>((now - next_neg[a]) / eps_neg[a]);
        for (long s = 0; s < n_neg; ++s) {
          const std::size_t k = rng.below(n);
          if (k == e.i) continue;
          const double* yk = Y + 2 * k;
          dx = yi[0] - yk[0];
          dy = yi[1] - yk[1];
          const double d2 = dx * dx + dy * dy;
          if (d2 > 0.0) {
            const double cr = repulsive_coeff(d2, c);
            yi[0] += clip(cr * dx) * alpha;
            yi[1] += clip(cr * dy) * alpha;
          } else if (k != e.j) {
            yi[0] += kGradientClip * alpha;
            yi[1] += kGradientClip * alpha;
          }
        }
        next_neg[a] += static_cast<double>(n_neg) * eps_neg[a];
      }
    }
  }
}

}  // namespace detail

// `knn` may carry a precomputed graph with at least n_neighbors columns.
inline EmbeddingModel fit_umap(const PointMatrix& x, const UmapParams& params, const KnnGraph* knn = nullptr) {
  params.validate();
  const auto n = static_cast<std::size_t>(x.rows());
  const auto k = static_cast<std::size_t>(params.n_neighbors);
  if (n < k + 1) throw ArgumentError("fit_umap: need at least n_neighbors + 1 points");
  if (!x.allFinite()) throw ArgumentError("fit_umap: non-finite input");
  EmbeddingModel m;
  m.params = params;
  if (knn) {
    if (knn->n != n || knn->k < k) throw ArgumentError("fit_umap: precomputed graph does not fit the data");
    m.knn = knn->k == k ? *knn : knn->truncated(k);
  } else {
    m.knn = exact_knn(x, k);
  }
  m.smooth = smooth_knn(m.knn);
  m.graph = fuzzy_union(m.knn, m.smooth);
  m.curve = fit_curve(params.min_dist, params.spread);
  m.coords = detail::pca_init(x, params.seed);
  detail::optimize_layout(m.coords, m.graph, m.curve, params);
  if (!m.coords.allFinite()) throw DataError("fit_umap: optimization diverged");
  return m;
}

inline EmbeddingModel fit_umap(const SpectrumSeries& spectra, const UmapParams& params) {
  for (const auto& s : spectra) {
    double sum = 0.0;
    for (double v : s.bands) sum += v;
    if (std::abs(sum - 1.0) > 1e-6) throw ArgumentError("fit_umap: spectra must be l1-normalized");
  }
  return fit_umap(to_points(spectra), params);
}

// ------------------------------------------------------------ scores

// sum p ln(p / q) in nats, 0 ln(0 / q) = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ArgumentError("kl_divergence: supports differ in size");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw ArgumentError("kl_divergence: negative or non-finite mass");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
    throw ArgumentError("kl_divergence: distributions must sum to 1");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw ArgumentError("kl_divergence: q is zero where p is positive");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, kl);
}

// Mean silhouette of a labeling in 2-D; 0 when fewer than two classes.
inline double silhouette(const PointMatrix& y, std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(y.rows());
  if (labels.size() != n) throw ArgumentError("silhouette: label count differs from point count");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) return 0.0;
  std::vector<std::size_t> count(classes.size(), 0);
  std::vector<std::size_t> cls(n);
  for (std::size_t i = 0; i < n; ++i) {
    cls[i] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
    ++count[cls[i]];
  }
  double total = 0.0;
  std::vector<double> sum(classes.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sum.begin(), sum.end(), 0.0);
    const double xi = y(static_cast<Eigen::Index>(i), 0), yi = y(static_cast<Eigen::Index>(i), 1);
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = xi - y(static_cast<Eigen::Index>(j), 0), dy = yi - y(static_cast<Eigen::Index>(j), 1);
      sum[cls[j]] += std::sqrt(dx * dx + dy * dy);
    }
    if (count[cls[i]] < 2) continue;  // singleton: s = 0
    const double a = sum[cls[i]] / static_cast<double>(count[cls[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes.size(); ++c)
      if (c != cls[i]) b = std::min(b, sum[c] / static_cast<double>(count[c]));
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

// Deterministic 2-means: farthest-point seeding, then Lloyd iterations.
inline std::vector<int> two_means(const PointMatrix& y, int max_iter = 100) {
  const auto n = y.rows();
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  if (n < 2) return assign;
  const Eigen::RowVectorXd mean = y.colwise().mean();
  Eigen::Index a, b;
  (y.rowwise() - mean).rowwise().squaredNorm().maxCoeff(&a);
  (y.rowwise() - y.row(a)).rowwise().squaredNorm().maxCoeff(&b);
  Eigen::RowVectorXd c0 = y.row(a), c1 = y.row(b);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    Eigen::RowVectorXd s0 = Eigen::RowVectorXd::Zero(y.cols()), s1 = s0;
    Eigen::Index n0 = 0, n1 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = (y.row(i) - c1).squaredNorm() < (y.row(i) - c0).squaredNorm() ? 1 : 0;
      if (assign[static_cast<std::size_t>(i)] != k) changed = true;
      assign[static_cast<std::size_t>(i)] = k;
      if (k) {
        s1 += y.row(i);
        ++n1;
      } else {
        s0 += y.row(i);
        ++n0;
      }
    }
    if (n0) c0 = s0 / static_cast<double>(n0);
    if (n1) c1 = s1 / static_cast<double>(n1);
    if (!changed && it > 0) break;
  }
  return assign;
}

// Fraction of points whose cluster matches the label, under the better of
// the two cluster-to-label matchings.
inline double cluster_agreement(std::span<const int> clusters, std::span<const int> labels) {
  if (clusters.size() != labels.size() || clusters.empty())
    throw ArgumentError("cluster_agreement: sizes differ or empty");
  std::size_t same = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) same += (clusters[i] == labels[i]) ? 1 : 0;
  const double f = static_cast<double>(same) / static_cast<double>(labels.size());
  return std::max(f, 1.0 - f);
}

enum class ScoreMode {
  fidelity,         // high- vs low-dimensional membership KL
  phase_histogram,  // KL between 2-D histograms of the two phases
};

struct EmbeddingScore {
  double score = 0.0;
  double silhouette = 0.0;
};

namespace detail {

inline double fidelity_kl(const EmbeddingModel& m) {
  std::vector<double> p, q;
  for (const auto& e : m.graph.edges) {
    if (e.j <= e.i) continue;
    p.push_back(e.w);
    const auto ii = static_cast<Eigen::Index>(e.i), jj = static_cast<Eigen::Index>(e.j);
    // floor keeps q strictly positive for far-apart pairs
    q.push_back(std::max(low_dim_membership((m.coords.row(ii) - m.coords.row(jj)).norm(), m.curve), 1e-300));
  }
  const double sp = std::accumulate(p.begin(), p.end(), 0.0);
  const double sq = std::accumulate(q.begin(), q.end(), 0.0);
  for (auto& v : p) v /= sp;
  for (auto& v : q) v /= sq;
  return kl_divergence(p, q);
}

inline double phase_histogram_kl(const PointMatrix& y, std::span<const int> labels, int bins = 16) {
  const Eigen::RowVectorXd lo = y.colwise().minCoeff(), hi = y.colwise().maxCoeff();
  std::vector<double> h0(static_cast<std::size_t>(bins * bins), 1e-3), h1 = h0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    int cell[2];
    for (int c = 0; c < 2; ++c) {
      const double span = hi[c] - lo[c];
      cell[c] = span > 0.0 ? std::min(bins - 1, static_cast<int>((y(i, c) - lo[c]) / span * bins)) : 0;
    }
    (labels[static_cast<std::size_t>(i)] == 0 ? h0 : h1)[static_cast<std::size_t>(cell[1] * bins + cell[0])] += 1.0;
  }
  const double s0 = std::accumulate(h0.begin(), h0.end(), 0.0), s1 = std::accumulate(h1.begin(), h1.end(), 0.0);
  for (auto& v : h0) v /= s0;
  for (auto& v : h1) v /= s1;
  return kl_divergence(h0, h1);
}

}  // namespace detail

// Labels follow the pooled order: 0 for the first n_before points, 1 after.
inline std::vector<int> pooled_labels(std::size_t n_before, std::size_t n_during) {
  std::vector<int> l(n_before + n_during, 1);
  std::fill(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(n_before), 0);
  return l;
}

inline EmbeddingScore embedding_score(const EmbeddingModel& m, std::span<const int> labels,
                                      ScoreMode mode = ScoreMode::fidelity) {
  if (!m.fitted()) throw StateError("embedding_score: model is not fitted");
  if (labels.size() != m.size()) throw ArgumentError("embedding_score: label count differs from point count");
  EmbeddingScore s;
  s.score = mode == ScoreMode::fidelity ? detail::fidelity_kl(m) : detail::phase_histogram_kl(m.coords, labels);
  s.silhouette = silhouette(m.coords, labels);
  return s;
}

// Model fitted on before followed by during.
inline EmbeddingScore embedding_score(const EmbeddingModel& m, const SpectrumSeries& before,
                                      const SpectrumSeries& during, ScoreMode mode = ScoreMode::fidelity) {
  if (!m.fitted()) throw StateError("embedding_score: model is not fitted");
  const auto labels = pooled_labels(before.size(), during.size());
  return embedding_score(m, labels, mode);
}

// ------------------------------------------------------------ search

struct Trial {
  std::size_t index = 0;
  UmapParams params;
  double score = std::numeric_limits<double>::infinity();
  double silhouette = 0.0;
  double wall_time_s = 0.0;
  bool ok = false;
  std::string error;
};

struct SearchResult {
  std::vector<Trial> trials;
  std::size_t best = 0;  // index into trials
  std::size_t n_trials = 0;

  const Trial& best_trial() const { return trials.at(best); }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const Trial& t) { return !t.ok; }));
  }
};

struct SearchConfig {
  std::size_t n_trials = 1000;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0: hardware concurrency
  int n_epochs = 500;
  ScoreMode mode = ScoreMode::fidelity;
};

// min_dist ~ U(0, 1), n_neighbors ~ U{2..100}; a pure function of
// (seed, trial).
inline UmapParams sample_params(std::uint64_t seed, std::size_t trial, int n_epochs = 500) {
  const CounterRng rng(seed, fnv1a("search.params"));
  UmapParams p;
  p.min_dist = rng.uniform(2 * trial);
  p.n_neighbors = 2 + static_cast<int>(rng.bits(2 * trial + 1) % 99);
  p.n_epochs = n_epochs;
  p.seed = derive_seed(seed, static_cast<std::uint64_t>(trial));
  return p;
}

inline SearchResult random_search(const SpectrumSeries& before, const SpectrumSeries& during,
                                  const SearchConfig& cfg) {
  if (before.empty() || during.empty()) throw ArgumentError("random_search: both phases need samples");
  if (cfg.n_trials == 0) throw ArgumentError("random_search: n_trials must be positive");
  SpectrumSeries pooled = before;
  pooled.insert(pooled.end(), during.begin(), during.end());
  const PointMatrix x = to_points(pooled);
  const auto labels = pooled_labels(before.size(), during.size());

  SearchResult out;
  out.n_trials = cfg.n_trials;
  out.trials.resize(cfg.n_trials);
  for (std::size_t t = 0; t < cfg.n_trials; ++t) {
    out.trials[t].index = t;
    out.trials[t].params = sample_params(cfg.seed, t, cfg.n_epochs);
  }
  // one shared neighbor table wide enough for every trial
  int kmax = 0;
  for (const auto& t : out.trials) kmax = std::max(kmax, t.params.n_neighbors);
  KnnGraph shared;
  const bool have_shared = static_cast<std::size_t>(x.rows()) > static_cast<std::size_t>(kmax);
  if (have_shared) shared = exact_knn(x, static_cast<std::size_t>(kmax));

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t t = next++; t < cfg.n_trials; t = next++) {
      Trial& tr = out.trials[t];
      const auto start = std::chrono::steady_clock::now();
      try {
        const auto m = fit_umap(x, tr.params, have_shared ? &shared : nullptr);
        const auto s = embedding_score(m, labels, cfg.mode);
        tr.score = s.score;
        tr.silhouette = s.silhouette;
        tr.ok = std::isfinite(s.score);
        if (!tr.ok) tr.error = "non-finite score";
      } catch (const std::exception& e) {
        tr.ok = false;
        tr.error = e.what();
      }
      tr.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads ? cfg.threads : hw, static_cast<unsigned>(cfg.n_trials)));
  {
    std::vector<std::jthread> pool;
    for (unsigned i = 1; i < threads; ++i) pool.emplace_back(work);
    work();
  }
  // first index wins ties
  bool any = false;
  for (const auto& t : out.trials) {
    if (!t.ok) continue;
    if (!any || t.score < out.trials[out.best].score) out.best = t.index;
    any = true;
  }
  if (!any) throw DataError("random_search: every trial failed");
  return out;
}

inline void write_trial_table(const fs::path& path, const SearchResult& r) {
  CsvWriter w(path, {"trial", "min_dist", "n_neighbors", "seed", "score", "silhouette", "wall_time_s"});
  for (const auto& t : r.trials)
    w.row({std::to_string(t.index), detail::format_double(t.params.min_dist), std::to_string(t.params.n_neighbors),
           std::to_string(t.params.seed), t.ok ? detail::format_double(t.score) : std::string("nan"),
           detail::format_double(t.silhouette), detail::format_double(t.wall_time_s)});
}

// ------------------------------------------------------------ plots

struct PlotSummary {
  std::size_t rows = 0;
  std::size_t legend_entries = 0;
};

inline PlotSummary export_embedding_plot(const EmbeddingModel& m, const std::vector<double>& timestamps,
                                         const std::vector<Phase>& phases, const fs::path& csv_path,
                                         const fs::path& png_path) {
  if (!m.fitted()) throw StateError("export_embedding_plot: model is not fitted");
  if (timestamps.size() != m.size() || phases.size() != m.size())
    throw ArgumentError("export_embedding_plot: label count differs from point count");
  {
    CsvWriter w(csv_path, {"x", "y", "timestamp", "phase"});
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      w.row({detail::format_double(m.coords(ii, 0)), detail::format_double(m.coords(ii, 1)),
             detail::format_double(timestamps[i]), std::string(to_string(phases[i]))});
    }
  }

  const int width = 800, height = 640, margin = 50;
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const Eigen::RowVectorXd lo = m.coords.colwise().minCoeff(), hi = m.coords.colwise().maxCoeff();
  auto px = [&](Eigen::Index i) {
    const double sx = hi[0] > lo[0] ? (m.coords(i, 0) - lo[0]) / (hi[0] - lo[0]) : 0.5;
    const double sy = hi[1] > lo[1] ? (m.coords(i, 1) - lo[1]) / (hi[1] - lo[1]) : 0.5;
    return cv::Point(margin + static_cast<int>(sx * (width - 2 * margin)),
                     height - margin - static_cast<int>(sy * (height - 2 * margin)));
  };
  const cv::Scalar colors[2] = {cv::Scalar(40, 40, 220), cv::Scalar(200, 110, 30)};  // BGR
  cv::rectangle(img, {margin - 10, margin - 10}, {width - margin + 10, height - margin + 10}, cv::Scalar(160, 160, 160));
  bool present[2] = {false, false};
  for (Eigen::Index i = 0; i < m.coords.rows(); ++i) {
    const int c = phases[static_cast<std::size_t>(i)] == Phase::before ? 0 : 1;
    present[c] = true;
    cv::circle(img, px(i), 2, colors[c], cv::FILLED, cv::LINE_AA);
  }
  PlotSummary s{m.size(), 0};
  int y = 24;
  for (int c = 0; c < 2; ++c) {
    if (!present[c]) continue;
    cv::circle(img, {width - 170, y - 5}, 5, colors[c], cv::FILLED, cv::LINE_AA);
    cv::putText(img, c == 0 ? "before clamping" : "during clamping", {width - 158, y}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    y += 20;
    ++s.legend_entries;
  }
  cv::putText(img, "UMAP 1", {width / 2 - 25, height - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  cv::putText(img, "UMAP 2", {8, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  if (!cv::imwrite(png_path.string(), img)) throw DataError("export_embedding_plot: cannot write " + png_path.string());
  return s;
}

}  // namespace msi
