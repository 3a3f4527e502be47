#pragma once

// Toy-scale evaluation metrics.
//
// frechet_2d is the FID convention (squared Frechet distance) applied to raw 2D
// coordinates: there is no feature network, the two sample sets are fitted with
// MLE Gaussians and compared in closed form.
//
// precision_recall is the k-NN manifold estimate: each reference point owns a
// ball whose radius is the distance to its k-th nearest neighbour within its own
// set (itself excluded). Precision is the fraction of fake points inside the
// union of real balls, recall the fraction of real points inside the union of
// fake balls. Membership uses <=, so every point tied at the k-th radius counts.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "neon/gaussian.hpp"

namespace neon {

inline double frechet_2d(const SampleSet& a, const SampleSet& b) {
  if (a.size() < 3 || b.size() < 3) throw std::invalid_argument("frechet_2d: need at least 3 points per set");
  const Moments2 ma = fit_moments(a);
  const Moments2 mb = fit_moments(b);
  if (!ma.cov.is_spd() || !mb.cov.is_spd()) throw std::invalid_argument("frechet_2d: degenerate covariance");
  const double d = w2_gaussian(ma, mb);
  return d * d;
}

struct PrConfig {
  std::size_t k = 5;
};

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

namespace detail {

inline double sqdist(const Vec2& a, const Vec2& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

/// Squared k-NN radius of every point in `pts`, excluding the point itself.
inline std::vector<double> knn_sq_radii(const SampleSet& pts, std::size_t k) {
  std::vector<double> radii(pts.size());
  std::vector<double> d(pts.size() - 1);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d[m++] = sqdist(pts[i], pts[j]);
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    radii[i] = d[k - 1];
  }
  return radii;
}

/// Fraction of `queries` inside the union of balls around `refs`.
inline double coverage(const SampleSet& refs, const std::vector<double>& sq_radii, const SampleSet& queries) {
  // Largest balls first: a hit is usually found early.
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sq_radii[a] > sq_radii[b]; });
  std::size_t inside = 0;
  for (const auto& q : queries) {
    for (std::size_t idx : order) {
      if (sqdist(q, refs[idx]) <= sq_radii[idx]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(queries.size());
}

}  // namespace detail

inline PrecisionRecall precision_recall(const SampleSet& real, const SampleSet& fake, const PrConfig& cfg = {}) {
  if (cfg.k < 1 || cfg.k >= std::min(real.size(), fake.size())) {
    throw std::invalid_argument("precision_recall: need 1 <= k < min(|real|, |fake|), got k=" + std::to_string(cfg.k));
  }
  const auto real_r = detail::knn_sq_radii(real, cfg.k);
  const auto fake_r = detail::knn_sq_radii(fake, cfg.k);
  return {detail::coverage(real, real_r, fake), detail::coverage(fake, fake_r, real)};
}

}  // namespace neon
