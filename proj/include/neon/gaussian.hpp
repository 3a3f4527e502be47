#pragma once

// Analytic 2D Gaussian generative model: mean + Cholesky factor, trained by
// full-batch gradient descent on mean NLL, measured by closed-form W2.
//
// Parameter layout (ParamVector, dim 5): [mean_x, mean_y, l11, l21, l22] with
// Sigma = L L^T, L = [[l11, 0], [l21, l22]].

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "neon/checkpoint.hpp"
#include "neon/core.hpp"
#include "neon/csv.hpp"

namespace neon {

using Vec2 = std::array<double, 2>;
using SampleSet = std::vector<Vec2>;

/// Symmetric 2x2 matrix [[xx, xy], [xy, yy]].
struct Sym2 {
  double xx = 0.0, xy = 0.0, yy = 0.0;

  double trace() const { return xx + yy; }
  double det() const { return xx * yy - xy * xy; }
  bool is_spd() const { return std::isfinite(xx) && std::isfinite(xy) && std::isfinite(yy) && xx > 0.0 && det() > 0.0; }
};

struct Eig2 {
  double lambda[2];
  Vec2 vec[2];  // orthonormal
};

/// Eigendecomposition of a symmetric 2x2 matrix.
inline Eig2 eig_sym(const Sym2& m) {
  const double mid = 0.5 * (m.xx + m.yy);
  const double rad = std::hypot(0.5 * (m.xx - m.yy), m.xy);
  Eig2 e{{mid + rad, mid - rad}, {}};
  if (rad == 0.0) {
    e.vec[0] = {1.0, 0.0};
    e.vec[1] = {0.0, 1.0};
    return e;
  }
  // Pick the better-conditioned of the two candidate eigenvector formulas.
  Vec2 v;
  if (m.xx >= m.yy) v = {e.lambda[0] - m.yy, m.xy};
  else v = {m.xy, e.lambda[0] - m.xx};
  const double n = std::hypot(v[0], v[1]);
  e.vec[0] = {v[0] / n, v[1] / n};
  e.vec[1] = {-e.vec[0][1], e.vec[0][0]};
  return e;
}

/// Principal square root of a symmetric PSD 2x2 matrix (negative eigenvalues clamp to 0).
inline Sym2 sqrtm(const Sym2& m) {
  const Eig2 e = eig_sym(m);
  Sym2 r;
  for (int k = 0; k < 2; ++k) {
    const double s = std::sqrt(std::max(e.lambda[k], 0.0));
    r.xx += s * e.vec[k][0] * e.vec[k][0];
    r.xy += s * e.vec[k][0] * e.vec[k][1];
    r.yy += s * e.vec[k][1] * e.vec[k][1];
  }
  return r;
}

/// a * b * a for symmetric a, b, symmetrized.
inline Sym2 sandwich(const Sym2& a, const Sym2& b) {
  // t = a*b (general 2x2)
  const double t00 = a.xx * b.xx + a.xy * b.xy, t01 = a.xx * b.xy + a.xy * b.yy;
  const double t10 = a.xy * b.xx + a.yy * b.xy, t11 = a.xy * b.xy + a.yy * b.yy;
  const double r00 = t00 * a.xx + t01 * a.xy;
  const double r01 = t00 * a.xy + t01 * a.yy;
  const double r10 = t10 * a.xx + t11 * a.xy;
  const double r11 = t10 * a.xy + t11 * a.yy;
  return {r00, 0.5 * (r01 + r10), r11};
}

/// Mean and covariance of a 2D Gaussian.
struct Moments2 {
  Vec2 mean{};
  Sym2 cov{};
};

struct GaussianParams {
  Vec2 mean{0.0, 0.0};
  double l11 = 1.0, l21 = 0.0, l22 = 1.0;

  Sym2 covariance() const { return {l11 * l11, l11 * l21, l21 * l21 + l22 * l22}; }
  Moments2 moments() const { return {mean, covariance()}; }

  bool valid() const {
    return std::isfinite(mean[0]) && std::isfinite(mean[1]) && std::isfinite(l21) && std::isfinite(l11) &&
           std::isfinite(l22) && l11 > 0.0 && l22 > 0.0;
  }

  ParamVector to_params() const { return ParamVector({mean[0], mean[1], l11, l21, l22}); }

  static GaussianParams from_params(const ParamVector& p) {
    if (p.dim() != 5) throw std::invalid_argument("GaussianParams: expected 5 parameters, got " + std::to_string(p.dim()));
    GaussianParams g{{p[0], p[1]}, p[2], p[3], p[4]};
    if (!g.valid()) throw std::invalid_argument("GaussianParams: Cholesky diagonal must be > 0");
    return g;
  }

  static GaussianParams from_moments(const Vec2& mean, const Sym2& cov) {
    if (!cov.is_spd()) throw std::invalid_argument("GaussianParams: covariance is not SPD");
    const double l11 = std::sqrt(cov.xx);
    const double l21 = cov.xy / l11;
    return {mean, l11, l21, std::sqrt(cov.yy - l21 * l21)};
  }
};

/// The Gaussian model's inference rule: draws mean + sqrt(shrink) * L z.
/// shrink < 1 is mode-seeking, shrink = 1 is the exact sampler.
inline GaussianParams generated_distribution(const GaussianParams& g, double shrink) {
  if (!(shrink > 0.0)) throw std::invalid_argument("sampler shrink must be > 0");
  const double s = std::sqrt(shrink);
  return {g.mean, s * g.l11, s * g.l21, s * g.l22};
}

inline SampleSet gauss_sample(const GaussianParams& g, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("gauss_sample: n must be >= 1");
  SampleSet out(n);
  for (auto& x : out) {
    const double z0 = rng.normal();
    const double z1 = rng.normal();
    x = {g.mean[0] + g.l11 * z0, g.mean[1] + g.l21 * z0 + g.l22 * z1};
  }
  return out;
}

/// Maximum-likelihood moments (covariance denominator n).
inline Moments2 fit_moments(const SampleSet& data) {
  if (data.empty()) throw std::invalid_argument("fit_moments: empty sample set");
  const double n = static_cast<double>(data.size());
  Vec2 mu{0.0, 0.0};
  for (const auto& x : data) {
    mu[0] += x[0];
    mu[1] += x[1];
  }
  mu[0] /= n;
  mu[1] /= n;
  Sym2 c;
  for (const auto& x : data) {
    const double dx = x[0] - mu[0], dy = x[1] - mu[1];
    c.xx += dx * dx;
    c.xy += dx * dy;
    c.yy += dy * dy;
  }
  c.xx /= n;
  c.xy /= n;
  c.yy /= n;
  return {mu, c};
}

/// Closed-form 2-Wasserstein distance between Gaussians.
inline double w2_gaussian(const Moments2& a, const Moments2& b) {
  if (!a.cov.is_spd() || !b.cov.is_spd()) throw std::invalid_argument("w2_gaussian: covariance is not SPD");
  const double dm0 = a.mean[0] - b.mean[0], dm1 = a.mean[1] - b.mean[1];
  if (dm0 == 0.0 && dm1 == 0.0 && a.cov.xx == b.cov.xx && a.cov.xy == b.cov.xy && a.cov.yy == b.cov.yy) return 0.0;
  const Sym2 root_b = sqrtm(b.cov);
  const Eig2 e = eig_sym(sandwich(root_b, a.cov));
  const double cross = std::sqrt(std::max(e.lambda[0], 0.0)) + std::sqrt(std::max(e.lambda[1], 0.0));
  const double sq = dm0 * dm0 + dm1 * dm1 + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::sqrt(std::max(sq, 0.0));
}

inline double w2_gaussian(const GaussianParams& a, const GaussianParams& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("w2_gaussian: invalid Gaussian parameters");
  return w2_gaussian(a.moments(), b.moments());
}

// ---------------------------------------------------------------------------
// NLL and its gradient.
//
// nll(x) = log(2 pi) + log l11 + log l22 + |y|^2 / 2,  y = L^{-1}(x - mean)
// d/dmean = -L^{-T} y,  d/dL = diag(1/l_ii) - lower(L^{-T} y y^T)

namespace detail {

/// Gradient of mean NLL given the data's first and second moments about the model mean:
/// d = E[x] - mean, S = E[(x - mean)(x - mean)^T].
inline std::array<double, 5> nll_grad_from_moments(const GaussianParams& g, const Vec2& d, const Sym2& s) {
  const double i11 = 1.0 / g.l11, i22 = 1.0 / g.l22, i21 = -g.l21 / (g.l11 * g.l22);  // L^{-1}
  // E[y] = L^{-1} d,  E[y y^T] = L^{-1} S L^{-T}
  const double ey0 = i11 * d[0], ey1 = i21 * d[0] + i22 * d[1];
  const double a00 = i11 * s.xx, a01 = i11 * s.xy;               // row 0 of L^{-1} S
  const double a10 = i21 * s.xx + i22 * s.xy, a11 = i21 * s.xy + i22 * s.yy;
  const double yy00 = a00 * i11, yy01 = a00 * i21 + a01 * i22, yy11 = a10 * i21 + a11 * i22;
  // L^{-T} = [[i11, i21], [0, i22]]
  const double gm0 = -(i11 * ey0 + i21 * ey1);
  const double gm1 = -(i22 * ey1);
  // M = L^{-T} E[y y^T]; need M00, M10, M11
  const double m00 = i11 * yy00 + i21 * yy01;
  const double m10 = i22 * yy01;
  const double m11 = i22 * yy11;
  return {gm0, gm1, i11 - m00, -m10, i22 - m11};
}

}  // namespace detail

inline double gauss_nll(const GaussianParams& g, const SampleSet& data) {
  if (data.empty()) throw std::invalid_argument("gauss_nll: empty sample set");
  double acc = 0.0;
  for (const auto& x : data) {
    const double d0 = x[0] - g.mean[0], d1 = x[1] - g.mean[1];
    const double y0 = d0 / g.l11;
    const double y1 = (d1 - g.l21 * y0) / g.l22;
    acc += 0.5 * (y0 * y0 + y1 * y1);
  }
  return std::log(2.0 * std::numbers::pi) + std::log(g.l11) + std::log(g.l22) + acc / static_cast<double>(data.size());
}

/// Exact gradient of the mean NLL w.r.t. [mean, l11, l21, l22].
inline ParamVector gauss_nll_grad(const GaussianParams& g, const SampleSet& data) {
  if (data.empty()) throw std::invalid_argument("gauss_nll_grad: need at least one sample");
  const double n = static_cast<double>(data.size());
  Vec2 d{0.0, 0.0};
  Sym2 s;
  for (const auto& x : data) {
    const double d0 = x[0] - g.mean[0], d1 = x[1] - g.mean[1];
    d[0] += d0;
    d[1] += d1;
    s.xx += d0 * d0;
    s.xy += d0 * d1;
    s.yy += d1 * d1;
  }
  d = {d[0] / n, d[1] / n};
  s = {s.xx / n, s.xy / n, s.yy / n};
  const auto gr = detail::nll_grad_from_moments(g, d, s);
  return ParamVector(DoubleBuffer(gr.begin(), gr.end()));
}

/// Population NLL risk E_{x ~ truth}[nll_g(x)] in closed form.
inline double gauss_population_risk(const GaussianParams& g, const Moments2& truth) {
  const double i11 = 1.0 / g.l11, i22 = 1.0 / g.l22, i21 = -g.l21 / (g.l11 * g.l22);
  const double d0 = truth.mean[0] - g.mean[0], d1 = truth.mean[1] - g.mean[1];
  const Sym2 s{truth.cov.xx + d0 * d0, truth.cov.xy + d0 * d1, truth.cov.yy + d1 * d1};
  // tr(L^{-1} S L^{-T}) = |row0|_S^2 + |row1|_S^2
  const double q0 = i11 * i11 * s.xx;
  const double q1 = i21 * i21 * s.xx + 2.0 * i21 * i22 * s.xy + i22 * i22 * s.yy;
  return std::log(2.0 * std::numbers::pi) + std::log(g.l11) + std::log(g.l22) + 0.5 * (q0 + q1);
}

inline ParamVector gauss_population_grad(const GaussianParams& g, const Moments2& truth) {
  const Vec2 d{truth.mean[0] - g.mean[0], truth.mean[1] - g.mean[1]};
  const Sym2 s{truth.cov.xx + d[0] * d[0], truth.cov.xy + d[0] * d[1], truth.cov.yy + d[1] * d[1]};
  const auto gr = detail::nll_grad_from_moments(g, d, s);
  return ParamVector(DoubleBuffer(gr.begin(), gr.end()));
}

// ---------------------------------------------------------------------------
// Training

inline constexpr double kCholFloor = 1e-8;

/// Full-batch gradient descent on mean NLL starting from `init`.
/// `rng` only seeds provenance: the objective is deterministic.
inline Checkpoint gauss_fit_sgd(const SampleSet& data, const GaussianParams& init, double lr, std::size_t epochs,
                                const Rng& rng) {
  if (!(lr > 0.0)) throw std::invalid_argument("gauss_fit_sgd: lr must be > 0");
  if (!init.valid()) throw std::invalid_argument("gauss_fit_sgd: invalid init");
  if (data.size() < 3) throw std::invalid_argument("gauss_fit_sgd: need at least 3 samples");
  {
    const Moments2 m = fit_moments(data);
    if (!(m.cov.det() > 1e-14 * std::max(1.0, m.cov.trace() * m.cov.trace()))) {
      throw NumericDivergence("gauss_fit_sgd: samples are collinear, covariance collapses");
    }
  }
  GaussianParams g = init;
  for (std::size_t e = 0; e < epochs; ++e) {
    const ParamVector gr = gauss_nll_grad(g, data);
    g.mean[0] -= lr * gr[0];
    g.mean[1] -= lr * gr[1];
    g.l11 -= lr * gr[2];
    g.l21 -= lr * gr[3];
    g.l22 -= lr * gr[4];
    if (g.l11 < kCholFloor || g.l22 < kCholFloor) {
      g.l11 = std::max(g.l11, kCholFloor);
      g.l22 = std::max(g.l22, kCholFloor);
      throw NumericDivergence("gauss_fit_sgd: Cholesky diagonal underflow at epoch " + std::to_string(e) +
                              " (covariance collapse)");
    }
    if (!g.valid() || !std::isfinite(gauss_nll(g, data))) {
      throw NumericDivergence("gauss_fit_sgd: non-finite NLL at epoch " + std::to_string(e));
    }
  }
  Checkpoint ck;
  ck.params = g.to_params();
  ck.kind = ModelKind::gaussian;
  ck.seed = rng.seed();
  ck.budget_images = static_cast<std::uint64_t>(epochs) * data.size();
  ck.lr = lr;
  ck.meta["epochs"] = std::to_string(epochs);
  return ck;
}

// ---------------------------------------------------------------------------
// Two-direction grid: theta(ws, wo) = theta_r + ws (theta_r - theta_s) + wo (theta_o - theta_r)

struct GaussGridSpec {
  Range ws{-1.0, 3.0, 0.1};
  Range wo{-1.0, 2.0, 0.1};
};

/// Params at one grid point, or nullopt when the Cholesky diagonal is not positive.
inline std::optional<GaussianParams> grid_point(const Checkpoint& r, const Checkpoint& s, const Checkpoint& o, double ws,
                                                double wo) {
  const auto& pr = r.params.vec();
  const auto& ps = s.params.vec();
  const auto& po = o.params.vec();
  std::vector<double> p(pr.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = pr[i] + ws * (pr[i] - ps[i]) + wo * (po[i] - pr[i]);
  GaussianParams g{{p[0], p[1]}, p[2], p[3], p[4]};
  if (!g.valid()) return std::nullopt;
  return g;
}

/// log W2 between the generated distribution at each grid point and p_data.
/// `eval_shrink` is the model's inference rule applied before measuring (1 = exact sampler).
inline ResultTable neon_oracle_grid(const Checkpoint& r, const Checkpoint& s, const Checkpoint& o,
                                    const GaussGridSpec& spec, const GaussianParams& p_data, double eval_shrink = 1.0) {
  for (const Checkpoint* c : {&r, &s, &o}) {
    if (c->kind != ModelKind::gaussian || c->params.dim() != 5) {
      throw std::invalid_argument("neon_oracle_grid: all checkpoints must be 5-parameter Gaussian models");
    }
  }
  ResultTable t({"ws", "wo", "log_w2"});
  for (double ws : spec.ws.values()) {
    for (double wo : spec.wo.values()) {
      double v = std::nan("");
      if (auto g = grid_point(r, s, o, ws, wo)) {
        v = std::log(w2_gaussian(generated_distribution(*g, eval_shrink), p_data));
      }
      t.add_row({ws, wo, v});
    }
  }
  return t;
}

}  // namespace neon
