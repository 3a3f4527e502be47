#pragma once

// Single-step categorical model over an alphabet of V symbols, with exact
// enumeration of the temperature / top-k / top-p inference samplers.
//
// Logits live in R^V. The Fisher F = diag(p) - p p^T has the all-ones vector in
// its kernel, so every Fisher-geometry quantity is taken on the mean-zero
// subspace through the pseudo-inverse.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "neon/core.hpp"
#include "neon/neon.hpp"

namespace neon {

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

inline double log_softmax_at(std::span<const double> logits, std::size_t x) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return logits[x] - mx - std::log(z);
}

struct CategoricalModel {
  ParamVector logits;

  std::size_t V() const { return logits.dim(); }
  std::vector<double> probs() const { return softmax(logits.values()); }
};

struct ArSampler {
  enum class Kind { temperature, top_k, top_p };
  Kind kind = Kind::temperature;
  double tau = 1.0;
  std::size_t k = 0;
  double p = 1.0;

  static ArSampler temperature(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("temperature: tau must be finite and > 0");
    return {Kind::temperature, tau, 0, 1.0};
  }
  static ArSampler top_k(std::size_t k) {
    if (k < 1) throw std::invalid_argument("top_k: k must be >= 1");
    return {Kind::top_k, 1.0, k, 1.0};
  }
  static ArSampler top_p(double p) {
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top_p: p must be in (0, 1]");
    return {Kind::top_p, 1.0, 0, p};
  }

  /// "temperature" / "top_k" / "top_p"
  const char* name() const {
    switch (kind) {
      case Kind::temperature: return "temperature";
      case Kind::top_k: return "top_k";
      case Kind::top_p: return "top_p";
    }
    return "?";
  }
  double param() const {
    switch (kind) {
      case Kind::temperature: return tau;
      case Kind::top_k: return static_cast<double>(k);
      case Kind::top_p: return p;
    }
    return 0.0;
  }
};

/// The law q the sampler induces from model probabilities `probs`.
inline std::vector<double> apply_sampler(std::span<const double> probs, const ArSampler& s) {
  const std::size_t V = probs.size();
  if (V == 0) throw std::invalid_argument("apply_sampler: empty distribution");
  double total = 0.0;
  for (double v : probs) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("apply_sampler: invalid probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("apply_sampler: probabilities do not sum to 1");

  std::vector<double> q(V, 0.0);
  switch (s.kind) {
    case ArSampler::Kind::temperature: {
      // In log space so tiny tau does not underflow to an all-zero vector.
      std::vector<double> lg(V);
      for (std::size_t i = 0; i < V; ++i) lg[i] = probs[i] > 0.0 ? std::log(probs[i]) / s.tau : -INFINITY;
      q = softmax(lg);
      break;
    }
    case ArSampler::Kind::top_k: {
      if (s.k > V) throw std::invalid_argument("apply_sampler: top_k k exceeds alphabet size");
      std::vector<std::size_t> idx(V);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
      for (std::size_t j = 0; j < s.k; ++j) q[idx[j]] = probs[idx[j]];
      break;
    }
    case ArSampler::Kind::top_p: {
      std::vector<std::size_t> idx(V);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
      double cum = 0.0;
      std::size_t j = 0;
      while (j < V && cum < s.p * total - 1e-15) cum += probs[idx[j++]];
      // Symbols tied with the last kept one are kept too.
      const double cutoff = probs[idx[j - 1]];
      for (std::size_t i = 0; i < V; ++i)
        if (probs[i] >= cutoff) q[i] = probs[i];
      break;
    }
  }
  const double z = std::accumulate(q.begin(), q.end(), 0.0);
  if (!(z > 0.0)) throw std::logic_error("apply_sampler: sampler removed all mass");
  for (double& v : q) v /= z;
  return q;
}

/// u(x) = e_x - softmax(logits): gradient of log p(x) in the logits.
inline ParamVector score_vec(const CategoricalModel& m, std::size_t x) {
  if (x >= m.V()) throw std::invalid_argument("score_vec: symbol out of range");
  std::vector<double> u = m.probs();
  for (double& v : u) v = -v;
  u[x] += 1.0;
  return ParamVector(std::move(u));
}

inline Eigen::MatrixXd fisher_from_probs(std::span<const double> p) {
  const auto V = Eigen::Index(p.size());
  Eigen::Map<const Eigen::VectorXd> pv(p.data(), V);
  Eigen::MatrixXd F = -pv * pv.transpose();
  F.diagonal() += pv;
  return F;
}

/// F = diag(p) - p p^T.
inline Eigen::MatrixXd fisher(const CategoricalModel& m) {
  const auto p = m.probs();
  return fisher_from_probs(p);
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues below
/// rel_tol * max are treated as kernel.
inline Eigen::MatrixXd psd_pinv(const Eigen::MatrixXd& A, double rel_tol = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double cut = rel_tol * std::max(ev.cwiseAbs().maxCoeff(), 0.0);
  Eigen::VectorXd inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv[i] = ev[i] > cut ? 1.0 / ev[i] : 0.0;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::Map<const Eigen::VectorXd> as_eigen(const ParamVector& v) {
  return {v.values().data(), Eigen::Index(v.dim())};
}

// ---------------------------------------------------------------------------
// Exact risks

/// E_{p_data}[-log p_theta(X)].
inline double categorical_risk(const ParamVector& logits, std::span<const double> p_data) {
  require_same_dim(logits.dim(), p_data.size(), "categorical_risk");
  double r = 0.0;
  for (std::size_t x = 0; x < p_data.size(); ++x)
    if (p_data[x] > 0.0) r -= p_data[x] * log_softmax_at(logits.values(), x);
  return r;
}

/// Gradient softmax(theta) - p_data.
inline ParamVector categorical_risk_grad(const ParamVector& logits, std::span<const double> p_data) {
  require_same_dim(logits.dim(), p_data.size(), "categorical_risk_grad");
  auto g = softmax(logits.values());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= p_data[i];
  return ParamVector(std::move(g));
}

// ---------------------------------------------------------------------------
// Sampler bias and Fisher-geometry angle

struct SamplerBias {
  ParamVector b;                  // E_q[grad of -log p_theta*] = p* - q
  std::optional<double> cos_phi;  // empty when eps = 0 or b = 0
  double mean_B = 0.0;            // E_q[eps^T u_theta*]
};

inline constexpr double kUndefinedNormTol = 1e-300;

/// theta_r = theta* + eps, q = sampler(p_theta_r), b = -E_q[u_theta*], and
/// cos phi = <eps, F^+ b>_F / (||eps||_F ||F^+ b||_F) with F the Fisher at theta*.
inline SamplerBias sampler_bias(const CategoricalModel& theta_star, const ParamVector& eps, const ArSampler& s) {
  require_same_dim(theta_star.V(), eps.dim(), "sampler_bias");
  const CategoricalModel theta_r{lin_comb(1.0, theta_star.logits, 1.0, eps)};
  const auto p_star = theta_star.probs();
  const auto q = apply_sampler(theta_r.probs(), s);
  const std::size_t V = q.size();

  std::vector<double> b(V);
  for (std::size_t i = 0; i < V; ++i) b[i] = p_star[i] - q[i];
  SamplerBias out{ParamVector(b), std::nullopt, 0.0};
  for (std::size_t i = 0; i < V; ++i) out.mean_B -= eps[i] * b[i];

  const Eigen::MatrixXd F = fisher_from_probs(p_star);
  const Eigen::MatrixXd Fp = psd_pinv(F);
  const auto e = as_eigen(eps);
  const Eigen::VectorXd bv = Eigen::Map<const Eigen::VectorXd>(b.data(), Eigen::Index(V));
  const Eigen::VectorXd hb = Fp * bv;  // F^+ b
  const double e_norm2 = e.dot(F * e);
  const double hb_norm2 = hb.dot(F * hb);
  if (e_norm2 > kUndefinedNormTol && hb_norm2 > kUndefinedNormTol) {
    const double c = e.dot(F * hb) / std::sqrt(e_norm2 * hb_norm2);
    out.cos_phi = std::clamp(c, -1.0, 1.0);
  }
  return out;
}

/// Random (theta*, eps) pair: theta* logits i.i.d. N(0, spread^2); eps a uniformly
/// random mean-zero direction scaled to Fisher norm eps_norm at theta*.
struct ArInstance {
  CategoricalModel theta_star;
  ParamVector eps;
};

inline ArInstance draw_ar_instance(std::size_t V, double eps_norm, double theta_spread, Rng& rng) {
  if (V < 2) throw std::invalid_argument("draw_ar_instance: V must be >= 2");
  std::vector<double> t(V), e(V);
  for (double& v : t) v = theta_spread * rng.normal();
  for (double& v : e) v = rng.normal();
  const double mean = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(V);
  for (double& v : e) v -= mean;
  CategoricalModel ts{ParamVector(t)};
  const Eigen::MatrixXd F = fisher(ts);
  const Eigen::VectorXd ev = Eigen::Map<const Eigen::VectorXd>(e.data(), Eigen::Index(V));
  const double n = std::sqrt(ev.dot(F * ev));
  for (double& v : e) v *= eps_norm / n;
  return {std::move(ts), ParamVector(std::move(e))};
}

/// Exact r_d, r_s at theta_r for the categorical model. The data Hessian at
/// theta_r is the Fisher there, so z is exact; w_star is filled only when alpha
/// is supplied.
inline AlignmentReport alignment_exact(std::span<const double> p_data, const CategoricalModel& theta_r, const ArSampler& s,
                                       const DiagPreconditioner& precond, std::optional<double> alpha = std::nullopt) {
  require_same_dim(p_data.size(), theta_r.V(), "alignment_exact");
  for (double v : p_data)
    if (!(v > 0.0)) throw std::invalid_argument("alignment_exact: p_data must be strictly positive");
  const auto q = apply_sampler(theta_r.probs(), s);
  const ParamVector r_d = categorical_risk_grad(theta_r.logits, p_data);
  const ParamVector r_s = categorical_risk_grad(theta_r.logits, q);
  const ParamVector d = apply(precond, r_s);
  const Eigen::MatrixXd H = fisher(theta_r);
  const double z = as_eigen(d).dot(H * as_eigen(d));
  return alignment(r_d, r_s, precond, alpha.value_or(0.0), z);
}

}  // namespace neon
