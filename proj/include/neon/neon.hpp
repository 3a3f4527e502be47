#pragma once

// The merge theta_r - w (theta_s - theta_r), the scaled fine-tune displacement,
// the alignment scalar s = <r_d, P r_s> and the quadratic proxy weight
// w* = -s / (alpha z).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "neon/checkpoint.hpp"
#include "neon/core.hpp"
#include "neon/csv.hpp"
#include "neon/parallel.hpp"

namespace neon {

/// Short content fingerprint of a parameter vector (FNV-1a over the raw bytes).
inline std::string param_fingerprint(const ParamVector& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : p.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ParamVector merge_params(const ParamVector& r, const ParamVector& s, double w) {
  require_same_dim(r.dim(), s.dim(), "neon_merge");
  if (!std::isfinite(w)) throw std::invalid_argument("neon_merge: w must be finite");
  std::vector<double> out(r.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r[i] - w * (s[i] - r[i]);
  return ParamVector(std::move(out));
}

/// theta_r - w (theta_s - theta_r). Architecture metadata is inherited from theta_r.
inline Checkpoint neon_merge(const Checkpoint& theta_r, const Checkpoint& theta_s, double w) {
  if (theta_r.kind != theta_s.kind) {
    throw std::invalid_argument(std::string("neon_merge: model kind mismatch (") + to_string(theta_r.kind) + " vs " +
                                to_string(theta_s.kind) + ")");
  }
  Checkpoint out;
  out.params = merge_params(theta_r.params, theta_s.params, w);
  out.kind = theta_r.kind;
  out.seed = theta_r.seed;
  out.budget_images = std::max(theta_r.budget_images, theta_s.budget_images);
  out.lr = theta_r.lr;
  out.meta = theta_r.meta;
  out.meta["merge_w"] = format_double(w);
  out.meta["merge_parent_r"] = param_fingerprint(theta_r.params);
  out.meta["merge_parent_s"] = param_fingerprint(theta_s.params);
  return out;
}

/// d_T = (theta_s - theta_r) / (alpha T).
inline ParamVector displacement(const Checkpoint& theta_r, const Checkpoint& theta_s, double alpha, std::size_t T) {
  if (!(alpha > 0.0) || T < 1) throw std::invalid_argument("displacement: need alpha > 0 and T >= 1");
  const double c = 1.0 / (alpha * static_cast<double>(T));
  return lin_comb(c, theta_s.params, -c, theta_r.params);
}

struct AlignmentReport {
  ParamVector r_d;
  ParamVector r_s;
  double s = 0.0;
  std::optional<double> z;        // curvature along P r_s
  std::optional<double> cos_sim;  // empty when either gradient has zero P-norm
  std::optional<double> w_star;   // empty unless z > 0 and alpha > 0
  double alpha = 0.0;
  double norm_rd = 0.0;  // ||r_d||_P
  double norm_rs = 0.0;  // ||r_s||_P

  static std::vector<std::string> columns() { return {"s", "z", "cos_sim", "w_star", "alpha", "norm_rd", "norm_rs"}; }
  std::vector<Cell> row() const {
    return {s, value_or_nan(z), value_or_nan(cos_sim), value_or_nan(w_star), alpha, norm_rd, norm_rs};
  }
};

inline AlignmentReport alignment(const ParamVector& r_d, const ParamVector& r_s, const DiagPreconditioner& precond,
                                 double alpha, std::optional<double> z) {
  AlignmentReport rep;
  rep.s = dot_p(r_d, r_s, precond);
  rep.norm_rd = std::sqrt(dot_p(r_d, r_d, precond));
  rep.norm_rs = std::sqrt(dot_p(r_s, r_s, precond));
  if (rep.norm_rd > 0.0 && rep.norm_rs > 0.0) rep.cos_sim = std::clamp(rep.s / (rep.norm_rd * rep.norm_rs), -1.0, 1.0);
  rep.alpha = alpha;
  rep.z = z;
  if (z && std::isfinite(*z) && *z > 0.0 && alpha > 0.0 && std::isfinite(alpha)) rep.w_star = -rep.s / (alpha * *z);
  rep.r_d = r_d;
  rep.r_s = r_s;
  return rep;
}

using GradFn = std::function<ParamVector(const ParamVector&)>;
using RiskFn = std::function<double(const Checkpoint&)>;

inline constexpr double kHvpStep = 1e-4;

/// H v by central differences of `grad` along the unit direction of v.
inline ParamVector hvp_fd(const GradFn& grad, const ParamVector& theta, const ParamVector& v, double h = kHvpStep) {
  require_same_dim(theta.dim(), v.dim(), "hvp_fd");
  const double nv = norm(v);
  if (nv == 0.0) return ParamVector::zeros(v.dim());
  const ParamVector gp = grad(lin_comb(1.0, theta, h / nv, v));
  const ParamVector gm = grad(lin_comb(1.0, theta, -h / nv, v));
  return lin_comb(nv / (2.0 * h), gp, -nv / (2.0 * h), gm);
}

/// z = d^T H d with d = P r_s, H the Hessian behind `grad` at theta.
inline double curvature_along(const GradFn& grad, const ParamVector& theta, const ParamVector& r_s,
                              const DiagPreconditioner& precond, double h = kHvpStep) {
  const ParamVector d = apply(precond, r_s);
  return dot(d, hvp_fd(grad, theta, d, h));
}

/// Rows (w, risk) in the order of w_list; a failing or non-finite evaluation is
/// recorded as nan.
inline ResultTable risk_along_merge(const Checkpoint& theta_r, const Checkpoint& theta_s, const std::vector<double>& w_list,
                                    const RiskFn& risk_fn) {
  const auto risks = parallel_map<double>(w_list.size(), [&](std::size_t i) {
    try {
      const double r = risk_fn(neon_merge(theta_r, theta_s, w_list[i]));
      return std::isfinite(r) ? r : std::nan("");
    } catch (const std::exception&) {
      return std::nan("");
    }
  });
  ResultTable t({"w", "risk"});
  for (std::size_t i = 0; i < w_list.size(); ++i) t.add_row({w_list[i], risks[i]});
  return t;
}

/// Fine-tune procedure for the concentration probe: (alpha, T, seed) -> theta_s.
using FinetuneFn = std::function<Checkpoint(double alpha, std::size_t T, std::uint64_t seed)>;

inline double cosine(const ParamVector& a, const ParamVector& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return std::nan("");
  return dot(a, b) / (na * nb);
}

/// Rows (T, alpha_T, cos, cos_stderr): cosine between d_T and -P r_s_ref,
/// averaged over `seeds`.
inline ResultTable concentration_probe(const Checkpoint& theta_r, const FinetuneFn& finetune, double alpha,
                                       const std::vector<std::size_t>& T_list, const ParamVector& r_s_ref,
                                       const DiagPreconditioner& precond, const std::vector<std::uint64_t>& seeds) {
  if (T_list.empty() || seeds.empty()) throw std::invalid_argument("concentration_probe: empty T list or seed list");
  const ParamVector target = lin_comb(-1.0, apply(precond, r_s_ref), 0.0, r_s_ref);
  const std::size_t n = T_list.size() * seeds.size();
  const auto cosines = parallel_map<double>(n, [&](std::size_t k) {
    const std::size_t T = T_list[k / seeds.size()];
    const Checkpoint theta_s = finetune(alpha, T, seeds[k % seeds.size()]);
    return cosine(displacement(theta_r, theta_s, alpha, T), target);
  });
  ResultTable t({"T", "alpha_T", "cos", "cos_stderr"});
  for (std::size_t i = 0; i < T_list.size(); ++i) {
    double mean = 0.0, sq = 0.0;
    const std::size_t m = seeds.size();
    for (std::size_t j = 0; j < m; ++j) mean += cosines[i * m + j];
    mean /= static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) sq += (cosines[i * m + j] - mean) * (cosines[i * m + j] - mean);
    const double se = m > 1 ? std::sqrt(sq / static_cast<double>(m - 1) / static_cast<double>(m)) : 0.0;
    t.add_row({static_cast<std::int64_t>(T_list[i]), alpha * static_cast<double>(T_list[i]), mean, se});
  }
  return t;
}

}  // namespace neon
