#pragma once

// Tiny DDPM on 2D data: an MLP noise predictor eps_theta(x_t, t), trained with
// the noise-prediction MSE on a cosine schedule, sampled ancestrally with an
// optional score scale zeta (the predicted noise is multiplied by zeta).
//
// Network: [x (2) | sinusoidal embedding of t (emb_dim)] -> h1 -> h2 -> 2,
// SiLU activations. Flat parameter layout: W1 (h1 x in, row-major), b1,
// W2 (h2 x h1), b2, W3 (2 x h2), b3.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "neon/checkpoint.hpp"
#include "neon/core.hpp"
#include "neon/gaussian.hpp"

namespace neon {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> alpha_bar;  // index t = 0..T-1 is diffusion time t+1
  std::vector<double> beta;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

/// Cosine schedule: alpha_bar[t] = f((t+1)/T) / f(0), f(u) = cos^2((u+s)/(1+s) * pi/2).
/// Betas are clamped to kMaxBeta and alpha_bar is then the running product of (1 - beta).
inline NoiseSchedule cosine_schedule(std::size_t T) {
  if (T < 2) throw std::invalid_argument("cosine_schedule: T must be >= 2");
  auto f = [](double u) {
    const double c = std::cos((u + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  s.T = T;
  s.alpha_bar.resize(T);
  s.beta.resize(T);
  const double f0 = f(0.0);
  double prev = 1.0;
  double running = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double ab = f(static_cast<double>(t + 1) / static_cast<double>(T)) / f0;
    const double b = std::min(1.0 - ab / prev, kMaxBeta);
    prev = ab;
    running *= 1.0 - b;
    s.beta[t] = b;
    s.alpha_bar[t] = running;
  }
  return s;
}

// ---------------------------------------------------------------------------
// MLP parameters

struct MlpShape {
  std::size_t emb_dim = 16;
  std::size_t h1 = 128;
  std::size_t h2 = 128;

  std::size_t in() const { return 2 + emb_dim; }
  static constexpr std::size_t out() { return 2; }
  std::size_t param_count() const { return h1 * in() + h1 + h2 * h1 + h2 + out() * h2 + out(); }

  std::string to_string() const {
    return std::to_string(emb_dim) + "," + std::to_string(h1) + "," + std::to_string(h2);
  }
  static MlpShape parse(const std::string& s) {
    MlpShape m;
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    if (!(is >> m.emb_dim >> c1 >> m.h1 >> c2 >> m.h2) || c1 != ',' || c2 != ',' || m.h1 == 0 || m.h2 == 0 ||
        m.emb_dim % 2 != 0) {
      throw std::invalid_argument("bad MLP shape '" + s + "' (expected emb_dim,h1,h2 with even emb_dim)");
    }
    return m;
  }
  friend bool operator==(const MlpShape&, const MlpShape&) = default;
};

class MlpParams {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<RowMat>;
  using ConstMatMap = Eigen::Map<const RowMat>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  MlpParams(MlpShape shape, const std::vector<double>& flat) : MlpParams(shape, DoubleBuffer(flat.begin(), flat.end())) {}
  MlpParams(MlpShape shape, DoubleBuffer flat) : shape_(shape), flat_(std::move(flat)) {
    if (flat_.size() != shape_.param_count()) {
      throw std::invalid_argument("MlpParams: expected " + std::to_string(shape_.param_count()) +
                                  " parameters, got " + std::to_string(flat_.size()));
    }
  }

  static MlpParams zeros(MlpShape shape) { return MlpParams(shape, DoubleBuffer(shape.param_count(), 0.0)); }

  /// Zero biases, weights N(0, 1/fan_in).
  static MlpParams init(MlpShape shape, Rng& rng) {
    MlpParams p = zeros(shape);
    auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = 0; i < count; ++i) p.flat_[offset + i] = scale * rng.normal();
    };
    fill(p.off_w1(), shape.h1 * shape.in(), shape.in());
    fill(p.off_w2(), shape.h2 * shape.h1, shape.h1);
    fill(p.off_w3(), MlpShape::out() * shape.h2, shape.h2);
    return p;
  }

  const MlpShape& shape() const noexcept { return shape_; }
  std::span<const double> flat() const noexcept { return flat_; }
  std::span<double> flat_mut() noexcept { return flat_; }

  ParamVector flatten() const { return ParamVector(flat_); }
  static MlpParams unflatten(MlpShape shape, const ParamVector& p) { return MlpParams(shape, p.buffer()); }

  std::size_t off_w1() const { return 0; }
  std::size_t off_b1() const { return off_w1() + shape_.h1 * shape_.in(); }
  std::size_t off_w2() const { return off_b1() + shape_.h1; }
  std::size_t off_b2() const { return off_w2() + shape_.h2 * shape_.h1; }
  std::size_t off_w3() const { return off_b2() + shape_.h2; }
  std::size_t off_b3() const { return off_w3() + MlpShape::out() * shape_.h2; }

  ConstMatMap w1() const { return {flat_.data() + off_w1(), Eigen::Index(shape_.h1), Eigen::Index(shape_.in())}; }
  ConstVecMap b1() const { return {flat_.data() + off_b1(), Eigen::Index(shape_.h1)}; }
  ConstMatMap w2() const { return {flat_.data() + off_w2(), Eigen::Index(shape_.h2), Eigen::Index(shape_.h1)}; }
  ConstVecMap b2() const { return {flat_.data() + off_b2(), Eigen::Index(shape_.h2)}; }
  ConstMatMap w3() const { return {flat_.data() + off_w3(), 2, Eigen::Index(shape_.h2)}; }
  ConstVecMap b3() const { return {flat_.data() + off_b3(), 2}; }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;

 private:
  MlpShape shape_;
  DoubleBuffer flat_;
};

inline Checkpoint to_checkpoint(const MlpParams& p, std::uint64_t seed, std::uint64_t budget_images, double lr,
                                std::size_t T) {
  Checkpoint ck;
  ck.params = p.flatten();
  ck.kind = ModelKind::ddpm;
  ck.seed = seed;
  ck.budget_images = budget_images;
  ck.lr = lr;
  ck.meta["mlp_shape"] = p.shape().to_string();
  ck.meta["T"] = std::to_string(T);
  return ck;
}

inline MlpParams mlp_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::ddpm) throw std::invalid_argument("checkpoint is not a ddpm model");
  auto it = ck.meta.find("mlp_shape");
  if (it == ck.meta.end()) throw std::invalid_argument("ddpm checkpoint lacks mlp_shape metadata");
  return MlpParams::unflatten(MlpShape::parse(it->second), ck.params);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline void compute_time_embedding(std::size_t t, std::size_t emb_dim, double* out) {
  const std::size_t half = emb_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double a = static_cast<double>(t) * freq;
    out[2 * i] = std::sin(a);
    out[2 * i + 1] = std::cos(a);
  }
}

/// Sinusoidal embedding of step t, memoized per thread.
inline void time_embedding(std::size_t t, std::size_t emb_dim, double* out) {
  thread_local std::size_t cached_dim = 0;
  thread_local std::vector<double> table;
  if (cached_dim != emb_dim) {
    cached_dim = emb_dim;
    table.clear();
  }
  while (table.size() < (t + 1) * emb_dim) {
    const std::size_t next = table.size() / std::max<std::size_t>(emb_dim, 1);
    table.resize(table.size() + emb_dim);
    compute_time_embedding(next, emb_dim, table.data() + next * emb_dim);
    if (emb_dim == 0) break;
  }
  std::copy_n(table.data() + t * emb_dim, emb_dim, out);
}

}  // namespace detail

/// Scratch matrices for a batched pass; reusing one avoids reallocations.
struct MlpWorkspace {
  Eigen::MatrixXd x, z1, s1, a1, z2, s2, a2, out, d_out, d_a2, d_z2, d_a1, d_z1;
};

/// Batched forward. `inputs` is in() x B (column per sample); result in ws.out (2 x B).
inline void mlp_forward_batch(const MlpParams& p, const Eigen::MatrixXd& inputs, MlpWorkspace& ws) {
  ws.z1.noalias() = p.w1() * inputs;
  ws.z1.colwise() += p.b1();
  ws.s1 = (1.0 + (-ws.z1.array()).exp()).inverse().matrix();
  ws.a1 = ws.z1.cwiseProduct(ws.s1);
  ws.z2.noalias() = p.w2() * ws.a1;
  ws.z2.colwise() += p.b2();
  ws.s2 = (1.0 + (-ws.z2.array()).exp()).inverse().matrix();
  ws.a2 = ws.z2.cwiseProduct(ws.s2);
  ws.out.noalias() = p.w3() * ws.a2;
  ws.out.colwise() += p.b3();
}

/// Backprop of d_out (2 x B, already set in ws) into `grad` (accumulated, flat layout).
inline void mlp_backward_batch(const MlpParams& p, const Eigen::MatrixXd& inputs, MlpWorkspace& ws,
                               std::span<double> grad) {
  const MlpShape& s = p.shape();
  using RowMat = MlpParams::RowMat;
  Eigen::Map<RowMat> gw1(grad.data() + p.off_w1(), Eigen::Index(s.h1), Eigen::Index(s.in()));
  Eigen::Map<Eigen::VectorXd> gb1(grad.data() + p.off_b1(), Eigen::Index(s.h1));
  Eigen::Map<RowMat> gw2(grad.data() + p.off_w2(), Eigen::Index(s.h2), Eigen::Index(s.h1));
  Eigen::Map<Eigen::VectorXd> gb2(grad.data() + p.off_b2(), Eigen::Index(s.h2));
  Eigen::Map<RowMat> gw3(grad.data() + p.off_w3(), 2, Eigen::Index(s.h2));
  Eigen::Map<Eigen::VectorXd> gb3(grad.data() + p.off_b3(), 2);

  // silu'(z) = s (1 + z (1 - s)), s = sigmoid(z) cached by the forward pass
  gw3.noalias() += ws.d_out * ws.a2.transpose();
  gb3 += ws.d_out.rowwise().sum();
  ws.d_a2.noalias() = p.w3().transpose() * ws.d_out;
  ws.d_z2 = (ws.d_a2.array() * ws.s2.array() * (1.0 + ws.z2.array() * (1.0 - ws.s2.array()))).matrix();
  gw2.noalias() += ws.d_z2 * ws.a1.transpose();
  gb2 += ws.d_z2.rowwise().sum();
  ws.d_a1.noalias() = p.w2().transpose() * ws.d_z2;
  ws.d_z1 = (ws.d_a1.array() * ws.s1.array() * (1.0 + ws.z1.array() * (1.0 - ws.s1.array()))).matrix();
  gw1.noalias() += ws.d_z1 * inputs.transpose();
  gb1 += ws.d_z1.rowwise().sum();
}

/// Column b of the network input: [x | emb(t)].
inline void set_input(Eigen::MatrixXd& inputs, Eigen::Index col, const Vec2& x, std::size_t t, std::size_t emb_dim) {
  inputs(0, col) = x[0];
  inputs(1, col) = x[1];
  detail::time_embedding(t, emb_dim, inputs.col(col).data() + 2);
}

/// Noise prediction eps_theta(x, t) for a single point.
inline Vec2 mlp_forward(const MlpParams& p, const Vec2& x, std::size_t t, const NoiseSchedule& sched) {
  if (t >= sched.T) throw std::invalid_argument("mlp_forward: t out of range");
  Eigen::MatrixXd in(Eigen::Index(p.shape().in()), 1);
  set_input(in, 0, x, t, p.shape().emb_dim);
  MlpWorkspace ws;
  mlp_forward_batch(p, in, ws);
  const Vec2 out{ws.out(0, 0), ws.out(1, 0)};
  if (!std::isfinite(out[0]) || !std::isfinite(out[1]) || !ws.a1.allFinite() || !ws.a2.allFinite()) {
    throw NumericDivergence("mlp_forward: non-finite activation");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradient

/// Per-sample diffusion time and injected noise for one Monte Carlo loss evaluation.
struct NoiseDraws {
  std::vector<std::size_t> t;
  std::vector<Vec2> eps;

  static NoiseDraws draw(std::size_t n, std::size_t T, Rng& rng) {
    NoiseDraws d;
    d.t.resize(n);
    d.eps.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      d.t[i] = static_cast<std::size_t>(rng.below(T));
      d.eps[i] = {rng.normal(), rng.normal()};
    }
    return d;
  }
};

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

namespace detail {

/// Sum over the batch of |eps_theta(x_t, t) - eps|^2, gradient summed into `grad`
/// (both unnormalized). `idx` selects the rows of `data` (draws are indexed like idx).
inline double loss_grad_accumulate(const MlpParams& p, const SampleSet& data, std::span<const std::size_t> idx,
                                   const NoiseDraws& draws, std::size_t draw_offset, const NoiseSchedule& sched,
                                   MlpWorkspace& ws, std::span<double> grad) {
  const auto B = Eigen::Index(idx.size());
  ws.x.resize(Eigen::Index(p.shape().in()), B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vec2& x0 = data[idx[std::size_t(b)]];
    const std::size_t t = draws.t[draw_offset + std::size_t(b)];
    const Vec2& e = draws.eps[draw_offset + std::size_t(b)];
    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sn = std::sqrt(1.0 - sched.alpha_bar[t]);
    set_input(ws.x, b, {sa * x0[0] + sn * e[0], sa * x0[1] + sn * e[1]}, t, p.shape().emb_dim);
  }
  mlp_forward_batch(p, ws.x, ws);
  ws.d_out.resize(2, B);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vec2& e = draws.eps[draw_offset + std::size_t(b)];
    const double r0 = ws.out(0, b) - e[0];
    const double r1 = ws.out(1, b) - e[1];
    loss += r0 * r0 + r1 * r1;
    ws.d_out(0, b) = 2.0 * r0;
    ws.d_out(1, b) = 2.0 * r1;
  }
  if (!std::isfinite(loss)) return loss;
  mlp_backward_batch(p, ws.x, ws, grad);
  return loss;
}

}  // namespace detail

/// Mean over the batch of |eps_theta(x_t, t) - eps|^2 and its exact gradient, for fixed draws.
inline LossGrad ddpm_loss_grad(const MlpParams& p, const SampleSet& batch, const NoiseSchedule& sched,
                               const NoiseDraws& draws) {
  if (batch.empty()) throw std::invalid_argument("ddpm_loss_grad: empty batch");
  if (draws.t.size() != batch.size() || draws.eps.size() != batch.size()) {
    throw std::invalid_argument("ddpm_loss_grad: draws do not match batch size");
  }
  std::vector<std::size_t> idx(batch.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  DoubleBuffer grad(p.shape().param_count(), 0.0);
  MlpWorkspace ws;
  const double sum = detail::loss_grad_accumulate(p, batch, idx, draws, 0, sched, ws, grad);
  if (!std::isfinite(sum)) throw NumericDivergence("ddpm_loss_grad: non-finite loss");
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv;
  return {sum * inv, ParamVector(std::move(grad))};
}

/// Same, drawing t uniformly over steps and eps ~ N(0, I) from `rng`.
inline LossGrad ddpm_loss_grad(const MlpParams& p, const SampleSet& batch, const NoiseSchedule& sched, Rng& rng) {
  const NoiseDraws d = NoiseDraws::draw(batch.size(), sched.T, rng);
  return ddpm_loss_grad(p, batch, sched, d);
}

/// Dataset-mean gradient averaged over `mc_draws` independent noise draws per sample.
/// Processed in chunks so memory stays bounded for large sets.
inline ParamVector ddpm_mean_grad(const MlpParams& p, const SampleSet& data, const NoiseSchedule& sched, Rng& rng,
                                  std::size_t mc_draws = 1, std::size_t chunk = 2048) {
  if (data.empty() || mc_draws == 0) throw std::invalid_argument("ddpm_mean_grad: empty data or zero draws");
  DoubleBuffer grad(p.shape().param_count(), 0.0);
  MlpWorkspace ws;
  std::vector<std::size_t> idx;
  for (std::size_t rep = 0; rep < mc_draws; ++rep) {
    for (std::size_t start = 0; start < data.size(); start += chunk) {
      const std::size_t n = std::min(chunk, data.size() - start);
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
      const NoiseDraws d = NoiseDraws::draw(n, sched.T, rng);
      const double l = detail::loss_grad_accumulate(p, data, idx, d, 0, sched, ws, grad);
      if (!std::isfinite(l)) throw NumericDivergence("ddpm_mean_grad: non-finite loss");
    }
  }
  const double inv = 1.0 / static_cast<double>(data.size() * mc_draws);
  for (double& g : grad) g *= inv;
  return ParamVector(std::move(grad));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;

  static AdamState zeros(std::size_t dim) {
    AdamState s;
    s.m.assign(dim, 0.0);
    s.v.assign(dim, 0.0);
    return s;
  }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Moment update only (no parameter change).
inline void adam_accumulate(AdamState& st, std::span<const double> g) {
  require_same_dim(st.m.size(), g.size(), "adam_accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g[i] * g[i];
  }
  ++st.step;
}

/// In-place Adam update with bias correction.
inline void adam_update(std::span<double> params, std::span<const double> g, AdamState& st, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam: lr must be > 0");
  require_same_dim(params.size(), g.size(), "adam_update");
  adam_accumulate(st, g);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + st.eps_hat);
  }
}

inline std::pair<MlpParams, AdamState> adam_step(const MlpParams& p, const ParamVector& g, AdamState st, double lr) {
  MlpParams out = p;
  adam_update(out.flat_mut(), g.values(), st, lr);
  return {std::move(out), std::move(st)};
}

/// Diagonal preconditioner 1 / (sqrt(v_hat) + eps_hat).
inline DiagPreconditioner adam_preconditioner(const AdamState& st) {
  if (st.step == 0) throw std::invalid_argument("adam_preconditioner: no second-moment estimate yet (step = 0)");
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  std::vector<double> d(st.v.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 1.0 / (std::sqrt(st.v[i] / c2) + st.eps_hat);
  return DiagPreconditioner(std::move(d));
}

/// Adam second-moment preconditioner measured at fixed parameters: Adam moments
/// are accumulated over shuffled minibatch gradients of `data` (no update).
inline DiagPreconditioner estimate_adam_preconditioner(const MlpParams& p, const SampleSet& data,
                                                       const NoiseSchedule& sched, std::size_t batch_size, Rng& rng,
                                                       std::size_t passes = 1) {
  if (data.empty() || batch_size == 0 || passes == 0) {
    throw std::invalid_argument("estimate_adam_preconditioner: empty data, zero batch or zero passes");
  }
  AdamState st = AdamState::zeros(p.shape().param_count());
  DoubleBuffer grad(p.shape().param_count());
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  MlpWorkspace ws;
  for (std::size_t e = 0; e < passes; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t n = std::min(batch_size, order.size() - start);
      const NoiseDraws d = NoiseDraws::draw(n, sched.T, rng);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double l = detail::loss_grad_accumulate(p, data, {order.data() + start, n}, d, 0, sched, ws, grad);
      if (!std::isfinite(l)) throw NumericDivergence("estimate_adam_preconditioner: non-finite loss");
      for (double& g : grad) g /= static_cast<double>(n);
      adam_accumulate(st, grad);
    }
  }
  return adam_preconditioner(st);
}

// ---------------------------------------------------------------------------
// Training

struct DdpmTrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 10000;
  std::size_t batch_size = 256;
  MlpShape shape{};
  std::size_t T = 20;
};

struct TrainResult {
  Checkpoint checkpoint;
  AdamState adam;
  double final_loss = 0.0;  // mean loss over the last epoch
};

struct TrainingDiverged : NumericDivergence {
  TrainingDiverged(const std::string& what, Checkpoint last) : NumericDivergence(what), last_finite(std::move(last)) {}
  Checkpoint last_finite;
};

/// Adam on the noise-prediction loss, one epoch = one shuffled pass over `data`.
/// Starts from `init` (fresh Adam moments). Budget recorded as images seen.
inline TrainResult ddpm_train_from(MlpParams init, const SampleSet& data, const DdpmTrainConfig& cfg, Rng& rng,
                                   std::uint64_t prior_budget = 0) {
  if (data.empty()) throw std::invalid_argument("ddpm_train: empty data");
  if (!(cfg.lr > 0.0) || cfg.batch_size == 0) throw std::invalid_argument("ddpm_train: need lr > 0 and batch_size > 0");
  const NoiseSchedule sched = cosine_schedule(cfg.T);
  MlpParams p = std::move(init);
  AdamState st = AdamState::zeros(p.shape().param_count());
  DoubleBuffer grad(p.shape().param_count());
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  MlpWorkspace ws;
  DoubleBuffer last_good(p.flat().begin(), p.flat().end());
  double epoch_loss = 0.0;
  const std::uint64_t seed = rng.seed();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      const NoiseDraws d = NoiseDraws::draw(n, cfg.T, rng);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double sum = detail::loss_grad_accumulate(p, data, idx, d, 0, sched, ws, grad);
      if (!std::isfinite(sum)) {
        const std::uint64_t seen = prior_budget + e * data.size() + start;
        throw TrainingDiverged("ddpm_train: non-finite loss at epoch " + std::to_string(e),
                               to_checkpoint(MlpParams(p.shape(), last_good), seed, seen, cfg.lr, cfg.T));
      }
      epoch_loss += sum;
      const double inv = 1.0 / static_cast<double>(n);
      for (double& g : grad) g *= inv;
      std::copy(p.flat().begin(), p.flat().end(), last_good.begin());
      adam_update(p.flat_mut(), grad, st, cfg.lr);
    }
    epoch_loss /= static_cast<double>(data.size());
  }
  const std::uint64_t budget = prior_budget + static_cast<std::uint64_t>(cfg.epochs) * data.size();
  return {to_checkpoint(p, seed, budget, cfg.lr, cfg.T), std::move(st), epoch_loss};
}

inline TrainResult ddpm_train(const SampleSet& data, const DdpmTrainConfig& cfg, Rng& rng) {
  Rng init_rng = rng.fork("init");
  return ddpm_train_from(MlpParams::init(cfg.shape, init_rng), data, cfg, rng);
}

/// Continue training a checkpoint on new data (self-training fine-tune).
inline TrainResult ddpm_finetune(const Checkpoint& base, const SampleSet& data, const DdpmTrainConfig& cfg, Rng& rng) {
  DdpmTrainConfig c = cfg;
  MlpParams p = mlp_from_checkpoint(base);
  c.shape = p.shape();
  return ddpm_train_from(std::move(p), data, c, rng, base.budget_images);
}

// ---------------------------------------------------------------------------
// Ancestral sampling with score scale

struct SamplerConfig {
  double zeta = 1.0;
  std::size_t chunk = 2048;
};

/// Ancestral DDPM sampling from pure noise. The predicted noise is scaled by zeta
/// (equivalently the score), posterior variance beta_t (1 - ab_{t-1}) / (1 - ab_t),
/// no noise on the final step. Chain i draws from rng.fork(i); chains are pushed
/// through the network `chunk` at a time, which fixes the rounding of the result.
inline SampleSet ddpm_sample(const MlpParams& p, const NoiseSchedule& sched, const SamplerConfig& sc, std::size_t n,
                             const Rng& rng) {
  if (n == 0) throw std::invalid_argument("ddpm_sample: n must be >= 1");
  if (!(sc.zeta > 0.0) || !std::isfinite(sc.zeta)) throw std::invalid_argument("ddpm_sample: zeta must be finite and > 0");
  SampleSet out(n);
  MlpWorkspace ws;
  Eigen::MatrixXd in;
  std::vector<Rng> chains;
  const std::size_t chunk = std::max<std::size_t>(sc.chunk, 1);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    chains.clear();
    for (std::size_t i = 0; i < m; ++i) chains.push_back(rng.fork(static_cast<std::uint64_t>(start + i)));
    std::vector<Vec2> x(m);
    for (std::size_t i = 0; i < m; ++i) x[i] = {chains[i].normal(), chains[i].normal()};
    in.resize(Eigen::Index(p.shape().in()), Eigen::Index(m));
    for (std::size_t step = sched.T; step-- > 0;) {
      for (std::size_t i = 0; i < m; ++i) set_input(in, Eigen::Index(i), x[i], step, p.shape().emb_dim);
      mlp_forward_batch(p, in, ws);
      const double beta = sched.beta[step];
      const double ab = sched.alpha_bar[step];
      const double coef = beta / std::sqrt(1.0 - ab);
      const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
      const double sigma = step > 0 ? std::sqrt(beta * (1.0 - sched.alpha_bar[step - 1]) / (1.0 - ab)) : 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double e0 = sc.zeta * ws.out(0, Eigen::Index(i));
        const double e1 = sc.zeta * ws.out(1, Eigen::Index(i));
        x[i][0] = inv_sqrt_alpha * (x[i][0] - coef * e0);
        x[i][1] = inv_sqrt_alpha * (x[i][1] - coef * e1);
        if (step > 0) {
          x[i][0] += sigma * chains[i].normal();
          x[i][1] += sigma * chains[i].normal();
        }
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (!std::isfinite(x[i][0]) || !std::isfinite(x[i][1])) throw NumericDivergence("ddpm_sample: non-finite sample");
      out[start + i] = x[i];
    }
  }
  return out;
}

}  // namespace neon
