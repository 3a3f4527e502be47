#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "neon/ddpm.hpp"
#include "neon/metrics.hpp"

using namespace neon;

namespace {

double cos_sched_f(double u) {
  const double c = std::cos((u + 0.008) / 1.008 * std::numbers::pi / 2.0);
  return c * c;
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

// Scalar reference of the network: [x | sin/cos embedding] -> silu -> silu -> linear.
Vec2 forward_oracle(const MlpParams& p, const Vec2& x, std::size_t t) {
  const MlpShape& s = p.shape();
  const auto f = p.flat();
  std::vector<double> in{x[0], x[1]};
  const std::size_t half = s.emb_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    in.push_back(std::sin(static_cast<double>(t) * freq));
    in.push_back(std::cos(static_cast<double>(t) * freq));
  }
  std::size_t o = 0;
  auto layer = [&](const std::vector<double>& v, std::size_t n_out, bool act) {
    std::vector<double> out(n_out);
    const std::size_t w = o;
    const std::size_t b = o + n_out * v.size();
    for (std::size_t r = 0; r < n_out; ++r) {
      double acc = f[b + r];
      for (std::size_t c = 0; c < v.size(); ++c) acc += f[w + r * v.size() + c] * v[c];
      out[r] = act ? silu(acc) : acc;
    }
    o = b + n_out;
    return out;
  };
  const auto a1 = layer(in, s.h1, true);
  const auto a2 = layer(a1, s.h2, true);
  const auto y = layer(a2, 2, false);
  return {y[0], y[1]};
}

const MlpShape kMicro{2, 2, 2};

MlpParams random_mlp(MlpShape shape, std::uint64_t seed, double scale = 1.0) {
  Rng r(seed);
  MlpParams p = MlpParams::init(shape, r);
  // nonzero biases so every parameter is exercised
  for (auto& v : p.flat_mut()) v = v * scale + 0.1 * r.normal();
  return p;
}

double loss_at(const MlpParams& base, std::size_t i, double delta, const SampleSet& batch, const NoiseSchedule& sched,
               const NoiseDraws& d) {
  std::vector<double> f(base.flat().begin(), base.flat().end());
  f[i] += delta;
  return ddpm_loss_grad(MlpParams(base.shape(), f), batch, sched, d).loss;
}

}  // namespace

TEST(Schedule, LengthAndOracleValues) {
  const NoiseSchedule s = cosine_schedule(20);
  ASSERT_EQ(s.alpha_bar.size(), 20u);
  ASSERT_EQ(s.beta.size(), 20u);
  // formula evaluated directly; index t holds diffusion time t + 1
  double running = 1.0;
  for (std::size_t t = 0; t < 20; ++t) {
    const double prev = t == 0 ? 1.0 : cos_sched_f(t / 20.0) / cos_sched_f(0.0);
    const double ab = cos_sched_f((t + 1) / 20.0) / cos_sched_f(0.0);
    const double beta = std::min(1.0 - ab / prev, 0.999);
    running *= 1.0 - beta;
    EXPECT_NEAR(s.beta[t], beta, 1e-12);
    EXPECT_NEAR(s.alpha_bar[t], running, 1e-12);
  }
  EXPECT_NEAR(s.alpha_bar[0], 0.99200728, 1e-8);
}

TEST(Schedule, InvariantsForAllT) {
  for (std::size_t T = 2; T <= 100; ++T) {
    const NoiseSchedule s = cosine_schedule(T);
    for (std::size_t t = 0; t < T; ++t) {
      EXPECT_GT(s.beta[t], 0.0);
      EXPECT_LT(s.beta[t], 1.0);
      EXPECT_GT(s.alpha_bar[t], 0.0);
      EXPECT_LE(s.alpha_bar[t], 1.0);
      if (t > 0) {
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
        EXPECT_NEAR(1.0 - s.alpha_bar[t] / s.alpha_bar[t - 1], s.beta[t], 1e-12);
      }
    }
    EXPECT_LT(s.alpha_bar[T - 1], 0.05);
    if (T >= 20) EXPECT_GT(s.alpha_bar[0], 0.99);
  }
  EXPECT_THROW(cosine_schedule(1), std::invalid_argument);
}

TEST(Mlp, ZeroNetworkOutputsZero) {
  const MlpParams p = MlpParams::zeros(MlpShape{});
  const NoiseSchedule s = cosine_schedule(20);
  const Vec2 y = mlp_forward(p, {1.3, -0.7}, 5, s);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
}

TEST(Mlp, MatchesScalarOracle) {
  const NoiseSchedule s = cosine_schedule(20);
  for (const MlpShape shape : {kMicro, MlpShape{}, MlpShape{16, 64, 32}}) {
    const MlpParams p = random_mlp(shape, 3);
    Rng r(4);
    for (int i = 0; i < 20; ++i) {
      const Vec2 x{r.normal(), r.normal()};
      const std::size_t t = r.below(20);
      const Vec2 a = mlp_forward(p, x, t, s), b = forward_oracle(p, x, t);
      EXPECT_NEAR(a[0], b[0], 1e-10 * std::max(1.0, std::abs(b[0])));
      EXPECT_NEAR(a[1], b[1], 1e-10 * std::max(1.0, std::abs(b[1])));
      EXPECT_EQ(mlp_forward(p, x, t, s), a);
    }
  }
  EXPECT_THROW(mlp_forward(MlpParams::zeros(MlpShape{}), {0, 0}, 20, s), std::invalid_argument);
}

TEST(Mlp, FlattenRoundTrip) {
  const MlpParams p = random_mlp(MlpShape{}, 5);
  EXPECT_EQ(MlpParams::unflatten(p.shape(), p.flatten()), p);
  EXPECT_THROW(MlpParams(MlpShape{}, std::vector<double>(3)), std::invalid_argument);
  EXPECT_EQ(MlpShape::parse("16,128,128"), MlpShape{});
  EXPECT_THROW(MlpShape::parse("3,128,128"), std::invalid_argument);
  EXPECT_THROW(MlpShape::parse("16,x"), std::invalid_argument);
}

TEST(Mlp, CheckpointRoundTrip) {
  const MlpParams p = random_mlp(MlpShape{16, 64, 32}, 6);
  const Checkpoint ck = to_checkpoint(p, 9, 1234, 1e-4, 20);
  EXPECT_EQ(ck.kind, ModelKind::ddpm);
  EXPECT_EQ(mlp_from_checkpoint(ck), p);
}

TEST(Mlp, WeightPerturbationMatchesJacobian) {
  const NoiseSchedule s = cosine_schedule(20);
  const MlpParams p = random_mlp(kMicro, 7);
  const Vec2 x{0.4, -1.2};
  const std::size_t t = 7;
  // d out_0 / d theta_i via backprop of d_out = e_0
  std::vector<double> grad(p.flat().size(), 0.0);
  Eigen::MatrixXd in(Eigen::Index(p.shape().in()), 1);
  set_input(in, 0, x, t, p.shape().emb_dim);
  MlpWorkspace ws;
  mlp_forward_batch(p, in, ws);
  ws.d_out = Eigen::MatrixXd::Zero(2, 1);
  ws.d_out(0, 0) = 1.0;
  mlp_backward_batch(p, in, ws, grad);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double prev_err = INFINITY;
    for (double h : {1e-2, 5e-3}) {
      std::vector<double> f(p.flat().begin(), p.flat().end());
      f[i] += h;
      const double y = mlp_forward(MlpParams(p.shape(), f), x, t, s)[0];
      const double err = std::abs(y - mlp_forward(p, x, t, s)[0] - h * grad[i]);
      // O(h^2): halving h cuts the error by about 4
      if (prev_err > 1e-12) EXPECT_LT(err, prev_err / 3.0 + 1e-14) << "param " << i;
      prev_err = err;
    }
  }
}

TEST(LossGrad, MatchesFiniteDifferencesOnMicroNet) {
  const NoiseSchedule sched = cosine_schedule(20);
  Rng r(8);
  for (int rep = 0; rep < 5; ++rep) {
    const MlpParams p = random_mlp(kMicro, 100 + rep);
    SampleSet batch(16);
    for (auto& x : batch) x = {r.normal(), r.normal()};
    const NoiseDraws d = NoiseDraws::draw(batch.size(), sched.T, r);
    const LossGrad lg = ddpm_loss_grad(p, batch, sched, d);
    const double h = 1e-5;
    for (std::size_t i = 0; i < p.flat().size(); ++i) {
      const double fd = (loss_at(p, i, h, batch, sched, d) - loss_at(p, i, -h, batch, sched, d)) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-3});
      EXPECT_LT(std::abs(lg.grad[i] - fd) / denom, 1e-4) << "param " << i << " rep " << rep;
    }
  }
}

TEST(LossGrad, SpotCheckFullSizeNet) {
  const NoiseSchedule sched = cosine_schedule(20);
  const MlpParams p = random_mlp(MlpShape{}, 9);
  Rng r(10);
  SampleSet batch(32);
  for (auto& x : batch) x = {r.normal(), r.normal()};
  const NoiseDraws d = NoiseDraws::draw(batch.size(), sched.T, r);
  const LossGrad lg = ddpm_loss_grad(p, batch, sched, d);
  for (int k = 0; k < 60; ++k) {
    const std::size_t i = r.below(p.flat().size());
    const double h = 1e-5;
    const double fd = (loss_at(p, i, h, batch, sched, d) - loss_at(p, i, -h, batch, sched, d)) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-3});
    EXPECT_LT(std::abs(lg.grad[i] - fd) / denom, 1e-4) << "param " << i;
  }
}

TEST(LossGrad, DeterministicAndDuplicationInvariant) {
  const NoiseSchedule sched = cosine_schedule(20);
  const MlpParams p = random_mlp(kMicro, 11);
  Rng r(12);
  SampleSet batch(10);
  for (auto& x : batch) x = {r.normal(), r.normal()};
  Rng a(5), b(5);
  const LossGrad la = ddpm_loss_grad(p, batch, sched, a), lb = ddpm_loss_grad(p, batch, sched, b);
  EXPECT_EQ(la.loss, lb.loss);
  EXPECT_EQ(la.grad, lb.grad);

  const NoiseDraws d = NoiseDraws::draw(batch.size(), sched.T, r);
  SampleSet doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  NoiseDraws dd = d;
  dd.t.insert(dd.t.end(), d.t.begin(), d.t.end());
  dd.eps.insert(dd.eps.end(), d.eps.begin(), d.eps.end());
  const LossGrad l1 = ddpm_loss_grad(p, batch, sched, d), l2 = ddpm_loss_grad(p, doubled, sched, dd);
  EXPECT_NEAR(l1.loss, l2.loss, 1e-14 * std::max(1.0, l1.loss));
  for (std::size_t i = 0; i < l1.grad.dim(); ++i) EXPECT_NEAR(l1.grad[i], l2.grad[i], 1e-13 * std::max(1.0, std::abs(l1.grad[i])));
  EXPECT_THROW(ddpm_loss_grad(p, SampleSet{}, sched, r), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParams) {
  const MlpParams p = random_mlp(kMicro, 13);
  auto [q, st] = adam_step(p, ParamVector::zeros(p.flat().size()), AdamState::zeros(p.flat().size()), 1e-3);
  EXPECT_EQ(q, p);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ConstantGradientStepsApproachLrSign) {
  const std::size_t D = kMicro.param_count();
  const MlpParams p = random_mlp(kMicro, 14);
  std::vector<double> g(D);
  for (std::size_t i = 0; i < D; ++i) g[i] = (i % 2 ? -1.0 : 1.0) * (0.1 + static_cast<double>(i));
  const ParamVector gv(g);
  AdamState st = AdamState::zeros(D);
  MlpParams cur = p;
  const double lr = 1e-3;
  for (int k = 0; k < 200; ++k) {
    auto [next, s2] = adam_step(cur, gv, st, lr);
    if (k == 199) {
      for (std::size_t i = 0; i < D; ++i) {
        const double step = next.flat()[i] - cur.flat()[i];
        EXPECT_NEAR(step, -lr * (g[i] > 0 ? 1.0 : -1.0), 1e-9);
      }
    }
    cur = std::move(next);
    st = std::move(s2);
  }
}

TEST(Adam, ReplayIsDeterministic) {
  const MlpParams p = random_mlp(kMicro, 15);
  Rng r(16);
  std::vector<ParamVector> gs;
  for (int k = 0; k < 2; ++k) {
    std::vector<double> g(p.flat().size());
    for (auto& v : g) v = r.normal();
    gs.emplace_back(g);
  }
  auto run = [&] {
    AdamState st = AdamState::zeros(p.flat().size());
    MlpParams cur = p;
    for (const auto& g : gs) std::tie(cur, st) = adam_step(cur, g, st, 1e-2);
    return std::make_pair(cur, st);
  };
  EXPECT_EQ(run(), run());
  EXPECT_THROW(adam_step(p, gs[0], AdamState::zeros(p.flat().size()), 0.0), std::invalid_argument);
}

TEST(Adam, Preconditioner) {
  AdamState st = AdamState::zeros(3);
  EXPECT_THROW(adam_preconditioner(st), std::invalid_argument);
  st.step = 1;
  const DiagPreconditioner P0 = adam_preconditioner(st);
  for (double v : P0.values()) EXPECT_EQ(v, 1.0 / st.eps_hat);
  // v_hat = v / (1 - beta2^step) = 1
  st.v = {1.0 - st.beta2, 4.0 * (1.0 - st.beta2), 0.25 * (1.0 - st.beta2)};
  const auto P = adam_preconditioner(st);
  EXPECT_NEAR(P[0], 1.0 / (1.0 + st.eps_hat), 1e-15);
  EXPECT_GT(P[2], P[0]);
  EXPECT_GT(P[0], P[1]);
}

TEST(Train, ZeroEpochsReturnsInit) {
  Rng r(17);
  SampleSet data(64);
  for (auto& x : data) x = {r.normal(), r.normal()};
  DdpmTrainConfig cfg;
  cfg.epochs = 0;
  cfg.shape = kMicro;
  Rng a(1), b(1);
  const TrainResult res = ddpm_train(data, cfg, a);
  Rng init_rng = b.fork("init");
  EXPECT_EQ(mlp_from_checkpoint(res.checkpoint), MlpParams::init(kMicro, init_rng));
  EXPECT_EQ(res.checkpoint.budget_images, 0u);
}

TEST(Train, RecordsBudgetAndReducesLoss) {
  Rng r(18);
  SampleSet data(256);
  for (auto& x : data) x = {r.normal(), r.normal()};
  DdpmTrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.lr = 1e-3;
  cfg.shape = MlpShape{16, 32, 32};
  const NoiseSchedule sched = cosine_schedule(cfg.T);
  Rng a(2);
  const TrainResult res = ddpm_train(data, cfg, a);
  EXPECT_EQ(res.checkpoint.budget_images, 30u * 256u);
  Rng init_rng = Rng(2).fork("init");
  const MlpParams init = MlpParams::init(cfg.shape, init_rng);
  Rng e1(9), e2(9);
  const double before = ddpm_loss_grad(init, data, sched, e1).loss;
  const double after = ddpm_loss_grad(mlp_from_checkpoint(res.checkpoint), data, sched, e2).loss;
  EXPECT_LT(after, before);
  Rng b(2);
  EXPECT_EQ(ddpm_train(data, cfg, b).checkpoint, res.checkpoint);
}

TEST(Sampler, ZetaOneMatchesReferenceWithoutScaleHook) {
  const NoiseSchedule sched = cosine_schedule(20);
  const MlpParams p = random_mlp(MlpShape{16, 32, 32}, 19, 0.3);
  const Rng rng(20);
  const std::size_t n = 300;
  const SampleSet got = ddpm_sample(p, sched, {1.0, 2048}, n, rng);
  // Reference ancestral sampler without the scale hook: one batch of all chains,
  // same per-chain streams.
  std::vector<Rng> chains;
  SampleSet want(n);
  for (std::size_t i = 0; i < n; ++i) {
    chains.push_back(rng.fork(static_cast<std::uint64_t>(i)));
    want[i] = {chains[i].normal(), chains[i].normal()};
  }
  MlpWorkspace ws;
  Eigen::MatrixXd in(Eigen::Index(p.shape().in()), Eigen::Index(n));
  for (std::size_t step = sched.T; step-- > 0;) {
    for (std::size_t i = 0; i < n; ++i) set_input(in, Eigen::Index(i), want[i], step, p.shape().emb_dim);
    mlp_forward_batch(p, in, ws);
    const double b = sched.beta[step], ab = sched.alpha_bar[step];
    const double k = b / std::sqrt(1.0 - ab), ia = 1.0 / std::sqrt(1.0 - b);
    for (std::size_t i = 0; i < n; ++i) {
      Vec2& x = want[i];
      const auto c = Eigen::Index(i);
      x = {ia * (x[0] - k * ws.out(0, c)), ia * (x[1] - k * ws.out(1, c))};
      if (step > 0) {
        const double sd = std::sqrt(b * (1.0 - sched.alpha_bar[step - 1]) / (1.0 - ab));
        x[0] += sd * chains[i].normal();
        x[1] += sd * chains[i].normal();
      }
    }
  }
  EXPECT_EQ(got, want);
}

TEST(Sampler, ChunkingAndDeterminism) {
  const NoiseSchedule sched = cosine_schedule(20);
  const MlpParams p = random_mlp(MlpShape{16, 32, 32}, 21, 0.3);
  const Rng rng(22);
  const SampleSet a = ddpm_sample(p, sched, {1.1, 7}, 100, rng);
  EXPECT_EQ(a, ddpm_sample(p, sched, {1.1, 7}, 100, rng));
  // Chains draw from their own streams, so chunking changes only rounding.
  const SampleSet b = ddpm_sample(p, sched, {1.1, 2048}, 100, rng);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i][0], b[i][0], 1e-9 * (1 + std::abs(a[i][0])));
    EXPECT_NEAR(a[i][1], b[i][1], 1e-9 * (1 + std::abs(a[i][1])));
  }
  EXPECT_EQ(ddpm_sample(p, sched, {1.1, 7}, 1, rng).size(), 1u);
  EXPECT_THROW(ddpm_sample(p, sched, {1.1, 7}, 0, rng), std::invalid_argument);
  EXPECT_THROW(ddpm_sample(p, sched, {0.0, 7}, 10, rng), std::invalid_argument);
}

// Trained-model behaviour: a short run is enough for the contraction ordering.
class TrainedDdpm : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    Rng r = Rng(30).fork("data");
    data_ = new SampleSet(gauss_sample(GaussianParams::from_moments({0, 0}, {2, 1, 2}), 1000, r));
    DdpmTrainConfig cfg;
    cfg.epochs = 400;
    cfg.lr = 1e-3;
    cfg.shape = MlpShape{16, 64, 64};
    Rng t(31);
    model_ = new MlpParams(mlp_from_checkpoint(ddpm_train(*data_, cfg, t).checkpoint));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete model_;
  }
  static SampleSet* data_;
  static MlpParams* model_;
};
SampleSet* TrainedDdpm::data_ = nullptr;
MlpParams* TrainedDdpm::model_ = nullptr;

TEST_F(TrainedDdpm, ModeSeekingContractsSpread) {
  const NoiseSchedule sched = cosine_schedule(20);
  const Rng rng(32);
  const Moments2 lo = fit_moments(ddpm_sample(*model_, sched, {0.9}, 10000, rng));
  const Moments2 hi = fit_moments(ddpm_sample(*model_, sched, {1.1}, 10000, rng));
  EXPECT_LT(hi.cov.det(), lo.cov.det());
}

TEST_F(TrainedDdpm, ModeSeekingContractsAcrossSeeds) {
  const NoiseSchedule sched = cosine_schedule(20);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const double lo = fit_moments(ddpm_sample(*model_, sched, {0.9}, 4000, Rng(s))).cov.det();
    const double hi = fit_moments(ddpm_sample(*model_, sched, {1.1}, 4000, Rng(s))).cov.det();
    EXPECT_LT(hi, lo) << "seed " << s;
  }
}

TEST_F(TrainedDdpm, FinetuneContinuesFromBase) {
  DdpmTrainConfig cfg;
  cfg.epochs = 0;
  cfg.shape = model_->shape();
  const Checkpoint base = to_checkpoint(*model_, 1, 400000, 1e-3, 20);
  Rng r(33);
  const TrainResult ft = ddpm_finetune(base, *data_, cfg, r);
  EXPECT_EQ(ft.checkpoint.params, base.params);
}

TEST_F(TrainedDdpm, MeanGradAndPreconditioner) {
  const NoiseSchedule sched = cosine_schedule(20);
  Rng a(40), b(40);
  const ParamVector g1 = ddpm_mean_grad(*model_, *data_, sched, a, 2, 100);
  const ParamVector g2 = ddpm_mean_grad(*model_, *data_, sched, b, 2, 100);
  EXPECT_EQ(g1, g2);
  Rng c(41);
  const DiagPreconditioner P = estimate_adam_preconditioner(*model_, *data_, sched, 256, c, 1);
  EXPECT_EQ(P.dim(), g1.dim());
  for (double v : P.values()) EXPECT_GT(v, 0.0);
}
