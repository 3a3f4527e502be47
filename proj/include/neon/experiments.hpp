#pragma once

// Seeded toy experiments. Each run is a pure function of its resolved config:
// every random stream is forked from Rng(seed) by a fixed label, so outputs are
// byte-identical across reruns and thread counts. Every CSV gets a sibling
// "<name>.meta" file with the experiment id, config hash, seed and code version.
//
// Trained DDPM base models are cached under cache_dir, keyed by a hash of
// everything that determines them, so experiments sharing a seed share a base and
// an interrupted run resumes without retraining.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "neon/ar.hpp"
#include "neon/checkpoint_io.hpp"
#include "neon/config.hpp"
#include "neon/csv.hpp"
#include "neon/ddpm.hpp"
#include "neon/gaussian.hpp"
#include "neon/metrics.hpp"
#include "neon/neon.hpp"
#include "neon/parallel.hpp"

#ifndef NEON_CODE_VERSION
#define NEON_CODE_VERSION "0.1.0"
#endif

namespace neon {

inline constexpr const char* kCodeVersion = NEON_CODE_VERSION;

// ---------------------------------------------------------------------------
// Plumbing

/// Resolved (key, value) pairs of an experiment config, in a fixed order.
using ConfigDump = std::vector<std::pair<std::string, std::string>>;

inline std::string config_hash(const std::string& experiment, const ConfigDump& dump) {
  std::string text = "experiment=" + experiment + "\n";
  for (const auto& [k, v] : dump) text += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(text)));
  return buf;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + format_double(x);
  return s;
}

template <typename T>
std::string join_uints(const std::vector<T>& v) {
  std::string s;
  for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

/// Short label for a real number in file names and fork labels: "0.9", "1.1".
inline std::string short_label(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

class Emitter {
 public:
  Emitter(std::filesystem::path dir, std::string experiment, const ConfigDump& dump, std::uint64_t seed)
      : dir_(std::move(dir)), experiment_(std::move(experiment)), hash_(config_hash(experiment_, dump)), seed_(seed) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  const std::string& hash() const { return hash_; }
  const std::filesystem::path& dir() const { return dir_; }

  void write(const std::string& name, const ResultTable& t, const std::map<std::string, std::string>& extra = {}) const {
    t.write(dir_ / name);
    std::string meta = "experiment=" + experiment_ + "\nconfig_hash=" + hash_ + "\nseed=" + std::to_string(seed_) +
                       "\ncode_version=" + kCodeVersion + "\n";
    for (const auto& [k, v] : extra) meta += k + "=" + v + "\n";
    const auto path = dir_ / (name + ".meta");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << meta;
    if (!f) throw IoError("write failed: " + path.string());
  }

 private:
  std::filesystem::path dir_;
  std::string experiment_;
  std::string hash_;
  std::uint64_t seed_;
};

/// Index of the smallest non-nan value (first one on ties); npos if all nan.
inline std::size_t nan_argmin(const std::vector<double>& v) {
  std::size_t best = static_cast<std::size_t>(-1);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isnan(v[i]) && (best == static_cast<std::size_t>(-1) || v[i] < v[best])) best = i;
  return best;
}

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_dim(x.size(), y.size(), "spearman");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) mx += rx[i], my += ry[i];
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

inline Vec2 parse_vec2(const Config& c, const std::string& key, Vec2 def) {
  const auto v = c.get_doubles(key, {def[0], def[1]});
  if (v.size() != 2) throw ConfigError("config key '" + key + "' needs 2 numbers");
  return {v[0], v[1]};
}

/// Covariance as "xx,xy,yy".
inline Sym2 parse_sym2(const Config& c, const std::string& key, Sym2 def) {
  const auto v = c.get_doubles(key, {def.xx, def.xy, def.yy});
  if (v.size() != 3) throw ConfigError("config key '" + key + "' needs 3 numbers (xx,xy,yy)");
  const Sym2 s{v[0], v[1], v[2]};
  if (!s.is_spd()) throw ConfigError("config key '" + key + "' is not positive definite");
  return s;
}

inline std::size_t positive_count(const Config& c, const std::string& key, std::size_t def) {
  const auto v = c.get_uint(key, def);
  if (v == 0) throw ConfigError("config key '" + key + "' must be >= 1");
  return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------------------
// DDPM toy setup shared by the diffusion experiments

struct DdpmToySetup {
  Vec2 mu_ref{0.0, 0.0};
  Sym2 sigma_ref{2.0, 1.0, 2.0};
  std::size_t n_base = 1000;
  DdpmTrainConfig train{};  // base training: lr 1e-4, 10^4 epochs, batch 256, T = 20
  std::size_t fid_n = 10000;
  double eval_zeta = 1.0;
  std::filesystem::path cache_dir;

  static inline const std::set<std::string> keys{"mu_ref",  "sigma_ref", "n_base", "base_epochs", "lr",
                                                 "batch",   "T",         "mlp",    "fid_n",       "eval_zeta",
                                                 "cache_dir"};

  static DdpmToySetup from(const Config& c, const std::filesystem::path& default_cache) {
    DdpmToySetup s;
    s.mu_ref = parse_vec2(c, "mu_ref", s.mu_ref);
    s.sigma_ref = parse_sym2(c, "sigma_ref", s.sigma_ref);
    s.n_base = positive_count(c, "n_base", s.n_base);
    s.train.epochs = c.get_uint("base_epochs", s.train.epochs);
    s.train.lr = c.get_double("lr", s.train.lr);
    if (!(s.train.lr > 0.0)) throw ConfigError("lr must be > 0");
    s.train.batch_size = positive_count(c, "batch", s.train.batch_size);
    s.train.T = c.get_uint("T", s.train.T);
    if (s.train.T < 2) throw ConfigError("T must be >= 2");
    try {
      s.train.shape = MlpShape::parse(c.get_string("mlp", s.train.shape.to_string()));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("mlp: ") + e.what());
    }
    s.fid_n = positive_count(c, "fid_n", s.fid_n);
    if (s.fid_n < 3) throw ConfigError("fid_n must be >= 3");
    s.eval_zeta = c.get_double("eval_zeta", s.eval_zeta);
    if (!(s.eval_zeta > 0.0)) throw ConfigError("eval_zeta must be > 0");
    s.cache_dir = c.get_string("cache_dir", default_cache.string());
    return s;
  }

  void dump(ConfigDump& d) const {
    d.emplace_back("mu_ref", join_doubles({mu_ref[0], mu_ref[1]}));
    d.emplace_back("sigma_ref", join_doubles({sigma_ref.xx, sigma_ref.xy, sigma_ref.yy}));
    d.emplace_back("n_base", std::to_string(n_base));
    d.emplace_back("base_epochs", std::to_string(train.epochs));
    d.emplace_back("lr", format_double(train.lr));
    d.emplace_back("batch", std::to_string(train.batch_size));
    d.emplace_back("T", std::to_string(train.T));
    d.emplace_back("mlp", train.shape.to_string());
    d.emplace_back("fid_n", std::to_string(fid_n));
    d.emplace_back("eval_zeta", format_double(eval_zeta));
  }

  GaussianParams p_data() const { return GaussianParams::from_moments(mu_ref, sigma_ref); }
};

/// The N_base real training points of replicate `seed`.
inline SampleSet ddpm_base_data(const DdpmToySetup& s, std::uint64_t seed) {
  Rng r = Rng(seed).fork("data");
  return gauss_sample(s.p_data(), s.n_base, r);
}

/// Base model of replicate `seed` with architecture `shape`, from cache when present.
inline Checkpoint ddpm_base_model(const DdpmToySetup& s, std::uint64_t seed, const MlpShape& shape) {
  DdpmTrainConfig cfg = s.train;
  cfg.shape = shape;
  ConfigDump key;
  s.dump(key);
  key.emplace_back("seed", std::to_string(seed));
  key.emplace_back("shape", shape.to_string());
  const std::string name = "ddpm_base_" + config_hash("ddpm-base", key) + ".ckpt";
  const std::filesystem::path path = s.cache_dir.empty() ? std::filesystem::path() : s.cache_dir / name;
  if (!path.empty() && std::filesystem::exists(path)) return read_checkpoint(path);

  const SampleSet data = ddpm_base_data(s, seed);
  Rng rng = Rng(seed).fork("base/" + shape.to_string());
  Checkpoint ck = ddpm_train(data, cfg, rng).checkpoint;
  ck.seed = seed;
  if (!path.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(s.cache_dir, ec);
    if (ec) throw IoError("cannot create cache directory " + s.cache_dir.string() + ": " + ec.message());
    write_checkpoint(path, ck);
  }
  return ck;
}

/// Fine-tune on synthetic data with the base training recipe (fresh Adam moments).
inline Checkpoint ddpm_self_finetune(const DdpmToySetup& s, const Checkpoint& base, const SampleSet& syn,
                                     std::size_t epochs, const Rng& rng) {
  DdpmTrainConfig cfg = s.train;
  cfg.epochs = epochs;
  Rng r = rng;
  return ddpm_finetune(base, syn, cfg, r).checkpoint;
}

/// How the real-side sample of each FID evaluation is drawn.
enum class ReferenceMode { per_curve, per_point, fixed };

inline ReferenceMode reference_mode_from(const std::string& s) {
  if (s == "per_curve") return ReferenceMode::per_curve;
  if (s == "per_point") return ReferenceMode::per_point;
  if (s == "fixed") return ReferenceMode::fixed;
  throw ConfigError("reference must be per_curve, per_point or fixed, got '" + s + "'");
}

inline const char* to_string(ReferenceMode m) {
  switch (m) {
    case ReferenceMode::per_curve: return "per_curve";
    case ReferenceMode::per_point: return "per_point";
    case ReferenceMode::fixed: return "fixed";
  }
  return "?";
}

/// FID of theta_r - w (theta_s - theta_r) for every w. All w share the model-side
/// sampler stream `eval_rng`; the reference sample follows `mode`, with
/// `curve_ref_rng` used for per_curve/fixed and `curve_ref_rng.fork(i)` per point.
/// A merge whose sampler diverges yields nan.
inline std::vector<double> fid_sweep(const DdpmToySetup& s, const Checkpoint& theta_r, const Checkpoint& theta_s,
                                     const std::vector<double>& ws, const Rng& eval_rng, const Rng& curve_ref_rng,
                                     ReferenceMode mode) {
  const NoiseSchedule sched = cosine_schedule(s.train.T);
  const GaussianParams pd = s.p_data();
  SampleSet shared_ref;
  if (mode != ReferenceMode::per_point) {
    Rng r = curve_ref_rng;
    shared_ref = gauss_sample(pd, s.fid_n, r);
  }
  return parallel_map<double>(ws.size(), [&](std::size_t i) {
    SampleSet own_ref;
    if (mode == ReferenceMode::per_point) {
      Rng r = curve_ref_rng.fork(static_cast<std::uint64_t>(i));
      own_ref = gauss_sample(pd, s.fid_n, r);
    }
    const SampleSet& ref = mode == ReferenceMode::per_point ? own_ref : shared_ref;
    try {
      const MlpParams p = mlp_from_checkpoint(neon_merge(theta_r, theta_s, ws[i]));
      const SampleSet gen = ddpm_sample(p, sched, {s.eval_zeta}, s.fid_n, eval_rng);
      const double f = frechet_2d(gen, ref);
      return std::isfinite(f) ? f : std::nan("");
    } catch (const NumericDivergence&) {
      return std::nan("");
    } catch (const std::invalid_argument&) {
      return std::nan("");
    }
  });
}

// ---------------------------------------------------------------------------
// Two-direction grid on the analytic Gaussian model

struct Fig2Config {
  std::uint64_t seed = 1;
  Vec2 mu_true{1.0, -1.0};
  Sym2 sigma_true{2.0, 1.0, 2.0};
  std::size_t n_base = 1000;
  std::size_t n_syn = 100000;
  std::size_t n_extra = 4000;
  double lr = 1e-2;
  std::size_t epochs = 2000;
  double shrink = 0.9;
  bool eval_with_sampler = true;
  GaussGridSpec grid{};

  static inline const std::set<std::string> keys{"seed",   "mu_true", "sigma_true", "n_base", "n_syn",
                                                 "n_extra", "lr",     "epochs",     "shrink", "eval_with_sampler",
                                                 "ws",     "wo"};

  static Fig2Config from(const Config& c) {
    c.require_known(keys);
    Fig2Config f;
    f.seed = c.get_uint("seed", f.seed);
    f.mu_true = parse_vec2(c, "mu_true", f.mu_true);
    f.sigma_true = parse_sym2(c, "sigma_true", f.sigma_true);
    f.n_base = positive_count(c, "n_base", f.n_base);
    f.n_syn = positive_count(c, "n_syn", f.n_syn);
    f.n_extra = c.get_uint("n_extra", f.n_extra);
    f.lr = c.get_double("lr", f.lr);
    if (!(f.lr > 0.0)) throw ConfigError("lr must be > 0");
    f.epochs = c.get_uint("epochs", f.epochs);
    f.shrink = c.get_double("shrink", f.shrink);
    if (!(f.shrink > 0.0)) throw ConfigError("shrink must be > 0");
    f.eval_with_sampler = c.get_bool("eval_with_sampler", f.eval_with_sampler);
    f.grid.ws = c.get_range("ws", f.grid.ws);
    f.grid.wo = c.get_range("wo", f.grid.wo);
    return f;
  }

  ConfigDump dump() const {
    return {{"seed", std::to_string(seed)},
            {"mu_true", join_doubles({mu_true[0], mu_true[1]})},
            {"sigma_true", join_doubles({sigma_true.xx, sigma_true.xy, sigma_true.yy})},
            {"n_base", std::to_string(n_base)},
            {"n_syn", std::to_string(n_syn)},
            {"n_extra", std::to_string(n_extra)},
            {"lr", format_double(lr)},
            {"epochs", std::to_string(epochs)},
            {"shrink", format_double(shrink)},
            {"eval_with_sampler", eval_with_sampler ? "true" : "false"},
            {"ws", join_doubles({grid.ws.lo, grid.ws.hi, grid.ws.step})},
            {"wo", join_doubles({grid.wo.lo, grid.wo.hi, grid.wo.step})}};
  }
};

struct Fig2Result {
  double origin = 0.0;         // log W2 at (0, 0)
  double neon_axis_min = 0.0;  // min over wo = 0, ws > 0
  double neon_axis_argmin = 0.0;
  double oracle_axis_min = 0.0;  // min over ws = 0, wo > 0
  double oracle_axis_argmin = 0.0;
  ResultTable grid{{"ws", "wo", "log_w2"}};
};

inline Fig2Result run_fig2(const Fig2Config& cfg, const std::filesystem::path& out_dir) {
  const Rng root(cfg.seed);
  const GaussianParams truth = GaussianParams::from_moments(cfg.mu_true, cfg.sigma_true);
  Rng data_rng = root.fork("data");
  SampleSet real = gauss_sample(truth, cfg.n_base, data_rng);
  const GaussianParams init{{0.0, 0.0}, 1.0, 0.0, 1.0};

  const Checkpoint theta_r = gauss_fit_sgd(real, init, cfg.lr, cfg.epochs, root.fork("fit/base"));
  const GaussianParams gr = GaussianParams::from_params(theta_r.params);

  Rng syn_rng = root.fork("synthetic");
  const SampleSet syn = gauss_sample(generated_distribution(gr, cfg.shrink), cfg.n_syn, syn_rng);
  const Checkpoint theta_s = gauss_fit_sgd(syn, gr, cfg.lr, cfg.epochs, root.fork("fit/synthetic"));

  Rng extra_rng = root.fork("extra");
  SampleSet more = real;
  const SampleSet extra = gauss_sample(truth, cfg.n_extra, extra_rng);
  more.insert(more.end(), extra.begin(), extra.end());
  const Checkpoint theta_o = gauss_fit_sgd(more, gr, cfg.lr, cfg.epochs, root.fork("fit/oracle"));

  Fig2Result res;
  res.grid = neon_oracle_grid(theta_r, theta_s, theta_o, cfg.grid, truth, cfg.eval_with_sampler ? cfg.shrink : 1.0);

  auto eval = [&](double ws, double wo) {
    auto g = grid_point(theta_r, theta_s, theta_o, ws, wo);
    if (!g) return std::nan("");
    return std::log(w2_gaussian(generated_distribution(*g, cfg.eval_with_sampler ? cfg.shrink : 1.0), truth));
  };
  res.origin = eval(0.0, 0.0);
  res.neon_axis_min = res.oracle_axis_min = INFINITY;
  for (double ws : cfg.grid.ws.values()) {
    if (ws <= 0.0) continue;
    const double v = eval(ws, 0.0);
    if (v < res.neon_axis_min) res.neon_axis_min = v, res.neon_axis_argmin = ws;
  }
  for (double wo : cfg.grid.wo.values()) {
    if (wo <= 0.0) continue;
    const double v = eval(0.0, wo);
    if (v < res.oracle_axis_min) res.oracle_axis_min = v, res.oracle_axis_argmin = wo;
  }

  if (!out_dir.empty()) {
    const Emitter em(out_dir, "fig2-grid", cfg.dump(), cfg.seed);
    em.write("grid.csv", res.grid);
    ResultTable summary({"quantity", "ws", "wo", "log_w2"});
    summary.add_row({std::string("origin"), 0.0, 0.0, res.origin});
    summary.add_row({std::string("neon_axis_min"), res.neon_axis_argmin, 0.0, res.neon_axis_min});
    summary.add_row({std::string("oracle_axis_min"), 0.0, res.oracle_axis_argmin, res.oracle_axis_min});
    summary.add_row({std::string("oracle_point"), 0.0, 1.0, eval(0.0, 1.0)});
    summary.add_row({std::string("synthetic_point"), -1.0, 0.0, eval(-1.0, 0.0)});
    em.write("summary.csv", summary);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Toy experiment 1: FID vs merge weight for mode- and diversity-seeking samplers

struct ToyExp1Config {
  std::uint64_t seed = 1;
  DdpmToySetup setup{};
  std::vector<double> zetas{0.9, 1.1};
  std::vector<std::uint64_t> ft_epochs{50, 250};
  std::size_t n_syn = 10000;
  std::vector<double> ws = Range{-1.25, 1.25, 0.05}.values();
  ReferenceMode reference = ReferenceMode::per_curve;

  static ToyExp1Config from(const Config& c, const std::filesystem::path& out_dir) {
    std::set<std::string> known = DdpmToySetup::keys;
    known.insert({"seed", "zetas", "ft_epochs", "n_syn", "w", "reference"});
    c.require_known(known);
    ToyExp1Config t;
    t.seed = c.get_uint("seed", t.seed);
    t.setup = DdpmToySetup::from(c, out_dir / "cache");
    t.zetas = c.get_doubles("zetas", t.zetas);
    for (double z : t.zetas)
      if (!(z > 0.0)) throw ConfigError("zetas must be > 0");
    t.ft_epochs = c.get_uints("ft_epochs", t.ft_epochs);
    t.n_syn = positive_count(c, "n_syn", t.n_syn);
    t.ws = c.get_doubles("w", t.ws);
    t.reference = reference_mode_from(c.get_string("reference", to_string(t.reference)));
    return t;
  }

  ConfigDump dump() const {
    ConfigDump d{{"seed", std::to_string(seed)}};
    setup.dump(d);
    d.emplace_back("zetas", join_doubles(zetas));
    d.emplace_back("ft_epochs", join_uints(ft_epochs));
    d.emplace_back("n_syn", std::to_string(n_syn));
    d.emplace_back("w", join_doubles(ws));
    d.emplace_back("reference", to_string(reference));
    return d;
  }
};

struct FidCurve {
  double zeta = 0.0;
  std::uint64_t ft_epochs = 0;
  std::vector<double> ws;
  std::vector<double> fid;

  double argmin_w() const {
    const auto i = nan_argmin(fid);
    return i == static_cast<std::size_t>(-1) ? std::nan("") : ws[i];
  }
  double min_fid() const {
    const auto i = nan_argmin(fid);
    return i == static_cast<std::size_t>(-1) ? std::nan("") : fid[i];
  }
};

inline ResultTable fid_table(const FidCurve& c) {
  ResultTable t({"w", "fid", "log10_fid"});
  for (std::size_t i = 0; i < c.ws.size(); ++i) t.add_row({c.ws[i], c.fid[i], std::log10(c.fid[i])});
  return t;
}

inline std::vector<FidCurve> run_toy_exp1(const ToyExp1Config& cfg, const std::filesystem::path& out_dir) {
  const Rng root(cfg.seed);
  const Checkpoint base = ddpm_base_model(cfg.setup, cfg.seed, cfg.setup.train.shape);
  const MlpParams pr = mlp_from_checkpoint(base);
  const NoiseSchedule sched = cosine_schedule(cfg.setup.train.T);
  const Rng eval_rng = root.fork("eval");

  std::vector<FidCurve> curves;
  for (double zeta : cfg.zetas) {
    const std::string zl = short_label(zeta);
    const SampleSet syn = ddpm_sample(pr, sched, {zeta}, cfg.n_syn, root.fork("synthetic/zeta=" + zl));
    for (std::uint64_t ep : cfg.ft_epochs) {
      const std::string cl = "zeta=" + zl + "/epochs=" + std::to_string(ep);
      const Checkpoint theta_s = ddpm_self_finetune(cfg.setup, base, syn, ep, root.fork("finetune/" + cl));
      const Rng ref_rng = cfg.reference == ReferenceMode::fixed ? root.fork("reference") : root.fork("reference/" + cl);
      curves.push_back({zeta, ep, cfg.ws, fid_sweep(cfg.setup, base, theta_s, cfg.ws, eval_rng, ref_rng, cfg.reference)});
    }
  }

  if (!out_dir.empty()) {
    const Emitter em(out_dir, "toy-exp1", cfg.dump(), cfg.seed);
    ResultTable summary({"zeta", "ft_epochs", "budget_images", "argmin_w", "min_fid", "fid_at_w0"});
    for (const auto& c : curves) {
      const std::string name = "fid_vs_w_zeta" + short_label(c.zeta) + "_budget" + std::to_string(c.ft_epochs) + ".csv";
      const std::uint64_t images = c.ft_epochs * cfg.n_syn;
      em.write(name, fid_table(c),
               {{"zeta", format_double(c.zeta)},
                {"ft_epochs", std::to_string(c.ft_epochs)},
                {"budget_images", std::to_string(images)},
                {"fid_n", std::to_string(cfg.setup.fid_n)},
                {"reference", to_string(cfg.reference)}});
      double at0 = std::nan("");
      for (std::size_t i = 0; i < c.ws.size(); ++i)
        if (c.ws[i] == 0.0) at0 = c.fid[i];
      summary.add_row({c.zeta, static_cast<std::int64_t>(c.ft_epochs), static_cast<std::int64_t>(images), c.argmin_w(),
                       c.min_fid(), at0});
    }
    em.write("exp1_summary.csv", summary, {{"fid_n", std::to_string(cfg.setup.fid_n)}});
  }
  return curves;
}

// ---------------------------------------------------------------------------
// Toy experiment 2: preconditioned cosine between real and synthetic gradients vs zeta

struct ToyExp2Config {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  DdpmToySetup setup{};
  std::vector<double> zetas = Range{0.8, 1.25, 0.05}.values();
  std::size_t n_pop = 100000;
  std::size_t n_syn = 100000;
  std::size_t mc_draws = 1;
  std::size_t precond_passes = 1;

  static ToyExp2Config from(const Config& c, const std::filesystem::path& out_dir) {
    std::set<std::string> known = DdpmToySetup::keys;
    known.insert({"seeds", "zetas", "n_pop", "n_syn", "mc_draws", "precond_passes"});
    c.require_known(known);
    ToyExp2Config t;
    t.seeds = c.get_uints("seeds", t.seeds);
    t.setup = DdpmToySetup::from(c, out_dir / "cache");
    t.zetas = c.get_doubles("zetas", t.zetas);
    for (double z : t.zetas)
      if (!(z > 0.0)) throw ConfigError("zetas must be > 0");
    t.n_pop = positive_count(c, "n_pop", t.n_pop);
    t.n_syn = positive_count(c, "n_syn", t.n_syn);
    t.mc_draws = positive_count(c, "mc_draws", t.mc_draws);
    t.precond_passes = positive_count(c, "precond_passes", t.precond_passes);
    return t;
  }

  ConfigDump dump() const {
    ConfigDump d{{"seeds", join_uints(seeds)}};
    setup.dump(d);
    d.emplace_back("zetas", join_doubles(zetas));
    d.emplace_back("n_pop", std::to_string(n_pop));
    d.emplace_back("n_syn", std::to_string(n_syn));
    d.emplace_back("mc_draws", std::to_string(mc_draws));
    d.emplace_back("precond_passes", std::to_string(precond_passes));
    return d;
  }
};

struct CosinePoint {
  double zeta = 0.0;
  double mean_cos = 0.0;
  double stderr_cos = 0.0;
};

/// Per-seed alignment reports, one per zeta.
inline std::vector<AlignmentReport> toy_exp2_seed(const ToyExp2Config& cfg, std::uint64_t seed) {
  const Rng root(seed);
  const Checkpoint base = ddpm_base_model(cfg.setup, seed, cfg.setup.train.shape);
  const MlpParams pr = mlp_from_checkpoint(base);
  const NoiseSchedule sched = cosine_schedule(cfg.setup.train.T);
  Rng pop_rng = root.fork("population");
  const SampleSet pop = gauss_sample(cfg.setup.p_data(), cfg.n_pop, pop_rng);
  Rng pre_rng = root.fork("precond");
  const DiagPreconditioner P =
      estimate_adam_preconditioner(pr, pop, sched, cfg.setup.train.batch_size, pre_rng, cfg.precond_passes);
  Rng rd_rng = root.fork("r_d");
  const ParamVector r_d = ddpm_mean_grad(pr, pop, sched, rd_rng, cfg.mc_draws);

  return parallel_map<AlignmentReport>(cfg.zetas.size(), [&](std::size_t i) {
    const std::string zl = short_label(cfg.zetas[i]);
    const SampleSet syn = ddpm_sample(pr, sched, {cfg.zetas[i]}, cfg.n_syn, root.fork("synthetic/zeta=" + zl));
    Rng rs_rng = root.fork("r_s/zeta=" + zl);
    const ParamVector r_s = ddpm_mean_grad(pr, syn, sched, rs_rng, cfg.mc_draws);
    return alignment(r_d, r_s, P, cfg.setup.train.lr, std::nullopt);
  });
}

inline std::vector<CosinePoint> run_toy_exp2(const ToyExp2Config& cfg, const std::filesystem::path& out_dir) {
  if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
  std::vector<std::vector<AlignmentReport>> per_seed;
  for (std::uint64_t seed : cfg.seeds) per_seed.push_back(toy_exp2_seed(cfg, seed));

  std::vector<CosinePoint> out;
  const double m = static_cast<double>(cfg.seeds.size());
  for (std::size_t i = 0; i < cfg.zetas.size(); ++i) {
    double mean = 0.0, sq = 0.0;
    for (const auto& reps : per_seed) mean += reps[i].cos_sim.value_or(std::nan(""));
    mean /= m;
    for (const auto& reps : per_seed) {
      const double d = reps[i].cos_sim.value_or(std::nan("")) - mean;
      sq += d * d;
    }
    const double se = cfg.seeds.size() > 1 ? std::sqrt(sq / (m - 1.0) / m) : 0.0;
    out.push_back({cfg.zetas[i], mean, se});
  }

  if (!out_dir.empty()) {
    const Emitter em(out_dir, "toy-exp2", cfg.dump(), cfg.seeds.front());
    ResultTable t({"zeta", "mean_cos", "stderr"});
    for (const auto& p : out) t.add_row({p.zeta, p.mean_cos, p.stderr_cos});
    em.write("cosine_similarity.csv", t,
             {{"seeds", join_uints(cfg.seeds)}, {"n_pop", std::to_string(cfg.n_pop)}, {"n_syn", std::to_string(cfg.n_syn)}});
    std::vector<std::string> cols{"seed", "zeta"};
    for (const auto& c : AlignmentReport::columns()) cols.push_back(c);
    ResultTable detail(cols);
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
      for (std::size_t i = 0; i < cfg.zetas.size(); ++i) {
        std::vector<Cell> row{static_cast<std::int64_t>(cfg.seeds[k]), cfg.zetas[i]};
        for (auto& c : per_seed[k][i].row()) row.push_back(c);
        detail.add_row(row);
      }
    }
    em.write("cosine_per_seed.csv", detail, {{"seeds", join_uints(cfg.seeds)}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-model transfer: synthetic data from donor A fine-tunes recipient B

struct TransferConfig {
  std::uint64_t seed = 1;
  DdpmToySetup setup{};
  MlpShape donor{16, 128, 128};
  MlpShape recipient{16, 64, 64};
  double zeta = 1.1;
  std::size_t n_syn = 10000;
  std::uint64_t ft_epochs = 50;
  std::vector<double> ws = Range{-1.25, 1.25, 0.05}.values();
  ReferenceMode reference = ReferenceMode::per_curve;

  static TransferConfig from(const Config& c, const std::filesystem::path& out_dir) {
    std::set<std::string> known = DdpmToySetup::keys;
    known.insert({"seed", "donor_mlp", "recipient_mlp", "zeta", "n_syn", "ft_epochs", "w", "reference"});
    c.require_known(known);
    TransferConfig t;
    t.seed = c.get_uint("seed", t.seed);
    t.setup = DdpmToySetup::from(c, out_dir / "cache");
    try {
      t.donor = MlpShape::parse(c.get_string("donor_mlp", t.donor.to_string()));
      t.recipient = MlpShape::parse(c.get_string("recipient_mlp", t.recipient.to_string()));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("mlp shape: ") + e.what());
    }
    t.zeta = c.get_double("zeta", t.zeta);
    if (!(t.zeta > 0.0)) throw ConfigError("zeta must be > 0");
    t.n_syn = positive_count(c, "n_syn", t.n_syn);
    t.ft_epochs = c.get_uint("ft_epochs", t.ft_epochs);
    t.ws = c.get_doubles("w", t.ws);
    t.reference = reference_mode_from(c.get_string("reference", to_string(t.reference)));
    return t;
  }

  ConfigDump dump() const {
    ConfigDump d{{"seed", std::to_string(seed)}};
    setup.dump(d);
    d.emplace_back("donor_mlp", donor.to_string());
    d.emplace_back("recipient_mlp", recipient.to_string());
    d.emplace_back("zeta", format_double(zeta));
    d.emplace_back("n_syn", std::to_string(n_syn));
    d.emplace_back("ft_epochs", std::to_string(ft_epochs));
    d.emplace_back("w", join_doubles(ws));
    d.emplace_back("reference", to_string(reference));
    return d;
  }
};

struct TransferResult {
  FidCurve cross;  // recipient fine-tuned on donor samples
  FidCurve self;   // recipient fine-tuned on its own samples
};

inline TransferResult run_transfer(const TransferConfig& cfg, const std::filesystem::path& out_dir) {
  const Rng root(cfg.seed);
  const NoiseSchedule sched = cosine_schedule(cfg.setup.train.T);
  const Checkpoint a = ddpm_base_model(cfg.setup, cfg.seed, cfg.donor);
  const Checkpoint b = ddpm_base_model(cfg.setup, cfg.seed, cfg.recipient);
  const std::string zl = short_label(cfg.zeta);
  const SampleSet syn_a = ddpm_sample(mlp_from_checkpoint(a), sched, {cfg.zeta}, cfg.n_syn, root.fork("synthetic/donor/zeta=" + zl));
  const SampleSet syn_b =
      ddpm_sample(mlp_from_checkpoint(b), sched, {cfg.zeta}, cfg.n_syn, root.fork("synthetic/recipient/zeta=" + zl));
  const Checkpoint s_cross = ddpm_self_finetune(cfg.setup, b, syn_a, cfg.ft_epochs, root.fork("finetune/cross"));
  const Checkpoint s_self = ddpm_self_finetune(cfg.setup, b, syn_b, cfg.ft_epochs, root.fork("finetune/self"));

  // Both curves are measured against the same reference and sampler noise.
  const Rng eval_rng = root.fork("eval");
  const Rng ref_rng = root.fork("reference/transfer");
  TransferResult r;
  r.cross = {cfg.zeta, cfg.ft_epochs, cfg.ws, fid_sweep(cfg.setup, b, s_cross, cfg.ws, eval_rng, ref_rng, cfg.reference)};
  r.self = {cfg.zeta, cfg.ft_epochs, cfg.ws, fid_sweep(cfg.setup, b, s_self, cfg.ws, eval_rng, ref_rng, cfg.reference)};

  if (!out_dir.empty()) {
    const Emitter em(out_dir, "transfer", cfg.dump(), cfg.seed);
    ResultTable t({"w", "fid_cross", "fid_self"});
    for (std::size_t i = 0; i < cfg.ws.size(); ++i) t.add_row({cfg.ws[i], r.cross.fid[i], r.self.fid[i]});
    em.write("transfer_fid_vs_w.csv", t,
             {{"donor_mlp", cfg.donor.to_string()},
              {"recipient_mlp", cfg.recipient.to_string()},
              {"budget_images", std::to_string(cfg.ft_epochs * cfg.n_syn)},
              {"fid_n", std::to_string(cfg.setup.fid_n)}});
    ResultTable s({"curve", "argmin_w", "min_fid"});
    s.add_row({std::string("cross"), r.cross.argmin_w(), r.cross.min_fid()});
    s.add_row({std::string("self"), r.self.argmin_w(), r.self.min_fid()});
    em.write("transfer_summary.csv", s);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Short fine-tune displacement concentration

struct ConcentrationConfig {
  std::uint64_t seed = 1;
  DdpmToySetup setup{};
  double zeta = 1.1;
  std::size_t n_syn = 1000;
  double alpha = 1e-5;
  std::vector<std::uint64_t> T_list{4, 16, 64, 256};
  std::vector<std::uint64_t> ft_seeds{1, 2, 3, 4, 5};
  std::size_t ref_draws = 256;
  std::size_t precond_passes = 10;
  double alpha_scale = 10.0;

  static ConcentrationConfig from(const Config& c, const std::filesystem::path& out_dir) {
    std::set<std::string> known = DdpmToySetup::keys;
    known.insert({"seed", "zeta", "n_syn", "alpha", "T_list", "ft_seeds", "ref_draws", "precond_passes", "alpha_scale"});
    c.require_known(known);
    ConcentrationConfig t;
    t.seed = c.get_uint("seed", t.seed);
    t.setup = DdpmToySetup::from(c, out_dir / "cache");
    t.zeta = c.get_double("zeta", t.zeta);
    if (!(t.zeta > 0.0)) throw ConfigError("zeta must be > 0");
    t.n_syn = positive_count(c, "n_syn", t.n_syn);
    t.alpha = c.get_double("alpha", t.alpha);
    if (!(t.alpha > 0.0)) throw ConfigError("alpha must be > 0");
    t.T_list = c.get_uints("T_list", t.T_list);
    for (auto T : t.T_list)
      if (T == 0) throw ConfigError("T_list entries must be >= 1");
    t.ft_seeds = c.get_uints("ft_seeds", t.ft_seeds);
    t.ref_draws = positive_count(c, "ref_draws", t.ref_draws);
    t.precond_passes = positive_count(c, "precond_passes", t.precond_passes);
    t.alpha_scale = c.get_double("alpha_scale", t.alpha_scale);
    if (!(t.alpha_scale > 0.0)) throw ConfigError("alpha_scale must be > 0");
    return t;
  }

  ConfigDump dump() const {
    ConfigDump d{{"seed", std::to_string(seed)}};
    setup.dump(d);
    d.emplace_back("zeta", format_double(zeta));
    d.emplace_back("n_syn", std::to_string(n_syn));
    d.emplace_back("alpha", format_double(alpha));
    d.emplace_back("T_list", join_uints(T_list));
    d.emplace_back("ft_seeds", join_uints(ft_seeds));
    d.emplace_back("ref_draws", std::to_string(ref_draws));
    d.emplace_back("precond_passes", std::to_string(precond_passes));
    d.emplace_back("alpha_scale", format_double(alpha_scale));
    return d;
  }
};

/// T steps of theta <- theta - alpha P g_k on a fixed synthetic set, g_k the
/// full-set gradient with fresh diffusion noise each step.
inline Checkpoint precond_sgd_finetune(const Checkpoint& base, const SampleSet& syn, const NoiseSchedule& sched,
                                       const DiagPreconditioner& P, double alpha, std::size_t T, Rng& rng) {
  MlpParams p = mlp_from_checkpoint(base);
  require_same_dim(p.flat().size(), P.dim(), "precond_sgd_finetune");
  for (std::size_t k = 0; k < T; ++k) {
    const ParamVector g = ddpm_mean_grad(p, syn, sched, rng, 1);
    auto theta = p.flat_mut();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= alpha * P[i] * g[i];
  }
  Checkpoint out = base;
  out.params = p.flatten();
  out.budget_images = base.budget_images + T * syn.size();
  return out;
}

struct ConcentrationResult {
  ResultTable table{{"alpha", "T", "alpha_T", "cos", "cos_stderr"}};
  std::vector<double> cos_base;    // at alpha, per T
  std::vector<double> cos_scaled;  // at alpha * alpha_scale, per T
};

inline ConcentrationResult run_concentration(const ConcentrationConfig& cfg, const std::filesystem::path& out_dir) {
  const Rng root(cfg.seed);
  const Checkpoint base = ddpm_base_model(cfg.setup, cfg.seed, cfg.setup.train.shape);
  const MlpParams pr = mlp_from_checkpoint(base);
  const NoiseSchedule sched = cosine_schedule(cfg.setup.train.T);
  const SampleSet real = ddpm_base_data(cfg.setup, cfg.seed);
  Rng pre_rng = root.fork("precond");
  const DiagPreconditioner P =
      estimate_adam_preconditioner(pr, real, sched, cfg.setup.train.batch_size, pre_rng, cfg.precond_passes);
  const SampleSet syn = ddpm_sample(pr, sched, {cfg.zeta}, cfg.n_syn, root.fork("synthetic"));
  Rng ref_rng = root.fork("r_s_ref");
  const ParamVector r_s_ref = ddpm_mean_grad(pr, syn, sched, ref_rng, cfg.ref_draws);

  const FinetuneFn ft = [&](double alpha, std::size_t T, std::uint64_t s) {
    Rng r = root.fork("finetune").fork(s);
    return precond_sgd_finetune(base, syn, sched, P, alpha, T, r);
  };
  std::vector<std::size_t> Ts(cfg.T_list.begin(), cfg.T_list.end());
  ConcentrationResult res;
  for (const double alpha : {cfg.alpha, cfg.alpha * cfg.alpha_scale}) {
    const ResultTable t = concentration_probe(base, ft, alpha, Ts, r_s_ref, P, cfg.ft_seeds);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double c = t.number(i, 2);
      (alpha == cfg.alpha ? res.cos_base : res.cos_scaled).push_back(c);
      res.table.add_row({alpha, static_cast<std::int64_t>(Ts[i]), t.number(i, 1), c, t.number(i, 3)});
    }
  }
  if (!out_dir.empty()) {
    const Emitter em(out_dir, "concentration", cfg.dump(), cfg.seed);
    em.write("concentration.csv", res.table,
             {{"theta_r_norm", format_double(norm(base.params))},
              {"P_r_s_norm", format_double(norm(apply(P, r_s_ref)))}});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Categorical enumeration suite and quadratic-proxy check

struct ArVerifyConfig {
  std::uint64_t seed = 1;
  std::size_t V = 8;
  double eps_norm = 0.05;
  std::size_t draws = 100;
  double theta_spread = 0.01;
  std::vector<ArSampler> samplers{ArSampler::temperature(0.5), ArSampler::top_k(4), ArSampler::top_p(0.8),
                                  ArSampler::temperature(1.5), ArSampler::top_k(8)};
  // Quadratic proxy check.
  std::size_t proxy_instances = 100;
  double proxy_spread = 1.0;
  double proxy_tau = 0.5;
  double proxy_alpha = 0.1;
  std::size_t proxy_points = 20;

  static ArSampler parse_sampler(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("sampler '" + s + "' must be kind:param");
    const std::string kind = detail::trim(s.substr(0, colon));
    const std::string arg = detail::trim(s.substr(colon + 1));
    try {
      if (kind == "temperature") return ArSampler::temperature(parse_double("samplers", arg));
      if (kind == "top_k") return ArSampler::top_k(parse_uint("samplers", arg));
      if (kind == "top_p") return ArSampler::top_p(parse_double("samplers", arg));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sampler '") + s + "': " + e.what());
    }
    throw ConfigError("unknown sampler kind '" + kind + "' (temperature, top_k, top_p)");
  }

  static ArVerifyConfig from(const Config& c) {
    c.require_known({"seed", "V", "eps_norm", "draws", "theta_spread", "samplers", "proxy_instances", "proxy_spread",
                     "proxy_tau", "proxy_alpha", "proxy_points"});
    ArVerifyConfig a;
    a.seed = c.get_uint("seed", a.seed);
    a.V = c.get_uint("V", a.V);
    if (a.V < 2) throw ConfigError("V must be >= 2");
    a.eps_norm = c.get_double("eps_norm", a.eps_norm);
    if (!(a.eps_norm >= 0.0)) throw ConfigError("eps_norm must be >= 0");
    a.draws = positive_count(c, "draws", a.draws);
    a.theta_spread = c.get_double("theta_spread", a.theta_spread);
    if (c.has("samplers")) {
      a.samplers.clear();
      for (const auto& s : detail::split(c.get_string("samplers", ""), ',')) a.samplers.push_back(parse_sampler(s));
    }
    for (const auto& s : a.samplers)
      if (s.kind == ArSampler::Kind::top_k && s.k > a.V) throw ConfigError("top_k k exceeds V");
    a.proxy_instances = c.get_uint("proxy_instances", a.proxy_instances);
    a.proxy_spread = c.get_double("proxy_spread", a.proxy_spread);
    a.proxy_tau = c.get_double("proxy_tau", a.proxy_tau);
    if (!(a.proxy_tau > 0.0)) throw ConfigError("proxy_tau must be > 0");
    a.proxy_alpha = c.get_double("proxy_alpha", a.proxy_alpha);
    if (!(a.proxy_alpha > 0.0)) throw ConfigError("proxy_alpha must be > 0");
    a.proxy_points = positive_count(c, "proxy_points", a.proxy_points);
    return a;
  }

  ConfigDump dump() const {
    std::string ss;
    for (const auto& s : samplers) ss += (ss.empty() ? "" : ",") + std::string(s.name()) + ":" + format_double(s.param());
    return {{"seed", std::to_string(seed)},
            {"V", std::to_string(V)},
            {"eps_norm", format_double(eps_norm)},
            {"draws", std::to_string(draws)},
            {"theta_spread", format_double(theta_spread)},
            {"samplers", ss},
            {"proxy_instances", std::to_string(proxy_instances)},
            {"proxy_spread", format_double(proxy_spread)},
            {"proxy_tau", format_double(proxy_tau)},
            {"proxy_alpha", format_double(proxy_alpha)},
            {"proxy_points", std::to_string(proxy_points)}};
  }
};

/// -1 mode-seeking (expects s < 0), +1 diversity-seeking (s > 0), 0 neutral.
inline int expected_sign(const ArSampler& s, std::size_t V) {
  switch (s.kind) {
    case ArSampler::Kind::temperature: return s.tau < 1.0 ? -1 : (s.tau > 1.0 ? 1 : 0);
    case ArSampler::Kind::top_k: return s.k < V ? -1 : 0;
    case ArSampler::Kind::top_p: return s.p < 1.0 ? -1 : 0;
  }
  return 0;
}

struct ArSamplerSummary {
  ArSampler sampler;
  int expected = 0;
  double frac_s_neg = 0.0;
  double frac_s_pos = 0.0;
  double frac_cos_neg = 0.0;
  double mean_B = 0.0;
};

struct ProxyInstance {
  double s = 0.0, z = 0.0, w_star = 0.0;
  double max_rel_remainder = 0.0;
  bool sign_ok = false;
};

struct ArVerifyResult {
  std::vector<ArSamplerSummary> samplers;
  std::vector<ProxyInstance> proxy;
};

/// One proxy instance: theta_s is one preconditioned step of size alpha on the
/// synthetic risk, so theta_Neon - theta_r = w alpha P r_s. The exact risk along
/// the merge is compared with R(theta_r) + w alpha s + (w alpha)^2 z / 2 for
/// |w alpha| <= 0.1 ||theta_r|| (theta_r taken in the mean-zero gauge).
inline ProxyInstance proxy_instance(const ArVerifyConfig& cfg, Rng& rng) {
  ArInstance inst = draw_ar_instance(cfg.V, cfg.eps_norm, cfg.proxy_spread, rng);
  const std::vector<double> p_data = inst.theta_star.probs();
  std::vector<double> pd(cfg.V);
  for (double& v : pd) v = std::exp(std::log(0.5) + rng.uniform() * std::log(4.0));  // log-uniform in [0.5, 2]
  const DiagPreconditioner P(pd);

  std::vector<double> tr = lin_comb(1.0, inst.theta_star.logits, 1.0, inst.eps).vec();
  const double mean = std::accumulate(tr.begin(), tr.end(), 0.0) / static_cast<double>(tr.size());
  for (double& v : tr) v -= mean;
  const CategoricalModel theta_r{ParamVector(tr)};
  const std::vector<double> q = apply_sampler(theta_r.probs(), ArSampler::temperature(cfg.proxy_tau));

  const ParamVector r_d = categorical_risk_grad(theta_r.logits, p_data);
  const ParamVector r_s = categorical_risk_grad(theta_r.logits, q);
  const GradFn grad = [&](const ParamVector& th) { return categorical_risk_grad(th, p_data); };
  const double z = curvature_along(grad, theta_r.logits, r_s, P);
  const AlignmentReport rep = alignment(r_d, r_s, P, cfg.proxy_alpha, z);

  Checkpoint ck_r;
  ck_r.kind = ModelKind::categorical;
  ck_r.params = theta_r.logits;
  Checkpoint ck_s = ck_r;
  ck_s.params = lin_comb(1.0, theta_r.logits, -cfg.proxy_alpha, apply(P, r_s));

  const double lim = 0.1 * norm(theta_r.logits);
  std::vector<double> ws;
  for (std::size_t i = 1; i <= cfg.proxy_points; ++i) {
    const double step = lim * static_cast<double>(i) / static_cast<double>(cfg.proxy_points) / cfg.proxy_alpha;
    ws.push_back(step);
    ws.push_back(-step);
  }
  const RiskFn risk = [&](const Checkpoint& c) { return categorical_risk(c.params, p_data); };
  const ResultTable curve = risk_along_merge(ck_r, ck_s, ws, risk);
  const double r0 = categorical_risk(theta_r.logits, p_data);

  ProxyInstance out;
  out.s = rep.s;
  out.z = z;
  out.w_star = rep.w_star.value_or(std::nan(""));
  out.sign_ok = rep.w_star && ((*rep.w_star > 0.0) == (rep.s < 0.0)) && rep.s != 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double wa = curve.number(i, 0) * cfg.proxy_alpha;
    const double proxy = r0 + wa * rep.s + 0.5 * wa * wa * z;
    const double scale = std::abs(wa * rep.s) + 0.5 * wa * wa * z;
    out.max_rel_remainder = std::max(out.max_rel_remainder, std::abs(curve.number(i, 1) - proxy) / scale);
  }
  return out;
}

inline ArVerifyResult run_ar_verify(const ArVerifyConfig& cfg, const std::filesystem::path& out_dir) {
  const Rng root(cfg.seed);
  ArVerifyResult res;
  ResultTable rows({"sampler", "param", "draw", "cos_phi", "s", "sign_agrees"});

  for (const auto& smp : cfg.samplers) {
    const int expect = expected_sign(smp, cfg.V);
    struct DrawOut {
      std::optional<double> cos_phi;
      double s = 0.0, mean_B = 0.0;
    };
    // Draw i of every sampler uses the same (theta*, eps): samplers are compared on common instances.
    const auto outs = parallel_map<DrawOut>(cfg.draws, [&](std::size_t i) {
      Rng r = root.fork("draw").fork(static_cast<std::uint64_t>(i));
      const ArInstance inst = draw_ar_instance(cfg.V, cfg.eps_norm, cfg.theta_spread, r);
      const SamplerBias sb = sampler_bias(inst.theta_star, inst.eps, smp);
      const CategoricalModel theta_r{lin_comb(1.0, inst.theta_star.logits, 1.0, inst.eps)};
      const AlignmentReport rep =
          alignment_exact(inst.theta_star.probs(), theta_r, smp, DiagPreconditioner::identity(cfg.V));
      return DrawOut{sb.cos_phi, rep.s, sb.mean_B};
    });
    ArSamplerSummary sum{smp, expect};
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const auto& o = outs[i];
      sum.frac_s_neg += o.s < 0.0;
      sum.frac_s_pos += o.s > 0.0;
      sum.frac_cos_neg += o.cos_phi && *o.cos_phi < 0.0;
      sum.mean_B += o.mean_B;
      std::string agrees = "neutral";
      if (expect != 0) agrees = ((expect < 0 && o.s < 0.0) || (expect > 0 && o.s > 0.0)) ? "yes" : "no";
      rows.add_row({std::string(smp.name()), smp.param(), static_cast<std::int64_t>(i),
                    o.cos_phi.value_or(std::nan("")), o.s, agrees});
    }
    const double n = static_cast<double>(cfg.draws);
    sum.frac_s_neg /= n;
    sum.frac_s_pos /= n;
    sum.frac_cos_neg /= n;
    sum.mean_B /= n;
    res.samplers.push_back(sum);
  }

  res.proxy = parallel_map<ProxyInstance>(cfg.proxy_instances, [&](std::size_t i) {
    Rng r = root.fork("proxy").fork(static_cast<std::uint64_t>(i));
    return proxy_instance(cfg, r);
  });

  if (!out_dir.empty()) {
    const Emitter em(out_dir, "ar-verify", cfg.dump(), cfg.seed);
    em.write("ar_alignment.csv", rows);
    ResultTable summary({"sampler", "param", "expected_sign", "frac_s_neg", "frac_s_pos", "frac_cos_neg", "mean_B"});
    for (const auto& s : res.samplers) {
      summary.add_row({std::string(s.sampler.name()), s.sampler.param(), static_cast<std::int64_t>(s.expected),
                       s.frac_s_neg, s.frac_s_pos, s.frac_cos_neg, s.mean_B});
    }
    em.write("ar_summary.csv", summary);
    ResultTable proxy({"instance", "s", "z", "w_star", "max_rel_remainder", "sign_ok"});
    for (std::size_t i = 0; i < res.proxy.size(); ++i) {
      const auto& p = res.proxy[i];
      proxy.add_row({static_cast<std::int64_t>(i), p.s, p.z, p.w_star, p.max_rel_remainder,
                     static_cast<std::int64_t>(p.sign_ok)});
    }
    em.write("proxy_check.csv", proxy);
  }
  return res;
}

}  // namespace neon
