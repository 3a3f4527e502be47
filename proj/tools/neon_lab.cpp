// neon_lab: command-line driver for the toy experiments and the standalone
// merge / alignment tools.
//
// Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 I/O error, 1 other.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neon/experiments.hpp"

namespace {

using namespace neon;
namespace fs = std::filesystem;

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* sub, CommonOpts& o, const std::string& default_out) {
  o.out = default_out;
  sub->add_option("-c,--config", o.config, "key=value config file");
  sub->add_option("-s,--set", o.sets, "override a config key (key=value), repeatable");
  sub->add_option("-o,--out", o.out, "output directory")->capture_default_str();
}

Config load_config(const CommonOpts& o) {
  Config c = o.config.empty() ? Config() : Config::load(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  return c;
}

void print_table(const ResultTable& t) { std::cout << t.to_csv(); }

int cmd_fig2(const CommonOpts& o) {
  const auto cfg = Fig2Config::from(load_config(o));
  const auto r = run_fig2(cfg, o.out);
  std::printf("log W2 at origin      %.6f\n", r.origin);
  std::printf("neon axis minimum     %.6f at ws=%.2f\n", r.neon_axis_min, r.neon_axis_argmin);
  std::printf("oracle axis minimum   %.6f at wo=%.2f\n", r.oracle_axis_min, r.oracle_axis_argmin);
  std::printf("wrote %s/grid.csv\n", o.out.c_str());
  return 0;
}

int cmd_exp1(const CommonOpts& o) {
  const auto cfg = ToyExp1Config::from(load_config(o), o.out);
  for (const auto& c : run_toy_exp1(cfg, o.out)) {
    std::printf("zeta=%-5g epochs=%-5llu argmin_w=%+.2f min_fid=%.5f\n", c.zeta,
                static_cast<unsigned long long>(c.ft_epochs), c.argmin_w(), c.min_fid());
  }
  return 0;
}

int cmd_exp2(const CommonOpts& o) {
  const auto cfg = ToyExp2Config::from(load_config(o), o.out);
  const auto pts = run_toy_exp2(cfg, o.out);
  std::vector<double> z, c;
  for (const auto& p : pts) {
    std::printf("zeta=%.2f mean_cos=%+.4f stderr=%.4f\n", p.zeta, p.mean_cos, p.stderr_cos);
    z.push_back(p.zeta);
    c.push_back(p.mean_cos);
  }
  if (pts.size() >= 2) std::printf("spearman(zeta, mean_cos) = %+.4f\n", spearman(z, c));
  return 0;
}

int cmd_ar(const CommonOpts& o) {
  const auto cfg = ArVerifyConfig::from(load_config(o));
  const auto r = run_ar_verify(cfg, o.out);
  for (const auto& s : r.samplers) {
    std::printf("%-12s %-6g expected=%+d  s<0: %5.1f%%  s>0: %5.1f%%\n", s.sampler.name(), s.sampler.param(), s.expected,
                100.0 * s.frac_s_neg, 100.0 * s.frac_s_pos);
  }
  double worst = 0.0;
  std::size_t sign_ok = 0;
  for (const auto& p : r.proxy) {
    worst = std::max(worst, p.max_rel_remainder);
    sign_ok += p.sign_ok;
  }
  std::printf("proxy: worst relative remainder %.4f, sign(w*) = -sign(s) in %zu/%zu\n", worst, sign_ok, r.proxy.size());
  return 0;
}

int cmd_transfer(const CommonOpts& o) {
  const auto cfg = TransferConfig::from(load_config(o), o.out);
  const auto r = run_transfer(cfg, o.out);
  std::printf("cross: argmin_w=%+.2f min_fid=%.5f\n", r.cross.argmin_w(), r.cross.min_fid());
  std::printf("self:  argmin_w=%+.2f min_fid=%.5f\n", r.self.argmin_w(), r.self.min_fid());
  return 0;
}

int cmd_concentration(const CommonOpts& o) {
  const auto cfg = ConcentrationConfig::from(load_config(o), o.out);
  print_table(run_concentration(cfg, o.out).table);
  return 0;
}

struct MergeOpts {
  std::string r, s, out;
  double w = 0.0;
};

int cmd_merge(const MergeOpts& m) {
  const Checkpoint r = read_checkpoint(m.r);
  const Checkpoint s = read_checkpoint(m.s);
  if (r.kind != s.kind) throw ConfigError("checkpoint kinds differ: " + std::string(to_string(r.kind)) + " vs " + to_string(s.kind));
  if (r.params.dim() != s.params.dim()) throw ConfigError("checkpoint parameter counts differ");
  write_checkpoint(m.out, neon_merge(r, s, m.w));
  std::printf("wrote %s (w=%s)\n", m.out.c_str(), format_double(m.w).c_str());
  return 0;
}

struct AlignOpts {
  std::string ckpt, real, synthetic, precond = "identity", out;
  double alpha = 0.0;
  bool curvature = false;
  std::uint64_t seed = 1;
  std::size_t mc_draws = 16;
};

SampleSet read_points(const std::string& path) {
  const NumericCsv csv = read_numeric_csv(path);
  if (csv.columns.size() != 2) throw IoError(path + ": expected two columns (x,y)");
  SampleSet pts;
  for (const auto& r : csv.rows) pts.push_back({r[0], r[1]});
  if (pts.empty()) throw IoError(path + ": no rows");
  return pts;
}

/// Empirical symbol frequencies from a one-column CSV of symbol indices.
std::vector<double> read_symbols(const std::string& path, std::size_t V) {
  const NumericCsv csv = read_numeric_csv(path);
  if (csv.columns.size() != 1) throw IoError(path + ": expected one column of symbol indices");
  std::vector<double> p(V, 0.0);
  for (const auto& r : csv.rows) {
    const double x = r[0];
    if (x < 0 || x >= static_cast<double>(V) || x != std::floor(x)) throw IoError(path + ": symbol out of range");
    p[static_cast<std::size_t>(x)] += 1.0;
  }
  if (csv.rows.empty()) throw IoError(path + ": no rows");
  for (double& v : p) v /= static_cast<double>(csv.rows.size());
  return p;
}

int cmd_align(const AlignOpts& a) {
  const Checkpoint ck = read_checkpoint(a.ckpt);
  if (a.precond != "identity" && a.precond != "adam") throw ConfigError("--precond must be identity or adam");
  if (a.precond == "adam" && ck.kind != ModelKind::ddpm) throw ConfigError("--precond adam needs a ddpm checkpoint");
  const std::size_t D = ck.params.dim();
  const Rng root(a.seed);

  GradFn grad_d, grad_s;
  DiagPreconditioner P = DiagPreconditioner::identity(D);
  switch (ck.kind) {
    case ModelKind::gaussian: {
      auto real = std::make_shared<SampleSet>(read_points(a.real));
      auto syn = std::make_shared<SampleSet>(read_points(a.synthetic));
      grad_d = [real](const ParamVector& th) { return gauss_nll_grad(GaussianParams::from_params(th), *real); };
      grad_s = [syn](const ParamVector& th) { return gauss_nll_grad(GaussianParams::from_params(th), *syn); };
      break;
    }
    case ModelKind::ddpm: {
      auto real = std::make_shared<SampleSet>(read_points(a.real));
      auto syn = std::make_shared<SampleSet>(read_points(a.synthetic));
      const MlpParams base = mlp_from_checkpoint(ck);
      const std::size_t T = std::stoul(ck.meta.at("T"));
      auto sched = std::make_shared<NoiseSchedule>(cosine_schedule(T));
      // Fixed noise streams make each gradient a deterministic function of theta.
      auto make = [&, sched, base](std::shared_ptr<SampleSet> data, const std::string& label) -> GradFn {
        const Rng r = root.fork(label);
        const std::size_t draws = a.mc_draws;
        return [=](const ParamVector& th) {
          const MlpParams p = MlpParams::unflatten(base.shape(), th);
          Rng rr = r;
          return ddpm_mean_grad(p, *data, *sched, rr, draws);
        };
      };
      grad_d = make(real, "r_d");
      grad_s = make(syn, "r_s");
      if (a.precond == "adam") {
        Rng pr = root.fork("precond");
        P = estimate_adam_preconditioner(base, *real, *sched, 256, pr, 1);
      }
      break;
    }
    case ModelKind::categorical: {
      auto pd = std::make_shared<std::vector<double>>(read_symbols(a.real, D));
      auto q = std::make_shared<std::vector<double>>(read_symbols(a.synthetic, D));
      grad_d = [pd](const ParamVector& th) { return categorical_risk_grad(th, *pd); };
      grad_s = [q](const ParamVector& th) { return categorical_risk_grad(th, *q); };
      break;
    }
  }
  const ParamVector r_d = grad_d(ck.params);
  const ParamVector r_s = grad_s(ck.params);
  std::optional<double> z;
  if (a.curvature) z = curvature_along(grad_d, ck.params, r_s, P);
  const AlignmentReport rep = alignment(r_d, r_s, P, a.alpha, z);
  ResultTable t(AlignmentReport::columns());
  t.add_row(rep.row());
  if (a.out.empty()) {
    print_table(t);
  } else {
    t.write(a.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy experiments for merging a model with its self-trained copy."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kCodeVersion));

  CommonOpts fig2, exp1, exp2, ar, tr, conc;
  add_common(app.add_subcommand("fig2-grid", "Gaussian two-direction W2 grid"), fig2, "runs/fig2");
  add_common(app.add_subcommand("toy-exp1", "DDPM FID vs merge weight per sampler"), exp1, "runs/exp1");
  add_common(app.add_subcommand("toy-exp2", "DDPM gradient cosine vs sampler scale"), exp2, "runs/exp2");
  add_common(app.add_subcommand("ar-verify", "categorical sampler enumeration and proxy check"), ar, "runs/ar");
  add_common(app.add_subcommand("transfer", "cross-architecture synthetic data transfer"), tr, "runs/transfer");
  add_common(app.add_subcommand("concentration", "short fine-tune displacement vs -P r_s"), conc, "runs/concentration");

  MergeOpts mo;
  auto* merge = app.add_subcommand("merge", "theta_r - w (theta_s - theta_r) on two checkpoint files");
  merge->add_option("--base", mo.r, "theta_r checkpoint")->required();
  merge->add_option("--synthetic", mo.s, "theta_s checkpoint")->required();
  merge->add_option("-w,--weight", mo.w, "merge weight w")->required();
  merge->add_option("-o,--out", mo.out, "output checkpoint")->required();

  AlignOpts ao;
  auto* align = app.add_subcommand("align", "alignment report of real vs synthetic gradients at a checkpoint");
  align->add_option("--ckpt", ao.ckpt, "checkpoint theta_r")->required();
  align->add_option("--real", ao.real, "real data CSV (x,y points, or one column of symbols)")->required();
  align->add_option("--synthetic", ao.synthetic, "synthetic data CSV, same layout")->required();
  align->add_option("--precond", ao.precond, "identity or adam (ddpm only)")->capture_default_str();
  align->add_option("--alpha", ao.alpha, "step size for w*");
  align->add_flag("--curvature", ao.curvature, "also estimate z along P r_s");
  align->add_option("--seed", ao.seed, "seed for diffusion noise draws")->capture_default_str();
  align->add_option("--mc-draws", ao.mc_draws, "noise draws per sample (ddpm)")->capture_default_str();
  align->add_option("-o,--out", ao.out, "write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    (void)worker_count();  // validate NEON_THREADS up front
    if (name == "fig2-grid") return cmd_fig2(fig2);
    if (name == "toy-exp1") return cmd_exp1(exp1);
    if (name == "toy-exp2") return cmd_exp2(exp2);
    if (name == "ar-verify") return cmd_ar(ar);
    if (name == "transfer") return cmd_transfer(tr);
    if (name == "concentration") return cmd_concentration(conc);
    if (name == "merge") return cmd_merge(mo);
    if (name == "align") return cmd_align(ao);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericDivergence& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
