#pragma once

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hcnaf/checkpoint.hpp"
#include "hcnaf/config.hpp"
#include "hcnaf/errors.hpp"
#include "hcnaf/mnist.hpp"
#include "hcnaf/model.hpp"
#include "hcnaf/pom.hpp"
#include "hcnaf/toy.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumeric = 2, kExitThreshold = 3 };

using AnyModel = std::variant<HcnafModel<double>, HcnafModel<float>, AffineModel<double>, AffineModel<float>>;

inline AnyModel make_model(const RunConfig& cfg) {
  const bool f64 = cfg.train.precision == 64;
  if (cfg.model == "hcnaf") {
    if (f64) return HcnafModel<double>(cfg.hyper, cfg.flow);
    return HcnafModel<float>(cfg.hyper, cfg.flow);
  }
  if (f64) return AffineModel<double>(cfg.affine());
  return AffineModel<float>(cfg.affine());
}

inline std::string mnist_images_path(const RunConfig& c) { return c.data_path + "-images-idx3-ubyte"; }
inline std::string mnist_labels_path(const RunConfig& c) { return c.data_path + "-labels-idx1-ubyte"; }

inline DigitData load_digits(const RunConfig& c, std::uint64_t seed) {
  auto im = load_idx_images(mnist_images_path(c));
  auto lab = load_idx_labels(mnist_labels_path(c));
  if (lab.size() != im.count) throw FormatError("digits: image and label counts differ");
  if (c.data_n > 0 && c.data_n < im.count) {
    im.count = c.data_n;
    im.pixels.resize(c.data_n * im.rows * im.cols);
    lab.resize(c.data_n);
  }
  if (im.rows != c.data_side || im.cols != c.data_side) im = downsample(im, c.data_side);
  return digits_dataset(im, lab, 10, c.data_lambda, seed);
}

// Training data of the configured experiment.
inline Dataset<double> build_dataset(const RunConfig& c) {
  if (c.experiment == "toy1") return toy1_dataset(c.data_n, c.data_seed);
  if (c.experiment == "toy2") return toy2_dataset(CondGaussianSpec{}, c.data_n, c.data_seed);
  if (c.experiment == "toypom") {
    const auto scenes = gen_toy_pom(c.data_n, c.data_seed);
    return pom_dataset(scenes);
  }
  return load_digits(c, c.data_seed).data;
}

namespace detail {

inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
Dataset<T> cast_dataset(const Dataset<double>& d) {
  if constexpr (std::is_same_v<T, double>) {
    return d;
  } else {
    return {d.x.template cast<T>(), d.c.template cast<T>()};
  }
}

inline void prepare_output_dir(const std::string& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ArgumentError(dir + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw ArgumentError("output directory " + dir + " is not empty (use --force)");
  } else {
    fs::create_directories(dir);
  }
}

inline std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(what, trim(item)));
  return out;
}

struct Loaded {
  RunConfig cfg;
  AnyModel model;
};

inline Loaded load_model(const std::string& path) {
  const auto f = read_checkpoint(path);
  Loaded l{parse_config(f.config), {}};
  l.cfg.validate();
  l.model = make_model(l.cfg);
  std::visit([&](auto& m) { load_params(m, f); }, l.model);
  return l;
}

struct ConditionFlags {
  std::string condition;
  int scenario = -1;
  double dt = -1;
  int label = -1;
};

inline std::vector<double> resolve_condition(const RunConfig& cfg, const ConditionFlags& f) {
  std::vector<double> c;
  if (cfg.experiment == "toypom" && f.scenario >= 0) {
    if (f.dt < 0) throw ArgumentError("--scenario needs --dt");
    c = pom_condition(std::size_t(f.scenario), f.dt);
  } else if (cfg.experiment == "mnist" && f.label >= 0) {
    if (f.label > 9) throw ArgumentError("--label must be 0..9");
    c.assign(10, 0.0);
    c[std::size_t(f.label)] = 1.0;
  } else {
    if (f.condition.empty()) throw ArgumentError("a condition is required (--condition)");
    c = parse_doubles(f.condition, "--condition");
  }
  if (c.size() != cfg.hyper.cond_dim) {
    throw ArgumentError("condition has " + std::to_string(c.size()) + " values, model expects " +
                        std::to_string(cfg.hyper.cond_dim));
  }
  return c;
}

inline void kv(std::ostream& out, const std::string& k, double v) { out << k << "=" << num(v) << "\n"; }

template <typename Model>
void eval_toy1(const Model& m, std::size_t n, std::uint64_t seed, std::ostream& out) {
  for (std::size_t i = 0; i < kToy1Grids.size(); ++i) {
    const std::size_t k = kToy1Grids[i];
    const auto spec = GridGaussianSpec::for_grid(k);
    const auto nll = eval_nll(m, gen_grid_gaussians(spec, n, seed + 31 * i + 1));
    const auto floor = mixture_entropy_mc(spec, 200000, seed + 31 * i + 2);
    const std::string p = "toy1.k" + std::to_string(k) + ".";
    kv(out, p + "nll", nll.mean);
    kv(out, p + "nll_se", nll.se);
    kv(out, p + "floor", floor.mean);
    kv(out, p + "floor_se", floor.se);
    kv(out, p + "gap", nll.mean - floor.mean);
  }
}

template <typename Model>
void eval_toy2(const Model& m, std::size_t n, std::uint64_t seed, std::ostream& out) {
  const CondGaussianSpec spec;
  auto run = [&](const std::string& tag, const std::vector<std::array<double, 2>>& cs) {
    double ce = 0, kl = 0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
      const auto r = kl_estimate(m, spec, cs[i], n, seed + 97 * i + (tag == "unseen" ? 5000 : 0));
      const std::string p = "toy2." + tag + "." + std::to_string(i) + ".";
      kv(out, p + "ce", r.cross_entropy);
      kv(out, p + "ce_se", r.se);
      kv(out, p + "kl", r.kl);
      ce += r.cross_entropy / double(cs.size());
      kl += r.kl / double(cs.size());
    }
    kv(out, "toy2." + tag + ".ce", ce);
    kv(out, "toy2." + tag + ".kl", kl);
  };
  kv(out, "toy2.entropy", gaussian_entropy(spec.sigma));
  run("train", spec.c_train);
  run("unseen", spec.c_unseen);
}

// Left / right mass of the symmetric scenario after the junction.
template <typename Model>
double pom_lr_ratio(const Model& m, double dt) {
  const auto c = pom_condition(0, dt);
  const auto g = density_grid(m, c, kPomExtent, 240, 240);
  const double left = g.mass_where([](double x, double) { return x < -kPomRoadHalfWidth; });
  const double right = g.mass_where([](double x, double) { return x > kPomRoadHalfWidth; });
  return left / right;
}

template <typename Model>
void eval_toypom(const Model& m, std::size_t n, std::uint64_t seed, std::ostream& out) {
  double worst = 0;
  for (std::size_t sc = 0; sc < kPomScenarios; ++sc)
    for (int dt = 1; dt <= 4; ++dt) {
      const auto k = pom_kl(m, sc, dt, n, seed + 13 * sc + dt);
      const std::string p = "toypom.s" + std::to_string(sc) + ".dt" + std::to_string(dt) + ".";
      kv(out, p + "kl", k.mean);
      kv(out, p + "kl_se", k.se);
      worst = std::max(worst, k.mean);
    }
  kv(out, "toypom.kl_max", worst);
  for (int dt = 2; dt <= 4; ++dt) kv(out, "toypom.s0.dt" + std::to_string(dt) + ".lr_ratio", pom_lr_ratio(m, dt));
  const auto eps = gen_toy_pom_episodes(std::max<std::size_t>(1, n / 4), seed + 777);
  const auto e = extra_nats(m, pom_dataset(eps), 0.01, 4, 1, 2, seed + 778);
  kv(out, "toypom.extra_nats", e.mean);
  kv(out, "toypom.extra_nats_se", e.se);
}

template <typename Model>
void eval_mnist(const Model& m, const RunConfig& cfg, std::uint64_t seed, std::ostream& out) {
  const auto d = load_digits(cfg, seed);
  const auto lp = mixture_log_prob(m, d.data.x, 10);
  std::vector<double> nll(lp.size()), bpp(lp.size());
  for (std::size_t j = 0; j < lp.size(); ++j) {
    nll[j] = -lp[j];
    bpp[j] = bits_per_pixel(lp[j], d.log_jacobian[j], cfg.flow.dim);
  }
  const auto a = mean_and_se(nll), b = mean_and_se(bpp);
  kv(out, "mnist.nll_logit", a.mean);
  kv(out, "mnist.nll_logit_se", a.se);
  kv(out, "mnist.bpp", b.mean);
  kv(out, "mnist.bpp_se", b.se);
}

template <typename Model>
Dataset<typename Model::Real> pick_batch(const Dataset<double>& d, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, idx.size()));
  return cast_dataset<typename Model::Real>(d.subset(idx));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

struct TrainFlags {
  std::string config;
  std::string output;
  bool force = false;
  bool verbose = false;
};

inline int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(f.config);
  if (!f.output.empty()) cfg.output_dir = f.output;
  cfg.validate();
  detail::prepare_output_dir(cfg.output_dir, f.force);
  const auto data = build_dataset(cfg);
  AnyModel model = make_model(cfg);
  TrainResult res;
  std::visit(
      [&](auto& m) {
        using T = typename std::decay_t<decltype(m)>::Real;
        m.init(cfg.train.seed);
        res = train(m, detail::cast_dataset<T>(data), cfg.train, [&](const MetricsRow& r) {
          if (f.verbose) err << "iter " << r.iter << " train " << r.train_nll << " val " << r.val_nll << "\n";
        });
        // The echo leaves out the output directory so reruns elsewhere match byte for byte.
        RunConfig echo = cfg;
        echo.output_dir.clear();
        save_checkpoint(cfg.output_dir + "/checkpoint.bin", m, write_config(echo));
      },
      model);
  std::ofstream csv(cfg.output_dir + "/metrics.csv", std::ios::trunc);
  csv << "iter,train_nll,val_nll,lr\n";
  for (const auto& r : res.log) {
    csv << r.iter << "," << detail::num(r.train_nll) << "," << detail::num(r.val_nll) << "," << detail::num(r.lr)
        << "\n";
  }
  std::ofstream(cfg.output_dir + "/config.txt", std::ios::trunc) << write_config(cfg);
  detail::kv(out, "best_val_nll", res.best_val);
  out << "best_iter=" << res.best_iter << "\n";
  out << "checkpoint=" << cfg.output_dir << "/checkpoint.bin\n";
  return kExitOk;
}

struct EvalFlags {
  std::string checkpoint;
  std::size_t n = 10000;
  std::uint64_t seed = 2024;
};

inline int cmd_eval(const EvalFlags& f, std::ostream& out) {
  const auto l = detail::load_model(f.checkpoint);
  out << "experiment=" << l.cfg.experiment << "\nmodel=" << l.cfg.model << "\n";
  std::visit(
      [&](const auto& m) {
        if (l.cfg.experiment == "toy1") detail::eval_toy1(m, f.n, f.seed, out);
        if (l.cfg.experiment == "toy2") detail::eval_toy2(m, f.n, f.seed, out);
        if (l.cfg.experiment == "toypom") detail::eval_toypom(m, f.n, f.seed, out);
        if (l.cfg.experiment == "mnist") detail::eval_mnist(m, l.cfg, f.seed, out);
      },
      l.model);
  return kExitOk;
}

struct DensityFlags {
  std::string checkpoint;
  detail::ConditionFlags cond;
  std::string bounds = "-3,3,-3,3";
  std::size_t res = 100;
  std::string format = "csv";
  std::string output;
};

inline std::string density_csv(const DensityGrid& g) {
  std::string s = "x,y,density\n";
  for (std::size_t iy = 0; iy < g.res_y; ++iy)
    for (std::size_t ix = 0; ix < g.res_x; ++ix)
      s += detail::num(g.x_at(ix)) + "," + detail::num(g.y_at(iy)) + "," + detail::num(g.at(ix, iy)) + "\n";
  return s;
}

// Binary P5, max-normalised to 0..255, first row = top of the bounds.
inline std::string density_pgm(const DensityGrid& g) {
  double mx = 0;
  for (double v : g.values) mx = std::max(mx, v);
  std::string s = "P5\n" + std::to_string(g.res_x) + " " + std::to_string(g.res_y) + "\n255\n";
  for (std::size_t r = 0; r < g.res_y; ++r) {
    const std::size_t iy = g.res_y - 1 - r;
    for (std::size_t ix = 0; ix < g.res_x; ++ix) {
      const double v = mx > 0 ? g.at(ix, iy) / mx : 0.0;
      s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
  }
  return s;
}

inline int cmd_density(const DensityFlags& f, std::ostream& out) {
  if (f.format != "csv" && f.format != "pgm") throw ArgumentError("--format must be csv or pgm");
  const auto l = detail::load_model(f.checkpoint);
  const auto c = detail::resolve_condition(l.cfg, f.cond);
  const auto b = detail::parse_doubles(f.bounds, "--bounds");
  if (b.size() != 4) throw ArgumentError("--bounds expects x0,x1,y0,y1");
  const Bounds bounds{b[0], b[1], b[2], b[3]};
  const auto g = std::visit([&](const auto& m) { return density_grid(m, c, bounds, f.res); }, l.model);
  const std::string body = f.format == "csv" ? density_csv(g) : density_pgm(g);
  if (f.output.empty() || f.output == "-") {
    out << body;
  } else {
    write_bytes(f.output, body);
  }
  return kExitOk;
}

struct SampleFlags {
  std::string checkpoint;
  detail::ConditionFlags cond;
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  std::string output;
};

inline int cmd_sample(const SampleFlags& f, std::ostream& out, std::ostream& err) {
  const auto l = detail::load_model(f.checkpoint);
  const auto c = detail::resolve_condition(l.cfg, f.cond);
  std::string s;
  for (std::size_t d = 0; d < l.cfg.flow.dim; ++d) s += "x" + std::to_string(d + 1) + ",";
  s += "log_prob\n";
  std::size_t rejected = 0;
  std::visit(
      [&](const auto& m) {
        using T = typename std::decay_t<decltype(m)>::Real;
        const std::vector<T> ct(c.begin(), c.end());
        const auto set = m.sample(ct, f.n, f.seed);
        rejected = set.rejected;
        for (std::size_t j = 0; j < set.x.cols(); ++j) {
          for (std::size_t d = 0; d < set.x.rows(); ++d) s += detail::num(double(set.x(d, j))) + ",";
          s += detail::num(double(set.log_prob[j])) + "\n";
        }
      },
      l.model);
  if (rejected) err << "rejected=" << rejected << "\n";
  if (f.output.empty() || f.output == "-") {
    out << s;
  } else {
    write_bytes(f.output, s);
  }
  return kExitOk;
}

struct GradCheckFlags {
  std::string config;
  double tolerance = -1;  // < 0: 1e-4 at 64-bit, 1e-2 at 32-bit
  double fraction = 0.05;
  std::size_t warmup = 20;  // Adam steps taken before checking
  std::size_t batch = 64;
  std::uint64_t seed = 7;
};

inline int cmd_gradcheck(const GradCheckFlags& f, std::ostream& out) {
  RunConfig cfg = load_config(f.config);
  cfg.validate();
  const double tol = f.tolerance >= 0 ? f.tolerance : (cfg.train.precision == 64 ? 1e-4 : 1e-2);
  const auto data = build_dataset(cfg);
  AnyModel model = make_model(cfg);
  GradCheckResult r;
  std::string worst;
  std::visit(
      [&](auto& m) {
        using M = std::decay_t<decltype(m)>;
        using T = typename M::Real;
        m.init(cfg.train.seed);
        // Move off the initial point so every parameter carries gradient.
        AdamState<T> adam;
        std::vector<Matrix<T>> grads;
        for (std::size_t i = 0; i < f.warmup; ++i) {
          nll_loss_and_grad(m, detail::pick_batch<M>(data, f.batch, f.seed + 1 + i), grads);
          adam_step(adam, m.params(), grads, cfg.train.learning_rate);
        }
        r = grad_check(m, detail::pick_batch<M>(data, f.batch, f.seed), f.fraction, f.seed);
        worst = m.param_names()[r.worst_param];
      },
      model);
  detail::kv(out, "max_rel_error", r.max_rel_error);
  out << "checked=" << r.checked << "\nworst=" << worst << "[" << r.worst_entry << "]\n";
  detail::kv(out, "tolerance", tol);
  const bool ok = r.max_rel_error < tol;
  out << "result=" << (ok ? "pass" : "fail") << "\n";
  return ok ? kExitOk : kExitThreshold;
}

inline int cmd_paramcount(const std::string& config_path, std::ostream& out) {
  RunConfig cfg = load_config(config_path);
  cfg.flow.validate();
  cfg.hyper.validate();
  const auto p = param_counts(cfg.flow, cfg.hyper);
  out << "N_W=" << p.n_w << "\nN_B=" << p.n_b << "\nN_H=" << p.n_h << "\ntotal=" << p.total
      << "\nstored_w=" << p.stored_w << "\nhypernet_allocated=" << p.hypernet_allocated << "\n";
  return kExitOk;
}

// Full command line. Usage and format errors exit 1, numeric failures 2,
// a failed gradient check 3.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"hcnaf: conditional autoregressive density models", "hcnaf"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("config", tf.config, "config file")->required();
  train_cmd->add_option("-o,--output", tf.output, "output directory (overrides output_dir)");
  train_cmd->add_flag("--force", tf.force, "allow a non-empty output directory");
  train_cmd->add_flag("-v,--verbose", tf.verbose, "print validation rows to stderr");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its experiment");
  eval_cmd->add_option("checkpoint", ef.checkpoint)->required();
  eval_cmd->add_option("-n", ef.n, "Monte Carlo samples per condition");
  eval_cmd->add_option("--seed", ef.seed);

  auto add_cond = [](CLI::App* cmd, detail::ConditionFlags& c) {
    cmd->add_option("--condition", c.condition, "comma-separated condition vector");
    cmd->add_option("--scenario", c.scenario, "toypom scenario 0..3");
    cmd->add_option("--dt", c.dt, "toypom horizon in seconds");
    cmd->add_option("--label", c.label, "mnist digit label");
  };

  DensityFlags df;
  auto* density_cmd = app.add_subcommand("density", "evaluate the density on a grid");
  density_cmd->add_option("checkpoint", df.checkpoint)->required();
  add_cond(density_cmd, df.cond);
  density_cmd->add_option("--bounds", df.bounds, "x0,x1,y0,y1");
  density_cmd->add_option("--res", df.res, "cells per axis");
  density_cmd->add_option("--format", df.format, "csv or pgm");
  density_cmd->add_option("-o,--output", df.output, "output file (default stdout)");

  SampleFlags sf;
  auto* sample_cmd = app.add_subcommand("sample", "draw samples with their log-probabilities");
  sample_cmd->add_option("checkpoint", sf.checkpoint)->required();
  add_cond(sample_cmd, sf.cond);
  sample_cmd->add_option("-n", sf.n);
  sample_cmd->add_option("--seed", sf.seed);
  sample_cmd->add_option("-o,--output", sf.output);

  GradCheckFlags gf;
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare gradients with finite differences");
  grad_cmd->add_option("config", gf.config)->required();
  grad_cmd->add_option("--tolerance", gf.tolerance);
  grad_cmd->add_option("--fraction", gf.fraction, "fraction of scalars checked");
  grad_cmd->add_option("--warmup", gf.warmup, "training steps before the check");
  grad_cmd->add_option("--batch", gf.batch);
  grad_cmd->add_option("--seed", gf.seed);

  std::string pc_config;
  auto* pc_cmd = app.add_subcommand("paramcount", "parameter counts of a config");
  pc_cmd->add_option("config", pc_config)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(tf, out, err);
    if (*eval_cmd) return cmd_eval(ef, out);
    if (*density_cmd) return cmd_density(df, out);
    if (*sample_cmd) return cmd_sample(sf, out, err);
    if (*grad_cmd) return cmd_gradcheck(gf, out);
    if (*pc_cmd) return cmd_paramcount(pc_config, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const SaturationError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const RangeError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace hcnaf
