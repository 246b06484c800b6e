// Command-line driver for the normalization experiments. Every command
// emits machine-readable CSV/JSON into --out; plotting is out of scope.
//
// Exit codes: 0 ok, 1 gradient check failure, 2 configuration error,
// 3 runtime failure (including divergence).

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "fbn/autodiff.hpp"
#include "fbn/data.hpp"
#include "fbn/models.hpp"
#include "fbn/stats.hpp"
#include "fbn/train.hpp"

using json = nlohmann::json;
using namespace fbn;
namespace fs = std::filesystem;

namespace {

struct DataOpts {
  std::string dir;  // if it holds IDX files, load them
  size_t train_count = 8192;
  size_t test_count = 2048;
  uint64_t seed = 1001;
};

struct ModelOpts {
  std::string arch = "lenet5";
  std::string norm = "fbn";
  std::string slot = "fc84";  // "all" applies the kind at every slot
  double t_sigma = 4.0;
  size_t groups = 2;
  std::string grad_mode = "exact";
};

struct OptOpts {
  std::string optimizer = "sgd_momentum";
  double lr = 0.01;
  double momentum = 0.9;
  size_t decay_every = 0;
  double decay_factor = 0.1;
};

std::string out_dir;

Tensor random_normal(const std::vector<size_t>& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor t(shape);
  for (size_t i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

void add_data_flags(CLI::App* cmd, DataOpts& d) {
  const char* env = std::getenv("FBN_DATA_DIR");
  if (env) d.dir = env;
  cmd->add_option("--data", d.dir, "directory with IDX files (overrides FBN_DATA_DIR)");
  cmd->add_option("--train-count", d.train_count, "synthetic train set size");
  cmd->add_option("--test-count", d.test_count, "synthetic test set size");
  cmd->add_option("--data-seed", d.seed, "synthetic data seed");
}

void add_model_flags(CLI::App* cmd, ModelOpts& m) {
  cmd->add_option("--arch", m.arch, "lenet5 or mlp");
  cmd->add_option("--norm", m.norm, "none|bn|fbn|gn|fgn");
  cmd->add_option("--slot", m.slot, "insertion slot name, or 'all'");
  cmd->add_option("--tsigma", m.t_sigma, "filtering threshold in sigma units");
  cmd->add_option("--groups", m.groups, "group count for gn/fgn");
  cmd->add_option("--grad-mode", m.grad_mode, "exact or masked");
}

void add_opt_flags(CLI::App* cmd, OptOpts& o) {
  cmd->add_option("--optimizer", o.optimizer, "sgd_momentum or adam");
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--momentum", o.momentum, "SGD momentum");
  cmd->add_option("--decay-every", o.decay_every, "step-decay interval (0 = constant)");
  cmd->add_option("--decay-factor", o.decay_factor, "step-decay multiplier");
}

std::pair<Dataset, Dataset> load_data(const DataOpts& d) {
  if (!d.dir.empty()) {
    fs::path p(d.dir);
    auto ti = p / "train-images-idx3-ubyte", tl = p / "train-labels-idx1-ubyte";
    auto vi = p / "t10k-images-idx3-ubyte", vl = p / "t10k-labels-idx1-ubyte";
    if (fs::exists(ti) && fs::exists(tl) && fs::exists(vi) && fs::exists(vl))
      return {load_mnist_idx(ti.string(), tl.string()),
              load_mnist_idx(vi.string(), vl.string())};
    throw std::invalid_argument("data directory lacks the four IDX files: " + d.dir);
  }
  return {make_synthetic_digits(d.train_count, d.seed, 0.01, "train"),
          make_synthetic_digits(d.test_count, d.seed + 1, 0.0, "test")};
}

ModelSpec make_spec(const ModelOpts& m, uint64_t seed) {
  ModelSpec spec;
  spec.architecture = m.arch;
  spec.set_all_slots("none");
  if (m.norm != "none") {
    if (m.slot == "all")
      spec.set_all_slots(m.norm);
    else
      spec.slot_norms[m.slot] = m.norm;
  }
  spec.norm.t_sigma = m.t_sigma;
  spec.norm.num_groups = m.groups;
  if (m.grad_mode == "masked")
    spec.norm.grad_mode = GradMode::Masked;
  else if (m.grad_mode != "exact")
    throw std::invalid_argument("grad-mode must be exact or masked");
  spec.seed = seed;
  return spec;
}

OptimizerConfig make_opt(const OptOpts& o) {
  OptimizerConfig cfg;
  cfg.kind = o.optimizer;
  cfg.lr = o.lr;
  cfg.momentum = o.momentum;
  cfg.decay_every = o.decay_every;
  cfg.decay_factor = o.decay_factor;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const std::string& name) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / name);
  if (!f) throw std::runtime_error("cannot write " + name + " in " + out_dir);
  return f;
}

void write_json(const std::string& name, const json& j) {
  auto f = open_out(name);
  f << j.dump(2) << "\n";
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

double std_of(const std::vector<double>& v) {
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.empty() ? 0.0 : std::sqrt(s / double(v.size()));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ------------------------------------------------------------------ train
int cmd_train(const DataOpts& d, const ModelOpts& m, const OptOpts& o, size_t iters,
              size_t batch, size_t seeds, uint64_t seed0, size_t eval_every) {
  auto [train_ds, test_ds] = load_data(d);
  OptimizerConfig opt = make_opt(o);

  std::vector<double> finals;
  json summary;
  for (size_t s = 0; s < seeds; ++s) {
    Model model(make_spec(m, seed0 + s));
    TrainConfig tc;
    tc.iterations = iters;
    tc.batch_size = batch;
    tc.eval_every = eval_every;
    tc.seed = seed0 + 100 + s;
    RunRecord rec = train(model, train_ds, test_ds, opt, tc);

    auto f = open_out("curve_seed" + std::to_string(s) + ".csv");
    f << "iteration,loss,test_accuracy\n";
    size_t e = 0;
    for (size_t i = 0; i < rec.train_loss.size(); ++i) {
      f << (i + 1) << "," << rec.train_loss[i] << ",";
      if (e < rec.eval_iterations.size() && rec.eval_iterations[e] == i + 1)
        f << rec.test_accuracy[e++];
      f << "\n";
    }
    finals.push_back(rec.final_accuracy);
    summary["runs"].push_back({{"seed", seed0 + s},
                               {"final_accuracy", rec.final_accuracy},
                               {"wall_time_sec", rec.wall_time_sec},
                               {"degenerate_slices", rec.degenerate_slices}});
    std::printf("seed %zu: accuracy %.4f (%.1fs)\n", s, rec.final_accuracy,
                rec.wall_time_sec);
  }
  summary["mean_accuracy"] = mean_of(finals);
  summary["std_accuracy"] = std_of(finals);
  summary["norm"] = m.norm;
  summary["t_sigma"] = m.t_sigma;
  summary["iterations"] = iters;
  summary["batch"] = batch;
  write_json("summary.json", summary);
  std::printf("mean accuracy %.4f +- %.4f\n", mean_of(finals), std_of(finals));
  return 0;
}

// ------------------------------------------------------------------- grid
int cmd_grid(const DataOpts& d, const ModelOpts& m, const OptOpts& o,
             std::vector<double> tsigmas, std::vector<size_t> batches, size_t iters,
             size_t seeds) {
  if (tsigmas.empty() || batches.empty())
    throw std::invalid_argument("grid: --tsigma-list and --batch-list must be non-empty");
  auto [train_ds, test_ds] = load_data(d);
  OptimizerConfig opt = make_opt(o);

  auto f = open_out("grid.csv");
  f << "batch_size,t_sigma,mean_acc,std_acc\n";
  for (size_t batch : batches) {
    for (double t : tsigmas) {
      std::vector<double> acc;
      for (size_t s = 0; s < seeds; ++s) {
        ModelOpts mm = m;
        mm.t_sigma = t;
        Model model(make_spec(mm, 10 + s));
        TrainConfig tc;
        tc.iterations = iters;
        tc.batch_size = batch;
        tc.seed = 110 + s;
        acc.push_back(train(model, train_ds, test_ds, opt, tc).final_accuracy);
      }
      f << batch << "," << t << "," << mean_of(acc) << "," << std_of(acc) << "\n";
      f.flush();
      std::printf("batch %zu T=%.2f: %.4f +- %.4f\n", batch, t, mean_of(acc),
                  std_of(acc));
    }
  }
  return 0;
}

// --------------------------------------------------------- moment-consistency
int cmd_moment_consistency(const DataOpts& d, const ModelOpts& m, const OptOpts& o,
                           size_t steps, size_t large, size_t small, double t_sigma,
                           uint64_t seed) {
  auto [train_ds, test_ds] = load_data(d);
  (void)test_ds;
  ModelOpts mm = m;
  mm.norm = "bn";  // reference training runs plain batch normalization
  Model model(make_spec(mm, seed));

  MomentConsistencyConfig mc;
  mc.steps = steps;
  mc.large_batch = large;
  mc.small_batch = small;
  mc.t_sigma = t_sigma;
  mc.seed = seed;
  auto res = moment_consistency_experiment(model, train_ds, make_opt(o), mc);

  auto f = open_out("moment_consistency.csv");
  f << "step,bn_mean_dev,fbn_mean_dev,bn_var_dev,fbn_var_dev\n";
  for (size_t i = 0; i < res.bn_mean_dev.size(); ++i)
    f << i << "," << res.bn_mean_dev[i] << "," << res.fbn_mean_dev[i] << ","
      << res.bn_var_dev[i] << "," << res.fbn_var_dev[i] << "\n";

  json j;
  j["slot"] = res.slot;
  j["mean_dev_ratio"] = mean_of(res.bn_mean_dev) / mean_of(res.fbn_mean_dev);
  j["var_dev_ratio"] = mean_of(res.bn_var_dev) / mean_of(res.fbn_var_dev);
  write_json("moment_consistency_summary.json", j);
  std::printf("mean-deviation ratio bn/fbn: %.3f, variance ratio: %.3f\n",
              double(j["mean_dev_ratio"]), double(j["var_dev_ratio"]));
  return 0;
}

// -------------------------------------------------------------- landscape
int cmd_landscape(const DataOpts& d, const ModelOpts& m, const OptOpts& o, size_t iters,
                  size_t batch, size_t probe_every, std::vector<double> step_sizes,
                  uint64_t seed) {
  auto [train_ds, test_ds] = load_data(d);
  Model model(make_spec(m, seed));
  TrainConfig tc;
  tc.iterations = iters;
  tc.batch_size = batch;
  tc.seed = seed + 100;
  tc.probe_every = probe_every;
  if (!step_sizes.empty()) tc.probe_steps = step_sizes;
  RunRecord rec = train(model, train_ds, test_ds, make_opt(o), tc);

  auto f = open_out("landscape.csv");
  f << "iteration,base_loss,base_grad_norm,loss_variance,loss_min,loss_max,"
       "grad_variance,grad_min,grad_max\n";
  std::vector<double> vars;
  for (const auto& p : rec.probes) {
    f << p.iteration << "," << p.base_loss << "," << p.base_grad_norm << ","
      << p.loss_variance << "," << p.loss_min << "," << p.loss_max << ","
      << p.grad_variance << "," << p.grad_min << "," << p.grad_max << "\n";
    vars.push_back(p.loss_variance);
  }
  std::printf("%zu probes, median loss variance %.3e, final accuracy %.4f\n",
              rec.probes.size(), median_of(vars), rec.final_accuracy);
  return 0;
}

// ---------------------------------------------------------------- profile
int cmd_profile(const DataOpts& d, const ModelOpts& m, const OptOpts& o, size_t iters,
                size_t batch, size_t stream, uint64_t seed) {
  ActivationProfiler prof;
  if (stream > 0) {
    // pure N(0,1) stream, the no-network sanity case
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor x({stream});
    for (size_t i = 0; i < stream; ++i) x[i] = g(rng);
    prof.observe("stream", x);
  } else {
    auto [train_ds, test_ds] = load_data(d);
    Model model(make_spec(m, seed));
    for (auto& [slot, layer] : model.norm_layers()) {
      std::string name = slot;
      layer->on_normalized = [&prof, name](const Tensor& xh) { prof.observe(name, xh); };
    }
    TrainConfig tc;
    tc.iterations = iters;
    tc.batch_size = batch;
    tc.seed = seed + 100;
    train(model, train_ds, test_ds, make_opt(o), tc);
  }

  auto bands = prof.finalize();
  auto f = open_out("percentiles.csv");
  f << "layer,samples,min,p1,p25,p50,p75,p99,max,exceed_2,exceed_4,exceed_7,exceed_14\n";
  for (const auto& b : bands) {
    f << b.layer << "," << b.samples << "," << b.min << "," << b.p1 << "," << b.p25
      << "," << b.p50 << "," << b.p75 << "," << b.p99 << "," << b.max;
    for (size_t e : b.exceedance) f << "," << e;
    f << "\n";
    std::printf("%s: %zu samples, p1/p99 = %.3f/%.3f, >7 sigma: %zu\n",
                b.layer.c_str(), b.samples, b.p1, b.p99, b.exceedance[2]);
  }
  return 0;
}

// ---------------------------------------------------------------- ablation
int cmd_ablation(const DataOpts& d, const ModelOpts& m, const OptOpts& o,
                 std::vector<std::string> placements, size_t reps, size_t iters,
                 size_t batch) {
  auto [train_ds, test_ds] = load_data(d);
  ModelSpec base;
  base.architecture = m.arch;
  base.norm.kind = norm_kind_from_name(m.norm == "none" ? "bn" : m.norm);
  base.norm.t_sigma = m.t_sigma;
  base.norm.num_groups = m.groups;
  base.seed = 10;
  if (placements.empty()) {
    placements = ModelSpec::slot_names(m.arch);
    placements.insert(placements.begin(), "none");
    placements.push_back("all");
  }
  TrainConfig tc;
  tc.iterations = iters;
  tc.batch_size = batch;
  tc.seed = 110;
  auto results =
      layer_placement_ablation(base, train_ds, test_ds, placements, reps, make_opt(o), tc);

  auto f = open_out("ablation.csv");
  f << "placement,mean_acc,std_acc,repetitions\n";
  for (const auto& r : results) {
    f << r.placement << "," << r.mean_acc << "," << r.std_acc << ","
      << r.accuracy.size() << "\n";
    std::printf("%-8s %.4f +- %.4f\n", r.placement.c_str(), r.mean_acc, r.std_acc);
  }
  return 0;
}

// --------------------------------------------------------------- gradcheck
int cmd_gradcheck(const ModelOpts& m, size_t trials, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> dn(2, 16), dc(1, 8), ds(1, 6);
  std::uniform_real_distribution<double> ug(0.5, 1.5);
  NormKind kind = norm_kind_from_name(m.norm == "none" ? "fbn" : m.norm);
  bool masked = m.grad_mode == "masked";

  double worst = 0;
  double worst_beta_gap = 0;
  size_t failures = 0;
  for (size_t trial = 0; trial < trials; ++trial) {
    size_t N = dn(rng), C = dc(rng) * (m.groups ? m.groups : 1);
    size_t H = ds(rng), W = ds(rng);
    NormConfig cfg;
    cfg.kind = kind;
    cfg.t_sigma = m.t_sigma;
    cfg.num_groups = m.groups;
    cfg.grad_mode = masked ? GradMode::Masked : GradMode::Exact;
    if (cfg.grouped() && (H * W * (C / cfg.num_groups) < 2)) H = W = 2;

    Tensor x = random_normal({N, C, H, W}, rng);
    std::uniform_int_distribution<size_t> pos(0, x.size() - 1);
    x[pos(rng)] += 15.0;
    AffineParams affine;
    affine.init(C);
    for (size_t c = 0; c < C; ++c) affine.gamma.value[c] = ug(rng);
    Tensor w = random_normal(x.shape(), rng);

    Tensor y;
    NormCache cache;
    norm_forward_train(x, affine, cfg, nullptr, y, cache);
    Tensor dx, dgamma, dbeta;
    norm_backward(w, cache, affine, cfg, dx, dgamma, dbeta);

    if (masked) {
      // document the published-form discrepancy: beta gradient misses the
      // masked-out upstream terms exactly
      for (size_t c = 0; c < C; ++c) {
        double full = 0, masked = 0;
        for (size_t i = 0; i < x.size(); ++i) {
          if (cache.map.channel_of(i) != c) continue;
          full += w[i];
          masked += cache.mask[i] * w[i];
        }
        worst_beta_gap =
            std::max(worst_beta_gap, std::abs((full - masked) - (full - dbeta[c])));
      }
      continue;
    }

    auto loss_of = [&](const Tensor& xin) {
      Tensor yy;
      NormCache cc;
      norm_forward_train(xin, affine, cfg, nullptr, yy, cc);
      double s = 0;
      for (size_t i = 0; i < yy.size(); ++i) s += w[i] * yy[i];
      return s;
    };
    std::vector<char> sample(x.size(), 0);
    for (size_t k = 0; k < std::min<size_t>(x.size(), 128); ++k) sample[pos(rng)] = 1;
    auto exclude = [&](size_t i) {
      if (!sample[i]) return true;
      if (!cfg.filtered()) return false;
      size_t s = cache.map.slice_of(i);
      double z = (x[i] - cache.candidate_mu[s]) / cache.candidate_sigma[s];
      return std::abs(std::abs(z) - cfg.t_sigma) < 0.1;
    };
    auto rep = finite_difference_check(loss_of, dx, x, 1e-6, 1e-5, exclude);
    worst = std::max(worst, rep.max_rel_err);
    failures += !rep.passed;
  }

  if (masked) {
    std::printf("masked mode: %zu trials, max |beta-gradient identity residual| %.3e\n",
                trials, worst_beta_gap);
    return 0;
  }
  std::printf("exact mode: %zu trials, max rel err %.3e (tolerance 1e-5), %zu failures\n",
              trials, worst, failures);
  return failures == 0 ? 0 : 1;
}

// -------------------------------------------------------------------- bench
int cmd_bench(size_t repeats, std::vector<size_t> sizes) {
  if (sizes.empty())
    for (size_t n = 1 << 12; n <= (1 << 20); n <<= 2) sizes.push_back(n);
  std::mt19937_64 rng(7);

  auto timed = [&](auto&& fn) {
    std::vector<double> t;
    for (size_t r = 0; r < repeats; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      fn();
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                      .count());
    }
    std::sort(t.begin(), t.end());
    double med = median_of(t);
    double iqr = t.size() > 1 ? t[(3 * t.size()) / 4] - t[t.size() / 4] : 0.0;
    return std::make_pair(med, iqr);
  };

  auto f = open_out("bench.csv");
  f << "n,kind,median_sec,iqr_sec\n";
  AffineParams affine;
  affine.init(1);
  for (size_t n : sizes) {
    Tensor x = random_normal({n, 1}, rng);
    Tensor flat = x;
    flat.reshape({n});
    Tensor g = random_normal({n, 1}, rng);

    for (auto kind : {NormKind::BN, NormKind::FBN}) {
      NormConfig cfg;
      cfg.kind = kind;
      auto [med, iqr] = timed([&]() {
        Tensor y;
        NormCache cache;
        norm_forward_train(x, affine, cfg, nullptr, y, cache);
        Tensor dx, dgamma, dbeta;
        norm_backward(g, cache, affine, cfg, dx, dgamma, dbeta);
      });
      f << n << "," << norm_kind_name(kind) << "," << med << ",";
      if (repeats > 1) f << iqr;
      f << "\n";
      std::printf("n=%-8zu %-4s %.4e s\n", n, norm_kind_name(kind), med);
    }
    auto [med, iqr] = timed([&]() { (void)trimmed_moments(flat, 2.0); });
    f << n << ",trimmed," << med << ",";
    if (repeats > 1) f << iqr;
    f << "\n";
    std::printf("n=%-8zu trim %.4e s\n", n, med);
  }
  return 0;
}

// ---------------------------------------------------------------- make-data
int cmd_make_data(const DataOpts& d) {
  fs::path dir = d.dir.empty() ? fs::path(out_dir) : fs::path(d.dir);
  fs::create_directories(dir);
  Dataset tr = make_synthetic_digits(d.train_count, d.seed, 0.01, "train");
  Dataset te = make_synthetic_digits(d.test_count, d.seed + 1, 0.0, "test");
  save_mnist_idx(tr, (dir / "train-images-idx3-ubyte").string(),
                 (dir / "train-labels-idx1-ubyte").string());
  save_mnist_idx(te, (dir / "t10k-images-idx3-ubyte").string(),
                 (dir / "t10k-labels-idx1-ubyte").string());
  std::printf("wrote %zu train / %zu test images to %s\n", tr.size(), te.size(),
              dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filtered batch normalization experiment driver"};
  app.set_config("--config", "", "experiment config file (flags mirror keys)");
  app.require_subcommand(1);
  app.add_option("--out", out_dir, "output directory")->default_val("out");

  DataOpts d;
  ModelOpts m;
  OptOpts o;
  size_t iters = 1000, batch = 256, seeds = 1, eval_every = 0;
  uint64_t seed0 = 0;

  auto* t = app.add_subcommand("train", "train and emit curve.csv + summary.json");
  add_data_flags(t, d);
  add_model_flags(t, m);
  add_opt_flags(t, o);
  t->add_option("--iters", iters);
  t->add_option("--batch", batch);
  t->add_option("--seeds", seeds, "number of paired seeds to run");
  t->add_option("--seed", seed0, "base seed");
  t->add_option("--eval-every", eval_every);

  std::vector<double> tsigma_list;
  std::vector<size_t> batch_list;
  auto* g = app.add_subcommand("grid", "T-sigma x batch-size accuracy matrix");
  add_data_flags(g, d);
  add_model_flags(g, m);
  add_opt_flags(g, o);
  g->add_option("--tsigma-list", tsigma_list)->delimiter(',')->required();
  g->add_option("--batch-list", batch_list)->delimiter(',')->required();
  g->add_option("--iters", iters);
  g->add_option("--seeds", seeds);

  size_t mc_steps = 500, mc_large = 128, mc_small = 16;
  auto* mc = app.add_subcommand("moment-consistency",
                                "small-batch moment deviation vs a 128 reference");
  add_data_flags(mc, d);
  add_model_flags(mc, m);
  add_opt_flags(mc, o);
  mc->add_option("--steps", mc_steps);
  mc->add_option("--large-batch", mc_large);
  mc->add_option("--small-batch", mc_small);
  mc->add_option("--seed", seed0);

  size_t probe_every = 1;
  std::vector<double> probe_steps;
  auto* l = app.add_subcommand("landscape", "loss/gradient landscape probes");
  add_data_flags(l, d);
  add_model_flags(l, m);
  add_opt_flags(l, o);
  l->add_option("--iters", iters);
  l->add_option("--batch", batch);
  l->add_option("--probe-every", probe_every);
  l->add_option("--probe-steps", probe_steps)->delimiter(',');
  l->add_option("--seed", seed0);

  size_t stream = 0;
  auto* p = app.add_subcommand("profile", "normalized-activation percentile bands");
  add_data_flags(p, d);
  add_model_flags(p, m);
  add_opt_flags(p, o);
  p->add_option("--iters", iters);
  p->add_option("--batch", batch);
  p->add_option("--stream", stream, "profile a raw N(0,1) stream of this size instead");
  p->add_option("--seed", seed0);

  std::vector<std::string> placements;
  size_t reps = 3;
  auto* a = app.add_subcommand("ablation", "per-slot placement sweep");
  add_data_flags(a, d);
  add_model_flags(a, m);
  add_opt_flags(a, o);
  a->add_option("--placements", placements, "slot names, 'none', 'all'")->delimiter(',');
  a->add_option("--reps", reps);
  a->add_option("--iters", iters);
  a->add_option("--batch", batch);

  size_t trials = 100;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_model_flags(gc, m);
  gc->add_option("--trials", trials);
  gc->add_option("--seed", seed0);

  size_t repeats = 5;
  std::vector<size_t> sizes;
  auto* b = app.add_subcommand("bench", "forward+backward timing sweep");
  b->add_option("--repeats", repeats);
  b->add_option("--sizes", sizes)->delimiter(',');

  auto* md = app.add_subcommand("make-data", "write the synthetic digit set as IDX");
  add_data_flags(md, d);

  // --out lives on the parent app; let it match after the subcommand name too
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (t->parsed()) return cmd_train(d, m, o, iters, batch, seeds, seed0, eval_every);
    if (g->parsed()) return cmd_grid(d, m, o, tsigma_list, batch_list, iters, seeds);
    if (mc->parsed())
      return cmd_moment_consistency(d, m, o, mc_steps, mc_large, mc_small, m.t_sigma,
                                    seed0);
    if (l->parsed())
      return cmd_landscape(d, m, o, iters, batch, probe_every, probe_steps, seed0);
    if (p->parsed()) return cmd_profile(d, m, o, iters, batch, stream, seed0);
    if (a->parsed()) return cmd_ablation(d, m, o, placements, reps, iters, batch);
    if (gc->parsed()) return cmd_gradcheck(m, trials, seed0);
    if (b->parsed()) return cmd_bench(repeats, sizes);
    if (md->parsed()) return cmd_make_data(d);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 3;
  }
  return 0;
}
