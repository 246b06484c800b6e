#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <unistd.h>

#include "fbn/train.hpp"

using namespace fbn;

namespace {

struct Fixture {
  Dataset train_ds = make_synthetic_digits(512, 21, 0.01, "train");
  Dataset test_ds = make_synthetic_digits(256, 22, 0.0, "test");

  ModelSpec mlp_spec(const std::string& kind, uint64_t seed = 1) {
    ModelSpec s;
    s.architecture = "mlp";
    s.set_all_slots(kind);
    s.seed = seed;
    return s;
  }

  TrainConfig quick(size_t iters = 15) {
    TrainConfig tc;
    tc.iterations = iters;
    tc.batch_size = 64;
    tc.eval_batch_size = 256;
    tc.seed = 5;
    return tc;
  }
};

OptimizerConfig sgd(double lr = 0.05) {
  OptimizerConfig o;
  o.lr = lr;
  return o;
}

std::vector<double> flat_params(Model& m) {
  std::vector<double> out;
  for (Parameter* p : m.parameters())
    out.insert(out.end(), p->value.vec().begin(), p->value.vec().end());
  return out;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() /
          (std::string("fbn_train_") + std::to_string(::getpid()) + "_" + name))
      .string();
}

}  // namespace

TEST_CASE("optimizer config validation and schedule") {
  OptimizerConfig o;
  o.lr = 0.0;
  CHECK_THROWS_AS(o.validate(), std::invalid_argument);
  o.lr = 0.1;
  o.kind = "rmsprop";
  CHECK_THROWS_AS(o.validate(), std::invalid_argument);

  OptimizerConfig d;
  d.lr = 1.0;
  d.decay_every = 10;
  d.decay_factor = 0.5;
  CHECK(d.rate_at(0) == 1.0);
  CHECK(d.rate_at(9) == 1.0);
  CHECK(d.rate_at(10) == 0.5);
  CHECK(d.rate_at(25) == 0.25);
}

TEST_CASE("sgd momentum follows the textbook recursion") {
  Parameter p(Tensor({1}, {1.0}));
  OptimizerConfig cfg = sgd(0.1);
  cfg.momentum = 0.5;
  Optimizer opt({&p}, cfg);

  p.grad[0] = 2.0;
  opt.step(0);  // v=2, p=1-0.2
  CHECK(p.value[0] == doctest::Approx(0.8));
  p.grad[0] = 2.0;
  opt.step(1);  // v=3, p=0.8-0.3
  CHECK(p.value[0] == doctest::Approx(0.5));
}

TEST_CASE("adam first step moves by about lr") {
  Parameter p(Tensor({1}, {0.0}));
  OptimizerConfig cfg;
  cfg.kind = "adam";
  cfg.lr = 0.01;
  Optimizer opt({&p}, cfg);
  p.grad[0] = 3.7;
  opt.step(0);
  // bias-corrected first step is lr * g/(|g|+eps) regardless of g's scale
  CHECK(p.value[0] == doctest::Approx(-0.01).epsilon(1e-4));
}

TEST_CASE_FIXTURE(Fixture, "training is deterministic given the seed") {
  ModelSpec spec = mlp_spec("fbn");
  Model a(spec), b(spec);
  RunRecord ra = train(a, train_ds, test_ds, sgd(), quick());
  RunRecord rb = train(b, train_ds, test_ds, sgd(), quick());
  CHECK(ra.train_loss == rb.train_loss);
  CHECK(ra.test_accuracy == rb.test_accuracy);
  CHECK(flat_params(a) == flat_params(b));
}

TEST_CASE_FIXTURE(Fixture, "zero iterations leaves accuracy at chance level") {
  Model m(mlp_spec("bn"));
  RunRecord r = train(m, train_ds, test_ds, sgd(), quick(0));
  CHECK(r.train_loss.empty());
  CHECK(r.final_accuracy >= 0.0);
  CHECK(r.final_accuracy < 0.3);  // 10-class chance, untrained
}

TEST_CASE_FIXTURE(Fixture, "loss decreases over a short run") {
  Model m(mlp_spec("fbn"));
  TrainConfig tc = quick(60);
  RunRecord r = train(m, train_ds, test_ds, sgd(0.1), tc);
  double first = 0, last = 0;
  for (size_t i = 0; i < 10; ++i) {
    first += r.train_loss[i];
    last += r.train_loss[r.train_loss.size() - 1 - i];
  }
  CHECK(last < first);
  CHECK(r.final_accuracy > 0.2);
}

TEST_CASE_FIXTURE(Fixture, "non-finite loss aborts with a diagnostic") {
  // an infinite logit bias makes the very first loss non-finite
  Model m(mlp_spec("none"));
  for (auto& [name, p] : m.named_parameters())
    if (name == "logits.b") p->value[0] = std::numeric_limits<double>::infinity();
  try {
    train(m, train_ds, test_ds, sgd(), quick(20));
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration == 0);
    CHECK(!std::isfinite(e.loss));
  }
}

TEST_CASE_FIXTURE(Fixture, "landscape probe restores the model bit-exactly") {
  Model m(mlp_spec("fbn"));
  train(m, train_ds, test_ds, sgd(), quick(5));

  Batcher b(train_ds, 64, 3, 0, true);
  Tensor x;
  std::vector<int> labels;
  b.get(0, x, labels);

  std::vector<double> before = flat_params(m);
  Tape t0;
  Tensor out_before = t0.value(m.forward(t0, x, ForwardMode::Infer));
  auto stats_before = m.norm_layers()[0].second->stats.mean.vec();

  LandscapeProbe probe = probe_landscape(m, x, labels, {0.02, 0.01, 0.005, 0.001});
  CHECK(probe.losses.size() == 4);
  CHECK(probe.base_loss > 0);
  CHECK(probe.base_grad_norm > 0);

  CHECK(flat_params(m) == before);
  CHECK(m.norm_layers()[0].second->stats.mean.vec() == stats_before);
  Tape t1;
  CHECK(t1.value(m.forward(t1, x, ForwardMode::Infer)).vec() == out_before.vec());
}

TEST_CASE_FIXTURE(Fixture, "probes do not perturb the training trajectory") {
  ModelSpec spec = mlp_spec("fbn");
  Model a(spec), b(spec);
  TrainConfig plain = quick(12);
  TrainConfig probed = quick(12);
  probed.probe_every = 3;
  RunRecord ra = train(a, train_ds, test_ds, sgd(), plain);
  RunRecord rb = train(b, train_ds, test_ds, sgd(), probed);
  CHECK(ra.train_loss == rb.train_loss);
  CHECK(flat_params(a) == flat_params(b));
  CHECK(rb.probes.size() == 4);
  CHECK(ra.probes.empty());
}

TEST_CASE("quadratic loss probe matches the closed form") {
  // L = 0.5 * ||theta||^2, so g = theta and L(theta - eta*g) = 0.5(1-eta)^2||theta||^2.
  Parameter theta(Tensor({3}, {1.0, -2.0, 0.5}));
  double norm2 = 1.0 + 4.0 + 0.25;

  auto loss_with_grads = [&]() {
    theta.zero_grad();
    Tape t;
    int ti = t.param(theta);
    int loss = t.sum(t.square_op(ti));
    t.backward(loss);
    for (size_t i = 0; i < 3; ++i) theta.grad[i] *= 0.5;  // L = 0.5 * sum sq
    return 0.5 * t.value(loss)[0];
  };

  std::vector<double> steps = {0.02, 0.01, 0.005, 0.001};
  LandscapeProbe probe = probe_landscape_fn({&theta}, loss_with_grads, steps);

  CHECK(probe.base_loss == doctest::Approx(0.5 * norm2).epsilon(1e-12));
  for (size_t i = 0; i < steps.size(); ++i) {
    double eta = steps[i];
    CHECK(probe.losses[i] ==
          doctest::Approx(0.5 * (1 - eta) * (1 - eta) * norm2).epsilon(1e-10));
    // gradient at theta-eta*theta is (1-eta)*theta, change norm = eta*||theta||
    CHECK(probe.grad_changes[i] ==
          doctest::Approx(eta * std::sqrt(norm2)).epsilon(1e-10));
  }
  CHECK(theta.value.vec() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("zero gradient means zero probe variance") {
  Parameter theta(Tensor({2}, {1.0, 2.0}));
  auto loss_with_grads = [&]() {
    theta.zero_grad();
    return 4.2;  // constant loss, zero gradient
  };
  LandscapeProbe p = probe_landscape_fn({&theta}, loss_with_grads, {0.02, 0.01});
  CHECK(p.loss_variance == 0.0);
  CHECK(p.grad_variance == 0.0);
  CHECK(p.base_grad_norm == 0.0);
}

TEST_CASE_FIXTURE(Fixture, "FBN at a huge threshold trains identically to BN") {
  ModelSpec bn = mlp_spec("bn");
  ModelSpec fbn = mlp_spec("fbn");
  fbn.norm.t_sigma = 1e6;
  Model a(bn), b(fbn);
  RunRecord ra = train(a, train_ds, test_ds, sgd(), quick(20));
  RunRecord rb = train(b, train_ds, test_ds, sgd(), quick(20));
  CHECK(ra.train_loss == rb.train_loss);  // bitwise trajectory identity
  CHECK(flat_params(a) == flat_params(b));
  CHECK(ra.test_accuracy == rb.test_accuracy);
}

TEST_CASE_FIXTURE(Fixture, "running stats converge on a constant stream") {
  // Frozen weights, whole dataset as the single batch: every step sees the
  // same moments, so the EMA gap shrinks by (1-alpha) per step.
  ModelSpec spec = mlp_spec("bn");
  Model m(spec);
  for (Parameter* p : m.parameters()) p->trainable = false;

  Dataset small = make_synthetic_digits(64, 31);
  TrainConfig tc;
  tc.iterations = 50;
  tc.batch_size = 64;
  tc.seed = 1;
  train(m, small, test_ds, sgd(), tc);

  NormLayer* layer = m.norm_layers()[0].second;
  CHECK(layer->stats.update_count == 50);

  // one more training forward exposes the true batch moments
  Batcher b(small, 64, 1, 0, true);
  Tensor x;
  std::vector<int> labels;
  b.get(0, x, labels);
  Tensor captured;
  layer->on_input = [&](const Tensor& xin) { captured = xin; };
  Tape t;
  m.forward(t, x, ForwardMode::TrainFrozenStats);
  layer->on_input = nullptr;

  AffineParams unit;
  unit.init(layer->affine.channels());
  NormConfig bn_cfg;
  Tensor y;
  NormCache cache;
  norm_forward_train(captured, unit, bn_cfg, nullptr, y, cache);

  double bound = std::pow(0.9, 50.0);
  for (size_t c = 0; c < cache.filtered_mu.size(); ++c) {
    double gap0_m = std::abs(cache.filtered_mu[c]);
    double gap0_v = std::abs(cache.filtered_var[c] - 1.0);
    CHECK(std::abs(layer->stats.mean[c] - cache.filtered_mu[c]) <=
          bound * gap0_m + 1e-9);
    CHECK(std::abs(layer->stats.var[c] - cache.filtered_var[c]) <=
          bound * gap0_v + 1e-9);
  }
}

TEST_CASE("moment deviation of an identical subset is zero") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor x({16, 4});
  for (size_t i = 0; i < x.size(); ++i) x[i] = d(rng);
  MomentDeviation dev = moment_deviation(x, x, 100.0);
  CHECK(dev.bn_mean == 0.0);
  CHECK(dev.fbn_mean == 0.0);
  CHECK(dev.bn_var == 0.0);
  CHECK(dev.fbn_var == 0.0);
}

TEST_CASE("moment deviation: filtered and plain agree on clean data") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor large({128, 4}), small({16, 4});
  for (size_t i = 0; i < large.size(); ++i) large[i] = d(rng);
  for (size_t i = 0; i < small.size(); ++i) small[i] = d(rng);
  MomentDeviation dev = moment_deviation(large, small, 7.0);
  // mask is all ones at T=7 with n=16 gaussian samples
  CHECK(dev.bn_mean == doctest::Approx(dev.fbn_mean).epsilon(1e-12));
  CHECK(dev.bn_var == doctest::Approx(dev.fbn_var).epsilon(1e-12));
}

TEST_CASE("moment deviation: filtering wins when the subset has an outlier") {
  std::mt19937_64 rng(43);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor large({128, 1}), small({16, 1});
  for (size_t i = 0; i < large.size(); ++i) large[i] = d(rng);
  for (size_t i = 0; i < small.size(); ++i) small[i] = d(rng);
  small[5] = 18.0;  // planted outlier in the small batch only
  MomentDeviation dev = moment_deviation(large, small, 2.0);
  CHECK(dev.fbn_mean < dev.bn_mean);
  CHECK(dev.fbn_var < dev.bn_var);
}

TEST_CASE_FIXTURE(Fixture, "moment consistency experiment runs end to end") {
  ModelSpec spec = mlp_spec("none");
  spec.slot_norms["fc2"] = "bn";
  Model m(spec);

  MomentConsistencyConfig mc;
  mc.steps = 4;
  mc.large_batch = 128;
  mc.small_batch = 16;
  mc.seed = 2;
  MomentConsistencyResult res = moment_consistency_experiment(m, train_ds, sgd(), mc);
  CHECK(res.slot == "fc2");
  CHECK(res.bn_mean_dev.size() == 4);
  CHECK(res.fbn_var_dev.size() == 4);
  for (double v : res.bn_mean_dev) CHECK(v >= 0.0);

  mc.small_batch = 256;
  CHECK_THROWS_AS(moment_consistency_experiment(m, train_ds, sgd(), mc),
                  std::invalid_argument);

  Model no_norm(mlp_spec("none"));
  mc.small_batch = 16;
  CHECK_THROWS_AS(moment_consistency_experiment(no_norm, train_ds, sgd(), mc),
                  std::invalid_argument);
}

TEST_CASE_FIXTURE(Fixture, "ablation pairs seeds across placements") {
  ModelSpec base;
  base.architecture = "mlp";
  base.norm.kind = NormKind::FBN;
  base.seed = 3;
  TrainConfig tc = quick(8);
  auto results = layer_placement_ablation(base, train_ds, test_ds, {"none", "fc1"},
                                          2, sgd(), tc);
  REQUIRE(results.size() == 2);
  CHECK(results[0].placement == "none");
  CHECK(results[0].accuracy.size() == 2);
  CHECK(results[1].accuracy.size() == 2);

  // "none" with rep 0 must equal a direct vanilla run with the same seeds
  ModelSpec vanilla;
  vanilla.architecture = "mlp";
  vanilla.set_all_slots("none");
  vanilla.seed = 3;
  Model m(vanilla);
  RunRecord r = train(m, train_ds, test_ds, sgd(), tc);
  CHECK(results[0].accuracy[0] == r.final_accuracy);
}

TEST_CASE_FIXTURE(Fixture, "checkpoints round-trip bit-exactly") {
  ModelSpec spec = mlp_spec("fbn", 8);
  Model m(spec);
  Optimizer opt(m.parameters(), sgd());
  train(m, train_ds, test_ds, sgd(), quick(10));

  std::string path = temp_path("ckpt.bin");
  save_checkpoint(path, m, &opt);

  Model fresh(spec);
  Optimizer fresh_opt(fresh.parameters(), sgd());
  load_checkpoint(path, fresh, &fresh_opt);
  CHECK(flat_params(fresh) == flat_params(m));
  CHECK(fresh.norm_layers()[0].second->stats.mean.vec() ==
        m.norm_layers()[0].second->stats.mean.vec());
  CHECK(fresh.norm_layers()[0].second->stats.update_count ==
        m.norm_layers()[0].second->stats.update_count);

  Tensor x = test_ds.images;
  Tensor x16(std::vector<size_t>{16, 1, 28, 28});
  std::copy_n(x.data(), x16.size(), x16.data());
  Tape t1, t2;
  CHECK(t1.value(m.forward(t1, x16, ForwardMode::Infer)).vec() ==
        t2.value(fresh.forward(t2, x16, ForwardMode::Infer)).vec());

  SUBCASE("truncated file is rejected") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    Model other(spec);
    CHECK_THROWS_AS(load_checkpoint(path, other), std::runtime_error);
  }

  SUBCASE("mismatched spec is rejected with a diagnostic") {
    ModelSpec lenet;  // different architecture entirely
    Model other(lenet);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, other, nullptr),
                         doctest::Contains("mismatch"), std::runtime_error);
  }

  std::filesystem::remove(path);
}
