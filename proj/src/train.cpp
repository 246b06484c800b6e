#include "fbn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

namespace fbn {

void OptimizerConfig::validate() const {
  if (kind != "sgd_momentum" && kind != "adam")
    throw std::invalid_argument("optimizer: unknown kind " + kind);
  if (lr <= 0) throw std::invalid_argument("optimizer: learning rate must be > 0");
  if (decay_every > 0 && decay_factor <= 0)
    throw std::invalid_argument("optimizer: decay factor must be > 0");
}

double OptimizerConfig::rate_at(size_t iter) const {
  if (decay_every == 0) return lr;
  return lr * std::pow(decay_factor, double(iter / decay_every));
}

Optimizer::Optimizer(std::vector<Parameter*> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)) {
  cfg_.validate();
  for (Parameter* p : params_) {
    a_.push_back(Tensor::zeros(p->value.shape()));
    if (cfg_.kind == "adam") b_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Optimizer::step(size_t iter) {
  double rate = cfg_.rate_at(iter);
  ++t_;
  if (cfg_.kind == "sgd_momentum") {
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (!p.trainable) continue;
      for (size_t k = 0; k < p.value.size(); ++k) {
        a_[i][k] = cfg_.momentum * a_[i][k] + p.grad[k];
        p.value[k] -= rate * a_[i][k];
      }
    }
    return;
  }
  double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    for (size_t k = 0; k < p.value.size(); ++k) {
      double g = p.grad[k];
      a_[i][k] = cfg_.beta1 * a_[i][k] + (1.0 - cfg_.beta1) * g;
      b_[i][k] = cfg_.beta2 * b_[i][k] + (1.0 - cfg_.beta2) * g * g;
      double mhat = a_[i][k] / bc1;
      double vhat = b_[i][k] / bc2;
      p.value[k] -= rate * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double evaluate(Model& model, const Dataset& ds, size_t batch_size) {
  Batcher batcher(ds, batch_size, 0, 0, false);
  size_t correct = 0, total = 0;
  Tensor x;
  std::vector<int> labels;
  for (size_t b = 0; b < batcher.batch_count(); ++b) {
    batcher.get(b, x, labels);
    Tape tape;
    int logits = model.forward(tape, x, ForwardMode::Infer);
    const Tensor& lv = tape.value(logits);
    size_t n = lv.shape()[0], k = lv.shape()[1];
    for (size_t i = 0; i < n; ++i) {
      size_t best = 0;
      for (size_t j = 1; j < k; ++j)
        if (lv[i * k + j] > lv[i * k + best]) best = j;
      correct += (int(best) == labels[i]);
    }
    total += n;
  }
  return total ? double(correct) / double(total) : 0.0;
}

namespace {

double population_variance(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / double(v.size());
}

long total_degenerate(Model& model) {
  long n = 0;
  for (auto& [slot, layer] : model.norm_layers()) n += layer->degenerate_total;
  return n;
}

}  // namespace

LandscapeProbe probe_landscape(Model& model, const Tensor& x,
                               const std::vector<int>& labels,
                               const std::vector<double>& step_sizes) {
  auto params = model.parameters();
  return probe_landscape_fn(
      params,
      [&]() {
        model.zero_grad();
        Tape tape;
        int logits = model.forward(tape, x, ForwardMode::TrainFrozenStats);
        int loss = tape.softmax_cross_entropy(logits, labels);
        tape.backward(loss);
        return tape.value(loss)[0];
      },
      step_sizes);
}

LandscapeProbe probe_landscape_fn(const std::vector<Parameter*>& params,
                                  const std::function<double()>& loss_with_grads,
                                  const std::vector<double>& step_sizes) {
  LandscapeProbe probe;
  probe.step_sizes = step_sizes;

  std::vector<Tensor> saved;
  for (Parameter* p : params) saved.push_back(p->value);

  auto loss_and_grad = [&](std::vector<Tensor>* grad_out) {
    double l = loss_with_grads();
    if (grad_out) {
      grad_out->clear();
      for (Parameter* p : params) grad_out->push_back(p->grad);
    }
    return l;
  };

  std::vector<Tensor> g0;
  probe.base_loss = loss_and_grad(&g0);
  double gn = 0;
  for (const Tensor& g : g0)
    for (size_t k = 0; k < g.size(); ++k) gn += g[k] * g[k];
  probe.base_grad_norm = std::sqrt(gn);

  std::vector<Tensor> gi;
  for (double eta : step_sizes) {
    for (size_t i = 0; i < params.size(); ++i)
      for (size_t k = 0; k < saved[i].size(); ++k)
        params[i]->value[k] = saved[i][k] - eta * g0[i][k];
    probe.losses.push_back(loss_and_grad(&gi));
    double d = 0;
    for (size_t i = 0; i < gi.size(); ++i)
      for (size_t k = 0; k < gi[i].size(); ++k) {
        double e = gi[i][k] - g0[i][k];
        d += e * e;
      }
    probe.grad_changes.push_back(std::sqrt(d));
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = saved[i];
  }
  for (Parameter* p : params) p->zero_grad();

  probe.loss_variance = population_variance(probe.losses);
  probe.grad_variance = population_variance(probe.grad_changes);
  if (!probe.losses.empty()) {
    probe.loss_min = *std::min_element(probe.losses.begin(), probe.losses.end());
    probe.loss_max = *std::max_element(probe.losses.begin(), probe.losses.end());
    probe.grad_min = *std::min_element(probe.grad_changes.begin(), probe.grad_changes.end());
    probe.grad_max = *std::max_element(probe.grad_changes.begin(), probe.grad_changes.end());
  }
  return probe;
}

RunRecord train(Model& model, const Dataset& train_ds, const Dataset& test_ds,
                const OptimizerConfig& opt, const TrainConfig& tc) {
  auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = tc.seed;
  long degenerate0 = total_degenerate(model);

  Optimizer optimizer(model.parameters(), opt);
  size_t epoch = 0, batch_in_epoch = 0;
  Batcher batcher(train_ds, tc.batch_size, tc.seed, epoch, true);
  if (batcher.batch_count() == 0)
    throw std::invalid_argument("train: batch size exceeds dataset size");

  Tensor x;
  std::vector<int> labels;
  for (size_t iter = 0; iter < tc.iterations; ++iter) {
    if (batch_in_epoch == batcher.batch_count()) {
      ++epoch;
      batch_in_epoch = 0;
      batcher = Batcher(train_ds, tc.batch_size, tc.seed, epoch, true);
    }
    batcher.get(batch_in_epoch++, x, labels);

    if (tc.probe_every > 0 && iter % tc.probe_every == 0) {
      LandscapeProbe probe = probe_landscape(model, x, labels, tc.probe_steps);
      probe.iteration = iter;
      rec.probes.push_back(std::move(probe));
    }

    model.zero_grad();
    Tape tape;
    int logits = model.forward(tape, x, ForwardMode::Train);
    int loss = tape.softmax_cross_entropy(logits, labels);
    double l = tape.value(loss)[0];
    if (!std::isfinite(l)) throw DivergenceError(iter, l);
    tape.backward(loss);
    optimizer.step(iter);
    rec.train_loss.push_back(l);

    if (tc.eval_every > 0 && (iter + 1) % tc.eval_every == 0) {
      rec.eval_iterations.push_back(iter + 1);
      rec.test_accuracy.push_back(evaluate(model, test_ds, tc.eval_batch_size));
    }
  }

  if (rec.eval_iterations.empty() || rec.eval_iterations.back() != tc.iterations) {
    rec.eval_iterations.push_back(tc.iterations);
    rec.test_accuracy.push_back(evaluate(model, test_ds, tc.eval_batch_size));
  }
  rec.final_accuracy = rec.test_accuracy.back();
  rec.degenerate_slices = total_degenerate(model) - degenerate0;
  rec.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

MomentDeviation moment_deviation(const Tensor& x_large, const Tensor& x_small,
                                 double t_sigma, double epsilon) {
  if (x_large.shape()[1] != x_small.shape()[1])
    throw std::invalid_argument("moment_deviation: channel mismatch");
  size_t channels = x_large.shape()[1];

  AffineParams unit;
  unit.init(channels);
  auto moments = [&](const Tensor& x, NormKind kind) {
    NormConfig cfg;
    cfg.kind = kind;
    cfg.t_sigma = t_sigma;
    cfg.epsilon = epsilon;
    Tensor y;
    NormCache cache;
    norm_forward_train(x, unit, cfg, nullptr, y, cache);
    return std::make_pair(cache.filtered_mu, cache.filtered_var);
  };

  auto [ref_mu, ref_var] = moments(x_large, NormKind::BN);
  auto [bn_mu, bn_var] = moments(x_small, NormKind::BN);
  auto [fbn_mu, fbn_var] = moments(x_small, NormKind::FBN);

  MomentDeviation d;
  for (size_t c = 0; c < channels; ++c) {
    d.bn_mean += std::abs(bn_mu[c] - ref_mu[c]);
    d.fbn_mean += std::abs(fbn_mu[c] - ref_mu[c]);
    d.bn_var += std::abs(bn_var[c] - ref_var[c]);
    d.fbn_var += std::abs(fbn_var[c] - ref_var[c]);
  }
  d.bn_mean /= double(channels);
  d.fbn_mean /= double(channels);
  d.bn_var /= double(channels);
  d.fbn_var /= double(channels);
  return d;
}

MomentConsistencyResult moment_consistency_experiment(Model& model, const Dataset& ds,
                                                      const OptimizerConfig& opt,
                                                      const MomentConsistencyConfig& mc) {
  if (mc.small_batch > mc.large_batch)
    throw std::invalid_argument("moment consistency: small batch exceeds large batch");
  auto layers = model.norm_layers();
  if (layers.empty())
    throw std::invalid_argument("moment consistency: model has no normalization layer");
  NormLayer* layer = nullptr;
  std::string slot;
  for (auto& [name, l] : layers) {
    if (mc.slot.empty() || name == mc.slot) {
      layer = l;
      slot = name;
      break;
    }
  }
  if (!layer)
    throw std::invalid_argument("moment consistency: no norm layer at slot " + mc.slot);

  MomentConsistencyResult res;
  res.slot = slot;

  Tensor captured;
  layer->on_input = [&](const Tensor& x) { captured = x; };

  Optimizer optimizer(model.parameters(), opt);
  std::mt19937_64 rng(mc.seed);
  size_t epoch = 0, batch_in_epoch = 0;
  Batcher batcher(ds, mc.large_batch, mc.seed, epoch, true);

  Tensor x;
  std::vector<int> labels;
  for (size_t step = 0; step < mc.steps; ++step) {
    if (batch_in_epoch == batcher.batch_count()) {
      ++epoch;
      batch_in_epoch = 0;
      batcher = Batcher(ds, mc.large_batch, mc.seed, epoch, true);
    }
    batcher.get(batch_in_epoch++, x, labels);

    model.zero_grad();
    Tape tape;
    int logits = model.forward(tape, x, ForwardMode::Train);
    int loss = tape.softmax_cross_entropy(logits, labels);
    if (!std::isfinite(tape.value(loss)[0]))
      throw DivergenceError(step, tape.value(loss)[0]);
    tape.backward(loss);

    // Subset the captured slot input: same network state, same activations.
    const auto& shp = captured.shape();
    size_t stride = captured.size() / shp[0];
    std::vector<size_t> idx(shp[0]);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(mc.small_batch);
    std::vector<size_t> small_shape = shp;
    small_shape[0] = mc.small_batch;
    Tensor x_small(small_shape);
    for (size_t i = 0; i < mc.small_batch; ++i)
      std::copy_n(captured.data() + idx[i] * stride, stride, x_small.data() + i * stride);

    MomentDeviation d = moment_deviation(captured, x_small, mc.t_sigma,
                                         layer->cfg.epsilon);
    res.bn_mean_dev.push_back(d.bn_mean);
    res.fbn_mean_dev.push_back(d.fbn_mean);
    res.bn_var_dev.push_back(d.bn_var);
    res.fbn_var_dev.push_back(d.fbn_var);

    optimizer.step(step);
  }
  layer->on_input = nullptr;
  return res;
}

std::vector<AblationResult> layer_placement_ablation(
    const ModelSpec& base, const Dataset& train_ds, const Dataset& test_ds,
    const std::vector<std::string>& placements, size_t repetitions,
    const OptimizerConfig& opt, const TrainConfig& tc) {
  if (repetitions < 1)
    throw std::invalid_argument("ablation: repetitions must be >= 1");
  std::string kind = norm_kind_name(base.norm.kind);
  std::vector<AblationResult> out;
  for (const std::string& placement : placements) {
    AblationResult r;
    r.placement = placement;
    for (size_t rep = 0; rep < repetitions; ++rep) {
      ModelSpec spec = base;
      spec.slot_norms.clear();
      spec.set_all_slots("none");
      if (placement == "all") {
        spec.set_all_slots(kind);
      } else if (placement != "none") {
        spec.slot_norms[placement] = kind;
      }
      spec.seed = base.seed + rep;
      TrainConfig tc2 = tc;
      tc2.seed = tc.seed + rep;
      Model model(spec);
      RunRecord rec = train(model, train_ds, test_ds, opt, tc2);
      r.accuracy.push_back(rec.final_accuracy);
    }
    double m = 0;
    for (double a : r.accuracy) m += a;
    m /= double(r.accuracy.size());
    double s = 0;
    for (double a : r.accuracy) s += (a - m) * (a - m);
    r.mean_acc = m;
    r.std_acc = std::sqrt(s / double(r.accuracy.size()));
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

constexpr char kCkptMagic[8] = {'F', 'B', 'N', 'C', 'K', 'P', 'T', '1'};

struct CkptEntry {
  std::string name;
  std::vector<size_t> shape;
  std::vector<double> data;
};

std::vector<CkptEntry> collect_entries(Model& model, Optimizer* opt) {
  std::vector<CkptEntry> es;
  for (auto& [name, p] : model.named_parameters())
    es.push_back({"param:" + name, p->value.shape(), p->value.vec()});
  for (auto& [slot, layer] : model.norm_layers()) {
    es.push_back({"norm:" + slot + ":gamma", layer->affine.gamma.value.shape(),
                  layer->affine.gamma.value.vec()});
    es.push_back({"norm:" + slot + ":beta", layer->affine.beta.value.shape(),
                  layer->affine.beta.value.vec()});
    es.push_back({"norm:" + slot + ":running_mean", layer->stats.mean.shape(),
                  layer->stats.mean.vec()});
    es.push_back({"norm:" + slot + ":running_var", layer->stats.var.shape(),
                  layer->stats.var.vec()});
    es.push_back({"norm:" + slot + ":meta",
                  {2},
                  {double(layer->stats.update_count), double(layer->degenerate_total)}});
  }
  if (opt) {
    for (size_t i = 0; i < opt->slot_a().size(); ++i)
      es.push_back({"opt:a:" + std::to_string(i), opt->slot_a()[i].shape(),
                    opt->slot_a()[i].vec()});
    for (size_t i = 0; i < opt->slot_b().size(); ++i)
      es.push_back({"opt:b:" + std::to_string(i), opt->slot_b()[i].shape(),
                    opt->slot_b()[i].vec()});
    es.push_back({"opt:meta", {1}, {double(opt->steps_taken())}});
  }
  return es;
}

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
uint32_t read_u32(std::istream& in, const char* what) {
  uint32_t v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  return v;
}
uint64_t read_u64(std::istream& in, const char* what) {
  uint64_t v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, Optimizer* opt) {
  auto entries = collect_entries(model, opt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kCkptMagic, sizeof kCkptMagic);
  write_u32(out, uint32_t(entries.size()));
  for (const auto& e : entries) {
    write_u32(out, uint32_t(e.name.size()));
    out.write(e.name.data(), std::streamsize(e.name.size()));
    write_u32(out, uint32_t(e.shape.size()));
    for (size_t d : e.shape) write_u64(out, d);
  }
  for (const auto& e : entries)
    out.write(reinterpret_cast<const char*>(e.data.data()),
              std::streamsize(e.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, Model& model, Optimizer* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic / unsupported version");
  uint32_t count = read_u32(in, "entry count");
  std::vector<CkptEntry> found(count);
  for (auto& e : found) {
    uint32_t len = read_u32(in, "name length");
    e.name.resize(len);
    if (!in.read(e.name.data(), len))
      throw std::runtime_error("checkpoint: truncated entry name");
    uint32_t rank = read_u32(in, "rank");
    e.shape.resize(rank);
    for (auto& d : e.shape) d = size_t(read_u64(in, "dimension"));
  }
  for (auto& e : found) {
    size_t n = 1;
    for (size_t d : e.shape) n *= d;
    e.data.resize(n);
    if (!in.read(reinterpret_cast<char*>(e.data.data()),
                 std::streamsize(n * sizeof(double))))
      throw std::runtime_error("checkpoint: truncated payload for " + e.name);
  }

  auto expected = collect_entries(model, opt);
  if (expected.size() != found.size())
    throw std::runtime_error("checkpoint: entry count mismatch (expected " +
                             std::to_string(expected.size()) + ", file has " +
                             std::to_string(found.size()) + ")");
  std::map<std::string, CkptEntry*> by_name;
  for (auto& e : found) by_name[e.name] = &e;

  auto fetch = [&](const std::string& name, const std::vector<size_t>& shape) -> CkptEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing entry " + name);
    if (it->second->shape != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    return *it->second;
  };

  for (auto& [name, p] : model.named_parameters())
    p->value.vec() = fetch("param:" + name, p->value.shape()).data;
  for (auto& [slot, layer] : model.norm_layers()) {
    layer->affine.gamma.value.vec() =
        fetch("norm:" + slot + ":gamma", layer->affine.gamma.value.shape()).data;
    layer->affine.beta.value.vec() =
        fetch("norm:" + slot + ":beta", layer->affine.beta.value.shape()).data;
    layer->stats.mean.vec() =
        fetch("norm:" + slot + ":running_mean", layer->stats.mean.shape()).data;
    layer->stats.var.vec() =
        fetch("norm:" + slot + ":running_var", layer->stats.var.shape()).data;
    auto& meta = fetch("norm:" + slot + ":meta", {2});
    layer->stats.update_count = long(meta.data[0]);
    layer->degenerate_total = long(meta.data[1]);
  }
  if (opt) {
    for (size_t i = 0; i < opt->slot_a().size(); ++i)
      opt->slot_a()[i].vec() =
          fetch("opt:a:" + std::to_string(i), opt->slot_a()[i].shape()).data;
    for (size_t i = 0; i < opt->slot_b().size(); ++i)
      opt->slot_b()[i].vec() =
          fetch("opt:b:" + std::to_string(i), opt->slot_b()[i].shape()).data;
    opt->set_steps_taken(size_t(fetch("opt:meta", {1}).data[0]));
  }
}

}  // namespace fbn
