#include "fbn/norm.hpp"

#include <cmath>
#include <stdexcept>

namespace fbn {

const char* norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::BN: return "bn";
    case NormKind::FBN: return "fbn";
    case NormKind::GN: return "gn";
    case NormKind::FGN: return "fgn";
  }
  return "?";
}

NormKind norm_kind_from_name(const std::string& name) {
  if (name == "bn") return NormKind::BN;
  if (name == "fbn") return NormKind::FBN;
  if (name == "gn") return NormKind::GN;
  if (name == "fgn") return NormKind::FGN;
  throw std::invalid_argument("unknown normalization kind: " + name);
}

void NormConfig::validate(size_t channels) const {
  if (epsilon <= 0) throw std::invalid_argument("norm: epsilon must be positive");
  if (momentum_alpha <= 0 || momentum_alpha > 1)
    throw std::invalid_argument("norm: momentum_alpha must be in (0,1]");
  if (filtered() && !(t_sigma > 0))
    throw std::invalid_argument("norm: t_sigma must be positive");
  if (grouped()) {
    if (num_groups == 0 || channels % num_groups != 0)
      throw std::invalid_argument("norm: channel count not divisible by num_groups");
  }
}

void RunningStats::update(const std::vector<double>& m, const std::vector<double>& v,
                          double alpha) {
  if (m.size() != mean.size() || v.size() != var.size())
    throw std::invalid_argument("running stats: channel count mismatch");
  for (size_t c = 0; c < m.size(); ++c) {
    mean[c] = (1.0 - alpha) * mean[c] + alpha * m[c];
    var[c] = (1.0 - alpha) * var[c] + alpha * v[c];
  }
  ++update_count;
}

SliceMap SliceMap::make(const std::vector<size_t>& shape, const NormConfig& cfg) {
  if (shape.size() < 2)
    throw std::invalid_argument("norm: input must have rank >= 2 ([N,C,...])");
  SliceMap m;
  m.batch = shape[0];
  m.channels = shape[1];
  m.spatial = 1;
  for (size_t a = 2; a < shape.size(); ++a) m.spatial *= shape[a];
  m.total = m.batch * m.channels * m.spatial;
  m.grouped = cfg.grouped();
  if (m.grouped) {
    cfg.validate(m.channels);
    m.groups = cfg.num_groups;
    m.group_channels = m.channels / m.groups;
    m.slice_count = m.batch * m.groups;
    m.slice_size = m.group_channels * m.spatial;
  } else {
    if (m.batch < 2)
      throw std::invalid_argument("norm: batch normalization requires N >= 2");
    m.groups = 1;
    m.group_channels = m.channels;
    m.slice_count = m.channels;
    m.slice_size = m.batch * m.spatial;
  }
  if (m.slice_size < 2)
    throw std::invalid_argument("norm: degenerate single-element normalization slice");
  return m;
}

namespace {

// Two-pass moments weighted by `mask` (nullptr = unweighted). Sequential
// index order; with an all-ones mask this is bit-identical to the
// unweighted computation.
void slice_moments(const Tensor& x, const double* mask, const SliceMap& map,
                   std::vector<double>& mu, std::vector<double>& var,
                   std::vector<double>& count) {
  mu.assign(map.slice_count, 0.0);
  var.assign(map.slice_count, 0.0);
  count.assign(map.slice_count, 0.0);
  for (size_t i = 0; i < map.total; ++i) {
    size_t s = map.slice_of(i);
    double w = mask ? mask[i] : 1.0;
    mu[s] += w * x[i];
    count[s] += w;
  }
  for (size_t s = 0; s < map.slice_count; ++s)
    if (count[s] > 0) mu[s] /= count[s];
  for (size_t i = 0; i < map.total; ++i) {
    size_t s = map.slice_of(i);
    double w = mask ? mask[i] : 1.0;
    double d = x[i] - mu[s];
    var[s] += w * d * d;
  }
  for (size_t s = 0; s < map.slice_count; ++s)
    if (count[s] > 0) var[s] /= count[s];
}

}  // namespace

void norm_forward_train(const Tensor& x, const AffineParams& params, const NormConfig& cfg,
                        RunningStats* stats, Tensor& y, NormCache& cache) {
  const SliceMap map = SliceMap::make(x.shape(), cfg);
  if (params.channels() != map.channels)
    throw std::invalid_argument("norm: affine parameter channel mismatch");

  cache.in_shape = x.shape();
  cache.map = map;
  cache.degenerate_slices = 0;
  cache.mask = Tensor::ones(x.shape());

  std::vector<double> cand_mu, cand_var, cand_count;
  if (cfg.filtered()) {
    // Candidate moments are recomputed on every call (two passes), never
    // reused from a previous iteration.
    slice_moments(x, nullptr, map, cand_mu, cand_var, cand_count);
    cache.candidate_mu = cand_mu;
    cache.candidate_sigma.resize(map.slice_count);
    for (size_t s = 0; s < map.slice_count; ++s)
      cache.candidate_sigma[s] = std::sqrt(cand_var[s] + cfg.epsilon);
    // Mask: 1 iff |x_hat'| <= T_sigma, boundary inclusive.
    for (size_t i = 0; i < map.total; ++i) {
      size_t s = map.slice_of(i);
      double z = (x[i] - cache.candidate_mu[s]) / cache.candidate_sigma[s];
      cache.mask[i] = (std::abs(z) <= cfg.t_sigma) ? 1.0 : 0.0;
    }
    // Degenerate slices (mask all zero) fall back to unfiltered moments.
    std::vector<double> msum(map.slice_count, 0.0);
    for (size_t i = 0; i < map.total; ++i) msum[map.slice_of(i)] += cache.mask[i];
    bool any_degenerate = false;
    for (size_t s = 0; s < map.slice_count; ++s) {
      if (msum[s] == 0.0) {
        any_degenerate = true;
        ++cache.degenerate_slices;
      }
    }
    if (any_degenerate) {
      for (size_t i = 0; i < map.total; ++i)
        if (msum[map.slice_of(i)] == 0.0) cache.mask[i] = 1.0;
    }
    slice_moments(x, cache.mask.data(), map, cache.filtered_mu, cache.filtered_var,
                  cache.mask_count);
  } else {
    slice_moments(x, cache.mask.data(), map, cache.filtered_mu, cache.filtered_var,
                  cache.mask_count);
    cache.candidate_mu = cache.filtered_mu;
    cache.candidate_sigma.resize(map.slice_count);
    for (size_t s = 0; s < map.slice_count; ++s)
      cache.candidate_sigma[s] = std::sqrt(cache.filtered_var[s] + cfg.epsilon);
  }

  cache.sigma_prime.resize(map.slice_count);
  for (size_t s = 0; s < map.slice_count; ++s)
    cache.sigma_prime[s] = std::sqrt(cache.filtered_var[s] + cfg.epsilon);

  cache.x_hat = Tensor(x.shape());
  y = Tensor(x.shape());
  const double* gamma = params.gamma.value.data();
  const double* beta = params.beta.value.data();
  for (size_t i = 0; i < map.total; ++i) {
    size_t s = map.slice_of(i);
    size_t c = map.channel_of(i);
    double xh = (x[i] - cache.filtered_mu[s]) / cache.sigma_prime[s];
    cache.x_hat[i] = xh;
    y[i] = gamma[c] * xh + beta[c];
  }

  if (stats && !cfg.grouped()) {
    // For BN/FBN slices are exactly the channels.
    stats->update(cache.filtered_mu, cache.filtered_var, cfg.momentum_alpha);
  }
}

Tensor norm_forward_infer(const Tensor& x, const AffineParams& params, const NormConfig& cfg,
                          const RunningStats* stats, bool* used_initial_stats) {
  if (cfg.grouped()) {
    // Batch-independent: identical computation to training, no stats involved.
    if (used_initial_stats) *used_initial_stats = false;
    Tensor y;
    NormCache cache;
    norm_forward_train(x, params, cfg, nullptr, y, cache);
    return y;
  }
  if (!stats) throw std::invalid_argument("norm: inference requires running stats");
  if (x.rank() < 2 || x.shape()[1] != stats->mean.size())
    throw std::invalid_argument("norm: input channel count mismatch");
  if (used_initial_stats) *used_initial_stats = (stats->update_count == 0);

  size_t spatial = 1;
  for (size_t a = 2; a < x.rank(); ++a) spatial *= x.shape()[a];
  const size_t channels = x.shape()[1];
  const double* gamma = params.gamma.value.data();
  const double* beta = params.beta.value.data();
  Tensor y(x.shape());
  std::vector<double> scale(channels), shift(channels);
  for (size_t c = 0; c < channels; ++c) {
    double inv = 1.0 / std::sqrt(stats->var[c] + cfg.epsilon);
    scale[c] = gamma[c] * inv;
    shift[c] = beta[c] - gamma[c] * stats->mean[c] * inv;
  }
  for (size_t i = 0; i < x.size(); ++i) {
    size_t c = (i / spatial) % channels;
    y[i] = scale[c] * x[i] + shift[c];
  }
  return y;
}

void norm_backward(const Tensor& dLdy, const NormCache& cache, const AffineParams& params,
                   const NormConfig& cfg, Tensor& dLdx, Tensor& dLdgamma, Tensor& dLdbeta) {
  const SliceMap& map = cache.map;
  if (dLdy.shape() != cache.in_shape)
    throw std::invalid_argument("norm backward: gradient shape does not match cache");

  const bool masked = (cfg.grad_mode == GradMode::Masked);
  const double* g = dLdy.data();
  const double* f = cache.mask.data();
  const double* xh = cache.x_hat.data();
  const double* gamma = params.gamma.value.data();

  // Per-slice sums. `w` is f in masked mode and 1 in exact mode; the two
  // coincide bit-for-bit when the mask is identically one.
  std::vector<double> sum_g(map.slice_count, 0.0);     // sum w*g*gamma
  std::vector<double> sum_gx(map.slice_count, 0.0);    // sum w*g*gamma*x_hat
  std::vector<double> sum_fdev(map.slice_count, 0.0);  // sum f*(x - mu')
  for (size_t i = 0; i < map.total; ++i) {
    size_t s = map.slice_of(i);
    size_t c = map.channel_of(i);
    double w = masked ? f[i] : 1.0;
    double gg = w * g[i] * gamma[c];
    sum_g[s] += gg;
    sum_gx[s] += gg * xh[i];
    sum_fdev[s] += f[i] * xh[i] * cache.sigma_prime[s];
  }

  std::vector<double> dsig2(map.slice_count), dmu(map.slice_count);
  for (size_t s = 0; s < map.slice_count; ++s) {
    double D = cache.sigma_prime[s];  // sqrt(sigma'^2 + eps)
    dsig2[s] = sum_gx[s] * (-0.5) / (D * D);
    dmu[s] = -sum_g[s] / D + dsig2[s] * (-2.0 * sum_fdev[s]) / cache.mask_count[s];
  }

  dLdx = Tensor(cache.in_shape);
  dLdgamma = Tensor::zeros(params.gamma.value.shape());
  dLdbeta = Tensor::zeros(params.beta.value.shape());
  for (size_t i = 0; i < map.total; ++i) {
    size_t s = map.slice_of(i);
    size_t c = map.channel_of(i);
    double D = cache.sigma_prime[s];
    double m = cache.mask_count[s];
    double w_mu = masked ? 1.0 : f[i];  // masked mode omits f on the mu
    dLdx[i] = g[i] * gamma[c] / D + dsig2[s] * 2.0 * f[i] * (xh[i] * D) / m +
              dmu[s] * w_mu / m;
    double w = masked ? f[i] : 1.0;
    dLdbeta[c] += w * g[i];
    dLdgamma[c] += w * g[i] * xh[i];
  }
}

Tensor NormLayer::forward_train(const Tensor& x, NormCache& cache) {
  Tensor y;
  if (on_input) on_input(x);
  norm_forward_train(x, affine, cfg, cfg.grouped() ? nullptr : &stats, y, cache);
  degenerate_total += cache.degenerate_slices;
  if (on_normalized) on_normalized(cache.x_hat);
  return y;
}

Tensor NormLayer::forward_infer(const Tensor& x) const {
  return norm_forward_infer(x, affine, cfg, &stats);
}

}  // namespace fbn
