#include "fbn/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace fbn {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

size_t conv_out(size_t in, size_t k, size_t stride, size_t pad) {
  if (in + 2 * pad < k) throw std::invalid_argument("conv2d: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

// Gather one sample's patches into cols [C*kh*kw, Ho*Wo].
void im2col(const double* x, size_t C, size_t H, size_t W, size_t kh, size_t kw,
            size_t stride, size_t pad, size_t Ho, size_t Wo, double* cols) {
  const size_t patch = kh * kw;
  for (size_t c = 0; c < C; ++c) {
    const double* xc = x + c * H * W;
    for (size_t ki = 0; ki < kh; ++ki) {
      for (size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + (c * patch + ki * kw + kj) * (Ho * Wo);
        for (size_t oi = 0; oi < Ho; ++oi) {
          long ii = long(oi * stride + ki) - long(pad);
          for (size_t oj = 0; oj < Wo; ++oj) {
            long jj = long(oj * stride + kj) - long(pad);
            row[oi * Wo + oj] =
                (ii >= 0 && ii < long(H) && jj >= 0 && jj < long(W)) ? xc[ii * W + jj] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, size_t C, size_t H, size_t W, size_t kh, size_t kw,
                size_t stride, size_t pad, size_t Ho, size_t Wo, double* x) {
  const size_t patch = kh * kw;
  for (size_t c = 0; c < C; ++c) {
    double* xc = x + c * H * W;
    for (size_t ki = 0; ki < kh; ++ki) {
      for (size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + (c * patch + ki * kw + kj) * (Ho * Wo);
        for (size_t oi = 0; oi < Ho; ++oi) {
          long ii = long(oi * stride + ki) - long(pad);
          if (ii < 0 || ii >= long(H)) continue;
          for (size_t oj = 0; oj < Wo; ++oj) {
            long jj = long(oj * stride + kj) - long(pad);
            if (jj >= 0 && jj < long(W)) xc[ii * W + jj] += row[oi * Wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

int Tape::push(Tensor out, bool needs_grad,
               std::function<void(Tape&, const Tensor& g)> back) {
  Node n;
  n.out = std::move(out);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return int(nodes_.size()) - 1;
}

void Tape::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.grad_ready) {
    n.grad = Tensor::zeros(n.out.shape());
    n.grad_ready = true;
  }
  for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

const Tensor& Tape::grad(int id) const {
  const Node& n = nodes_[id];
  if (!n.grad_ready) throw std::logic_error("tape: gradient not computed for node");
  return n.grad;
}

const NormCache& Tape::norm_cache(int norm_node) const {
  const Node& n = nodes_[norm_node];
  if (!n.cache) throw std::logic_error("tape: node has no normalization cache");
  return *n.cache;
}

void Tape::clear() { nodes_.clear(); }

int Tape::input(Tensor t, bool needs_grad) {
  return push(std::move(t), needs_grad, nullptr);
}

int Tape::param(Parameter& p) {
  Parameter* pp = &p;
  int id = push(p.value, p.trainable, nullptr);
  if (p.trainable) {
    nodes_[id].back = [pp, id](Tape& t, const Tensor& g) {
      (void)t;
      (void)id;
      for (size_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
    };
  }
  return id;
}

int Tape::linear(int x, Parameter& W, Parameter& b) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2) throw std::invalid_argument("linear: input must be [N,I]");
  const size_t N = xv.shape()[0], I = xv.shape()[1];
  if (W.value.rank() != 2 || W.value.shape()[1] != I)
    throw std::invalid_argument("linear: weight shape mismatch");
  const size_t O = W.value.shape()[0];
  if (b.value.size() != O) throw std::invalid_argument("linear: bias shape mismatch");

  Tensor y({N, O});
  ConstMapRM xm(xv.data(), N, I);
  ConstMapRM wm(W.value.data(), O, I);
  MapRM ym(y.data(), N, O);
  ym.noalias() = xm * wm.transpose();
  for (size_t n = 0; n < N; ++n)
    for (size_t o = 0; o < O; ++o) y[n * O + o] += b.value[o];

  Parameter* Wp = &W;
  Parameter* bp = &b;
  bool ng = nodes_[x].needs_grad || W.trainable || b.trainable;
  return push(std::move(y), ng, [x, Wp, bp, N, I, O](Tape& t, const Tensor& g) {
    ConstMapRM gm(g.data(), N, O);
    ConstMapRM xm(t.value(x).data(), N, I);
    ConstMapRM wm(Wp->value.data(), O, I);
    if (Wp->trainable) {
      MapRM dwm(Wp->grad.data(), O, I);
      dwm.noalias() += gm.transpose() * xm;
    }
    if (bp->trainable) {
      for (size_t n = 0; n < N; ++n)
        for (size_t o = 0; o < O; ++o) bp->grad[o] += g[n * O + o];
    }
    if (t.nodes_[x].needs_grad) {
      Tensor dx({N, I});
      MapRM dxm(dx.data(), N, I);
      dxm.noalias() = gm * wm;
      t.accumulate(x, dx);
    }
  });
}

int Tape::conv2d(int x, Parameter& K, Parameter& b, size_t stride, size_t pad) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw std::invalid_argument("conv2d: input must be [N,C,H,W]");
  if (K.value.rank() != 4) throw std::invalid_argument("conv2d: kernel must be [F,C,kh,kw]");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const size_t N = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
  const size_t F = K.value.shape()[0], kh = K.value.shape()[2], kw = K.value.shape()[3];
  if (K.value.shape()[1] != C) throw std::invalid_argument("conv2d: channel mismatch");
  if (b.value.size() != F) throw std::invalid_argument("conv2d: bias shape mismatch");
  const size_t Ho = conv_out(H, kh, stride, pad), Wo = conv_out(W, kw, stride, pad);
  const size_t cols_rows = C * kh * kw, cols_cols = Ho * Wo;

  Tensor y({N, F, Ho, Wo});
  std::vector<double> cols(cols_rows * cols_cols);
  ConstMapRM km(K.value.data(), F, cols_rows);
  for (size_t n = 0; n < N; ++n) {
    im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
    ConstMapRM cm(cols.data(), cols_rows, cols_cols);
    MapRM ym(y.data() + n * F * cols_cols, F, cols_cols);
    ym.noalias() = km * cm;
  }
  for (size_t n = 0; n < N; ++n)
    for (size_t f = 0; f < F; ++f) {
      double* yp = y.data() + (n * F + f) * cols_cols;
      for (size_t i = 0; i < cols_cols; ++i) yp[i] += b.value[f];
    }

  Parameter* Kp = &K;
  Parameter* bp = &b;
  bool ng = nodes_[x].needs_grad || K.trainable || b.trainable;
  return push(std::move(y), ng,
              [x, Kp, bp, stride, pad, N, C, H, W, F, kh, kw, Ho, Wo](Tape& t,
                                                                      const Tensor& g) {
                const size_t cols_rows = C * kh * kw, cols_cols = Ho * Wo;
                std::vector<double> cols(cols_rows * cols_cols);
                ConstMapRM km(Kp->value.data(), F, cols_rows);
                const bool need_dx = t.nodes_[x].needs_grad;
                Tensor dx;
                if (need_dx) dx = Tensor::zeros({N, C, H, W});
                std::vector<double> dcols(cols_rows * cols_cols);
                for (size_t n = 0; n < N; ++n) {
                  ConstMapRM gm(g.data() + n * F * cols_cols, F, cols_cols);
                  if (Kp->trainable) {
                    im2col(t.value(x).data() + n * C * H * W, C, H, W, kh, kw, stride,
                           pad, Ho, Wo, cols.data());
                    ConstMapRM cm(cols.data(), cols_rows, cols_cols);
                    MapRM dkm(Kp->grad.data(), F, cols_rows);
                    dkm.noalias() += gm * cm.transpose();
                  }
                  if (need_dx) {
                    MapRM dcm(dcols.data(), cols_rows, cols_cols);
                    dcm.noalias() = km.transpose() * gm;
                    col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               dx.data() + n * C * H * W);
                  }
                }
                if (bp->trainable) {
                  for (size_t n = 0; n < N; ++n)
                    for (size_t f = 0; f < F; ++f) {
                      const double* gp = g.data() + (n * F + f) * cols_cols;
                      double s = 0;
                      for (size_t i = 0; i < cols_cols; ++i) s += gp[i];
                      bp->grad[f] += s;
                    }
                }
                if (need_dx) t.accumulate(x, dx);
              });
}

int Tape::relu(int x) {
  const Tensor& xv = value(x);
  Tensor y(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : 0.0;
  return push(std::move(y), nodes_[x].needs_grad, [x](Tape& t, const Tensor& g) {
    if (!t.nodes_[x].needs_grad) return;
    const Tensor& xv = t.value(x);
    Tensor dx(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) dx[i] = xv[i] > 0 ? g[i] : 0.0;
    t.accumulate(x, dx);
  });
}

int Tape::max_pool2d(int x, size_t k, size_t stride) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw std::invalid_argument("max_pool2d: input must be [N,C,H,W]");
  const size_t N = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
  const size_t Ho = conv_out(H, k, stride, 0), Wo = conv_out(W, k, stride, 0);
  Tensor y({N, C, Ho, Wo});
  auto arg = std::make_shared<std::vector<size_t>>(y.size());
  size_t o = 0;
  for (size_t nc = 0; nc < N * C; ++nc) {
    const double* xp = xv.data() + nc * H * W;
    for (size_t oi = 0; oi < Ho; ++oi)
      for (size_t oj = 0; oj < Wo; ++oj, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        size_t best_idx = 0;
        for (size_t ki = 0; ki < k; ++ki)
          for (size_t kj = 0; kj < k; ++kj) {
            size_t idx = (oi * stride + ki) * W + (oj * stride + kj);
            if (xp[idx] > best) {  // strict: ties keep the lowest flat index
              best = xp[idx];
              best_idx = idx;
            }
          }
        y[o] = best;
        (*arg)[o] = nc * H * W + best_idx;
      }
  }
  return push(std::move(y), nodes_[x].needs_grad, [x, arg](Tape& t, const Tensor& g) {
    if (!t.nodes_[x].needs_grad) return;
    Tensor dx = Tensor::zeros(t.value(x).shape());
    for (size_t i = 0; i < g.size(); ++i) dx[(*arg)[i]] += g[i];
    t.accumulate(x, dx);
  });
}

int Tape::flatten(int x) {
  const Tensor& xv = value(x);
  if (xv.rank() < 2) throw std::invalid_argument("flatten: input must have rank >= 2");
  Tensor y({xv.shape()[0], xv.size() / xv.shape()[0]}, xv.vec());
  return push(std::move(y), nodes_[x].needs_grad, [x](Tape& t, const Tensor& g) {
    if (!t.nodes_[x].needs_grad) return;
    Tensor dx(t.value(x).shape(), g.vec());
    t.accumulate(x, dx);
  });
}

int Tape::softmax_cross_entropy(int logits, const std::vector<int>& labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K]");
  const size_t N = lv.shape()[0], K = lv.shape()[1];
  if (labels.size() != N)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor>(Tensor({N, K}));
  double loss = 0;
  for (size_t n = 0; n < N; ++n) {
    const double* row = lv.data() + n * K;
    double mx = row[0];
    for (size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    double lse = 0;
    for (size_t j = 0; j < K; ++j) lse += std::exp(row[j] - mx);
    lse = mx + std::log(lse);
    int lab = labels[n];
    if (lab < 0 || size_t(lab) >= K)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    loss += lse - row[lab];
    for (size_t j = 0; j < K; ++j) (*probs)[n * K + j] = std::exp(row[j] - lse);
  }
  loss /= double(N);
  auto labs = std::make_shared<std::vector<int>>(labels);
  return push(Tensor::scalar(loss), nodes_[logits].needs_grad,
              [logits, probs, labs, N, K](Tape& t, const Tensor& g) {
                if (!t.nodes_[logits].needs_grad) return;
                Tensor dl({N, K});
                double scale = g[0] / double(N);
                for (size_t n = 0; n < N; ++n)
                  for (size_t j = 0; j < K; ++j) {
                    double p = (*probs)[n * K + j];
                    dl[n * K + j] = scale * (p - (size_t((*labs)[n]) == j ? 1.0 : 0.0));
                  }
                t.accumulate(logits, dl);
              });
}

int Tape::norm(int x, NormLayer& layer, ForwardMode mode) {
  const Tensor& xv = value(x);
  if (mode == ForwardMode::Infer) {
    Tensor y = layer.forward_infer(xv);
    // Inference is treated as a constant transform; no backward is defined.
    return push(std::move(y), false, nullptr);
  }
  auto cache = std::make_shared<NormCache>();
  Tensor y;
  if (mode == ForwardMode::Train) {
    y = layer.forward_train(xv, *cache);
  } else {
    if (layer.on_input) layer.on_input(xv);
    norm_forward_train(xv, layer.affine, layer.cfg, nullptr, y, *cache);
    layer.degenerate_total += cache->degenerate_slices;
    if (layer.on_normalized) layer.on_normalized(cache->x_hat);
  }
  NormLayer* lp = &layer;
  bool ng = nodes_[x].needs_grad || layer.affine.gamma.trainable;
  int id = push(std::move(y), ng, [x, lp, cache](Tape& t, const Tensor& g) {
    Tensor dx, dgamma, dbeta;
    norm_backward(g, *cache, lp->affine, lp->cfg, dx, dgamma, dbeta);
    if (lp->affine.gamma.trainable)
      for (size_t c = 0; c < dgamma.size(); ++c) lp->affine.gamma.grad[c] += dgamma[c];
    if (lp->affine.beta.trainable)
      for (size_t c = 0; c < dbeta.size(); ++c) lp->affine.beta.grad[c] += dbeta[c];
    if (t.nodes_[x].needs_grad) t.accumulate(x, dx);
  });
  nodes_[id].cache = cache;
  return id;
}

int Tape::sum(int x) {
  const Tensor& xv = value(x);
  double s = 0;
  for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return push(Tensor::scalar(s), nodes_[x].needs_grad, [x](Tape& t, const Tensor& g) {
    if (!t.nodes_[x].needs_grad) return;
    Tensor dx = Tensor::full(t.value(x).shape(), g[0]);
    t.accumulate(x, dx);
  });
}

int Tape::square_op(int x) {
  Tensor y = square(value(x));
  return push(std::move(y), nodes_[x].needs_grad, [x](Tape& t, const Tensor& g) {
    if (!t.nodes_[x].needs_grad) return;
    const Tensor& xv = t.value(x);
    Tensor dx(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) dx[i] = 2.0 * xv[i] * g[i];
    t.accumulate(x, dx);
  });
}

int Tape::add_op(int a, int b) {
  if (!value(a).same_shape(value(b))) throw std::invalid_argument("add: shape mismatch");
  Tensor y = add(value(a), value(b));
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(y), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.accumulate(a, g);
    if (t.nodes_[b].needs_grad) t.accumulate(b, g);
  });
}

void Tape::backward(int loss) {
  if (loss < 0 || size_t(loss) >= nodes_.size())
    throw std::invalid_argument("backward: bad node id");
  if (nodes_[loss].out.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  nodes_[loss].grad = Tensor::scalar(1.0);
  nodes_[loss].grad_ready = true;
  nodes_[loss].needs_grad = true;
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.grad_ready || !n.back) continue;
    n.back(*this, n.grad);
  }
}

FdReport finite_difference_check(const std::function<double(const Tensor&)>& f,
                                 const Tensor& analytic_grad, const Tensor& x, double step,
                                 double tolerance,
                                 const std::function<bool(size_t)>& exclude) {
  if (!analytic_grad.same_shape(x))
    throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
  FdReport rep;
  Tensor xp = x;
  for (size_t i = 0; i < x.size(); ++i) {
    if (exclude && exclude(i)) {
      ++rep.excluded;
      continue;
    }
    double orig = xp[i];
    xp[i] = orig + step;
    double fp = f(xp);
    xp[i] = orig - step;
    double fm = f(xp);
    xp[i] = orig;
    double fd = (fp - fm) / (2.0 * step);
    double scale = std::max({1.0, std::abs(fd), std::abs(analytic_grad[i])});
    double rel = std::abs(fd - analytic_grad[i]) / scale;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
    ++rep.checked;
  }
  rep.passed = rep.max_rel_err < tolerance;
  return rep;
}

}  // namespace fbn
