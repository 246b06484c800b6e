#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbn {

// Dense row-major n-dimensional array. Double precision by default
// (Tensor); a float instantiation (TensorF) exists for speed-parity
// experiments. All reductions run in fixed sequential index order so
// results are reproducible across runs on the same platform.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  TensorT(std::vector<size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw std::invalid_argument("tensor: data length does not match shape");
  }

  static TensorT zeros(std::vector<size_t> shape) { return TensorT(std::move(shape)); }
  static TensorT ones(std::vector<size_t> shape) { return TensorT(std::move(shape), T(1)); }
  static TensorT full(std::vector<size_t> shape, T v) { return TensorT(std::move(shape), v); }
  static TensorT scalar(T v) { return TensorT({1}, std::vector<T>{v}); }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t extent(size_t axis) const { return shape_.at(axis); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T& at(std::initializer_list<size_t> idx) { return data_[flat_index(idx)]; }
  const T& at(std::initializer_list<size_t> idx) const { return data_[flat_index(idx)]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(std::vector<size_t> shape) {
    if (count(shape) != data_.size())
      throw std::invalid_argument("reshape: element count mismatch");
    shape_ = std::move(shape);
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static size_t count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) {
      if (e == 0) throw std::invalid_argument("tensor: zero extent");
      n *= e;
    }
    return n;
  }

 private:
  size_t flat_index(std::initializer_list<size_t> idx) const {
    if (idx.size() != shape_.size())
      throw std::invalid_argument("tensor: index rank mismatch");
    size_t flat = 0;
    size_t axis = 0;
    for (size_t i : idx) {
      if (i >= shape_[axis]) throw std::out_of_range("tensor: index out of range");
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  std::vector<size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

// Strides of a shape, with stride 0 on size-1 axes so the same walker
// implements broadcasting.
inline std::vector<size_t> broadcast_strides(const std::vector<size_t>& shape,
                                             const std::vector<size_t>& out_shape) {
  std::vector<size_t> strides(shape.size());
  size_t s = 1;
  for (size_t a = shape.size(); a-- > 0;) {
    strides[a] = (shape[a] == 1) ? 0 : s;
    s *= shape[a];
  }
  for (size_t a = 0; a < shape.size(); ++a) {
    if (shape[a] != out_shape[a] && shape[a] != 1)
      throw std::invalid_argument("tensor: shapes not broadcast-compatible");
  }
  return strides;
}

}  // namespace detail

// Elementwise binary op with broadcasting restricted to size-1 axes.
// Both operands must have the same rank.
template <typename T, typename F>
TensorT<T> zip(const TensorT<T>& a, const TensorT<T>& b, F f) {
  if (a.rank() != b.rank())
    throw std::invalid_argument("tensor: rank mismatch in elementwise op");
  std::vector<size_t> out_shape(a.rank());
  for (size_t i = 0; i < a.rank(); ++i) {
    size_t ea = a.shape()[i], eb = b.shape()[i];
    if (ea != eb && ea != 1 && eb != 1)
      throw std::invalid_argument("tensor: shapes not broadcast-compatible");
    out_shape[i] = std::max(ea, eb);
  }
  TensorT<T> out(out_shape);
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const auto sb = detail::broadcast_strides(b.shape(), out_shape);
  const size_t rank = out_shape.size();
  std::vector<size_t> idx(rank, 0);
  size_t ia = 0, ib = 0;
  for (size_t o = 0; o < out.size(); ++o) {
    out[o] = f(a[ia], b[ib]);
    for (size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out_shape[ax]) break;
      idx[ax] = 0;
      ia -= sa[ax] * out_shape[ax];
      ib -= sb[ax] * out_shape[ax];
    }
  }
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return zip(a, b, [](T x, T y) { return x + y; });
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return zip(a, b, [](T x, T y) { return x - y; });
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return zip(a, b, [](T x, T y) { return x * y; });
}
// Division by zero propagates non-finite values; callers guard with epsilon.
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return zip(a, b, [](T x, T y) { return x / y; });
}

template <typename T>
TensorT<T> sqrt_of(const TensorT<T>& a) {
  TensorT<T> out = a;
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  return out;
}

template <typename T>
TensorT<T> square(const TensorT<T>& a) {
  TensorT<T> out = a;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
  return out;
}

// {0,1} mask: 1 where |t| <= threshold (boundary inclusive).
template <typename T>
TensorT<T> compare_abs_le(const TensorT<T>& t, T threshold) {
  TensorT<T> out(t.shape());
  for (size_t i = 0; i < t.size(); ++i)
    out[i] = (std::abs(t[i]) <= threshold) ? T(1) : T(0);
  return out;
}

namespace detail {

struct AxisPlan {
  std::vector<size_t> out_shape;       // reduced extents removed or kept as 1
  std::vector<size_t> out_shape_kept;  // always with size-1 reduced axes
  std::vector<size_t> out_index;       // flat input index -> flat output index
  size_t out_count = 0;
};

inline AxisPlan make_axis_plan(const std::vector<size_t>& shape,
                               const std::vector<size_t>& axes, bool keepdims) {
  std::vector<bool> reduced(shape.size(), false);
  for (size_t a : axes) {
    if (a >= shape.size()) throw std::invalid_argument("reduce: invalid axis index");
    reduced[a] = true;
  }
  AxisPlan plan;
  for (size_t a = 0; a < shape.size(); ++a) {
    plan.out_shape_kept.push_back(reduced[a] ? 1 : shape[a]);
    if (!reduced[a] || keepdims) plan.out_shape.push_back(reduced[a] ? 1 : shape[a]);
  }
  if (plan.out_shape.empty()) plan.out_shape.push_back(1);
  plan.out_count = TensorT<double>::count(plan.out_shape_kept);

  size_t total = TensorT<double>::count(shape);
  plan.out_index.resize(total);
  std::vector<size_t> out_strides(shape.size());
  size_t s = 1;
  for (size_t a = shape.size(); a-- > 0;) {
    out_strides[a] = reduced[a] ? 0 : s;
    s *= plan.out_shape_kept[a];
  }
  std::vector<size_t> idx(shape.size(), 0);
  size_t oi = 0;
  for (size_t i = 0; i < total; ++i) {
    plan.out_index[i] = oi;
    for (size_t ax = shape.size(); ax-- > 0;) {
      ++idx[ax];
      oi += out_strides[ax];
      if (idx[ax] < shape[ax]) break;
      idx[ax] = 0;
      oi -= out_strides[ax] * shape[ax];
    }
  }
  return plan;
}

}  // namespace detail

// Arithmetic mean over the given axes, sequential summation order.
template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& t, const std::vector<size_t>& axes,
                       bool keepdims = false) {
  auto plan = detail::make_axis_plan(t.shape(), axes, keepdims);
  std::vector<T> sums(plan.out_count, T(0));
  std::vector<size_t> counts(plan.out_count, 0);
  for (size_t i = 0; i < t.size(); ++i) {
    sums[plan.out_index[i]] += t[i];
    ++counts[plan.out_index[i]];
  }
  for (size_t o = 0; o < plan.out_count; ++o) sums[o] /= T(counts[o]);
  return TensorT<T>(plan.out_shape, std::move(sums));
}

template <typename T>
struct MaskedMoments {
  TensorT<T> mean;
  TensorT<T> variance;  // biased (population) variance
  TensorT<T> count;
};

// Masked mean / biased variance / count over the given axes. Two passes
// (sums, then squared deviations), sequential order; with mask identically
// one this is bit-for-bit the plain mean and variance.
// A reduction slice whose mask sums to zero is a degenerate-mask error.
template <typename T>
MaskedMoments<T> reduce_masked_moments(const TensorT<T>& t, const TensorT<T>& mask,
                                       const std::vector<size_t>& axes,
                                       bool keepdims = false) {
  if (!t.same_shape(mask))
    throw std::invalid_argument("reduce_masked_moments: mask shape mismatch");
  auto plan = detail::make_axis_plan(t.shape(), axes, keepdims);
  std::vector<T> sum(plan.out_count, T(0));
  std::vector<T> cnt(plan.out_count, T(0));
  for (size_t i = 0; i < t.size(); ++i) {
    sum[plan.out_index[i]] += mask[i] * t[i];
    cnt[plan.out_index[i]] += mask[i];
  }
  for (size_t o = 0; o < plan.out_count; ++o) {
    if (cnt[o] == T(0))
      throw std::domain_error("reduce_masked_moments: degenerate mask (all zero in a slice)");
    sum[o] /= cnt[o];
  }
  std::vector<T> sq(plan.out_count, T(0));
  for (size_t i = 0; i < t.size(); ++i) {
    T d = t[i] - sum[plan.out_index[i]];
    sq[plan.out_index[i]] += mask[i] * d * d;
  }
  for (size_t o = 0; o < plan.out_count; ++o) sq[o] /= cnt[o];
  return {TensorT<T>(plan.out_shape, std::move(sum)),
          TensorT<T>(plan.out_shape, std::move(sq)),
          TensorT<T>(plan.out_shape, std::move(cnt))};
}

}  // namespace fbn
