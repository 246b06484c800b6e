#include "fbn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace fbn {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::istream& in, size_t& offset, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw IdxFormatError("truncated IDX file while reading " + what, offset);
  offset += 4;
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                        (unsigned char)(v >> 8), (unsigned char)v};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("cannot open images file: " + images_path);
  size_t off = 0;
  uint32_t magic = read_be32(imgs, off, "images magic");
  if (magic != kImagesMagic)
    throw IdxFormatError("bad images magic " + std::to_string(magic), off - 4);
  uint32_t n = read_be32(imgs, off, "image count");
  uint32_t rows = read_be32(imgs, off, "row count");
  uint32_t cols = read_be32(imgs, off, "column count");

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("cannot open labels file: " + labels_path);
  size_t loff = 0;
  uint32_t lmagic = read_be32(labs, loff, "labels magic");
  if (lmagic != kLabelsMagic)
    throw IdxFormatError("bad labels magic " + std::to_string(lmagic), loff - 4);
  uint32_t ln = read_be32(labs, loff, "label count");
  if (ln != n)
    throw IdxFormatError("image/label count mismatch: " + std::to_string(n) + " vs " +
                             std::to_string(ln),
                         loff - 4);

  Dataset ds;
  ds.images = Tensor({n, 1, rows, cols});
  ds.labels.resize(n);
  std::vector<unsigned char> buf(size_t(rows) * cols);
  for (uint32_t i = 0; i < n; ++i) {
    if (!imgs.read(reinterpret_cast<char*>(buf.data()), buf.size()))
      throw IdxFormatError("truncated image data", off);
    off += buf.size();
    double* dst = ds.images.data() + size_t(i) * rows * cols;
    for (size_t p = 0; p < buf.size(); ++p) dst[p] = double(buf[p]) / 255.0;
  }
  std::vector<unsigned char> lbuf(n);
  if (!labs.read(reinterpret_cast<char*>(lbuf.data()), n))
    throw IdxFormatError("truncated label data", loff);
  for (uint32_t i = 0; i < n; ++i) {
    if (lbuf[i] > 9) throw IdxFormatError("label out of range", loff + i);
    ds.labels[i] = lbuf[i];
  }
  return ds;
}

void save_mnist_idx(const Dataset& ds, const std::string& images_path,
                    const std::string& labels_path) {
  const auto& shp = ds.images.shape();
  uint32_t n = uint32_t(shp[0]), rows = uint32_t(shp[2]), cols = uint32_t(shp[3]);
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("cannot write images file: " + images_path);
  write_be32(imgs, kImagesMagic);
  write_be32(imgs, n);
  write_be32(imgs, rows);
  write_be32(imgs, cols);
  std::vector<unsigned char> buf(size_t(rows) * cols);
  for (uint32_t i = 0; i < n; ++i) {
    const double* src = ds.images.data() + size_t(i) * rows * cols;
    for (size_t p = 0; p < buf.size(); ++p)
      buf[p] = (unsigned char)std::lround(std::clamp(src[p], 0.0, 1.0) * 255.0);
    imgs.write(reinterpret_cast<const char*>(buf.data()), buf.size());
  }
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("cannot write labels file: " + labels_path);
  write_be32(labs, kLabelsMagic);
  write_be32(labs, n);
  std::vector<unsigned char> lbuf(n);
  for (uint32_t i = 0; i < n; ++i) lbuf[i] = (unsigned char)ds.labels[i];
  labs.write(reinterpret_cast<const char*>(lbuf.data()), n);
}

SyntheticSample synth_gaussian_with_outliers(const SyntheticSpec& spec) {
  if (spec.outlier_rate < 0 || spec.outlier_rate >= 1)
    throw std::invalid_argument("synthetic spec: outlier rate must be in [0,1)");
  if (spec.outlier_min_sigma > spec.outlier_max_sigma)
    throw std::invalid_argument("synthetic spec: magnitude range inverted");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> base(spec.base_mean, spec.base_sigma);
  SyntheticSample out;
  out.values = Tensor({spec.count});
  for (size_t i = 0; i < spec.count; ++i) out.values[i] = base(rng);

  size_t k = size_t(std::llround(spec.outlier_rate * double(spec.count)));
  std::vector<size_t> idx(spec.count);
  for (size_t i = 0; i < spec.count; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::uniform_real_distribution<double> mag(spec.outlier_min_sigma, spec.outlier_max_sigma);
  std::bernoulli_distribution flip(0.5);
  for (size_t i : idx) {
    double sign = flip(rng) ? -1.0 : 1.0;
    out.values[i] = spec.base_mean + sign * mag(rng) * spec.base_sigma;
  }
  out.outlier_indices = idx;

  std::vector<bool> is_out(spec.count, false);
  for (size_t i : idx) is_out[i] = true;
  double n_in = 0;
  for (size_t i = 0; i < spec.count; ++i)
    if (!is_out[i]) {
      out.inlier_mean += out.values[i];
      n_in += 1;
    }
  if (n_in > 0) out.inlier_mean /= n_in;
  for (size_t i = 0; i < spec.count; ++i)
    if (!is_out[i]) {
      double d = out.values[i] - out.inlier_mean;
      out.inlier_variance += d * d;
    }
  if (n_in > 0) out.inlier_variance /= n_in;
  return out;
}

Batcher::Batcher(const Dataset& ds, size_t batch_size, uint64_t seed, size_t epoch,
                 bool train)
    : ds_(&ds), batch_size_(batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batcher: batch_size must be >= 1");
  batches_ = train ? ds.size() / batch_size : (ds.size() + batch_size - 1) / batch_size;
  reshuffle(seed, epoch);
}

void Batcher::reshuffle(uint64_t seed, size_t epoch) {
  perm_.resize(ds_->size());
  for (size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(perm_.begin(), perm_.end(), rng);
}

void Batcher::get(size_t b, Tensor& x, std::vector<int>& labels) const {
  if (b >= batches_) throw std::out_of_range("batcher: batch index out of range");
  size_t begin = b * batch_size_;
  size_t end = std::min(begin + batch_size_, ds_->size());
  size_t n = end - begin;
  const auto& shp = ds_->images.shape();
  size_t stride = shp[1] * shp[2] * shp[3];
  x = Tensor({n, shp[1], shp[2], shp[3]});
  labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    size_t src = perm_[begin + i];
    std::copy_n(ds_->images.data() + src * stride, stride, x.data() + i * stride);
    labels[i] = ds_->labels[src];
  }
}

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

// Stroke skeletons per digit on a unit box, y pointing down.
std::vector<Stroke> digit_strokes(int digit) {
  auto arc = [](double cx, double cy, double rx, double ry, double a0, double a1,
                int steps) {
    Stroke s;
    for (int i = 0; i <= steps; ++i) {
      double a = a0 + (a1 - a0) * double(i) / steps;
      s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
  };
  const double pi = 3.14159265358979323846;
  switch (digit) {
    case 0:
      return {arc(0.5, 0.5, 0.26, 0.37, 0, 2 * pi, 16)};
    case 1:
      return {{{0.34, 0.3}, {0.52, 0.13}, {0.52, 0.88}}};
    case 2:
      return {{{0.27, 0.32}, {0.3, 0.18}, {0.48, 0.12}, {0.67, 0.17}, {0.72, 0.32},
               {0.62, 0.5}, {0.33, 0.76}, {0.25, 0.87}},
              {{0.25, 0.87}, {0.74, 0.87}}};
    case 3:
      return {{{0.27, 0.2}, {0.43, 0.12}, {0.63, 0.16}, {0.7, 0.3}, {0.58, 0.44},
               {0.45, 0.48}},
              {{0.45, 0.48}, {0.66, 0.54}, {0.73, 0.68}, {0.62, 0.83}, {0.42, 0.89},
               {0.26, 0.8}}};
    case 4:
      return {{{0.62, 0.12}, {0.24, 0.62}, {0.79, 0.62}}, {{0.62, 0.12}, {0.62, 0.9}}};
    case 5:
      return {{{0.7, 0.13}, {0.31, 0.13}, {0.29, 0.47}},
              {{0.29, 0.47}, {0.5, 0.42}, {0.67, 0.49}, {0.72, 0.64}, {0.62, 0.81},
               {0.41, 0.88}, {0.27, 0.8}}};
    case 6:
      return {{{0.64, 0.14}, {0.45, 0.3}, {0.32, 0.5}, {0.28, 0.66}},
              arc(0.48, 0.66, 0.2, 0.2, pi, 3 * pi, 12)};
    case 7:
      return {{{0.25, 0.13}, {0.75, 0.13}, {0.42, 0.88}}};
    case 8:
      return {arc(0.5, 0.3, 0.17, 0.17, -pi / 2, 3 * pi / 2, 12),
              arc(0.5, 0.67, 0.21, 0.21, -pi / 2, 3 * pi / 2, 12)};
    case 9:
      return {arc(0.5, 0.33, 0.19, 0.19, 0, 2 * pi, 12), {{0.69, 0.33}, {0.6, 0.88}}};
  }
  throw std::invalid_argument("digit out of range");
}

double seg_dist(double px, double py, const Pt& a, const Pt& b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double wx = px - a.x, wy = py - a.y;
  double vv = vx * vx + vy * vy;
  double t = vv > 0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
  double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset make_synthetic_digits(size_t n, uint64_t seed, double anomaly_rate,
                              const std::string& split) {
  const size_t S = 28;
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({n, 1, S, S});
  ds.labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed(seed, i));
    std::uniform_int_distribution<int> digit_dist(0, 9);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.12);

    int digit = digit_dist(rng);
    ds.labels[i] = digit;

    double theta = (unif(rng) - 0.5) * 0.9;             // +- ~26 degrees
    double scale = 19.0 * (0.62 + 0.5 * unif(rng));     // pixels per unit
    double shear = (unif(rng) - 0.5) * 0.6;
    double tx = 14.0 + (unif(rng) - 0.5) * 7.0;
    double ty = 14.0 + (unif(rng) - 0.5) * 7.0;
    double thick = 0.6 + 1.6 * unif(rng);               // stroke half-width-ish, px
    double contrast = 0.6 + 0.4 * unif(rng);            // per-image stroke intensity
    double ct = std::cos(theta), st = std::sin(theta);

    auto strokes = digit_strokes(digit);
    std::vector<Stroke> px_strokes;
    for (auto& s : strokes) {
      Stroke t;
      for (auto& p : s) {
        double gx = p.x - 0.5, gy = p.y - 0.5;
        gx += shear * gy;
        double rx = ct * gx - st * gy, ry = st * gx + ct * gy;
        t.push_back({tx + scale * rx, ty + scale * ry});
      }
      px_strokes.push_back(std::move(t));
    }

    double* img = ds.images.data() + i * S * S;
    for (size_t r = 0; r < S; ++r) {
      for (size_t c = 0; c < S; ++c) {
        double d = 1e9;
        for (auto& s : px_strokes)
          for (size_t k = 0; k + 1 < s.size(); ++k)
            d = std::min(d, seg_dist(double(c), double(r), s[k], s[k + 1]));
        double v = contrast * std::clamp((thick - d) / 1.2 + 0.5, 0.0, 1.0);
        v += noise(rng);
        img[r * S + c] = std::clamp(v, 0.0, 1.0);
      }
    }

    if (unif(rng) < anomaly_rate) {
      // rare corrupted sample: a saturated disc covering much of the frame,
      // as from a sensor flare; large enough to survive pooling
      double bx = 8 + 12 * unif(rng), by = 8 + 12 * unif(rng);
      double br = 8.0 + 6.0 * unif(rng);
      for (size_t r = 0; r < S; ++r)
        for (size_t c = 0; c < S; ++c) {
          double dx = double(c) - bx, dy = double(r) - by;
          if (dx * dx + dy * dy < br * br) img[r * S + c] = 1.0;
        }
    }
  }
  return ds;
}

}  // namespace fbn
