#include "hypercd/tensorops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hypercd/error.hpp"

namespace hypercd {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRowMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRowMat = Eigen::Map<const RowMat<T>>;

}  // namespace

template <class T>
void check_finite(std::span<const T> values, const std::string& where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(ErrorKind::kNumeric, "non-finite value at element " + std::to_string(i) + " in " + where);
    }
  }
}

template <class T>
Matrix<T> to_pixel_major(const Tensor4<T>& x) {
  Matrix<T> m(x.n * x.h * x.w, x.c);
  const std::size_t hw = x.h * x.w;
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t c = 0; c < x.c; ++c) {
      const T* src = x.values.data() + (n * x.c + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) m.values[(n * hw + p) * x.c + c] = src[p];
    }
  }
  return m;
}

template <class T>
Tensor4<T> from_pixel_major(const Matrix<T>& m, std::size_t n, std::size_t h, std::size_t w) {
  require(m.rows == n * h * w, ErrorKind::kShapeMismatch, "from_pixel_major: row count mismatch");
  Tensor4<T> x(n, m.cols, h, w);
  const std::size_t hw = h * w;
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      T* dst = x.values.data() + (in * m.cols + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = m.values[(in * hw + p) * m.cols + c];
    }
  }
  return x;
}

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weights, std::span<const T> bias,
                          std::size_t out_channels, std::size_t kernel, std::size_t pad,
                          ConvCache<T>* cache) {
  const std::size_t patch = x.c * kernel * kernel;
  require(weights.size() == out_channels * patch, ErrorKind::kShapeMismatch,
          "conv2d: weights hold " + std::to_string(weights.size()) + " values, expected " +
              std::to_string(out_channels) + "x" + std::to_string(x.c) + "x" +
              std::to_string(kernel) + "x" + std::to_string(kernel));
  require(bias.size() == out_channels, ErrorKind::kShapeMismatch, "conv2d: bias size mismatch");
  require(x.h + 2 * pad >= kernel && x.w + 2 * pad >= kernel, ErrorKind::kShapeMismatch,
          "conv2d: input smaller than kernel");
  const std::size_t oh = x.h + 2 * pad - kernel + 1;
  const std::size_t ow = x.w + 2 * pad - kernel + 1;
  const std::size_t rows = x.n * oh * ow;

  // im2col, column order (c, ky, kx) to match the weight layout.
  Matrix<T> cols(rows, patch);
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* dst = cols.values.data() + ((n * oh + oy) * ow + ox) * patch;
        for (std::size_t c = 0; c < x.c; ++c) {
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(x.h) &&
                                  ix < static_cast<std::ptrdiff_t>(x.w);
              *dst++ = inside ? x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) : T(0);
            }
          }
        }
      }
    }
  }

  Matrix<T> out(rows, out_channels);
  {
    CMapRowMat<T> a(cols.values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(patch));
    CMapRowMat<T> wm(weights.data(), static_cast<Eigen::Index>(out_channels), static_cast<Eigen::Index>(patch));
    MapRowMat<T> y(out.values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_channels));
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), static_cast<Eigen::Index>(out_channels));
    y.noalias() = a * wm.transpose();
    y.rowwise() += b;
  }
  check_finite<T>(out.values, "conv2d_forward output");

  if (cache != nullptr) {
    cache->n = x.n;
    cache->c_in = x.c;
    cache->h = x.h;
    cache->w = x.w;
    cache->kernel = kernel;
    cache->pad = pad;
    cache->out_h = oh;
    cache->out_w = ow;
    cache->columns = std::move(cols);
  }
  return from_pixel_major(out, x.n, oh, ow);
}

template <class T>
ConvGrads<T> conv2d_backward(const ConvCache<T>& cache, std::span<const T> weights,
                             std::size_t out_channels, const Tensor4<T>& dy, bool input_grad) {
  require(dy.n == cache.n && dy.c == out_channels && dy.h == cache.out_h && dy.w == cache.out_w,
          ErrorKind::kShapeMismatch, "conv2d_backward: upstream gradient does not match cache");
  const std::size_t k = cache.kernel;
  const std::size_t patch = cache.c_in * k * k;
  require(weights.size() == out_channels * patch, ErrorKind::kShapeMismatch,
          "conv2d_backward: weights do not match cache");
  require(cache.columns.rows == cache.n * cache.out_h * cache.out_w, ErrorKind::kState,
          "conv2d_backward: cache holds no forward columns");
  const std::size_t rows = cache.columns.rows;

  const Matrix<T> gy = to_pixel_major(dy);
  ConvGrads<T> g;
  g.dw.assign(out_channels * patch, T(0));
  g.db.assign(out_channels, T(0));
  Matrix<T> dcols(input_grad ? rows : 0, patch);
  {
    const auto R = static_cast<Eigen::Index>(rows);
    const auto P = static_cast<Eigen::Index>(patch);
    const auto K = static_cast<Eigen::Index>(out_channels);
    CMapRowMat<T> a(cache.columns.values.data(), R, P);
    CMapRowMat<T> wm(weights.data(), K, P);
    CMapRowMat<T> d(gy.values.data(), R, K);
    MapRowMat<T> dw(g.dw.data(), K, P);
    dw.noalias() = d.transpose() * a;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(g.db.data(), K);
    db = d.colwise().sum();
    if (input_grad) {
      MapRowMat<T> dc(dcols.values.data(), R, P);
      dc.noalias() = d * wm;
    }
  }
  check_finite<T>(g.dw, "conv2d_backward weight gradient");
  if (!input_grad) return g;

  // col2im: scatter-add back onto the input, dropping padded positions.
  g.dx = Tensor4<T>(cache.n, cache.c_in, cache.h, cache.w);
  const std::size_t oh = cache.out_h, ow = cache.out_w, pad = cache.pad;
  for (std::size_t n = 0; n < cache.n; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T* src = dcols.values.data() + ((n * oh + oy) * ow + ox) * patch;
        for (std::size_t c = 0; c < cache.c_in; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t kx = 0; kx < k; ++kx, ++src) {
              const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(cache.h) ||
                  ix >= static_cast<std::ptrdiff_t>(cache.w)) {
                continue;
              }
              g.dx.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += *src;
            }
          }
        }
      }
    }
  }
  check_finite<T>(g.dx.values, "conv2d_backward input gradient");
  return g;
}

template <class T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  Tensor4<T> y = x;
  for (auto& v : y.values) v = v > T(0) ? v : T(0);
  return y;
}

template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy) {
  require(y.same_shape(dy), ErrorKind::kShapeMismatch, "relu_backward: shape mismatch");
  Tensor4<T> dx = dy;
  for (std::size_t i = 0; i < dx.values.size(); ++i) {
    if (!(y.values[i] > T(0))) dx.values[i] = T(0);
  }
  return dx;
}

template <class T>
Tensor4<T> maxpool_forward(const Tensor4<T>& x, std::size_t kernel, PoolCache<T>* cache) {
  require(x.h >= kernel && x.w >= kernel, ErrorKind::kShapeMismatch, "maxpool: input smaller than window");
  const std::size_t oh = x.h - kernel + 1, ow = x.w - kernel + 1;
  Tensor4<T> y(x.n, x.c, oh, ow);
  if (cache != nullptr) {
    cache->in_h = x.h;
    cache->in_w = x.w;
    cache->argmax.assign(y.size(), 0);
  }
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t c = 0; c < x.c; ++c) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = x.index(n, c, oy, ox);
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::size_t idx = x.index(n, c, oy + ky, ox + kx);
              if (x.values[idx] > x.values[best]) best = idx;
            }
          }
          const std::size_t out = y.index(n, c, oy, ox);
          y.values[out] = x.values[best];
          if (cache != nullptr) cache->argmax[out] = best;
        }
      }
    }
  }
  return y;
}

template <class T>
Tensor4<T> maxpool_backward(const PoolCache<T>& cache, const Tensor4<T>& dy) {
  require(cache.argmax.size() == dy.size(), ErrorKind::kShapeMismatch, "maxpool_backward: cache mismatch");
  Tensor4<T> dx(dy.n, dy.c, cache.in_h, cache.in_w);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.values[cache.argmax[i]] += dy.values[i];
  return dx;
}

template <class T>
Tensor4<T> crop_forward(const Tensor4<T>& x, std::size_t margin) {
  if (margin == 0) return x;
  require(x.h > 2 * margin && x.w > 2 * margin, ErrorKind::kShapeMismatch, "crop: margin too large");
  Tensor4<T> y(x.n, x.c, x.h - 2 * margin, x.w - 2 * margin);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < x.c; ++c)
      for (std::size_t r = 0; r < y.h; ++r)
        for (std::size_t q = 0; q < y.w; ++q) y.at(n, c, r, q) = x.at(n, c, r + margin, q + margin);
  return y;
}

template <class T>
Tensor4<T> crop_backward(const Tensor4<T>& dy, std::size_t margin) {
  if (margin == 0) return dy;
  Tensor4<T> dx(dy.n, dy.c, dy.h + 2 * margin, dy.w + 2 * margin);
  for (std::size_t n = 0; n < dy.n; ++n)
    for (std::size_t c = 0; c < dy.c; ++c)
      for (std::size_t r = 0; r < dy.h; ++r)
        for (std::size_t q = 0; q < dy.w; ++q) dx.at(n, c, r + margin, q + margin) = dy.at(n, c, r, q);
  return dx;
}

template <class T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>> parts) {
  require(!parts.empty(), ErrorKind::kShapeMismatch, "concat: no inputs");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    require(p.n == parts[0].n && p.h == parts[0].h && p.w == parts[0].w, ErrorKind::kShapeMismatch,
            "concat: spatial or batch mismatch");
    channels += p.c;
  }
  Tensor4<T> y(parts[0].n, channels, parts[0].h, parts[0].w);
  const std::size_t hw = y.h * y.w;
  for (std::size_t n = 0; n < y.n; ++n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      std::copy_n(p.values.data() + n * p.c * hw, p.c * hw, y.values.data() + (n * channels + offset) * hw);
      offset += p.c;
    }
  }
  return y;
}

template <class T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& dy, std::span<const std::size_t> channels) {
  std::vector<Tensor4<T>> out;
  const std::size_t hw = dy.h * dy.w;
  std::size_t offset = 0;
  for (std::size_t c : channels) {
    Tensor4<T> part(dy.n, c, dy.h, dy.w);
    for (std::size_t n = 0; n < dy.n; ++n) {
      std::copy_n(dy.values.data() + (n * dy.c + offset) * hw, c * hw, part.values.data() + n * c * hw);
    }
    offset += c;
    out.push_back(std::move(part));
  }
  require(offset == dy.c, ErrorKind::kShapeMismatch, "split_channels: channel counts do not sum to input");
  return out;
}

template <class T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  require(a.same_shape(b), ErrorKind::kShapeMismatch, "add: shape mismatch");
  Tensor4<T> y = a;
  for (std::size_t i = 0; i < y.values.size(); ++i) y.values[i] += b.values[i];
  return y;
}

template <class T>
Matrix<T> l2_normalize_forward(const Matrix<T>& v, T eps) {
  Matrix<T> y(v.rows, v.cols);
  for (std::size_t r = 0; r < v.rows; ++r) {
    T sq = 0;
    for (std::size_t c = 0; c < v.cols; ++c) sq += v.at(r, c) * v.at(r, c);
    const T scale = T(1) / std::max(std::sqrt(sq), eps);
    for (std::size_t c = 0; c < v.cols; ++c) y.at(r, c) = v.at(r, c) * scale;
  }
  return y;
}

template <class T>
Matrix<T> l2_normalize_backward(const Matrix<T>& v, const Matrix<T>& dy, T eps) {
  require(v.rows == dy.rows && v.cols == dy.cols, ErrorKind::kShapeMismatch, "l2_normalize_backward: shape mismatch");
  Matrix<T> dx(v.rows, v.cols);
  for (std::size_t r = 0; r < v.rows; ++r) {
    T sq = 0;
    for (std::size_t c = 0; c < v.cols; ++c) sq += v.at(r, c) * v.at(r, c);
    const T norm = std::sqrt(sq);
    if (norm <= eps) {
      // Below eps the map is linear: v / eps.
      for (std::size_t c = 0; c < v.cols; ++c) dx.at(r, c) = dy.at(r, c) / eps;
      continue;
    }
    // d(v/|v|) = (I - u u^T) / |v|
    T dot = 0;
    for (std::size_t c = 0; c < v.cols; ++c) dot += v.at(r, c) * dy.at(r, c);
    const T inv = T(1) / norm;
    for (std::size_t c = 0; c < v.cols; ++c) {
      const T u = v.at(r, c) * inv;
      dx.at(r, c) = (dy.at(r, c) - u * dot * inv) * inv;
    }
  }
  return dx;
}

template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const Matrix<T>& logits, std::span<const std::size_t> targets) {
  require(targets.size() == logits.rows, ErrorKind::kShapeMismatch, "cross entropy: target count mismatch");
  require(logits.rows > 0, ErrorKind::kShapeMismatch, "cross entropy: empty batch");
  CrossEntropyResult<T> res;
  res.dlogits = Matrix<T>(logits.rows, logits.cols);
  const T inv_n = T(1) / static_cast<T>(logits.rows);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    require(targets[r] < logits.cols, ErrorKind::kInvalidData,
            "cross entropy: target " + std::to_string(targets[r]) + " out of range");
    T mx = logits.at(r, 0);
    for (std::size_t c = 1; c < logits.cols; ++c) mx = std::max(mx, logits.at(r, c));
    T sum = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) sum += std::exp(logits.at(r, c) - mx);
    const T lse = mx + std::log(sum);
    total += static_cast<double>(lse - logits.at(r, targets[r]));
    for (std::size_t c = 0; c < logits.cols; ++c) {
      const T p = std::exp(logits.at(r, c) - lse);
      res.dlogits.at(r, c) = (p - (c == targets[r] ? T(1) : T(0))) * inv_n;
    }
  }
  res.loss = static_cast<T>(total / static_cast<double>(logits.rows));
  require(std::isfinite(res.loss), ErrorKind::kNumeric, "cross entropy: non-finite loss");
  return res;
}

template <class T>
ParamTensor<T>::ParamTensor(std::vector<std::size_t> shape_, LrGroup group_, bool decay_)
    : shape(std::move(shape_)), group(group_), decay(decay_) {
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  value.assign(count, T(0));
  grad.assign(count, T(0));
  momentum.assign(count, T(0));
}

template <class T>
void ParamTensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

void SgdConfig::validate() const {
  require(base_lr > 0 && momentum >= 0 && weight_decay >= 0, ErrorKind::kUsage,
          "sgd: learning rate must be positive, momentum and weight decay non-negative");
  require(gamma > 0 && gamma < 1, ErrorKind::kUsage, "sgd: gamma must lie in (0,1)");
  require(max_grad_norm >= 0, ErrorKind::kUsage, "sgd: max_grad_norm must be non-negative");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    require(milestones[i] > milestones[i - 1], ErrorKind::kUsage, "sgd: milestones must be strictly increasing");
  }
}

double lr_at(std::size_t iter, const SgdConfig& cfg) {
  double lr = cfg.base_lr;
  for (std::size_t m : cfg.milestones) {
    if (m <= iter) lr *= cfg.gamma;
  }
  return lr;
}

template <class T>
StepRates sgd_step(std::span<ParamTensor<T>* const> params, const SgdConfig& cfg, std::size_t iter,
                   double domain_lr_multiplier) {
  StepRates rates;
  rates.shared = lr_at(iter, cfg);
  rates.domain_specific = rates.shared * domain_lr_multiplier;
  for (ParamTensor<T>* p : params) {
    check_finite<T>(p->grad, "sgd_step gradient (iteration " + std::to_string(iter) + ")");
  }
  double sq = 0;
  for (const ParamTensor<T>* p : params) {
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  rates.grad_norm = std::sqrt(sq);
  const T scale = cfg.max_grad_norm > 0 && rates.grad_norm > cfg.max_grad_norm
                      ? static_cast<T>(cfg.max_grad_norm / rates.grad_norm)
                      : T(1);
  const T mom = static_cast<T>(cfg.momentum);
  for (ParamTensor<T>* p : params) {
    const T lr = static_cast<T>(p->group == LrGroup::kShared ? rates.shared : rates.domain_specific);
    const T wd = p->decay ? static_cast<T>(cfg.weight_decay) : T(0);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      p->momentum[i] = mom * p->momentum[i] + (scale * p->grad[i] + wd * p->value[i]);
      p->value[i] -= lr * p->momentum[i];
    }
  }
  return rates;
}

#define HYPERCD_INSTANTIATE(T)                                                                      \
  template void check_finite<T>(std::span<const T>, const std::string&);                            \
  template Matrix<T> to_pixel_major<T>(const Tensor4<T>&);                                          \
  template Tensor4<T> from_pixel_major<T>(const Matrix<T>&, std::size_t, std::size_t, std::size_t); \
  template Tensor4<T> conv2d_forward<T>(const Tensor4<T>&, std::span<const T>, std::span<const T>,  \
                                        std::size_t, std::size_t, std::size_t, ConvCache<T>*);      \
  template ConvGrads<T> conv2d_backward<T>(const ConvCache<T>&, std::span<const T>, std::size_t,    \
                                           const Tensor4<T>&, bool);                                \
  template Tensor4<T> relu_forward<T>(const Tensor4<T>&);                                           \
  template Tensor4<T> relu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                       \
  template Tensor4<T> maxpool_forward<T>(const Tensor4<T>&, std::size_t, PoolCache<T>*);            \
  template Tensor4<T> maxpool_backward<T>(const PoolCache<T>&, const Tensor4<T>&);                  \
  template Tensor4<T> crop_forward<T>(const Tensor4<T>&, std::size_t);                              \
  template Tensor4<T> crop_backward<T>(const Tensor4<T>&, std::size_t);                             \
  template Tensor4<T> concat_channels<T>(std::span<const Tensor4<T>>);                              \
  template std::vector<Tensor4<T>> split_channels<T>(const Tensor4<T>&, std::span<const std::size_t>); \
  template Tensor4<T> add<T>(const Tensor4<T>&, const Tensor4<T>&);                                 \
  template Matrix<T> l2_normalize_forward<T>(const Matrix<T>&, T);                                  \
  template Matrix<T> l2_normalize_backward<T>(const Matrix<T>&, const Matrix<T>&, T);               \
  template CrossEntropyResult<T> softmax_cross_entropy<T>(const Matrix<T>&, std::span<const std::size_t>); \
  template struct ParamTensor<T>;                                                                   \
  template StepRates sgd_step<T>(std::span<ParamTensor<T>* const>, const SgdConfig&, std::size_t, double);

HYPERCD_INSTANTIATE(float)
HYPERCD_INSTANTIATE(double)

#undef HYPERCD_INSTANTIATE

}  // namespace hypercd
