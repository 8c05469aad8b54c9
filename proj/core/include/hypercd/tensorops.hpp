#pragma once

// Dense kernels with exact hand-derived gradients. Everything is templated on
// the scalar type and explicitly instantiated for float (training) and double
// (finite-difference checks).

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hypercd {

// N x C x H x W, row-major in that order.
template <class T>
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<T> values;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), values(n_ * c_ * h_ * w_, fill) {}

  std::size_t size() const { return values.size(); }
  std::size_t index(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const {
    return ((in * c + ic) * h + ih) * w + iw;
  }
  T& at(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) {
    return values[index(in, ic, ih, iw)];
  }
  T at(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const {
    return values[index(in, ic, ih, iw)];
  }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

// Row-major matrix: one row per pixel (pixel-major view of a Tensor4).
template <class T>
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<T> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), values(r * c, fill) {}
  T& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  T at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const T> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

// Throws Error(kNumeric) naming `where` if any value is NaN or infinite.
template <class T>
void check_finite(std::span<const T> values, const std::string& where);

// (N, C, H, W) -> (N*H*W) x C, rows ordered (n, h, w).
template <class T>
Matrix<T> to_pixel_major(const Tensor4<T>& x);
template <class T>
Tensor4<T> from_pixel_major(const Matrix<T>& m, std::size_t n, std::size_t h, std::size_t w);

// --- convolution ----------------------------------------------------------

template <class T>
struct ConvCache {
  std::size_t n = 0, c_in = 0, h = 0, w = 0;  // input shape
  std::size_t kernel = 0, pad = 0;
  std::size_t out_h = 0, out_w = 0;
  Matrix<T> columns;  // im2col: (N*Ho*Wo) x (C_in*k*k)
};

template <class T>
struct ConvGrads {
  Tensor4<T> dx;
  std::vector<T> dw;  // K_out x K_in x k x k
  std::vector<T> db;  // K_out
};

// Stride-1 cross-correlation with zero padding. `weights` is
// K_out x K_in x k x k row-major, `bias` has K_out entries. Output spatial
// size is H + 2*pad - k + 1. Pass cache = nullptr for inference.
template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weights, std::span<const T> bias,
                          std::size_t out_channels, std::size_t kernel, std::size_t pad,
                          ConvCache<T>* cache);

// With input_grad == false, dx is left empty (first layer on raw data).
template <class T>
ConvGrads<T> conv2d_backward(const ConvCache<T>& cache, std::span<const T> weights,
                             std::size_t out_channels, const Tensor4<T>& dy,
                             bool input_grad = true);

// --- activations and pooling ----------------------------------------------

template <class T>
Tensor4<T> relu_forward(const Tensor4<T>& x);
// Masks dy by the sign of the forward input; the gradient at exactly 0 is 0.
// `y` may be the forward input or output (both have the same positive set).
template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy);

template <class T>
struct PoolCache {
  std::size_t in_h = 0, in_w = 0;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Stride-1 max pooling without padding; output side H - k + 1. Ties go to the
// first position in row-major window order.
template <class T>
Tensor4<T> maxpool_forward(const Tensor4<T>& x, std::size_t kernel, PoolCache<T>* cache);
template <class T>
Tensor4<T> maxpool_backward(const PoolCache<T>& cache, const Tensor4<T>& dy);

// Drops `margin` pixels on every spatial side.
template <class T>
Tensor4<T> crop_forward(const Tensor4<T>& x, std::size_t margin);
template <class T>
Tensor4<T> crop_backward(const Tensor4<T>& dy, std::size_t margin);

template <class T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>> parts);
template <class T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& dy, std::span<const std::size_t> channels);

template <class T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b);

// --- embedding normalization ---------------------------------------------

// Row-wise v / max(|v|, eps).
template <class T>
Matrix<T> l2_normalize_forward(const Matrix<T>& v, T eps);
// Exact vector-Jacobian product of l2_normalize_forward.
template <class T>
Matrix<T> l2_normalize_backward(const Matrix<T>& v, const Matrix<T>& dy, T eps);

// --- softmax cross-entropy -------------------------------------------------

template <class T>
struct CrossEntropyResult {
  T loss = 0;          // mean over rows
  Matrix<T> dlogits;   // gradient of the mean loss
};

// `targets` holds class indices 0..C-1.
template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const Matrix<T>& logits,
                                            std::span<const std::size_t> targets);

// --- parameters and SGD -----------------------------------------------------

enum class LrGroup { kShared, kDomainSpecific };

template <class T>
struct ParamTensor {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> momentum;
  LrGroup group = LrGroup::kShared;
  bool decay = true;  // weight decay applies to weights, not biases

  ParamTensor() = default;
  ParamTensor(std::vector<std::size_t> shape_, LrGroup group_, bool decay_);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

struct SgdConfig {
  double base_lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 0.005;
  double gamma = 0.1;
  std::vector<std::size_t> milestones{120, 160};
  // Gradients are rescaled to at most this global L2 norm before the
  // momentum update (0 disables).
  double max_grad_norm = 1.0;

  void validate() const;
};

// base_lr * gamma^(number of milestones <= iter)
double lr_at(std::size_t iter, const SgdConfig& cfg);

struct StepRates {
  double shared = 0;
  double domain_specific = 0;
  double grad_norm = 0;  // before clipping
};

// m <- momentum*m + (grad + wd*value); value <- value - lr_eff*m, with
// lr_eff = lr_at(iter) for the shared group and domain_lr_multiplier times
// that for the domain-specific group. Weight decay is skipped for tensors with
// decay == false.
template <class T>
StepRates sgd_step(std::span<ParamTensor<T>* const> params, const SgdConfig& cfg, std::size_t iter,
                   double domain_lr_multiplier);

}  // namespace hypercd
