#pragma once

// Cross-domain CNN: a domain-specific spectral encoder per domain, one shared
// residual trunk, and a domain-specific 1x1 classification head per labeled
// domain.
//
// Layout (modified backbone, the default):
//   enc.<d>   C1  k x k conv, B_d -> channels, ReLU
//   trunk     n residual modules  y = relu(x + W_b relu(W_a x))
//   head.<d>  C5  1x1 conv, channels -> C_d
//
// The original backbone (multiscale_encoder, residual_only = false, n = 2)
// replaces C1 by parallel 1x1 / 3x3+maxpool3 / 5x5+maxpool5 branches that are
// concatenated, and wraps the residual stack with plain 1x1 layers C2 before
// and C3, C4 after.
//
// In patch mode every convolution is unpadded: an input window of side
// s + 2 * context_margin() yields an s x s output grid.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hypercd/tensorops.hpp"

namespace hypercd {

struct DomainSpec {
  std::string id;
  std::size_t bands = 0;
  std::size_t classes = 0;  // 0: no classification head for this domain
};

struct ArchConfig {
  std::size_t channels = 128;
  std::size_t encoder_kernel = 5;
  std::size_t encoder_pad = 2;  // whole-image padding; used for FLOPs accounting
  std::size_t n_res_modules = 5;
  bool multiscale_encoder = false;
  bool residual_only = true;

  static ArchConfig modified(std::size_t n = 5);
  static ArchConfig original();
  // Backbone variants by name: "modified" (single 5x5 encoder, residual trunk,
  // n defaults to 5), "original" (multiscale encoder, C2, n = 2, C3, C4),
  // "no_multiscale" (single encoder, C2, n = 2, C3, C4) and "more_res"
  // (multiscale encoder, C2, residual modules only, n = 3).
  static ArchConfig backbone(const std::string& name, std::size_t n = 0);

  void validate() const;
  // Pixels of spatial context each output pixel needs on every side.
  std::size_t context_margin() const;
  std::size_t encoder_out_channels() const { return multiscale_encoder ? 3 * channels : channels; }
  bool has_c2() const { return multiscale_encoder || !residual_only; }
  std::string describe() const;

  bool operator==(const ArchConfig&) const = default;
};

template <class T>
struct ConvLayer {
  std::size_t in = 0, out = 0, kernel = 1;
  ParamTensor<T> weight;
  ParamTensor<T> bias;
};

template <class T>
struct Encoder {
  std::vector<ConvLayer<T>> branches;  // {k} or {1x1, 3x3, 5x5}
};

template <class T>
struct Trunk {
  std::optional<ConvLayer<T>> c2;
  std::vector<std::pair<ConvLayer<T>, ConvLayer<T>>> res;
  std::vector<ConvLayer<T>> tail;  // C3, C4 when !residual_only
};

template <class T>
struct CdcnnParams {
  ArchConfig arch;
  std::map<std::string, DomainSpec> domains;
  std::map<std::string, Encoder<T>> encoders;
  Trunk<T> trunk;
  std::map<std::string, ConvLayer<T>> heads;
  std::uint64_t version = 0;  // bumped by every optimizer step

  // `<component>/<layer>/<weight|bias>` for every tensor, in a fixed order:
  // encoders by domain id, trunk, heads by domain id.
  std::vector<std::pair<std::string, ParamTensor<T>*>> named_tensors();
  std::vector<std::pair<std::string, const ParamTensor<T>*>> named_tensors() const;
  std::vector<ParamTensor<T>*> tensors();
  std::vector<ParamTensor<T>*> trunk_tensors();

  const DomainSpec& domain(const std::string& id) const;
  void zero_grad();
  std::size_t parameter_count() const;
};

// Weights ~ N(0, stddev^2) from a stream derived from (seed, tensor name);
// biases and momentum buffers are zero.
template <class T>
CdcnnParams<T> init_params(const ArchConfig& arch, std::span<const DomainSpec> domains,
                           std::uint64_t seed, double stddev = 0.001);

// Adds a freshly initialized encoder (and head if spec.classes > 0).
template <class T>
void add_domain(CdcnnParams<T>& params, const DomainSpec& spec, std::uint64_t seed, double stddev = 0.001);

// Value-converting copy (float <-> double); grads and momentum are copied too.
template <class To, class From>
CdcnnParams<To> convert_params(const CdcnnParams<From>& params);

enum class ForwardMode { kEmbedding, kLogits };

template <class T>
struct NetCache {
  ForwardMode mode = ForwardMode::kEmbedding;
  std::string domain;
  std::uint64_t version = 0;
  bool fresh = false;
  std::size_t batch = 0, out_h = 0, out_w = 0;

  struct ConvAct {
    ConvCache<T> conv;
    Tensor4<T> act;  // post-ReLU output
  };
  std::vector<ConvAct> encoder;        // one per branch
  std::vector<PoolCache<T>> pools;     // multiscale branches 3x3 / 5x5
  std::vector<std::size_t> crop;       // per-branch crop margin
  std::optional<ConvAct> c2;
  struct ResAct {
    ConvCache<T> conv_a;
    Tensor4<T> act_a;
    ConvCache<T> conv_b;
    Tensor4<T> out;  // relu(x + branch)
  };
  std::vector<ResAct> res;
  std::vector<ConvAct> tail;
  Tensor4<T> features;       // trunk output
  ConvCache<T> head;         // logits mode
  Matrix<T> pre_norm;        // embedding mode
};

// Encoder and trunk. Output (N, channels, S - 2m, S - 2m) for input side S and
// context margin m.
template <class T>
Tensor4<T> forward_features(const CdcnnParams<T>& params, const std::string& domain,
                            const Tensor4<T>& x, NetCache<T>* cache = nullptr);

// Unit-norm trunk features, one row per output pixel ordered (n, row, col).
template <class T>
Matrix<T> forward_embedding(const CdcnnParams<T>& params, const std::string& domain,
                            const Tensor4<T>& x, NetCache<T>* cache = nullptr);

// Head logits, one row per output pixel ordered (n, row, col).
template <class T>
Matrix<T> forward_logits(const CdcnnParams<T>& params, const std::string& domain,
                         const Tensor4<T>& x, NetCache<T>* cache = nullptr);

// Accumulates parameter gradients for the forward recorded in `cache`, given
// the gradient of the loss w.r.t. that forward's output rows. Consumes the
// cache; a cache from before the last optimizer step is rejected.
template <class T>
void backward(CdcnnParams<T>& params, NetCache<T>& cache, const Matrix<T>& upstream);

// sgd_step over all tensors, then bumps params.version.
template <class T>
StepRates apply_sgd(CdcnnParams<T>& params, const SgdConfig& cfg, std::size_t iter,
                    double domain_lr_multiplier);

// (row, col, band) windows of one side length -> (N, B, side, side).
template <class T>
Tensor4<T> windows_to_tensor(std::span<const std::vector<float>> windows, std::size_t side,
                             std::size_t bands);

// --- FLOPs ----------------------------------------------------------------

struct LayerFlops {
  std::string name;
  std::size_t in = 0, out = 0, kernel = 1;
  std::uint64_t flops = 0;
};

struct FlopsReport {
  std::vector<LayerFlops> layers;
  std::uint64_t total = 0;
  std::size_t pixels = 0;
};

// 2 * multiply-accumulates per output element, every layer (head included)
// evaluated once per image pixel. Padded border positions discarded by the
// multiscale pooling and the cost of pooling itself are not counted.
FlopsReport flops(const ArchConfig& arch, const DomainSpec& domain, std::size_t height,
                  std::size_t width);

}  // namespace hypercd
