#include "hypercd/cdnet.hpp"

#include <sstream>

#include "hypercd/error.hpp"
#include "hypercd/rng.hpp"

namespace hypercd {

ArchConfig ArchConfig::modified(std::size_t n) {
  ArchConfig a;
  a.n_res_modules = n;
  return a;
}

ArchConfig ArchConfig::original() {
  ArchConfig a;
  a.n_res_modules = 2;
  a.multiscale_encoder = true;
  a.residual_only = false;
  return a;
}

ArchConfig ArchConfig::backbone(const std::string& name, std::size_t n) {
  ArchConfig a;
  if (name == "modified") {
    a.n_res_modules = n ? n : 5;
  } else if (name == "original") {
    a = original();
    if (n) a.n_res_modules = n;
  } else if (name == "no_multiscale") {
    a.residual_only = false;
    a.n_res_modules = n ? n : 2;
  } else if (name == "more_res") {
    a.multiscale_encoder = true;
    a.n_res_modules = n ? n : 3;
  } else {
    fail(ErrorKind::kUsage, "unknown backbone '" + name + "' (expected modified, original, no_multiscale, more_res)");
  }
  return a;
}

void ArchConfig::validate() const {
  require(channels > 0, ErrorKind::kUsage, "arch: channels must be positive");
  require(encoder_kernel % 2 == 1, ErrorKind::kUsage, "arch: encoder kernel must be odd");
}

std::size_t ArchConfig::context_margin() const {
  // 5x5 conv followed by 5x5 max pooling needs 4 pixels on each side.
  return multiscale_encoder ? 4 : (encoder_kernel - 1) / 2;
}

std::string ArchConfig::describe() const {
  std::ostringstream os;
  os << "channels=" << channels << " encoder=" << (multiscale_encoder ? "multiscale" : "single")
     << " encoder_kernel=" << encoder_kernel << " encoder_pad=" << encoder_pad
     << " n_res_modules=" << n_res_modules << " residual_only=" << (residual_only ? 1 : 0);
  return os.str();
}

namespace {

void validate_domain(const DomainSpec& spec) {
  require(!spec.id.empty(), ErrorKind::kUsage, "domain id must not be empty");
  require(spec.id.find('/') == std::string::npos, ErrorKind::kUsage,
          "domain id '" + spec.id + "' must not contain '/'");
  require(spec.bands > 0, ErrorKind::kUsage, "domain '" + spec.id + "' has zero bands");
}

template <class T>
ConvLayer<T> make_layer(std::size_t in, std::size_t out, std::size_t kernel, LrGroup group,
                        std::uint64_t seed, const std::string& name, double stddev) {
  ConvLayer<T> layer;
  layer.in = in;
  layer.out = out;
  layer.kernel = kernel;
  layer.weight = ParamTensor<T>({out, in, kernel, kernel}, group, true);
  layer.bias = ParamTensor<T>({out}, group, false);
  Rng rng = make_rng(seed, name + "/weight");
  for (auto& v : layer.weight.value) v = static_cast<T>(stddev * standard_normal(rng));
  return layer;
}

std::string branch_name(const ArchConfig& arch, std::size_t kernel) {
  if (!arch.multiscale_encoder) return "c1";
  return "c1_" + std::to_string(kernel) + "x" + std::to_string(kernel);
}

std::vector<std::size_t> branch_kernels(const ArchConfig& arch) {
  if (arch.multiscale_encoder) return {1, 3, 5};
  return {arch.encoder_kernel};
}

template <class T, class Self, class Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Self& self) {
  std::vector<std::pair<std::string, Ptr>> out;
  auto push = [&out](const std::string& prefix, auto& layer) {
    out.emplace_back(prefix + "/weight", &layer.weight);
    out.emplace_back(prefix + "/bias", &layer.bias);
  };
  for (auto& [id, enc] : self.encoders) {
    for (auto& br : enc.branches) push("enc." + id + "/" + branch_name(self.arch, br.kernel), br);
  }
  if (self.trunk.c2) push("trunk/c2", *self.trunk.c2);
  for (std::size_t i = 0; i < self.trunk.res.size(); ++i) {
    push("trunk/res" + std::to_string(i) + "a", self.trunk.res[i].first);
    push("trunk/res" + std::to_string(i) + "b", self.trunk.res[i].second);
  }
  for (std::size_t i = 0; i < self.trunk.tail.size(); ++i) {
    push("trunk/c" + std::to_string(i + 3), self.trunk.tail[i]);
  }
  for (auto& [id, head] : self.heads) push("head." + id + "/c5", head);
  return out;
}

template <class T>
void accumulate(ConvLayer<T>& layer, const ConvGrads<T>& g) {
  for (std::size_t i = 0; i < g.dw.size(); ++i) layer.weight.grad[i] += g.dw[i];
  for (std::size_t i = 0; i < g.db.size(); ++i) layer.bias.grad[i] += g.db[i];
}

template <class T>
Tensor4<T> conv(const ConvLayer<T>& layer, const Tensor4<T>& x, ConvCache<T>* cache) {
  return conv2d_forward<T>(x, layer.weight.value, layer.bias.value, layer.out, layer.kernel, 0, cache);
}

template <class T>
ConvGrads<T> conv_back(const ConvLayer<T>& layer, const ConvCache<T>& cache, const Tensor4<T>& dy,
                       bool input_grad = true) {
  return conv2d_backward<T>(cache, layer.weight.value, layer.out, dy, input_grad);
}

template <class To, class From>
ParamTensor<To> convert_tensor(const ParamTensor<From>& p) {
  ParamTensor<To> out;
  out.shape = p.shape;
  out.group = p.group;
  out.decay = p.decay;
  out.value.assign(p.value.begin(), p.value.end());
  out.grad.assign(p.grad.begin(), p.grad.end());
  out.momentum.assign(p.momentum.begin(), p.momentum.end());
  return out;
}

template <class To, class From>
ConvLayer<To> convert_layer(const ConvLayer<From>& l) {
  ConvLayer<To> out;
  out.in = l.in;
  out.out = l.out;
  out.kernel = l.kernel;
  out.weight = convert_tensor<To>(l.weight);
  out.bias = convert_tensor<To>(l.bias);
  return out;
}

}  // namespace

template <class T>
std::vector<std::pair<std::string, ParamTensor<T>*>> CdcnnParams<T>::named_tensors() {
  return collect<T, CdcnnParams<T>, ParamTensor<T>*>(*this);
}

template <class T>
std::vector<std::pair<std::string, const ParamTensor<T>*>> CdcnnParams<T>::named_tensors() const {
  return collect<T, const CdcnnParams<T>, const ParamTensor<T>*>(*this);
}

template <class T>
std::vector<ParamTensor<T>*> CdcnnParams<T>::tensors() {
  std::vector<ParamTensor<T>*> out;
  for (auto& [name, p] : named_tensors()) out.push_back(p);
  return out;
}

template <class T>
std::vector<ParamTensor<T>*> CdcnnParams<T>::trunk_tensors() {
  std::vector<ParamTensor<T>*> out;
  for (auto& [name, p] : named_tensors()) {
    if (name.rfind("trunk/", 0) == 0) out.push_back(p);
  }
  return out;
}

template <class T>
const DomainSpec& CdcnnParams<T>::domain(const std::string& id) const {
  auto it = domains.find(id);
  require(it != domains.end(), ErrorKind::kUsage, "unknown domain '" + id + "'");
  return it->second;
}

template <class T>
void CdcnnParams<T>::zero_grad() {
  for (auto* p : tensors()) p->zero_grad();
}

template <class T>
std::size_t CdcnnParams<T>::parameter_count() const {
  std::size_t count = 0;
  for (const auto& [name, p] : named_tensors()) count += p->size();
  return count;
}

template <class T>
void add_domain(CdcnnParams<T>& params, const DomainSpec& spec, std::uint64_t seed, double stddev) {
  validate_domain(spec);
  const auto& arch = params.arch;
  Encoder<T> enc;
  for (std::size_t k : branch_kernels(arch)) {
    enc.branches.push_back(make_layer<T>(spec.bands, arch.channels, k, LrGroup::kDomainSpecific, seed,
                                         "enc." + spec.id + "/" + branch_name(arch, k), stddev));
  }
  params.encoders[spec.id] = std::move(enc);
  if (spec.classes > 0) {
    params.heads[spec.id] = make_layer<T>(arch.channels, spec.classes, 1, LrGroup::kDomainSpecific, seed,
                                          "head." + spec.id + "/c5", stddev);
  } else {
    params.heads.erase(spec.id);
  }
  params.domains[spec.id] = spec;
}

template <class T>
CdcnnParams<T> init_params(const ArchConfig& arch, std::span<const DomainSpec> domains,
                           std::uint64_t seed, double stddev) {
  arch.validate();
  CdcnnParams<T> params;
  params.arch = arch;
  const std::size_t ch = arch.channels;
  if (arch.has_c2()) {
    params.trunk.c2 = make_layer<T>(arch.encoder_out_channels(), ch, 1, LrGroup::kShared, seed, "trunk/c2", stddev);
  }
  for (std::size_t i = 0; i < arch.n_res_modules; ++i) {
    const std::string base = "trunk/res" + std::to_string(i);
    params.trunk.res.emplace_back(make_layer<T>(ch, ch, 1, LrGroup::kShared, seed, base + "a", stddev),
                                  make_layer<T>(ch, ch, 1, LrGroup::kShared, seed, base + "b", stddev));
  }
  if (!arch.residual_only) {
    params.trunk.tail.push_back(make_layer<T>(ch, ch, 1, LrGroup::kShared, seed, "trunk/c3", stddev));
    params.trunk.tail.push_back(make_layer<T>(ch, ch, 1, LrGroup::kShared, seed, "trunk/c4", stddev));
  }
  for (const auto& d : domains) add_domain(params, d, seed, stddev);
  return params;
}

template <class To, class From>
CdcnnParams<To> convert_params(const CdcnnParams<From>& params) {
  CdcnnParams<To> out;
  out.arch = params.arch;
  out.domains = params.domains;
  out.version = params.version;
  for (const auto& [id, enc] : params.encoders) {
    Encoder<To> e;
    for (const auto& b : enc.branches) e.branches.push_back(convert_layer<To>(b));
    out.encoders[id] = std::move(e);
  }
  if (params.trunk.c2) out.trunk.c2 = convert_layer<To>(*params.trunk.c2);
  for (const auto& [a, b] : params.trunk.res) out.trunk.res.emplace_back(convert_layer<To>(a), convert_layer<To>(b));
  for (const auto& l : params.trunk.tail) out.trunk.tail.push_back(convert_layer<To>(l));
  for (const auto& [id, h] : params.heads) out.heads[id] = convert_layer<To>(h);
  return out;
}

template <class T>
Tensor4<T> forward_features(const CdcnnParams<T>& params, const std::string& domain,
                            const Tensor4<T>& x, NetCache<T>* cache) {
  const auto enc_it = params.encoders.find(domain);
  require(enc_it != params.encoders.end(), ErrorKind::kUsage,
          "unknown domain '" + domain + "' (no encoder in parameters)");
  const Encoder<T>& enc = enc_it->second;
  require(x.c == enc.branches.front().in, ErrorKind::kShapeMismatch,
          "domain '" + domain + "' encoder expects " + std::to_string(enc.branches.front().in) +
              " bands, input has " + std::to_string(x.c));
  const std::size_t margin = params.arch.context_margin();
  require(x.h > 2 * margin && x.w > 2 * margin, ErrorKind::kShapeMismatch,
          "input window " + std::to_string(x.h) + "x" + std::to_string(x.w) +
              " is too small for context margin " + std::to_string(margin));

  if (cache != nullptr) {
    *cache = NetCache<T>{};
    cache->domain = domain;
    cache->version = params.version;
    cache->batch = x.n;
  }

  // Encoder branches.
  std::vector<Tensor4<T>> outs;
  for (const auto& br : enc.branches) {
    const std::size_t pool = params.arch.multiscale_encoder && br.kernel > 1 ? br.kernel : 0;
    const std::size_t crop = margin - (br.kernel - 1) / 2 - (pool > 0 ? (pool - 1) / 2 : 0);
    typename NetCache<T>::ConvAct ca;
    Tensor4<T> act = relu_forward(conv(br, crop_forward(x, crop), cache ? &ca.conv : nullptr));
    PoolCache<T> pc;
    Tensor4<T> out = pool > 0 ? maxpool_forward(act, pool, cache ? &pc : nullptr) : act;
    if (cache != nullptr) {
      ca.act = std::move(act);
      cache->encoder.push_back(std::move(ca));
      cache->pools.push_back(std::move(pc));
      cache->crop.push_back(crop);
    }
    outs.push_back(std::move(out));
  }
  Tensor4<T> h = outs.size() == 1 ? std::move(outs.front()) : concat_channels<T>(outs);

  // Trunk.
  const Trunk<T>& trunk = params.trunk;
  if (trunk.c2) {
    typename NetCache<T>::ConvAct ca;
    h = relu_forward(conv(*trunk.c2, h, cache ? &ca.conv : nullptr));
    if (cache != nullptr) {
      ca.act = h;
      cache->c2 = std::move(ca);
    }
  }
  for (const auto& [la, lb] : trunk.res) {
    typename NetCache<T>::ResAct ra;
    Tensor4<T> a = relu_forward(conv(la, h, cache ? &ra.conv_a : nullptr));
    Tensor4<T> b = conv(lb, a, cache ? &ra.conv_b : nullptr);
    h = relu_forward(add(h, b));
    if (cache != nullptr) {
      ra.act_a = std::move(a);
      ra.out = h;
      cache->res.push_back(std::move(ra));
    }
  }
  for (const auto& layer : trunk.tail) {
    typename NetCache<T>::ConvAct ca;
    h = relu_forward(conv(layer, h, cache ? &ca.conv : nullptr));
    if (cache != nullptr) {
      ca.act = h;
      cache->tail.push_back(std::move(ca));
    }
  }
  if (cache != nullptr) {
    cache->out_h = h.h;
    cache->out_w = h.w;
    cache->features = h;
    cache->fresh = true;
  }
  return h;
}

template <class T>
Matrix<T> forward_embedding(const CdcnnParams<T>& params, const std::string& domain,
                            const Tensor4<T>& x, NetCache<T>* cache) {
  Matrix<T> pre = to_pixel_major(forward_features(params, domain, x, cache));
  Matrix<T> emb = l2_normalize_forward(pre, static_cast<T>(1e-12));
  if (cache != nullptr) {
    cache->mode = ForwardMode::kEmbedding;
    cache->pre_norm = std::move(pre);
  }
  return emb;
}

template <class T>
Matrix<T> forward_logits(const CdcnnParams<T>& params, const std::string& domain,
                         const Tensor4<T>& x, NetCache<T>* cache) {
  const auto head_it = params.heads.find(domain);
  require(head_it != params.heads.end(), ErrorKind::kUsage,
          "domain '" + domain + "' has no classification head");
  Tensor4<T> feats = forward_features(params, domain, x, cache);
  Tensor4<T> logits = conv(head_it->second, feats, cache ? &cache->head : nullptr);
  if (cache != nullptr) cache->mode = ForwardMode::kLogits;
  return to_pixel_major(logits);
}

template <class T>
void backward(CdcnnParams<T>& params, NetCache<T>& cache, const Matrix<T>& upstream) {
  require(cache.fresh, ErrorKind::kState, "backward: cache was already consumed or never filled");
  require(cache.version == params.version, ErrorKind::kState,
          "backward: stale cache (parameters were updated after the forward pass)");
  const std::size_t rows = cache.batch * cache.out_h * cache.out_w;
  require(upstream.rows == rows, ErrorKind::kShapeMismatch,
          "backward: upstream has " + std::to_string(upstream.rows) + " rows, forward produced " +
              std::to_string(rows));
  cache.fresh = false;

  Tensor4<T> d;
  if (cache.mode == ForwardMode::kEmbedding) {
    require(upstream.cols == params.arch.channels, ErrorKind::kShapeMismatch, "backward: embedding width mismatch");
    Matrix<T> dpre = l2_normalize_backward(cache.pre_norm, upstream, static_cast<T>(1e-12));
    d = from_pixel_major(dpre, cache.batch, cache.out_h, cache.out_w);
  } else {
    auto& head = params.heads.at(cache.domain);
    require(upstream.cols == head.out, ErrorKind::kShapeMismatch, "backward: logit width mismatch");
    Tensor4<T> dlogits = from_pixel_major(upstream, cache.batch, cache.out_h, cache.out_w);
    ConvGrads<T> g = conv_back(head, cache.head, dlogits);
    accumulate(head, g);
    d = std::move(g.dx);
  }

  Trunk<T>& trunk = params.trunk;
  for (std::size_t i = trunk.tail.size(); i-- > 0;) {
    ConvGrads<T> g = conv_back(trunk.tail[i], cache.tail[i].conv, relu_backward(cache.tail[i].act, d));
    accumulate(trunk.tail[i], g);
    d = std::move(g.dx);
  }
  for (std::size_t i = trunk.res.size(); i-- > 0;) {
    auto& [la, lb] = trunk.res[i];
    auto& rc = cache.res[i];
    Tensor4<T> dsum = relu_backward(rc.out, d);
    ConvGrads<T> gb = conv_back(lb, rc.conv_b, dsum);
    accumulate(lb, gb);
    ConvGrads<T> ga = conv_back(la, rc.conv_a, relu_backward(rc.act_a, gb.dx));
    accumulate(la, ga);
    d = add(dsum, ga.dx);
  }
  if (trunk.c2) {
    ConvGrads<T> g = conv_back(*trunk.c2, cache.c2->conv, relu_backward(cache.c2->act, d));
    accumulate(*trunk.c2, g);
    d = std::move(g.dx);
  }

  Encoder<T>& enc = params.encoders.at(cache.domain);
  std::vector<std::size_t> widths;
  for (const auto& br : enc.branches) widths.push_back(br.out);
  std::vector<Tensor4<T>> parts = enc.branches.size() == 1 ? std::vector<Tensor4<T>>{std::move(d)}
                                                           : split_channels<T>(d, widths);
  for (std::size_t i = 0; i < enc.branches.size(); ++i) {
    Tensor4<T> dp = cache.pools[i].argmax.empty() ? std::move(parts[i]) : maxpool_backward(cache.pools[i], parts[i]);
    ConvGrads<T> g = conv_back(enc.branches[i], cache.encoder[i].conv,
                               relu_backward(cache.encoder[i].act, dp), false);
    accumulate(enc.branches[i], g);
  }
}

template <class T>
StepRates apply_sgd(CdcnnParams<T>& params, const SgdConfig& cfg, std::size_t iter,
                    double domain_lr_multiplier) {
  auto ts = params.tensors();
  StepRates rates = sgd_step<T>(ts, cfg, iter, domain_lr_multiplier);
  ++params.version;
  return rates;
}

template <class T>
Tensor4<T> windows_to_tensor(std::span<const std::vector<float>> windows, std::size_t side,
                             std::size_t bands) {
  Tensor4<T> x(windows.size(), bands, side, side);
  const std::size_t hw = side * side;
  for (std::size_t n = 0; n < windows.size(); ++n) {
    require(windows[n].size() == hw * bands, ErrorKind::kShapeMismatch, "windows_to_tensor: window size mismatch");
    const float* src = windows[n].data();
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t b = 0; b < bands; ++b) x.values[(n * bands + b) * hw + p] = static_cast<T>(src[p * bands + b]);
    }
  }
  return x;
}

#define HYPERCD_INSTANTIATE(T)                                                                          \
  template struct CdcnnParams<T>;                                                                       \
  template CdcnnParams<T> init_params<T>(const ArchConfig&, std::span<const DomainSpec>, std::uint64_t, \
                                         double);                                                       \
  template void add_domain<T>(CdcnnParams<T>&, const DomainSpec&, std::uint64_t, double);              \
  template Tensor4<T> forward_features<T>(const CdcnnParams<T>&, const std::string&, const Tensor4<T>&, \
                                          NetCache<T>*);                                                \
  template Matrix<T> forward_embedding<T>(const CdcnnParams<T>&, const std::string&, const Tensor4<T>&, \
                                          NetCache<T>*);                                                \
  template Matrix<T> forward_logits<T>(const CdcnnParams<T>&, const std::string&, const Tensor4<T>&,    \
                                       NetCache<T>*);                                                   \
  template void backward<T>(CdcnnParams<T>&, NetCache<T>&, const Matrix<T>&);                           \
  template StepRates apply_sgd<T>(CdcnnParams<T>&, const SgdConfig&, std::size_t, double);             \
  template Tensor4<T> windows_to_tensor<T>(std::span<const std::vector<float>>, std::size_t, std::size_t);

HYPERCD_INSTANTIATE(float)
HYPERCD_INSTANTIATE(double)

#undef HYPERCD_INSTANTIATE

template CdcnnParams<float> convert_params<float, double>(const CdcnnParams<double>&);
template CdcnnParams<double> convert_params<double, float>(const CdcnnParams<float>&);
template CdcnnParams<float> convert_params<float, float>(const CdcnnParams<float>&);
template CdcnnParams<double> convert_params<double, double>(const CdcnnParams<double>&);

}  // namespace hypercd
