#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner: central finite differences, brute-force InfoNCE and
// brute-force accuracy metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "hypercd/cdnet.hpp"
#include "hypercd/hsdata.hpp"
#include "hypercd/rng.hpp"
#include "hypercd/tensorops.hpp"

namespace hypercd::oracle {

inline constexpr double kFdStep = 1e-5;

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is zero from dividing rounding noise by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct FdReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;
};

// Checks analytic[i] against (f(x + h e_i) - f(x - h e_i)) / 2h for every
// entry of x. `x` is perturbed in place and restored.
inline void fd_check(FdReport& report, const std::string& slot, std::vector<double>& x,
                     const std::vector<double>& analytic, const std::function<double()>& f,
                     double h = kFdStep) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    const double err = relative_error(analytic[i], (up - down) / (2 * h));
    ++report.checked;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = slot + "[" + std::to_string(i) + "]";
    }
  }
}

inline std::vector<double> random_normal(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * standard_normal(rng);
  return v;
}

inline Tensor4<double> random_tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Tensor4<double> t(n, c, h, w);
  t.values = random_normal(t.size(), rng);
  return t;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Single-positive InfoNCE of query q against one positive k, keys = all rows
// except q, evaluated directly from exponentials.
inline double single_positive_infonce(const Matrix<double>& e, std::size_t q, std::size_t k, double tau) {
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t d = 0; d < e.cols; ++d) s += e.at(a, d) * e.at(b, d);
    return s / tau;
  };
  double denom = 0;
  for (std::size_t i = 0; i < e.rows; ++i) {
    if (i != q) denom += std::exp(sim(q, i));
  }
  return -std::log(std::exp(sim(q, k)) / denom);
}

// L_q as the sum of single-positive terms over the other members of q's group.
inline std::vector<double> infonce_by_decomposition(const Matrix<double>& e, const std::vector<std::size_t>& groups,
                                                    double tau) {
  std::vector<double> per_query(e.rows, 0.0);
  for (std::size_t q = 0; q < e.rows; ++q) {
    for (std::size_t k = 0; k < e.rows; ++k) {
      if (k != q && groups[k] == groups[q]) per_query[q] += single_positive_infonce(e, q, k, tau);
    }
  }
  return per_query;
}

struct BruteMetrics {
  double oa = 0;
  double aa = 0;
  std::vector<double> per_class;  // NaN for absent classes
};

// OA/AA recounted from raw (prediction, truth) pairs without building a
// confusion matrix.
inline BruteMetrics metrics_from_pairs(std::size_t classes, const std::vector<std::size_t>& predicted,
                                       const std::vector<std::size_t>& truth) {
  BruteMetrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i] ? 1 : 0;
  m.oa = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t total = 0, hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != c) continue;
      ++total;
      hit += predicted[i] == c ? 1 : 0;
    }
    if (total == 0) {
      m.per_class.push_back(std::nan(""));
      continue;
    }
    const double r = static_cast<double>(hit) / static_cast<double>(total);
    m.per_class.push_back(r);
    sum += r;
    ++present;
  }
  m.aa = present == 0 ? 0.0 : sum / static_cast<double>(present);
  return m;
}

// Sum of upstream . output for a network forward, the scalar used by the
// full-network gradient checks.
inline double network_objective(const CdcnnParams<double>& params, const std::string& domain, const Tensor4<double>& x,
                                const Matrix<double>& upstream, ForwardMode mode) {
  const Matrix<double> out = mode == ForwardMode::kLogits ? forward_logits(params, domain, x)
                                                          : forward_embedding(params, domain, x);
  double s = 0;
  for (std::size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * upstream.values[i];
  return s;
}

// Zero-initialised biases put units with all-dead inputs exactly on a ReLU
// kink, where central differences are meaningless. Gradient checks run at a
// generic point instead.
inline void randomize_biases(CdcnnParams<double>& params, Rng& rng, double scale = 0.1) {
  for (auto& [name, tensor] : params.named_tensors()) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, "/bias") == 0) {
      tensor->value = random_normal(tensor->value.size(), rng, scale);
    }
  }
}

// Full-network check: analytic parameter gradients from backward() against
// central differences over every parameter entry.
inline FdReport network_gradient_check(CdcnnParams<double>& params, const std::string& domain,
                                       const Tensor4<double>& x, ForwardMode mode, Rng& rng) {
  NetCache<double> cache;
  const Matrix<double> out = mode == ForwardMode::kLogits ? forward_logits(params, domain, x, &cache)
                                                          : forward_embedding(params, domain, x, &cache);
  Matrix<double> upstream(out.rows, out.cols);
  upstream.values = random_normal(upstream.values.size(), rng);
  params.zero_grad();
  backward(params, cache, upstream);

  FdReport report;
  for (auto& [name, tensor] : params.named_tensors()) {
    const bool touched = name.rfind("trunk/", 0) == 0 || name.find("." + domain + "/") != std::string::npos;
    if (!touched) continue;
    if (mode == ForwardMode::kEmbedding && name.rfind("head.", 0) == 0) continue;
    const std::vector<double> analytic = tensor->grad;
    fd_check(report, name, tensor->value, analytic,
             [&] { return network_objective(params, domain, x, upstream, mode); });
  }
  return report;
}

// Synthetic cube with deterministic labels for tests that need one.
inline HyperCube small_cube(const std::string& id, std::size_t h, std::size_t w, std::size_t bands, std::size_t classes,
                            std::uint64_t seed) {
  HyperCube c;
  c.domain_id = id;
  c.height = h;
  c.width = w;
  c.bands = bands;
  c.num_classes = classes;
  Rng rng(seed);
  c.data.resize(h * w * bands);
  for (auto& v : c.data) v = static_cast<float>(standard_normal(rng));
  c.labels.resize(h * w);
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    c.labels[i] = static_cast<std::uint16_t>(classes == 0 ? 0 : 1 + (i * 7 + i / w) % classes);
  }
  return c;
}

}  // namespace hypercd::oracle
