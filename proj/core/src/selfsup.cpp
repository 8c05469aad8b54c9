#include "hypercd/selfsup.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "hypercd/error.hpp"

namespace hypercd {

void ContrastiveConfig::validate() const {
  require(p >= 1, ErrorKind::kUsage, "contrastive: p must be at least 1");
  require(tau > 0.0, ErrorKind::kUsage, "contrastive: tau must be positive");
}

std::vector<std::size_t> RegionBatch::sample_groups() const {
  std::vector<std::size_t> groups;
  for (const auto& e : entries) groups.insert(groups.end(), e.p * e.p, e.group);
  return groups;
}

RegionBatch sample_regions(std::span<const HyperCube> domains, std::size_t p,
                           std::size_t context_margin, bool augment, Rng& rng) {
  require(p >= 1, ErrorKind::kUsage, "sample_regions: p must be at least 1");
  const std::size_t side = p + 2 * context_margin;
  RegionBatch batch;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const HyperCube& cube = domains[d];
    if (cube.height < side || cube.width < side) {
      fail(ErrorKind::kInvalidData, "image '" + cube.domain_id + "' (" + std::to_string(cube.height) + "x" +
                                        std::to_string(cube.width) + ") is too small for p=" + std::to_string(p) +
                                        " plus " + std::to_string(context_margin) + " context pixels per side");
    }
    RegionEntry e;
    e.domain_id = cube.domain_id;
    e.p = p;
    e.side = side;
    e.bands = cube.bands;
    e.group = d;
    e.top = context_margin + uniform_index(rng, cube.height - side + 1);
    e.left = context_margin + uniform_index(rng, cube.width - side + 1);
    e.dihedral = augment ? static_cast<int>(uniform_index(rng, 8)) : 0;
    e.window = extract_window(cube, static_cast<std::ptrdiff_t>(e.top - context_margin),
                              static_cast<std::ptrdiff_t>(e.left - context_margin), side);
    if (e.dihedral != 0) e.window = dihedral_transform(e.window, side, cube.bands, e.dihedral);
    batch.entries.push_back(std::move(e));
  }
  return batch;
}

template <class T>
InfoNceResult<T> infonce_multi(const Matrix<T>& embeddings, std::span<const std::size_t> groups, T tau) {
  const std::size_t n = embeddings.rows;
  require(n > 0, ErrorKind::kInvalidData, "infonce: empty batch");
  require(groups.size() == n, ErrorKind::kShapeMismatch, "infonce: one group id per embedding required");
  require(tau > T(0), ErrorKind::kUsage, "infonce: tau must be positive");
  require(std::any_of(groups.begin(), groups.end(), [&](std::size_t g) { return g != groups[0]; }),
          ErrorKind::kInvalidData, "infonce: a single group has no negatives");

  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto N = static_cast<Eigen::Index>(n);
  const auto D = static_cast<Eigen::Index>(embeddings.cols);
  Eigen::Map<const RowMat> e(embeddings.values.data(), N, D);
  RowMat z = (e * e.transpose()) / tau;

  InfoNceResult<T> res;
  res.per_query.assign(n, T(0));
  RowMat g = RowMat::Zero(N, N);  // d loss / d z
  const T inv_n = T(1) / static_cast<T>(n);
  double total = 0.0;
  for (Eigen::Index q = 0; q < N; ++q) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = 0; i < N; ++i) {
      if (i != q) mx = std::max(mx, z(q, i));
    }
    T sum = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      if (i != q) sum += std::exp(z(q, i) - mx);
    }
    const T lse = mx + std::log(sum);
    T lq = 0;
    std::size_t positives = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      if (i != q && groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(q)]) {
        lq += lse - z(q, i);
        ++positives;
      }
    }
    res.per_query[static_cast<std::size_t>(q)] = lq;
    total += static_cast<double>(lq);
    const auto m = static_cast<T>(positives);
    for (Eigen::Index i = 0; i < N; ++i) {
      if (i == q) continue;
      const T prob = std::exp(z(q, i) - lse);
      const bool positive = groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(q)];
      g(q, i) = (m * prob - (positive ? T(1) : T(0))) * inv_n;
    }
  }
  res.loss = static_cast<T>(total / static_cast<double>(n));
  require(std::isfinite(res.loss), ErrorKind::kNumeric, "infonce: non-finite loss");

  // z = E E^T / tau  =>  dE = (G + G^T) E / tau
  res.grad = Matrix<T>(n, embeddings.cols);
  Eigen::Map<RowMat> de(res.grad.values.data(), N, D);
  de.noalias() = ((g + g.transpose()) * e) / tau;
  return res;
}

PretrainResult pretrain(std::span<const HyperCube> domains, const ArchConfig& arch,
                        const ContrastiveConfig& contrastive, const SgdConfig& sgd,
                        std::uint64_t seed, double init_std, const LogFn& log) {
  contrastive.validate();
  sgd.validate();
  require(domains.size() >= 2, ErrorKind::kUsage, "pretrain: need at least two domains (groups) for negatives");

  std::vector<DomainSpec> specs;
  for (const auto& cube : domains) specs.push_back({cube.domain_id, cube.bands, 0});
  PretrainResult result;
  result.params = init_params<float>(arch, specs, derive_seed(seed, "init"), init_std);
  CdcnnParams<float>& params = result.params;

  const std::size_t margin = arch.context_margin();
  const std::uint64_t region_seed = derive_seed(seed, "pretrain");
  const auto tau = static_cast<float>(contrastive.tau);

  for (std::size_t iter = 0; iter < contrastive.iterations; ++iter) {
    Rng rng = make_rng(region_seed, "regions", iter);
    const RegionBatch batch = sample_regions(domains, contrastive.p, margin, contrastive.augment, rng);

    params.zero_grad();
    std::vector<NetCache<float>> caches(batch.entries.size());
    Matrix<float> pooled(0, arch.channels);
    for (std::size_t d = 0; d < batch.entries.size(); ++d) {
      const RegionEntry& e = batch.entries[d];
      const Tensor4<float> x = windows_to_tensor<float>(std::span(&e.window, 1), e.side, e.bands);
      const Matrix<float> emb = forward_embedding(params, e.domain_id, x, &caches[d]);
      pooled.values.insert(pooled.values.end(), emb.values.begin(), emb.values.end());
      pooled.rows += emb.rows;
    }
    const auto groups = batch.sample_groups();
    const InfoNceResult<float> loss = [&] {
      try {
        return infonce_multi<float>(pooled, groups, tau);
      } catch (const Error& err) {
        throw Error(err.kind(), "pretrain iteration " + std::to_string(iter) + ": " + err.what());
      }
    }();

    std::size_t offset = 0;
    for (std::size_t d = 0; d < batch.entries.size(); ++d) {
      const std::size_t rows = batch.entries[d].p * batch.entries[d].p;
      Matrix<float> upstream(rows, arch.channels);
      std::copy_n(loss.grad.values.begin() + static_cast<std::ptrdiff_t>(offset * arch.channels),
                  rows * arch.channels, upstream.values.begin());
      backward(params, caches[d], upstream);
      offset += rows;
    }
    const StepRates rates = apply_sgd(params, sgd, iter, 1.0);
    result.history.push_back({iter, rates.shared, static_cast<double>(loss.loss)});
    if (log && (iter % 20 == 0 || iter + 1 == contrastive.iterations)) {
      log("pretrain iter " + std::to_string(iter) + " lr " + std::to_string(rates.shared) + " loss " +
          std::to_string(loss.loss));
    }
  }
  return result;
}

SimilarityStats embedding_similarity(const CdcnnParams<float>& params, std::span<const HyperCube> domains,
                                     std::size_t p, std::size_t rounds, Rng& rng) {
  const std::size_t margin = params.arch.context_margin();
  double intra = 0, inter = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t r = 0; r < rounds; ++r) {
    const RegionBatch batch = sample_regions(domains, p, margin, false, rng);
    Matrix<float> pooled(0, params.arch.channels);
    for (const auto& e : batch.entries) {
      const Tensor4<float> x = windows_to_tensor<float>(std::span(&e.window, 1), e.side, e.bands);
      const Matrix<float> emb = forward_embedding(params, e.domain_id, x);
      pooled.values.insert(pooled.values.end(), emb.values.begin(), emb.values.end());
      pooled.rows += emb.rows;
    }
    const auto groups = batch.sample_groups();
    for (std::size_t i = 0; i < pooled.rows; ++i) {
      for (std::size_t j = i + 1; j < pooled.rows; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < pooled.cols; ++c) dot += static_cast<double>(pooled.at(i, c)) * pooled.at(j, c);
        if (groups[i] == groups[j]) {
          intra += dot;
          ++n_intra;
        } else {
          inter += dot;
          ++n_inter;
        }
      }
    }
  }
  return {n_intra ? intra / static_cast<double>(n_intra) : 0.0, n_inter ? inter / static_cast<double>(n_inter) : 0.0};
}

template InfoNceResult<float> infonce_multi<float>(const Matrix<float>&, std::span<const std::size_t>, float);
template InfoNceResult<double> infonce_multi<double>(const Matrix<double>&, std::span<const std::size_t>, double);

}  // namespace hypercd
