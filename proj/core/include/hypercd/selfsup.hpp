#pragma once

// Self-supervised pretraining over unlabeled domains. Every iteration takes
// one random p x p region from each image; pixels of a region form one group,
// and regions of different images are different groups. The pooled batch is
// scored with a multi-positive InfoNCE loss in which each sample is a query,
// all other samples are its keys, and its positives are the other pixels of
// its own region.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hypercd/cdnet.hpp"
#include "hypercd/hsdata.hpp"
#include "hypercd/rng.hpp"
#include "hypercd/tensorops.hpp"

namespace hypercd {

struct ContrastiveConfig {
  std::size_t p = 6;
  double tau = 0.07;
  std::size_t iterations = 200;
  bool augment = true;

  void validate() const;
};

struct RegionEntry {
  std::string domain_id;
  std::size_t top = 0;   // top-left pixel of the p x p region
  std::size_t left = 0;
  std::size_t p = 0;
  std::size_t side = 0;  // p + 2 * context margin
  std::size_t bands = 0;
  int dihedral = 0;
  std::size_t group = 0;
  std::vector<float> window;  // side x side x bands, (row, col, band)
};

struct RegionBatch {
  std::vector<RegionEntry> entries;  // one per domain, in domain order

  // One group id per embedding row: p*p copies of each entry's group.
  std::vector<std::size_t> sample_groups() const;
};

// Draws one region per domain with a uniform top-left corner such that the
// region plus `context_margin` pixels on each side lies inside the image.
// With augment, one uniform dihedral transform is applied to each window.
RegionBatch sample_regions(std::span<const HyperCube> domains, std::size_t p,
                           std::size_t context_margin, bool augment, Rng& rng);

template <class T>
struct InfoNceResult {
  T loss = 0;               // mean over queries of L_q
  std::vector<T> per_query; // L_q
  Matrix<T> grad;           // d loss / d embeddings
};

// L_q = sum_{k+ in R(q)} -log( exp(q.k+/tau) / sum_{i != q} exp(q.k_i/tau) ),
// R(q) = same-group samples other than q. Rows of `embeddings` are the
// samples; `groups` holds one id per row.
template <class T>
InfoNceResult<T> infonce_multi(const Matrix<T>& embeddings, std::span<const std::size_t> groups, T tau);

struct PretrainRecord {
  std::size_t iteration = 0;
  double lr = 0;
  double loss = 0;
};

struct PretrainResult {
  CdcnnParams<float> params;
  std::vector<PretrainRecord> history;
};

using LogFn = std::function<void(const std::string&)>;

// Self-supervised pretraining. The schedule is sgd.milestones over
// contrastive.iterations steps; all parameters train at 1x learning rate.
PretrainResult pretrain(std::span<const HyperCube> domains, const ArchConfig& arch,
                        const ContrastiveConfig& contrastive, const SgdConfig& sgd,
                        std::uint64_t seed, double init_std = 0.001, const LogFn& log = {});

struct SimilarityStats {
  double intra = 0;  // mean cosine between distinct pixels of the same region
  double inter = 0;  // mean cosine between pixels of different domains
};

// Embeds `rounds` fresh region batches and averages pairwise cosines.
SimilarityStats embedding_similarity(const CdcnnParams<float>& params, std::span<const HyperCube> domains,
                                     std::size_t p, std::size_t rounds, Rng& rng);

}  // namespace hypercd
