#pragma once

// Downstream per-pixel classification: transfer of a pretrained trunk,
// supervised (fine-)tuning, the four training regimes, and OA/AA evaluation
// over repeated random splits.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hypercd/cdnet.hpp"
#include "hypercd/hsdata.hpp"
#include "hypercd/selfsup.hpp"

namespace hypercd {

enum class Regime { kScratch, kCdScratch, kSupPretrain, kSelfSup };

std::string to_string(Regime regime);
Regime parse_regime(const std::string& name);

struct FinetuneConfig {
  std::size_t iterations = 100;
  std::vector<std::size_t> milestones{60, 80};
  double lr_multiplier_domain_specific = 10.0;
  bool augment = true;
  std::size_t train_per_domain = 200;
  std::size_t runs = 5;

  void validate() const;
};

// Everything a run needs besides data and seeds.
struct TrainConfig {
  ArchConfig arch;
  SgdConfig optimizer;                 // base lr, momentum, weight decay, gamma
  ContrastiveConfig contrastive;       // p, tau, pretraining iterations, augment
  std::vector<std::size_t> pretrain_milestones{120, 160};
  FinetuneConfig finetune;
  // Supervised pretraining draws this many labeled pixels per source domain
  // per iteration from the pool of all labeled pixels.
  std::size_t sup_batch_per_domain = 200;
  double init_std = 0.001;
  std::size_t chunk = 512;  // patches per forward/backward chunk

  SgdConfig pretrain_sgd() const;
  SgdConfig finetune_sgd() const;
  void validate() const;
};

struct TrainRecord {
  std::size_t iteration = 0;
  double lr_shared = 0;
  double lr_domain = 0;
  double loss = 0;
  double train_accuracy = 0;
  std::vector<double> trunk_grad_norm;  // per domain, contribution to the trunk gradient
};

struct TrainHistory {
  std::vector<TrainRecord> records;
  std::size_t samples_per_iteration = 0;  // summed over domains, after augmentation
};

struct Schedule {
  std::size_t iterations = 100;
  SgdConfig sgd;
  double domain_lr_multiplier = 1.0;
  bool augment = true;
  std::size_t chunk = 512;
  // Per iteration, per domain: draw this many pixels (with a random dihedral
  // transform each) instead of using the whole set. 0 = whole set, 8-fold
  // augmented when `augment`.
  std::size_t sample_per_domain = 0;
  std::uint64_t sample_seed = 0;
  bool record_trunk_grads = false;
};

// One labeled training set on one domain.
struct LabeledPixels {
  const HyperCube* cube = nullptr;
  std::vector<std::size_t> pixels;  // indices into cube->labels, all labeled
};

// Fresh encoder (target bands) and head (target classes) drawn from
// N(0, init_std^2), trunk copied bit-exactly, momentum zeroed. Encoder/head
// are domain-specific, the trunk shared.
CdcnnParams<float> transfer(const CdcnnParams<float>& pretrained, const DomainSpec& target,
                            std::uint64_t seed, double init_std = 0.001);

// Cross-entropy training; each iteration is one step over all sets, every
// domain's mean loss weighted equally.
TrainHistory train_joint(CdcnnParams<float>& params, std::span<const LabeledPixels> sets,
                         const Schedule& schedule, const LogFn& log = {});

TrainHistory train_supervised(CdcnnParams<float>& params, const HyperCube& cube,
                              std::span<const std::size_t> train_pixels, const Schedule& schedule,
                              const LogFn& log = {});

struct EvalReport {
  std::size_t num_classes = 0;
  std::vector<std::size_t> confusion;  // C x C, rows = true class
  double oa = 0;
  double aa = 0;
  std::vector<double> per_class;       // NaN for classes absent from the test set
  std::size_t run_index = 0;

  std::size_t count(std::size_t truth, std::size_t predicted) const {
    return confusion[truth * num_classes + predicted];
  }
};

EvalReport report_from_confusion(std::size_t num_classes, std::vector<std::size_t> confusion);

// Class indices are 0-based here.
EvalReport report_from_pairs(std::size_t num_classes, std::span<const std::size_t> predicted,
                             std::span<const std::size_t> truth);

// Argmax of the head logits per pixel; ties go to the lowest class index.
std::vector<std::size_t> predict(const CdcnnParams<float>& params, const HyperCube& cube,
                                 std::span<const std::size_t> pixels, std::size_t chunk = 512);

EvalReport evaluate(const CdcnnParams<float>& params, const HyperCube& cube,
                    std::span<const std::size_t> test_pixels, std::size_t chunk = 512);

struct RegimeInputs {
  const HyperCube* target = nullptr;
  std::vector<const HyperCube*> sources;
  // Optional pretrained model for sup_pretrain / self_sup; pretraining is
  // skipped when present.
  const CdcnnParams<float>* pretrained = nullptr;
};

struct RegimeResult {
  CdcnnParams<float> params;
  TrainHistory history;             // downstream stage
  std::vector<PretrainRecord> pretrain_history;
  TrainHistory sup_pretrain_history;
};

// Pretraining stage of a regime (self_sup: contrastive, sup_pretrain:
// supervised joint training on the sources). Deterministic in `seed`.
CdcnnParams<float> pretrain_stage(Regime regime, const RegimeInputs& inputs, const TrainConfig& config,
                                  std::uint64_t seed, std::vector<PretrainRecord>* self_history,
                                  TrainHistory* sup_history, const LogFn& log = {});

// Trains one downstream model on `split.train` of the target.
RegimeResult train_regime(Regime regime, const RegimeInputs& inputs, const Split& split,
                          const TrainConfig& config, std::uint64_t seed, std::size_t run_index,
                          const LogFn& log = {});

struct RunAggregate {
  Regime regime = Regime::kScratch;
  double mean_oa = 0;
  double mean_aa = 0;
  std::vector<EvalReport> runs;
  std::vector<std::uint64_t> split_seeds;
  std::vector<CdcnnParams<float>> models;  // one per run
  std::vector<TrainHistory> histories;     // downstream training, one per run
};

// Pretrains once (for transfer regimes), then for each run_index draws a
// fresh split, trains and evaluates. With threads > 1 and !deterministic the
// runs execute concurrently; results do not depend on the thread count.
RunAggregate run_experiment(Regime regime, const RegimeInputs& inputs, const TrainConfig& config,
                            std::uint64_t seed, std::size_t threads = 1, bool deterministic = true,
                            const LogFn& log = {});

}  // namespace hypercd
