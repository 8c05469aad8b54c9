#include "hypercd/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include "hypercd/error.hpp"
#include "hypercd/rng.hpp"

namespace hypercd {

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kScratch: return "scratch";
    case Regime::kCdScratch: return "cd_scratch";
    case Regime::kSupPretrain: return "sup";
    case Regime::kSelfSup: return "self_sup";
  }
  return "unknown";
}

Regime parse_regime(const std::string& name) {
  if (name == "scratch") return Regime::kScratch;
  if (name == "cd_scratch" || name == "cd-scratch") return Regime::kCdScratch;
  if (name == "sup" || name == "sup_pretrain") return Regime::kSupPretrain;
  if (name == "self_sup" || name == "self-sup" || name == "selfsup") return Regime::kSelfSup;
  fail(ErrorKind::kUsage, "unknown regime '" + name + "' (expected scratch, cd_scratch, sup, self_sup)");
}

void FinetuneConfig::validate() const {
  require(lr_multiplier_domain_specific > 0, ErrorKind::kUsage, "finetune: lr multiplier must be positive");
  require(train_per_domain > 0, ErrorKind::kUsage, "finetune: train_per_domain must be positive");
  require(runs > 0, ErrorKind::kUsage, "finetune: runs must be positive");
  for (std::size_t m : milestones) {
    require(m < iterations || iterations == 0, ErrorKind::kUsage, "finetune: milestones must lie in [0, iterations)");
  }
}

SgdConfig TrainConfig::pretrain_sgd() const {
  SgdConfig s = optimizer;
  s.milestones = pretrain_milestones;
  return s;
}

SgdConfig TrainConfig::finetune_sgd() const {
  SgdConfig s = optimizer;
  s.milestones = finetune.milestones;
  return s;
}

void TrainConfig::validate() const {
  arch.validate();
  pretrain_sgd().validate();
  finetune_sgd().validate();
  contrastive.validate();
  finetune.validate();
  require(chunk > 0, ErrorKind::kUsage, "chunk size must be positive");
}

CdcnnParams<float> transfer(const CdcnnParams<float>& pretrained, const DomainSpec& target,
                            std::uint64_t seed, double init_std) {
  require(target.classes > 0, ErrorKind::kUsage, "transfer: target domain '" + target.id + "' needs a class count");
  const DomainSpec spec = target;
  CdcnnParams<float> params = init_params<float>(pretrained.arch, std::span(&spec, 1), seed, init_std);
  auto src = pretrained.named_tensors();
  auto dst = params.named_tensors();
  std::size_t copied = 0;
  for (auto& [name, p] : dst) {
    if (name.rfind("trunk/", 0) != 0) continue;
    auto it = std::find_if(src.begin(), src.end(), [&](const auto& e) { return e.first == name; });
    require(it != src.end() && it->second->shape == p->shape, ErrorKind::kShapeMismatch,
            "transfer: pretrained trunk lacks a matching '" + name + "'");
    p->value = it->second->value;
    ++copied;
  }
  const auto trunk_count = std::count_if(src.begin(), src.end(), [](const auto& e) { return e.first.rfind("trunk/", 0) == 0; });
  require(copied == static_cast<std::size_t>(trunk_count), ErrorKind::kShapeMismatch, "transfer: trunk layout mismatch");
  return params;
}

namespace {

struct Chunk {
  Tensor4<float> x;
  std::vector<std::size_t> targets;
};

std::vector<float> window_at(const HyperCube& cube, std::size_t pixel, std::size_t side) {
  const auto half = static_cast<std::ptrdiff_t>(side / 2);
  return extract_window(cube, static_cast<std::ptrdiff_t>(pixel / cube.width) - half,
                        static_cast<std::ptrdiff_t>(pixel % cube.width) - half, side);
}

std::size_t class_of(const HyperCube& cube, std::size_t pixel) {
  const std::uint16_t label = cube.labels.at(pixel);
  require(label != 0, ErrorKind::kInvalidData,
          "pixel " + std::to_string(pixel) + " of '" + cube.domain_id + "' is unlabeled");
  return label - 1u;
}

// Whole-set batches (optionally 8-fold augmented), split into chunks.
std::vector<Chunk> build_chunks(const LabeledPixels& set, std::size_t side, bool augment, std::size_t chunk) {
  std::vector<std::vector<float>> windows;
  std::vector<std::size_t> targets;
  for (std::size_t px : set.pixels) {
    const std::size_t cls = class_of(*set.cube, px);
    const auto base = window_at(*set.cube, px, side);
    const int variants = augment ? 8 : 1;
    for (int k = 0; k < variants; ++k) {
      windows.push_back(k == 0 ? base : dihedral_transform(base, side, set.cube->bands, k));
      targets.push_back(cls);
    }
  }
  std::vector<Chunk> chunks;
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t end = std::min(windows.size(), start + chunk);
    Chunk c;
    c.x = windows_to_tensor<float>(std::span(windows).subspan(start, end - start), side, set.cube->bands);
    c.targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(start),
                     targets.begin() + static_cast<std::ptrdiff_t>(end));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// Random draw of `count` pixels (without replacement when possible), each
// with a uniform dihedral transform.
std::vector<Chunk> sample_chunks(const LabeledPixels& set, std::size_t side, bool augment, std::size_t count,
                                 std::size_t chunk, Rng& rng) {
  std::vector<std::size_t> pool = set.pixels;
  std::vector<std::size_t> chosen;
  if (count >= pool.size()) {
    chosen = pool;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
      chosen.push_back(pool[i]);
    }
  }
  std::vector<std::vector<float>> windows;
  std::vector<std::size_t> targets;
  for (std::size_t px : chosen) {
    auto w = window_at(*set.cube, px, side);
    const int k = augment ? static_cast<int>(uniform_index(rng, 8)) : 0;
    windows.push_back(k == 0 ? std::move(w) : dihedral_transform(w, side, set.cube->bands, k));
    targets.push_back(class_of(*set.cube, px));
  }
  std::vector<Chunk> chunks;
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t end = std::min(windows.size(), start + chunk);
    Chunk c;
    c.x = windows_to_tensor<float>(std::span(windows).subspan(start, end - start), side, set.cube->bands);
    c.targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(start),
                     targets.begin() + static_cast<std::ptrdiff_t>(end));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

std::size_t argmax_row(const Matrix<float>& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols; ++c) {
    if (m.at(r, c) > m.at(r, best)) best = c;
  }
  return best;
}

double trunk_grad_sq(CdcnnParams<float>& params, std::vector<float>& snapshot, bool take_snapshot) {
  double acc = 0;
  std::size_t offset = 0;
  for (auto* p : params.trunk_tensors()) {
    for (std::size_t i = 0; i < p->grad.size(); ++i, ++offset) {
      if (take_snapshot) {
        if (snapshot.size() <= offset) snapshot.resize(offset + 1);
        snapshot[offset] = p->grad[i];
      } else {
        const double d = static_cast<double>(p->grad[i]) - snapshot[offset];
        acc += d * d;
      }
    }
  }
  return acc;
}

}  // namespace

TrainHistory train_joint(CdcnnParams<float>& params, std::span<const LabeledPixels> sets,
                         const Schedule& schedule, const LogFn& log) {
  schedule.sgd.validate();
  require(!sets.empty(), ErrorKind::kUsage, "train: no training sets");
  const std::size_t side = 2 * params.arch.context_margin() + 1;
  for (const auto& s : sets) {
    require(s.cube != nullptr && s.cube->has_labels(), ErrorKind::kInvalidData, "train: training cube has no labels");
    require(!s.pixels.empty(), ErrorKind::kInvalidData, "train: empty training set for '" + s.cube->domain_id + "'");
    const DomainSpec& d = params.domain(s.cube->domain_id);
    require(d.bands == s.cube->bands, ErrorKind::kShapeMismatch,
            "train: model expects " + std::to_string(d.bands) + " bands for '" + d.id + "', cube has " +
                std::to_string(s.cube->bands));
    require(d.classes >= s.cube->num_classes, ErrorKind::kShapeMismatch,
            "train: head of '" + d.id + "' has " + std::to_string(d.classes) + " classes, cube declares " +
                std::to_string(s.cube->num_classes));
  }

  std::vector<std::vector<Chunk>> fixed;
  if (schedule.sample_per_domain == 0) {
    for (const auto& s : sets) fixed.push_back(build_chunks(s, side, schedule.augment, schedule.chunk));
  }

  TrainHistory history;
  const double domain_weight = 1.0 / static_cast<double>(sets.size());
  std::vector<float> snapshot;
  for (std::size_t iter = 0; iter < schedule.iterations; ++iter) {
    std::vector<std::vector<Chunk>> drawn;
    if (schedule.sample_per_domain > 0) {
      Rng rng = make_rng(schedule.sample_seed, "batch", iter);
      for (const auto& s : sets) {
        drawn.push_back(sample_chunks(s, side, schedule.augment, schedule.sample_per_domain, schedule.chunk, rng));
      }
    }
    const auto& batches = schedule.sample_per_domain > 0 ? drawn : fixed;

    params.zero_grad();
    TrainRecord rec;
    rec.iteration = iter;
    std::size_t correct = 0, seen = 0;
    for (std::size_t d = 0; d < sets.size(); ++d) {
      const std::string& id = sets[d].cube->domain_id;
      std::size_t total = 0;
      for (const auto& c : batches[d]) total += c.targets.size();
      if (schedule.record_trunk_grads) trunk_grad_sq(params, snapshot, true);
      for (const auto& c : batches[d]) {
        NetCache<float> cache;
        const Matrix<float> logits = forward_logits(params, id, c.x, &cache);
        CrossEntropyResult<float> ce = softmax_cross_entropy<float>(logits, c.targets);
        const double share = static_cast<double>(c.targets.size()) / static_cast<double>(total);
        rec.loss += domain_weight * share * ce.loss;
        const auto scale = static_cast<float>(domain_weight * share);
        for (auto& v : ce.dlogits.values) v *= scale;
        backward(params, cache, ce.dlogits);
        for (std::size_t r = 0; r < logits.rows; ++r) correct += argmax_row(logits, r) == c.targets[r] ? 1 : 0;
        seen += c.targets.size();
      }
      if (schedule.record_trunk_grads) rec.trunk_grad_norm.push_back(std::sqrt(trunk_grad_sq(params, snapshot, false)));
      if (iter == 0) history.samples_per_iteration += total;
    }
    if (!std::isfinite(rec.loss)) {
      fail(ErrorKind::kNumeric, "non-finite training loss at iteration " + std::to_string(iter));
    }
    const StepRates rates = apply_sgd(params, schedule.sgd, iter, schedule.domain_lr_multiplier);
    rec.lr_shared = rates.shared;
    rec.lr_domain = rates.domain_specific;
    rec.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (log && (iter % 20 == 0 || iter + 1 == schedule.iterations)) {
      log("train iter " + std::to_string(iter) + " lr " + std::to_string(rates.shared) + " loss " +
          std::to_string(rec.loss) + " train_acc " + std::to_string(rec.train_accuracy));
    }
    history.records.push_back(std::move(rec));
  }
  return history;
}

TrainHistory train_supervised(CdcnnParams<float>& params, const HyperCube& cube,
                              std::span<const std::size_t> train_pixels, const Schedule& schedule,
                              const LogFn& log) {
  LabeledPixels set{&cube, std::vector<std::size_t>(train_pixels.begin(), train_pixels.end())};
  return train_joint(params, std::span(&set, 1), schedule, log);
}

EvalReport report_from_confusion(std::size_t num_classes, std::vector<std::size_t> confusion) {
  require(confusion.size() == num_classes * num_classes, ErrorKind::kShapeMismatch, "confusion matrix must be C x C");
  EvalReport r;
  r.num_classes = num_classes;
  r.confusion = std::move(confusion);
  r.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  std::size_t total = 0, diag = 0, present = 0;
  double recall_sum = 0;
  for (std::size_t t = 0; t < num_classes; ++t) {
    std::size_t row = 0;
    for (std::size_t p = 0; p < num_classes; ++p) row += r.count(t, p);
    total += row;
    diag += r.count(t, t);
    if (row > 0) {
      r.per_class[t] = static_cast<double>(r.count(t, t)) / static_cast<double>(row);
      recall_sum += r.per_class[t];
      ++present;
    }
  }
  r.oa = total ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
  r.aa = present ? recall_sum / static_cast<double>(present) : 0.0;
  return r;
}

EvalReport report_from_pairs(std::size_t num_classes, std::span<const std::size_t> predicted,
                             std::span<const std::size_t> truth) {
  require(predicted.size() == truth.size(), ErrorKind::kShapeMismatch, "prediction/label count mismatch");
  std::vector<std::size_t> confusion(num_classes * num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] < num_classes && predicted[i] < num_classes, ErrorKind::kInvalidData, "class index out of range");
    ++confusion[truth[i] * num_classes + predicted[i]];
  }
  return report_from_confusion(num_classes, std::move(confusion));
}

std::vector<std::size_t> predict(const CdcnnParams<float>& params, const HyperCube& cube,
                                 std::span<const std::size_t> pixels, std::size_t chunk) {
  const DomainSpec& d = params.domain(cube.domain_id);
  require(d.bands == cube.bands, ErrorKind::kShapeMismatch,
          "checkpoint expects " + std::to_string(d.bands) + " bands for '" + d.id + "' but the cube has " +
              std::to_string(cube.bands) + "; pass the cube the model was trained on");
  const std::size_t side = 2 * params.arch.context_margin() + 1;
  std::vector<std::size_t> out;
  out.reserve(pixels.size());
  for (std::size_t start = 0; start < pixels.size(); start += chunk) {
    const std::size_t end = std::min(pixels.size(), start + chunk);
    std::vector<std::vector<float>> windows;
    for (std::size_t i = start; i < end; ++i) {
      require(pixels[i] < cube.pixel_count(), ErrorKind::kUsage, "pixel index out of range");
      windows.push_back(window_at(cube, pixels[i], side));
    }
    const Matrix<float> logits =
        forward_logits(params, cube.domain_id, windows_to_tensor<float>(windows, side, cube.bands));
    for (std::size_t r = 0; r < logits.rows; ++r) out.push_back(argmax_row(logits, r));
  }
  return out;
}

EvalReport evaluate(const CdcnnParams<float>& params, const HyperCube& cube,
                    std::span<const std::size_t> test_pixels, std::size_t chunk) {
  require(cube.has_labels(), ErrorKind::kInvalidData, "evaluate: cube '" + cube.domain_id + "' has no labels");
  std::vector<std::size_t> truth;
  truth.reserve(test_pixels.size());
  for (std::size_t px : test_pixels) {
    require(px < cube.pixel_count(), ErrorKind::kUsage, "evaluate: pixel index out of range");
    truth.push_back(class_of(cube, px));
  }
  const auto pred = predict(params, cube, test_pixels, chunk);
  const std::size_t classes = params.domain(cube.domain_id).classes;
  return report_from_pairs(classes, pred, truth);
}

namespace {

DomainSpec labeled_spec(const HyperCube& cube) {
  require(cube.has_labels() && cube.num_classes > 0, ErrorKind::kInvalidData,
          "supervised regimes need labels for '" + cube.domain_id + "'");
  return {cube.domain_id, cube.bands, cube.num_classes};
}

Schedule downstream_schedule(const TrainConfig& config, double multiplier) {
  Schedule s;
  s.iterations = config.finetune.iterations;
  s.sgd = config.finetune_sgd();
  s.domain_lr_multiplier = multiplier;
  s.augment = config.finetune.augment;
  s.chunk = config.chunk;
  return s;
}

Schedule joint_schedule(const TrainConfig& config) {
  Schedule s;
  s.iterations = config.contrastive.iterations;
  s.sgd = config.pretrain_sgd();
  s.domain_lr_multiplier = 1.0;
  s.augment = config.finetune.augment;
  s.chunk = config.chunk;
  return s;
}

}  // namespace

CdcnnParams<float> pretrain_stage(Regime regime, const RegimeInputs& inputs, const TrainConfig& config,
                                  std::uint64_t seed, std::vector<PretrainRecord>* self_history,
                                  TrainHistory* sup_history, const LogFn& log) {
  require(!inputs.sources.empty(), ErrorKind::kUsage, "regime '" + to_string(regime) + "' needs source domains");
  if (regime == Regime::kSelfSup) {
    std::vector<HyperCube> sources;
    for (const auto* c : inputs.sources) sources.push_back(*c);
    PretrainResult r = pretrain(sources, config.arch, config.contrastive, config.pretrain_sgd(), seed,
                                config.init_std, log);
    if (self_history != nullptr) *self_history = std::move(r.history);
    return std::move(r.params);
  }
  require(regime == Regime::kSupPretrain, ErrorKind::kUsage, "regime '" + to_string(regime) + "' has no pretraining stage");
  std::vector<DomainSpec> specs;
  std::vector<LabeledPixels> sets;
  for (const auto* c : inputs.sources) {
    specs.push_back(labeled_spec(*c));
    LabeledPixels set{c, {}};
    for (std::size_t i = 0; i < c->labels.size(); ++i) {
      if (c->labels[i] != 0) set.pixels.push_back(i);
    }
    sets.push_back(std::move(set));
  }
  CdcnnParams<float> params = init_params<float>(config.arch, specs, derive_seed(seed, "init"), config.init_std);
  Schedule s = joint_schedule(config);
  s.sample_per_domain = config.sup_batch_per_domain;
  s.sample_seed = derive_seed(seed, "batches");
  TrainHistory h = train_joint(params, sets, s, log);
  if (sup_history != nullptr) *sup_history = std::move(h);
  return params;
}

RegimeResult train_regime(Regime regime, const RegimeInputs& inputs, const Split& split,
                          const TrainConfig& config, std::uint64_t seed, std::size_t run_index,
                          const LogFn& log) {
  config.validate();
  require(inputs.target != nullptr, ErrorKind::kUsage, "train: no target domain");
  const HyperCube& target = *inputs.target;
  const DomainSpec target_spec = labeled_spec(target);
  const std::uint64_t init_seed = derive_seed(seed, "init", run_index);
  RegimeResult result;

  switch (regime) {
    case Regime::kScratch: {
      result.params = init_params<float>(config.arch, std::span(&target_spec, 1), init_seed, config.init_std);
      result.history = train_supervised(result.params, target, split.train, downstream_schedule(config, 1.0), log);
      break;
    }
    case Regime::kCdScratch: {
      require(!inputs.sources.empty(), ErrorKind::kUsage, "cd_scratch needs source domains");
      std::vector<DomainSpec> specs;
      std::vector<LabeledPixels> sets;
      for (const auto* c : inputs.sources) {
        specs.push_back(labeled_spec(*c));
        SplitSpec ss{seed, config.finetune.train_per_domain, run_index, true};
        sets.push_back({c, make_split(*c, ss).train});
      }
      specs.push_back(target_spec);
      sets.push_back({&target, split.train});
      result.params = init_params<float>(config.arch, specs, init_seed, config.init_std);
      Schedule s = joint_schedule(config);
      s.record_trunk_grads = true;
      result.history = train_joint(result.params, sets, s, log);
      break;
    }
    case Regime::kSupPretrain:
    case Regime::kSelfSup: {
      CdcnnParams<float> pre;
      if (inputs.pretrained != nullptr) {
        pre = *inputs.pretrained;
      } else {
        pre = pretrain_stage(regime, inputs, config, derive_seed(seed, "pretrain_stage"), &result.pretrain_history,
                             &result.sup_pretrain_history, log);
      }
      require(pre.arch.channels == config.arch.channels && pre.arch.n_res_modules == config.arch.n_res_modules &&
                  pre.arch.residual_only == config.arch.residual_only && pre.arch.has_c2() == config.arch.has_c2(),
              ErrorKind::kShapeMismatch,
              "pretrained trunk (" + pre.arch.describe() + ") does not match the requested architecture (" +
                  config.arch.describe() + ")");
      result.params = transfer(pre, target_spec, init_seed, config.init_std);
      result.history = train_supervised(result.params, target, split.train,
                                        downstream_schedule(config, config.finetune.lr_multiplier_domain_specific), log);
      break;
    }
  }
  return result;
}

RunAggregate run_experiment(Regime regime, const RegimeInputs& inputs, const TrainConfig& config,
                            std::uint64_t seed, std::size_t threads, bool deterministic, const LogFn& log) {
  config.validate();
  require(inputs.target != nullptr, ErrorKind::kUsage, "experiment: no target domain");
  RegimeInputs shared = inputs;
  CdcnnParams<float> pretrained;
  if ((regime == Regime::kSelfSup || regime == Regime::kSupPretrain) && inputs.pretrained == nullptr) {
    pretrained = pretrain_stage(regime, inputs, config, derive_seed(seed, "pretrain_stage"), nullptr, nullptr, log);
    shared.pretrained = &pretrained;
  }

  const std::size_t runs = config.finetune.runs;
  RunAggregate agg;
  agg.regime = regime;
  agg.runs.resize(runs);
  agg.models.resize(runs);
  agg.histories.resize(runs);
  agg.split_seeds.assign(runs, seed);

  std::mutex log_mutex;
  LogFn safe_log;
  if (log) {
    safe_log = [&](const std::string& line) {
      std::lock_guard<std::mutex> lock(log_mutex);
      log(line);
    };
  }
  auto one_run = [&](std::size_t r) {
    const Split split = make_split(*inputs.target, {seed, config.finetune.train_per_domain, r, false});
    RegimeResult res = train_regime(regime, shared, split, config, seed, r, safe_log);
    EvalReport rep = evaluate(res.params, *inputs.target, split.test, config.chunk);
    rep.run_index = r;
    if (safe_log) {
      safe_log("run " + std::to_string(r) + " " + to_string(regime) + " OA " + std::to_string(rep.oa) + " AA " +
               std::to_string(rep.aa));
    }
    agg.runs[r] = std::move(rep);
    agg.models[r] = std::move(res.params);
    agg.histories[r] = std::move(res.history);
  };

  const std::size_t workers = deterministic ? 1 : std::max<std::size_t>(1, std::min(threads, runs));
  if (workers <= 1) {
    for (std::size_t r = 0; r < runs; ++r) one_run(r);
  } else {
    std::vector<std::thread> pool;
    std::mutex next_mutex;
    std::size_t next = 0;
    std::exception_ptr error;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t r;
          {
            std::lock_guard<std::mutex> lock(next_mutex);
            if (next >= runs || error) return;
            r = next++;
          }
          try {
            one_run(r);
          } catch (...) {
            std::lock_guard<std::mutex> lock(next_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  for (const auto& rep : agg.runs) {
    agg.mean_oa += rep.oa;
    agg.mean_aa += rep.aa;
  }
  agg.mean_oa /= static_cast<double>(runs);
  agg.mean_aa /= static_cast<double>(runs);
  return agg;
}

}  // namespace hypercd
