#include <doctest.h>

#include <cmath>

#include "hypercd/checkpoint.hpp"
#include "hypercd/downstream.hpp"
#include "hypercd/error.hpp"
#include "oracles.hpp"

using namespace hypercd;

namespace {

std::vector<HyperCube> synth_set(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.num_domains = 3;
  cfg.bands = {10, 14, 12};
  cfg.classes = {3, 3, 4};
  cfg.size = 24;
  cfg.seed = seed;
  cfg.tile = 6;
  auto cubes = synth_domains(cfg);
  for (auto& c : cubes) c = normalize_cube(c);
  return cubes;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.arch = ArchConfig::modified(1);
  cfg.arch.channels = 16;
  cfg.contrastive.iterations = 20;
  cfg.pretrain_milestones = {10, 15};
  cfg.finetune.iterations = 30;
  cfg.finetune.milestones = {18, 24};
  cfg.finetune.train_per_domain = 40;
  cfg.finetune.runs = 2;
  cfg.sup_batch_per_domain = 40;
  return cfg;
}

bool same_tensors(const std::vector<float>& a, const std::vector<float>& b) { return a == b; }

}  // namespace

TEST_CASE("regime names") {
  CHECK(parse_regime("scratch") == Regime::kScratch);
  CHECK(parse_regime("cd-scratch") == Regime::kCdScratch);
  CHECK(parse_regime("sup") == Regime::kSupPretrain);
  CHECK(parse_regime("self_sup") == Regime::kSelfSup);
  CHECK(to_string(Regime::kSelfSup) == "self_sup");
  CHECK_THROWS_AS(parse_regime("finetune"), Error);
}

TEST_CASE("transfer") {
  const std::vector<DomainSpec> src{{"a", 10, 0}, {"b", 12, 0}};
  const auto pre = init_params<float>(ArchConfig::modified(2), src, 5, 0.01);
  const DomainSpec ip{"ip", 200, 16};
  const auto t1 = transfer(pre, ip, 100);
  const auto t2 = transfer(pre, ip, 200);

  CHECK(t1.encoders.size() == 1);
  CHECK(t1.encoders.at("ip").branches[0].weight.shape == std::vector<std::size_t>{128, 200, 5, 5});
  CHECK(t1.heads.at("ip").out == 16);
  for (const auto& [name, t] : t1.named_tensors()) {
    if (name.rfind("trunk/", 0) == 0) {
      const ParamTensor<float>* src_t = nullptr;
      for (const auto& [n2, t2p] : pre.named_tensors()) {
        if (n2 == name) src_t = t2p;
      }
      REQUIRE(src_t != nullptr);
      CHECK(same_tensors(t->value, src_t->value));
      CHECK(t->group == LrGroup::kShared);
    } else {
      CHECK(t->group == LrGroup::kDomainSpecific);
    }
    for (float m : t->momentum) CHECK(m == 0.0f);
  }
  CHECK(same_tensors(t1.trunk.res[1].second.weight.value, t2.trunk.res[1].second.weight.value));
  CHECK_FALSE(same_tensors(t1.encoders.at("ip").branches[0].weight.value, t2.encoders.at("ip").branches[0].weight.value));
  CHECK_FALSE(same_tensors(t1.heads.at("ip").weight.value, t2.heads.at("ip").weight.value));
}

TEST_CASE("supervised training") {
  const auto cubes = synth_set(3);
  const HyperCube& cube = cubes[2];
  const Split split = make_split(cube, {1, 60, 0, false});
  const std::vector<DomainSpec> spec{{cube.domain_id, cube.bands, cube.num_classes}};
  ArchConfig arch = ArchConfig::modified(1);
  arch.channels = 16;

  SUBCASE("zero iterations leave parameters unchanged") {
    auto p = init_params<float>(arch, spec, 1);
    const auto before = encode_checkpoint(p);
    Schedule s;
    s.iterations = 0;
    s.sgd.milestones = {};
    train_supervised(p, cube, split.train, s);
    CHECK(encode_checkpoint(p) == before);
  }
  SUBCASE("initial loss is ln C, augmentation multiplies samples by 8, separable data is fit") {
    auto p = init_params<float>(arch, spec, 2);
    Schedule s;
    s.iterations = 100;
    s.sgd.milestones = {60, 80};
    s.augment = true;
    const TrainHistory h = train_supervised(p, cube, split.train, s);
    CHECK(h.samples_per_iteration == 8 * split.train.size());
    CHECK(h.records.front().loss == doctest::Approx(std::log(static_cast<double>(cube.num_classes))).epsilon(1e-3));
    CHECK(h.records.back().train_accuracy == 1.0);
    for (const auto& r : h.records) CHECK(r.lr_domain == r.lr_shared * s.domain_lr_multiplier);

    Schedule plain = s;
    plain.augment = false;
    plain.iterations = 1;
    auto q = init_params<float>(arch, spec, 2);
    CHECK(train_supervised(q, cube, split.train, plain).samples_per_iteration == split.train.size());
  }
}

TEST_CASE("scratch regime equals direct supervised training") {
  const auto cubes = synth_set(4);
  const TrainConfig cfg = small_config();
  RegimeInputs in;
  in.target = &cubes[2];
  const Split split = make_split(cubes[2], {9, 40, 1, false});
  const RegimeResult r = train_regime(Regime::kScratch, in, split, cfg, 9, 1);

  const std::vector<DomainSpec> spec{{cubes[2].domain_id, cubes[2].bands, cubes[2].num_classes}};
  auto p = init_params<float>(cfg.arch, spec, derive_seed(9, "init", 1), cfg.init_std);
  Schedule s;
  s.iterations = cfg.finetune.iterations;
  s.sgd = cfg.finetune_sgd();
  s.augment = cfg.finetune.augment;
  s.chunk = cfg.chunk;
  train_supervised(p, cubes[2], split.train, s);
  CHECK(encode_checkpoint(p) == encode_checkpoint(r.params));
}

TEST_CASE("cd_scratch trunk receives gradients from every domain") {
  const auto cubes = synth_set(5);
  TrainConfig cfg = small_config();
  RegimeInputs in;
  in.target = &cubes[2];
  in.sources = {&cubes[0], &cubes[1]};
  const Split split = make_split(cubes[2], {3, 40, 0, false});
  const RegimeResult r = train_regime(Regime::kCdScratch, in, split, cfg, 3, 0);
  CHECK(r.params.encoders.size() == 3);
  CHECK(r.params.heads.size() == 3);
  REQUIRE(r.history.records.size() == cfg.contrastive.iterations);
  for (const auto& rec : r.history.records) {
    REQUIRE(rec.trunk_grad_norm.size() == 3);
    for (double g : rec.trunk_grad_norm) CHECK(g > 0.0);
  }
}

TEST_CASE("finetune schedule keeps the 10x ratio") {
  const auto cubes = synth_set(6);
  TrainConfig cfg = small_config();
  cfg.finetune.iterations = 100;
  cfg.finetune.milestones = {60, 80};
  cfg.finetune.augment = false;
  cfg.arch.channels = 8;
  RegimeInputs in;
  in.target = &cubes[2];
  in.sources = {&cubes[0], &cubes[1]};
  const auto pre = init_params<float>(cfg.arch, std::vector<DomainSpec>{{"x", 10, 0}}, 1);
  in.pretrained = &pre;
  const Split split = make_split(cubes[2], {1, 20, 0, false});
  const RegimeResult r = train_regime(Regime::kSelfSup, in, split, cfg, 1, 0);
  REQUIRE(r.history.records.size() == 100);
  for (const auto& rec : r.history.records) {
    const double expect = rec.iteration < 60 ? 0.03 : rec.iteration < 80 ? 0.003 : 0.0003;
    CHECK(std::abs(rec.lr_shared - expect) <= 1e-15);
    CHECK(rec.lr_domain == 10.0 * rec.lr_shared);
  }

  ArchConfig other = cfg.arch;
  other.n_res_modules = 3;
  const auto mismatched = init_params<float>(other, std::vector<DomainSpec>{{"x", 10, 0}}, 1);
  in.pretrained = &mismatched;
  CHECK_THROWS_AS(train_regime(Regime::kSelfSup, in, split, cfg, 1, 0), Error);
}

TEST_CASE("OA and AA") {
  const auto a = report_from_confusion(2, {9, 1, 4, 6});
  CHECK(a.oa == 0.75);
  CHECK(a.aa == 0.75);
  const auto b = report_from_confusion(2, {5, 0, 5, 10});
  CHECK(b.oa == 0.75);
  CHECK(b.aa == doctest::Approx((1.0 + 10.0 / 15.0) / 2).epsilon(1e-15));
  const auto c = report_from_confusion(3, {4, 0, 0, 0, 7, 0, 0, 0, 2});
  CHECK(c.oa == 1.0);
  CHECK(c.aa == 1.0);

  SUBCASE("absent classes are left out of AA") {
    const auto d = report_from_confusion(3, {3, 1, 0, 0, 0, 0, 1, 0, 1});
    CHECK(std::isnan(d.per_class[1]));
    CHECK(d.aa == doctest::Approx((0.75 + 0.5) / 2).epsilon(1e-15));
  }
  SUBCASE("pairs agree with a brute-force recount") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t classes = 2 + uniform_index(rng, 6);
      const std::size_t n = 1 + uniform_index(rng, 80);
      std::vector<std::size_t> pred(n), truth(n);
      for (std::size_t i = 0; i < n; ++i) {
        truth[i] = uniform_index(rng, classes);
        pred[i] = uniform_index(rng, 3) == 0 ? uniform_index(rng, classes) : truth[i];
      }
      const auto rep = report_from_pairs(classes, pred, truth);
      const auto brute = oracle::metrics_from_pairs(classes, pred, truth);
      CHECK(std::abs(rep.oa - brute.oa) <= 1e-12);
      CHECK(std::abs(rep.aa - brute.aa) <= 1e-12);
    }
  }
}

TEST_CASE("prediction ties go to the lowest class") {
  const auto cubes = synth_set(7);
  const std::vector<DomainSpec> spec{{cubes[0].domain_id, cubes[0].bands, cubes[0].num_classes}};
  auto p = init_params<float>(ArchConfig::modified(1), spec, 1);
  auto& head = p.heads.begin()->second;
  std::fill(head.weight.value.begin(), head.weight.value.end(), 0.0f);
  std::fill(head.bias.value.begin(), head.bias.value.end(), 0.0f);
  const std::vector<std::size_t> pixels{0, 5, 17};
  for (std::size_t cls : predict(p, cubes[0], pixels)) CHECK(cls == 0);
}

TEST_CASE("run aggregation") {
  const auto cubes = synth_set(8);
  TrainConfig cfg = small_config();
  cfg.finetune.iterations = 10;
  cfg.finetune.milestones = {6, 8};
  RegimeInputs in;
  in.target = &cubes[2];

  cfg.finetune.runs = 1;
  const auto one = run_experiment(Regime::kScratch, in, cfg, 12);
  CHECK(one.mean_oa == one.runs[0].oa);
  CHECK(one.mean_aa == one.runs[0].aa);

  cfg.finetune.runs = 3;
  const auto three = run_experiment(Regime::kScratch, in, cfg, 12, 1, true);
  double mean = 0;
  for (const auto& r : three.runs) mean += r.oa;
  CHECK(std::abs(three.mean_oa - mean / 3) <= 1e-12);
  CHECK(three.runs[0].oa == one.runs[0].oa);

  const auto again = run_experiment(Regime::kScratch, in, cfg, 12, 1, true);
  CHECK(again.mean_oa == three.mean_oa);
  const auto threaded = run_experiment(Regime::kScratch, in, cfg, 12, 3, false);
  for (std::size_t r = 0; r < 3; ++r) CHECK(encode_checkpoint(threaded.models[r]) == encode_checkpoint(three.models[r]));
}
