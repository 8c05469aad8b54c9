#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "hypercd/error.hpp"
#include "hypercd/selfsup.hpp"
#include "oracles.hpp"

using namespace hypercd;

namespace {

Matrix<double> random_unit_rows(std::size_t rows, std::size_t dim, Rng& rng) {
  Matrix<double> m(rows, dim);
  m.values = oracle::random_normal(rows * dim, rng);
  return l2_normalize_forward(m, 1e-12);
}

std::vector<HyperCube> synth_sources(std::uint64_t seed, std::size_t size = 24) {
  SynthConfig cfg;
  cfg.num_domains = 3;
  cfg.bands = {12, 16, 20};
  cfg.classes = {3, 3, 3};
  cfg.size = size;
  cfg.seed = seed;
  cfg.tile = 6;
  auto cubes = synth_domains(cfg);
  for (auto& c : cubes) c = normalize_cube(c);
  return cubes;
}

}  // namespace

TEST_CASE("region sampling") {
  const auto cubes = synth_sources(1);
  SUBCASE("p = 1 gives one pixel per domain, one group each") {
    Rng rng(2);
    const RegionBatch b = sample_regions(cubes, 1, 2, false, rng);
    CHECK(b.entries.size() == 3);
    CHECK(b.sample_groups() == std::vector<std::size_t>{0, 1, 2});
  }
  SUBCASE("five domains with p = 6 give 180 samples in 5 groups") {
    std::vector<HyperCube> five = cubes;
    auto more = synth_sources(9);
    five.push_back(more[0]);
    five.push_back(more[1]);
    five[3].domain_id = "extra_a";
    five[4].domain_id = "extra_b";
    Rng rng(3);
    const RegionBatch b = sample_regions(five, 6, 2, true, rng);
    const auto groups = b.sample_groups();
    CHECK(groups.size() == 180);
    std::map<std::size_t, std::size_t> counts;
    for (auto g : groups) ++counts[g];
    CHECK(counts.size() == 5);
    for (auto& [g, n] : counts) CHECK(n == 36);
  }
  SUBCASE("windows are the mirrored-context slices, transformed") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const RegionBatch b = sample_regions(cubes, 4, 2, true, rng);
      for (std::size_t d = 0; d < b.entries.size(); ++d) {
        const RegionEntry& e = b.entries[d];
        CHECK(e.domain_id == cubes[d].domain_id);
        CHECK(e.side == 8);
        CHECK(e.top >= 2);
        CHECK(e.top + 4 + 2 <= cubes[d].height);
        const auto raw = extract_window(cubes[d], static_cast<std::ptrdiff_t>(e.top) - 2,
                                        static_cast<std::ptrdiff_t>(e.left) - 2, 8);
        CHECK(dihedral_transform(raw, 8, e.bands, e.dihedral) == e.window);
      }
    }
  }
  SUBCASE("same seed gives the same batch") {
    Rng a(5), b(5);
    const auto x = sample_regions(cubes, 6, 2, true, a);
    const auto y = sample_regions(cubes, 6, 2, true, b);
    for (std::size_t d = 0; d < 3; ++d) {
      CHECK(x.entries[d].top == y.entries[d].top);
      CHECK(x.entries[d].left == y.entries[d].left);
      CHECK(x.entries[d].dihedral == y.entries[d].dihedral);
      CHECK(x.entries[d].window == y.entries[d].window);
    }
  }
  SUBCASE("image too small for p") {
    Rng rng(6);
    CHECK_THROWS_AS(sample_regions(cubes, 21, 2, false, rng), Error);
  }
}

TEST_CASE("multi-positive InfoNCE values") {
  SUBCASE("hand example log(1 + e^-1)") {
    Matrix<double> e(3, 2);
    e.values = {1, 0, 1, 0, 0, 1};  // q, k+, k-
    const std::vector<std::size_t> groups{0, 0, 1};
    const auto r = infonce_multi<double>(e, groups, 1.0);
    CHECK(std::abs(r.per_query[0] - std::log1p(std::exp(-1.0))) < 1e-12);
    CHECK(std::abs(r.per_query[0] - 0.31326) < 1e-5);
  }
  SUBCASE("equal similarities give m log N") {
    Matrix<double> e(6, 3);
    for (std::size_t i = 0; i < 6; ++i) e.at(i, 0) = 1.0;
    const std::vector<std::size_t> groups{0, 0, 0, 1, 1, 2};
    const auto r = infonce_multi<double>(e, groups, 0.07);
    const double n_keys = 5;
    CHECK(r.per_query[0] == doctest::Approx(2 * std::log(n_keys)).epsilon(1e-12));
    CHECK(r.per_query[3] == doctest::Approx(1 * std::log(n_keys)).epsilon(1e-12));
    CHECK(r.per_query[5] == 0.0);
  }
  SUBCASE("decomposition into single-positive terms, non-negativity, permutation") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t groups_n = 2 + trial % 3, per = 1 + trial % 4;
      const Matrix<double> e = random_unit_rows(groups_n * per, 8, rng);
      std::vector<std::size_t> groups;
      for (std::size_t g = 0; g < groups_n; ++g) groups.insert(groups.end(), per, g);
      const double tau = 0.07 + 0.2 * (trial % 3);
      const auto r = infonce_multi<double>(e, groups, tau);
      const auto expect = oracle::infonce_by_decomposition(e, groups, tau);
      double mean = 0;
      for (std::size_t q = 0; q < e.rows; ++q) {
        CHECK(std::abs(r.per_query[q] - expect[q]) <= 1e-12 * std::max(1.0, expect[q]));
        CHECK(r.per_query[q] >= 0.0);
        mean += expect[q];
      }
      mean /= static_cast<double>(e.rows);
      CHECK(std::abs(r.loss - mean) <= 1e-12 * std::max(1.0, mean));

      std::vector<std::size_t> perm(e.rows);
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 5 + 3) % perm.size();
      if (std::gcd(std::size_t{5}, perm.size()) != 1) std::reverse(perm.begin(), perm.end());
      Matrix<double> pe(e.rows, e.cols);
      std::vector<std::size_t> pg(e.rows);
      for (std::size_t i = 0; i < e.rows; ++i) {
        for (std::size_t d = 0; d < e.cols; ++d) pe.at(i, d) = e.at(perm[i], d);
        pg[i] = groups[perm[i]];
      }
      CHECK(std::abs(infonce_multi<double>(pe, pg, tau).loss - r.loss) <= 1e-12);
    }
  }
}

TEST_CASE("multi-positive InfoNCE gradient") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix<double> e(12 + trial * 2, 6);
    e.values = oracle::random_normal(e.values.size(), rng, 0.5);
    std::vector<std::size_t> groups(e.rows);
    for (std::size_t i = 0; i < e.rows; ++i) groups[i] = i % (2 + trial % 3);
    const auto r = infonce_multi<double>(e, groups, 0.3);
    oracle::FdReport rep;
    oracle::fd_check(rep, "e", e.values, r.grad.values, [&] { return infonce_multi<double>(e, groups, 0.3).loss; });
    INFO("worst " << rep.worst);
    CHECK(rep.max_rel_error < 1e-5);
  }
}

TEST_CASE("pretraining loop") {
  const auto cubes = synth_sources(11, 32);
  ArchConfig arch = ArchConfig::modified(2);
  arch.channels = 32;
  ContrastiveConfig cc;
  cc.iterations = 60;
  SgdConfig sgd;
  sgd.milestones = {30, 45};

  const PretrainResult a = pretrain(cubes, arch, cc, sgd, 17);
  REQUIRE(a.history.size() == 60);
  for (const auto& r : a.history) {
    const double expect = r.iteration < 30 ? 0.03 : r.iteration < 45 ? 0.003 : 0.0003;
    CHECK(std::abs(r.lr - expect) <= 1e-15);
  }
  CHECK(a.history.back().loss < a.history.front().loss);

  const PretrainResult b = pretrain(cubes, arch, cc, sgd, 17);
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].loss == b.history[i].loss);

  Rng rng(99);
  const SimilarityStats s = embedding_similarity(a.params, cubes, cc.p, 10, rng);
  CHECK(s.intra > s.inter);
}
