#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "hypercd/error.hpp"
#include "hypercd/hsdata.hpp"
#include "oracles.hpp"

using namespace hypercd;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::kUsage;
}

std::vector<std::uint8_t> header(std::uint32_t h, std::uint32_t w, std::uint32_t b, std::uint32_t c, std::uint8_t labels) {
  std::vector<std::uint8_t> bytes{'H', 'S', 'C', '1'};
  for (std::uint32_t v : {h, w, b, c}) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  bytes.push_back(labels);
  return bytes;
}

void push_float(std::vector<std::uint8_t>& bytes, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "hypercd_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("cube save/load round trip is bit exact") {
  const HyperCube c = oracle::small_cube("rt", 5, 7, 3, 4, 11);
  const auto path = temp_path("rt.hsc");
  save_cube(c, path);
  const HyperCube d = load_cube(path);
  CHECK(d.domain_id == "rt");
  CHECK(d.height == 5);
  CHECK(d.width == 7);
  CHECK(d.bands == 3);
  CHECK(d.num_classes == 4);
  CHECK(std::memcmp(d.data.data(), c.data.data(), c.data.size() * sizeof(float)) == 0);
  CHECK(d.labels == c.labels);

  HyperCube unlabeled = c;
  unlabeled.labels.clear();
  unlabeled.num_classes = 0;
  const HyperCube u = decode_cube(encode_cube(unlabeled), "u");
  CHECK_FALSE(u.has_labels());
  CHECK(u.data == unlabeled.data);
}

TEST_CASE("cube decoding reports malformed input") {
  SUBCASE("payload shorter than the header declares") {
    auto bytes = header(2, 2, 3, 0, 0);
    for (int i = 0; i < 11; ++i) push_float(bytes, 1.0f);
    CHECK(kind_of([&] { decode_cube(bytes, "x"); }) == ErrorKind::kFormat);
  }
  SUBCASE("label above the declared class count") {
    auto bytes = header(1, 3, 1, 1, 1);
    for (int i = 0; i < 3; ++i) push_float(bytes, 0.5f);
    for (std::uint16_t l : {0, 1, 2}) {
      bytes.push_back(static_cast<std::uint8_t>(l));
      bytes.push_back(0);
    }
    CHECK(kind_of([&] { decode_cube(bytes, "x"); }) == ErrorKind::kInvalidData);
  }
  SUBCASE("non-finite value") {
    auto bytes = header(1, 1, 2, 0, 0);
    push_float(bytes, 1.0f);
    push_float(bytes, std::nanf(""));
    CHECK(kind_of([&] { decode_cube(bytes, "x"); }) == ErrorKind::kInvalidData);
  }
  SUBCASE("bad magic") {
    auto bytes = header(1, 1, 1, 0, 0);
    bytes[0] = 'X';
    push_float(bytes, 1.0f);
    CHECK(kind_of([&] { decode_cube(bytes, "x"); }) == ErrorKind::kFormat);
  }
  SUBCASE("missing file") {
    CHECK(kind_of([&] { load_cube(temp_path("does_not_exist.hsc")); }) == ErrorKind::kIo);
  }
}

TEST_CASE("csv import builds the implied grid") {
  const auto path = temp_path("tiny.csv");
  {
    std::ofstream f(path);
    f << "row,col,label,v1,v2\n0,0,1,1.5,2\n0,1,0,3,4\n1,0,2,5,6\n1,1,2,7,8\n";
  }
  const HyperCube c = import_csv(path, domain_id_from_path(path));
  CHECK(c.domain_id == "tiny");
  CHECK(c.height == 2);
  CHECK(c.width == 2);
  CHECK(c.bands == 2);
  CHECK(c.num_classes == 2);
  CHECK(c.value(1, 0, 1) == 6.0f);
  CHECK(c.label(0, 1) == 0);

  {
    std::ofstream f(path);
    f << "row,col,label,v1\n0,0,1,1\n0,0,1,2\n";
  }
  CHECK(kind_of([&] { import_csv(path, "dup"); }) == ErrorKind::kFormat);
}

TEST_CASE("normalize_cube") {
  HyperCube c;
  c.domain_id = "n";
  c.height = 1;
  c.width = 3;
  c.bands = 2;
  c.data = {1, 7, 2, 7, 3, 7};  // band 0 = {1,2,3}, band 1 constant
  const HyperCube n = normalize_cube(c);
  const double s = std::sqrt(1.5);
  CHECK(n.value(0, 0, 0) == doctest::Approx(-s).epsilon(1e-6));
  CHECK(n.value(0, 1, 0) == doctest::Approx(0.0));
  CHECK(n.value(0, 2, 0) == doctest::Approx(s).epsilon(1e-6));
  for (std::size_t col = 0; col < 3; ++col) CHECK(n.value(0, col, 1) == 0.0f);

  SUBCASE("zero mean, unit variance, idempotent") {
    const HyperCube r = normalize_cube(oracle::small_cube("r", 9, 8, 5, 0, 3));
    for (std::size_t b = 0; b < r.bands; ++b) {
      double mean = 0, var = 0;
      for (std::size_t p = 0; p < r.pixel_count(); ++p) mean += r.data[p * r.bands + b];
      mean /= static_cast<double>(r.pixel_count());
      for (std::size_t p = 0; p < r.pixel_count(); ++p) var += std::pow(r.data[p * r.bands + b] - mean, 2);
      var /= static_cast<double>(r.pixel_count());
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-5);
    }
    const HyperCube again = normalize_cube(r);
    double max_diff = 0;
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      max_diff = std::max(max_diff, std::abs(static_cast<double>(again.data[i]) - r.data[i]));
    }
    CHECK(max_diff <= 1e-12);
    CHECK(again.height == r.height);
    CHECK(again.bands == r.bands);
  }
}

TEST_CASE("patch extraction with mirrored borders") {
  HyperCube c = oracle::small_cube("p", 3, 3, 2, 0, 5);
  SUBCASE("S = 1 is the pixel spectrum") {
    const Patch p = extract_patch(c, 1, 2, 1);
    REQUIRE(p.values.size() == 2);
    CHECK(p.values[0] == c.value(1, 2, 0));
    CHECK(p.values[1] == c.value(1, 2, 1));
  }
  SUBCASE("corner window reflects without repeating the edge") {
    const Patch p = extract_patch(c, 0, 0, 5);
    CHECK(p.value(0, 0, 0) == c.value(2, 2, 0));
    CHECK(p.value(0, 0, 1) == c.value(2, 2, 1));
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t col = 0; col < 5; ++col) {
        const std::size_t sr = reflect_index(static_cast<std::ptrdiff_t>(r) - 2, 3);
        const std::size_t sc = reflect_index(static_cast<std::ptrdiff_t>(col) - 2, 3);
        CHECK(p.value(r, col, 1) == c.value(sr, sc, 1));
      }
    }
  }
  SUBCASE("reflection indices") {
    CHECK(reflect_index(-1, 5) == 1);
    CHECK(reflect_index(-2, 5) == 2);
    CHECK(reflect_index(5, 5) == 3);
    CHECK(reflect_index(6, 5) == 2);
    CHECK(reflect_index(3, 5) == 3);
  }
  SUBCASE("interior window equals the raw slice") {
    const HyperCube big = oracle::small_cube("b", 9, 9, 3, 0, 6);
    const Patch p = extract_patch(big, 4, 5, 5);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t col = 0; col < 5; ++col) {
        for (std::size_t b = 0; b < 3; ++b) CHECK(p.value(r, col, b) == big.value(2 + r, 3 + col, b));
      }
    }
  }
}

TEST_CASE("dihedral transforms") {
  // [[a,b],[c,d]] with a single band.
  const std::vector<float> grid{1, 2, 3, 4};
  CHECK(dihedral_transform(grid, 2, 1, 0) == grid);
  CHECK(dihedral_transform(grid, 2, 1, 4) == std::vector<float>{2, 1, 4, 3});

  const std::size_t side = 4, bands = 2;
  std::vector<float> patch(side * side * bands);
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<float>(i * i % 37) + 0.25f * i;
  std::vector<std::vector<float>> images;
  for (int k = 0; k < 8; ++k) images.push_back(dihedral_transform(patch, side, bands, k));
  for (int a = 0; a < 8; ++a) {
    for (int b = a + 1; b < 8; ++b) CHECK(images[a] != images[b]);
  }
  auto index_of = [&](const std::vector<float>& v) {
    for (int k = 0; k < 8; ++k) {
      if (images[k] == v) return k;
    }
    return -1;
  };
  for (int a = 0; a < 8; ++a) {
    bool has_inverse = false;
    for (int b = 0; b < 8; ++b) {
      const auto composed = dihedral_transform(images[a], side, bands, b);
      const int k = index_of(composed);
      CHECK(k >= 0);
      has_inverse = has_inverse || k == 0;
    }
    CHECK(has_inverse);
  }
  // The spectral axis is untouched: every output pixel is some input pixel's full spectrum.
  const auto rotated = dihedral_transform(patch, side, bands, 1);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const auto src = dihedral_source(1, r, c, side);
      for (std::size_t b = 0; b < bands; ++b) {
        CHECK(rotated[(r * side + c) * bands + b] == patch[(src[0] * side + src[1]) * bands + b]);
      }
    }
  }
}

TEST_CASE("make_split") {
  HyperCube c = oracle::small_cube("s", 10, 10, 1, 3, 2);
  for (std::size_t i = 0; i < c.labels.size(); i += 4) c.labels[i] = 0;
  const std::size_t labeled = c.labeled_count();

  for (std::size_t run = 0; run < 5; ++run) {
    const Split s = make_split(c, {99, 20, run, false});
    CHECK(s.train.size() == 20);
    CHECK(s.train.size() + s.test.size() == labeled);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == labeled);
    for (std::size_t idx : all) CHECK(c.labels[idx] != 0);
    CHECK(std::is_sorted(s.train.begin(), s.train.end()));
    const Split again = make_split(c, {99, 20, run, false});
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
  }
  CHECK(make_split(c, {99, 20, 0, false}).train != make_split(c, {99, 20, 1, false}).train);

  CHECK_THROWS_AS(make_split(c, {1, labeled, 0, false}), Error);
  const Split full = make_split(c, {1, labeled, 0, true});
  CHECK(full.test.empty());
  CHECK(full.train.size() == labeled);
}

TEST_CASE("synthetic domains") {
  SUBCASE("single class without noise is one spectrum") {
    SynthConfig cfg;
    cfg.num_domains = 1;
    cfg.bands = {6};
    cfg.classes = {1};
    cfg.size = 8;
    cfg.noise = 0;
    const auto cubes = synth_domains(cfg);
    REQUIRE(cubes.size() == 1);
    const HyperCube& c = cubes[0];
    for (std::size_t p = 1; p < c.pixel_count(); ++p) {
      for (std::size_t b = 0; b < c.bands; ++b) CHECK(c.data[p * c.bands + b] == c.data[b]);
    }
  }
  SUBCASE("band counts follow the config") {
    SynthConfig cfg;
    cfg.num_domains = 2;
    cfg.bands = {50, 60};
    cfg.classes = {3, 3};
    cfg.size = 16;
    const auto cubes = synth_domains(cfg);
    CHECK(cubes[0].bands == 50);
    CHECK(cubes[1].bands == 60);
    CHECK(cubes[0].domain_id != cubes[1].domain_id);
  }
  SUBCASE("nearest centroid recovers every noiseless label") {
    SynthConfig cfg;
    cfg.num_domains = 3;
    cfg.bands = {40, 40, 30};
    cfg.classes = {4, 5, 4};
    cfg.size = 32;
    cfg.noise = 0;
    cfg.seed = 5;
    const auto cubes = synth_domains(cfg);
    for (std::size_t d = 0; d < cubes.size(); ++d) {
      const auto sig = synth_signatures(cfg, d);
      const HyperCube& c = cubes[d];
      std::size_t correct = 0;
      for (std::size_t p = 0; p < c.pixel_count(); ++p) {
        std::size_t best = 0;
        double best_dist = 1e300;
        for (std::size_t k = 0; k < sig.size(); ++k) {
          double dist = 0;
          for (std::size_t b = 0; b < c.bands; ++b) dist += std::pow(c.data[p * c.bands + b] - sig[k][b], 2);
          if (dist < best_dist) {
            best_dist = dist;
            best = k;
          }
        }
        correct += best + 1 == c.labels[p] ? 1 : 0;
      }
      CHECK(correct == c.pixel_count());
    }
  }
  SUBCASE("same seed gives identical cubes") {
    SynthConfig cfg;
    cfg.num_domains = 2;
    cfg.bands = {10, 12};
    cfg.classes = {2, 3};
    cfg.size = 16;
    cfg.seed = 77;
    const auto a = synth_domains(cfg);
    const auto b = synth_domains(cfg);
    CHECK(encode_cube(a[1]) == encode_cube(b[1]));
  }
}
