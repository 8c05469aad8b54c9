#include <algorithm>
#include <cmath>
#include <numeric>

#include "hypercd/error.hpp"
#include "hypercd/hsdata.hpp"
#include "hypercd/rng.hpp"

namespace hypercd {

namespace {

constexpr int kBumps = 4;
constexpr int kMaxTries = 10000;

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0); }

std::vector<double> smooth_signature(Rng& rng, std::size_t bands) {
  const double offset = 0.5 * standard_normal(rng);
  double amp[kBumps], center[kBumps], width[kBumps];
  for (int j = 0; j < kBumps; ++j) {
    amp[j] = standard_normal(rng);
    center[j] = uniform01(rng);
    width[j] = 0.05 + 0.2 * uniform01(rng);
  }
  std::vector<double> s(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    const double x = bands > 1 ? static_cast<double>(b) / static_cast<double>(bands - 1) : 0.0;
    double v = offset;
    for (int j = 0; j < kBumps; ++j) {
      const double d = (x - center[j]) / width[j];
      v += amp[j] * std::exp(-0.5 * d * d);
    }
    s[b] = v;
  }
  return s;
}

double rms_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc / static_cast<double>(a.size()));
}

void check_config(const SynthConfig& config) {
  require(config.num_domains > 0, ErrorKind::kUsage, "synth: need at least one domain");
  require(config.bands.size() == config.num_domains, ErrorKind::kUsage,
          "synth: bands list has " + std::to_string(config.bands.size()) + " entries for " +
              std::to_string(config.num_domains) + " domains");
  require(config.classes.size() == config.num_domains, ErrorKind::kUsage,
          "synth: classes list has " + std::to_string(config.classes.size()) + " entries for " +
              std::to_string(config.num_domains) + " domains");
  require(config.size > 0 && config.tile > 0, ErrorKind::kUsage, "synth: size and tile must be positive");
  require(config.noise >= 0.0 && config.margin >= 0.0, ErrorKind::kUsage,
          "synth: noise and margin must be non-negative");
  const std::size_t tiles_per_side = (config.size + config.tile - 1) / config.tile;
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    require(config.bands[d] > 0, ErrorKind::kUsage, "synth: band count must be positive");
    require(config.classes[d] > 0 && config.classes[d] <= 0xFFFF, ErrorKind::kUsage,
            "synth: class count must be in [1, 65535]");
    require(tiles_per_side * tiles_per_side >= config.classes[d], ErrorKind::kUsage,
            "synth: " + std::to_string(config.classes[d]) + " classes do not fit in " +
                std::to_string(tiles_per_side * tiles_per_side) + " tiles");
  }
}

// Signatures for every domain; later domains are rejected against all
// earlier signatures with the same band count.
std::vector<std::vector<std::vector<double>>> all_signatures(const SynthConfig& config) {
  const double min_dist = config.margin * config.noise;
  std::vector<std::vector<std::vector<double>>> sigs(config.num_domains);
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    Rng rng = make_rng(config.seed, "synth.signature", d);
    for (std::size_t k = 0; k < config.classes[d]; ++k) {
      bool accepted = false;
      for (int attempt = 0; attempt < kMaxTries && !accepted; ++attempt) {
        auto candidate = smooth_signature(rng, config.bands[d]);
        accepted = true;
        for (std::size_t e = 0; e <= d && accepted; ++e) {
          if (config.bands[e] != config.bands[d]) continue;
          for (const auto& other : sigs[e]) {
            if (rms_distance(candidate, other) < min_dist) {
              accepted = false;
              break;
            }
          }
        }
        if (accepted) sigs[d].push_back(std::move(candidate));
      }
      require(accepted, ErrorKind::kUsage,
              "synth: cannot place " + std::to_string(config.classes[d]) +
                  " signatures at margin " + std::to_string(config.margin) + " x noise " +
                  std::to_string(config.noise));
    }
  }
  return sigs;
}

}  // namespace

std::vector<std::vector<double>> synth_signatures(const SynthConfig& config, std::size_t domain) {
  check_config(config);
  require(domain < config.num_domains, ErrorKind::kUsage, "synth: domain index out of range");
  return all_signatures(config)[domain];
}

std::vector<HyperCube> synth_domains(const SynthConfig& config) {
  check_config(config);
  const auto sigs = all_signatures(config);
  const std::size_t n = config.size;
  const std::size_t tiles_per_side = (n + config.tile - 1) / config.tile;
  const std::size_t tile_count = tiles_per_side * tiles_per_side;

  std::vector<HyperCube> cubes;
  cubes.reserve(config.num_domains);
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    Rng rng = make_rng(config.seed, "synth", d);
    const std::size_t classes = config.classes[d];
    const std::size_t bands = config.bands[d];

    // Every class owns at least one tile; the rest are drawn uniformly.
    std::vector<std::size_t> order(tile_count);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = tile_count; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    std::vector<std::size_t> tile_class(tile_count);
    for (std::size_t i = 0; i < tile_count; ++i) {
      tile_class[order[i]] = i < classes ? i : uniform_index(rng, classes);
    }

    HyperCube cube;
    cube.domain_id = config.id_prefix + std::to_string(d);
    cube.height = n;
    cube.width = n;
    cube.bands = bands;
    cube.num_classes = classes;
    cube.data.resize(n * n * bands);
    cube.labels.resize(n * n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t k = tile_class[(r / config.tile) * tiles_per_side + c / config.tile];
        const std::size_t idx = cube.pixel_index(r, c);
        cube.labels[idx] = static_cast<std::uint16_t>(k + 1);
        for (std::size_t b = 0; b < bands; ++b) {
          const double noise = config.noise > 0.0 ? config.noise * standard_normal(rng) : 0.0;
          cube.data[idx * bands + b] = static_cast<float>(sigs[d][k][b] + noise);
        }
      }
    }
    cubes.push_back(std::move(cube));
  }
  return cubes;
}

}  // namespace hypercd
