#pragma once

// Hyperspectral domains: container I/O, per-band standardization, patch
// extraction with mirrored borders, dihedral augmentation, train/test
// splitting and synthetic domain generation.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hypercd {

// One hyperspectral image. Values are stored row-major as (row, col, band);
// labels are 0 for unlabeled pixels and 1..num_classes otherwise.
struct HyperCube {
  std::string domain_id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<float> data;
  std::vector<std::uint16_t> labels;  // empty when the cube carries no labels
  std::size_t num_classes = 0;

  bool has_labels() const { return !labels.empty(); }
  std::size_t pixel_count() const { return height * width; }
  std::size_t pixel_index(std::size_t row, std::size_t col) const { return row * width + col; }

  float value(std::size_t row, std::size_t col, std::size_t band) const {
    return data[(row * width + col) * bands + band];
  }
  std::uint16_t label(std::size_t row, std::size_t col) const {
    return labels[row * width + col];
  }

  std::size_t labeled_count() const;

  // Throws Error(kInvalidData) naming the offending pixel if an invariant
  // does not hold.
  void validate() const;
};

// A spatial window of side `side` (odd) centred on one pixel, stored
// (row, col, band).
struct Patch {
  std::string domain_id;
  std::size_t center_row = 0;
  std::size_t center_col = 0;
  std::size_t side = 0;
  std::size_t bands = 0;
  std::vector<float> values;

  float value(std::size_t r, std::size_t c, std::size_t b) const {
    return values[(r * side + c) * bands + b];
  }
};

struct SplitSpec {
  std::uint64_t seed = 0;
  std::size_t train_per_domain = 200;
  std::size_t run_index = 0;
  bool allow_empty_test = false;
};

// Pixel indices (row * width + col) into a cube.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// --- container I/O -------------------------------------------------------

// Binary layout: "HSC1", u32 H, u32 W, u32 B, u32 C, u8 has_labels, then
// H*W*B float32 (row, col, band), then H*W uint16 labels if has_labels.
// Everything little-endian.
void save_cube(const HyperCube& cube, const std::filesystem::path& path);
HyperCube load_cube(const std::filesystem::path& path);

// In-memory variants used by the file functions.
std::vector<std::uint8_t> encode_cube(const HyperCube& cube);
HyperCube decode_cube(const std::vector<std::uint8_t>& bytes, const std::string& domain_id);

// CSV import: a header line, then one pixel per line `row,col,label,v1..vB`.
// Every (row, col) of the implied grid must appear exactly once; C is the
// largest label seen.
HyperCube import_csv(const std::filesystem::path& path, const std::string& domain_id);

// Domain id from a file name: stem without extension.
std::string domain_id_from_path(const std::filesystem::path& path);

// --- preprocessing -------------------------------------------------------

// Per-band z-score using the population standard deviation. Constant bands map
// to zero. Bands that are already standardized to within float precision are
// left untouched, which makes the operation idempotent.
HyperCube normalize_cube(const HyperCube& cube);

// Mirror reflection without edge repetition: -1 -> 1, n -> n-2.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

// S x S x B window centred at (row, col); out-of-image positions are filled
// by mirror reflection.
Patch extract_patch(const HyperCube& cube, std::size_t row, std::size_t col, std::size_t side);

// Arbitrary square window with its top-left corner at (top, left), which may
// be negative; out-of-image positions are mirror-reflected. Layout
// (row, col, band).
std::vector<float> extract_window(const HyperCube& cube, std::ptrdiff_t top, std::ptrdiff_t left,
                                  std::size_t side);

// --- dihedral augmentation ------------------------------------------------

// Element k of the order-8 dihedral group acting on an S x S grid:
//   0 identity, 1 rot90, 2 rot180, 3 rot270,
//   4 mirror across the vertical axis, 5 mirror across the horizontal axis,
//   6 mirror across the main diagonal, 7 mirror across the anti-diagonal.
// Returns the source coordinate that lands at output (r, c).
std::array<std::size_t, 2> dihedral_source(int k, std::size_t r, std::size_t c, std::size_t side);

// Applies transform k to the spatial axes of an S x S x B (row, col, band)
// buffer; the spectral axis is untouched.
std::vector<float> dihedral_transform(const std::vector<float>& values, std::size_t side,
                                      std::size_t bands, int k);

Patch dihedral_augment(const Patch& patch, int k);

// --- splitting -----------------------------------------------------------

// Draws train_per_domain labeled pixels without replacement; the remaining
// labeled pixels form the test set. Both lists are sorted ascending.
Split make_split(const HyperCube& cube, const SplitSpec& spec);

// --- synthetic domains ---------------------------------------------------

struct SynthConfig {
  std::size_t num_domains = 1;
  std::vector<std::size_t> bands;    // one entry per domain
  std::vector<std::size_t> classes;  // one entry per domain
  std::size_t size = 64;             // images are size x size
  std::uint64_t seed = 0;
  double noise = 0.05;   // i.i.d. Gaussian noise std per band
  double margin = 5.0;   // min RMS signature distance, in units of noise
  std::size_t tile = 8;  // side of the single-class tiles
  std::string id_prefix = "synth";
};

// Each domain is a grid of tile x tile single-class regions. Each class owns a
// smooth random spectral signature; every pair of signatures in the whole
// set (within a domain, or across domains with equal band counts) is at
// least margin * noise apart in RMS-per-band distance.
std::vector<HyperCube> synth_domains(const SynthConfig& config);

// Class signatures used by synth_domains for one domain, exposed for tests:
// classes x bands, row-major.
std::vector<std::vector<double>> synth_signatures(const SynthConfig& config, std::size_t domain);

}  // namespace hypercd
