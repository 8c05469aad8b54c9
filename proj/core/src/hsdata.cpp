#include "hypercd/hsdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hypercd/error.hpp"
#include "hypercd/rng.hpp"

namespace hypercd {

static_assert(std::endian::native == std::endian::little,
              "cube and checkpoint I/O assume a little-endian host");

namespace {

constexpr char kCubeMagic[4] = {'H', 'S', 'C', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 * 4 + 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + offset, 4);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  require(v <= 0xFFFFFFFFu, ErrorKind::kInvalidData, std::string(what) + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

std::string pixel_name(std::size_t index, std::size_t width) {
  std::ostringstream os;
  os << "pixel " << index << " (row " << index / width << ", col " << index % width << ")";
  return os.str();
}

}  // namespace

std::size_t HyperCube::labeled_count() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](std::uint16_t l) { return l != 0; }));
}

void HyperCube::validate() const {
  require(height > 0 && width > 0 && bands > 0, ErrorKind::kInvalidData,
          "cube '" + domain_id + "' has a zero dimension");
  require(data.size() == height * width * bands, ErrorKind::kInvalidData,
          "cube '" + domain_id + "' data length does not match H*W*B");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      fail(ErrorKind::kInvalidData, "non-finite value at " + pixel_name(i / bands, width) +
                                        ", band " + std::to_string(i % bands));
    }
  }
  if (!labels.empty()) {
    require(labels.size() == height * width, ErrorKind::kInvalidData,
            "cube '" + domain_id + "' label length does not match H*W");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] > num_classes) {
        fail(ErrorKind::kInvalidData, "label " + std::to_string(labels[i]) + " at " +
                                          pixel_name(i, width) + " exceeds class count " +
                                          std::to_string(num_classes));
      }
    }
  }
}

std::vector<std::uint8_t> encode_cube(const HyperCube& cube) {
  cube.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + cube.data.size() * 4 + cube.labels.size() * 2);
  out.insert(out.end(), kCubeMagic, kCubeMagic + 4);
  put_u32(out, checked_u32(cube.height, "height"));
  put_u32(out, checked_u32(cube.width, "width"));
  put_u32(out, checked_u32(cube.bands, "bands"));
  put_u32(out, checked_u32(cube.num_classes, "class count"));
  out.push_back(cube.has_labels() ? 1 : 0);
  const auto* values = reinterpret_cast<const std::uint8_t*>(cube.data.data());
  out.insert(out.end(), values, values + cube.data.size() * sizeof(float));
  const auto* labels = reinterpret_cast<const std::uint8_t*>(cube.labels.data());
  out.insert(out.end(), labels, labels + cube.labels.size() * sizeof(std::uint16_t));
  return out;
}

HyperCube decode_cube(const std::vector<std::uint8_t>& bytes, const std::string& domain_id) {
  require(bytes.size() >= kHeaderBytes, ErrorKind::kFormat,
          "truncated header: " + std::to_string(bytes.size()) + " bytes, need " +
              std::to_string(kHeaderBytes));
  require(std::memcmp(bytes.data(), kCubeMagic, 4) == 0, ErrorKind::kFormat,
          "bad magic at byte offset 0 (expected HSC1)");
  HyperCube cube;
  cube.domain_id = domain_id;
  cube.height = get_u32(bytes, 4);
  cube.width = get_u32(bytes, 8);
  cube.bands = get_u32(bytes, 12);
  cube.num_classes = get_u32(bytes, 16);
  const std::uint8_t has_labels = bytes[20];
  require(has_labels <= 1, ErrorKind::kFormat,
          "has_labels flag at byte offset 20 must be 0 or 1, got " + std::to_string(has_labels));
  require(cube.height > 0 && cube.width > 0 && cube.bands > 0, ErrorKind::kFormat,
          "header at byte offset 4 declares a zero dimension");

  const std::size_t values = cube.height * cube.width * cube.bands;
  const std::size_t expected =
      kHeaderBytes + values * 4 + (has_labels ? cube.height * cube.width * 2 : 0);
  if (bytes.size() != expected) {
    fail(ErrorKind::kFormat, "payload size mismatch: header declares " +
                                 std::to_string(cube.height) + "x" + std::to_string(cube.width) +
                                 "x" + std::to_string(cube.bands) + " (" +
                                 std::to_string(expected) + " bytes total), file has " +
                                 std::to_string(bytes.size()) + " bytes");
  }
  cube.data.resize(values);
  std::memcpy(cube.data.data(), bytes.data() + kHeaderBytes, values * 4);
  if (has_labels) {
    cube.labels.resize(cube.height * cube.width);
    std::memcpy(cube.labels.data(), bytes.data() + kHeaderBytes + values * 4,
                cube.labels.size() * 2);
  }
  for (std::size_t i = 0; i < values; ++i) {
    if (!std::isfinite(cube.data[i])) {
      fail(ErrorKind::kInvalidData, "non-finite value at byte offset " +
                                        std::to_string(kHeaderBytes + i * 4) + " (" +
                                        pixel_name(i / cube.bands, cube.width) + ")");
    }
  }
  cube.validate();
  return cube;
}

void save_cube(const HyperCube& cube, const std::filesystem::path& path) {
  const auto bytes = encode_cube(cube);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed for " + path.string());
}

std::string domain_id_from_path(const std::filesystem::path& path) {
  return path.stem().string();
}

HyperCube load_cube(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open cube file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_cube(bytes, domain_id_from_path(path));
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

HyperCube import_csv(const std::filesystem::path& path, const std::string& domain_id) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open CSV file " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kFormat,
          path.string() + ": missing header line");

  struct Row {
    std::size_t r, c;
    long label;
    std::vector<float> values;
  };
  std::vector<Row> rows;
  std::size_t bands = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    require(fields.size() >= 4, ErrorKind::kFormat, where + ": need row,col,label and >=1 value");
    Row row{};
    try {
      row.r = std::stoul(fields[0]);
      row.c = std::stoul(fields[1]);
      row.label = std::stol(fields[2]);
      for (std::size_t i = 3; i < fields.size(); ++i) row.values.push_back(std::stof(fields[i]));
    } catch (const std::exception&) {
      fail(ErrorKind::kFormat, where + ": unparsable field");
    }
    if (bands == 0) bands = row.values.size();
    require(row.values.size() == bands, ErrorKind::kFormat,
            where + ": expected " + std::to_string(bands) + " band values");
    require(row.label >= 0 && row.label <= 0xFFFF, ErrorKind::kInvalidData,
            where + ": label out of range");
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), ErrorKind::kFormat, path.string() + ": no pixel rows");

  HyperCube cube;
  cube.domain_id = domain_id;
  for (const auto& row : rows) {
    cube.height = std::max(cube.height, row.r + 1);
    cube.width = std::max(cube.width, row.c + 1);
  }
  cube.bands = bands;
  require(rows.size() == cube.height * cube.width, ErrorKind::kFormat,
          path.string() + ": " + std::to_string(rows.size()) + " pixel rows for an implied " +
              std::to_string(cube.height) + "x" + std::to_string(cube.width) + " grid");
  cube.data.assign(cube.height * cube.width * bands, 0.0f);
  cube.labels.assign(cube.height * cube.width, 0);
  std::vector<bool> seen(cube.height * cube.width, false);
  bool any_label = false;
  for (const auto& row : rows) {
    const std::size_t idx = cube.pixel_index(row.r, row.c);
    require(!seen[idx], ErrorKind::kFormat, path.string() + ": duplicate " + pixel_name(idx, cube.width));
    seen[idx] = true;
    std::copy(row.values.begin(), row.values.end(), cube.data.begin() + idx * bands);
    cube.labels[idx] = static_cast<std::uint16_t>(row.label);
    cube.num_classes = std::max<std::size_t>(cube.num_classes, static_cast<std::size_t>(row.label));
    any_label = any_label || row.label > 0;
  }
  if (!any_label) cube.labels.clear();
  cube.validate();
  return cube;
}

HyperCube normalize_cube(const HyperCube& cube) {
  HyperCube out = cube;
  const std::size_t pixels = cube.pixel_count();
  const std::size_t bands = cube.bands;
  for (std::size_t b = 0; b < bands; ++b) {
    double mean = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) mean += cube.data[p * bands + b];
    mean /= static_cast<double>(pixels);
    double var = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) {
      const double d = cube.data[p * bands + b] - mean;
      var += d * d;
    }
    var /= static_cast<double>(pixels);
    const double sd = std::sqrt(var);

    // Already standardized at float precision.
    if (std::abs(mean) < 1e-5 && std::abs(sd - 1.0) < 1e-5) continue;

    for (std::size_t p = 0; p < pixels; ++p) {
      float& v = out.data[p * bands + b];
      v = sd > 0.0 ? static_cast<float>((cube.data[p * bands + b] - mean) / sd) : 0.0f;
    }
  }
  return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

std::vector<float> extract_window(const HyperCube& cube, std::ptrdiff_t top, std::ptrdiff_t left,
                                  std::size_t side) {
  const std::size_t bands = cube.bands;
  std::vector<float> out(side * side * bands);
  for (std::size_t r = 0; r < side; ++r) {
    const std::size_t sr = reflect_index(top + static_cast<std::ptrdiff_t>(r), cube.height);
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t sc = reflect_index(left + static_cast<std::ptrdiff_t>(c), cube.width);
      const float* src = cube.data.data() + (sr * cube.width + sc) * bands;
      std::copy(src, src + bands, out.data() + (r * side + c) * bands);
    }
  }
  return out;
}

Patch extract_patch(const HyperCube& cube, std::size_t row, std::size_t col, std::size_t side) {
  require(side % 2 == 1, ErrorKind::kUsage,
          "patch side must be odd, got " + std::to_string(side));
  require(row < cube.height && col < cube.width, ErrorKind::kUsage,
          "patch center (" + std::to_string(row) + "," + std::to_string(col) +
              ") outside a " + std::to_string(cube.height) + "x" + std::to_string(cube.width) +
              " image");
  const auto half = static_cast<std::ptrdiff_t>(side / 2);
  Patch patch;
  patch.domain_id = cube.domain_id;
  patch.center_row = row;
  patch.center_col = col;
  patch.side = side;
  patch.bands = cube.bands;
  patch.values = extract_window(cube, static_cast<std::ptrdiff_t>(row) - half,
                                static_cast<std::ptrdiff_t>(col) - half, side);
  return patch;
}

std::array<std::size_t, 2> dihedral_source(int k, std::size_t r, std::size_t c, std::size_t side) {
  const std::size_t last = side - 1;
  switch (k) {
    case 0: return {r, c};
    case 1: return {last - c, r};         // rot90 clockwise
    case 2: return {last - r, last - c};  // rot180
    case 3: return {c, last - r};         // rot270 clockwise
    case 4: return {r, last - c};         // mirror across vertical axis
    case 5: return {last - r, c};         // mirror across horizontal axis
    case 6: return {c, r};                // main diagonal
    case 7: return {last - c, last - r};  // anti-diagonal
    default:
      fail(ErrorKind::kUsage, "dihedral index must be in [0,7], got " + std::to_string(k));
  }
}

std::vector<float> dihedral_transform(const std::vector<float>& values, std::size_t side,
                                      std::size_t bands, int k) {
  require(k >= 0 && k < 8, ErrorKind::kUsage,
          "dihedral index must be in [0,7], got " + std::to_string(k));
  require(values.size() == side * side * bands, ErrorKind::kShapeMismatch,
          "dihedral_transform: buffer size does not match side*side*bands");
  if (k == 0) return values;
  std::vector<float> out(values.size());
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const auto [sr, sc] = dihedral_source(k, r, c, side);
      const float* src = values.data() + (sr * side + sc) * bands;
      std::copy(src, src + bands, out.data() + (r * side + c) * bands);
    }
  }
  return out;
}

Patch dihedral_augment(const Patch& patch, int k) {
  Patch out = patch;
  out.values = dihedral_transform(patch.values, patch.side, patch.bands, k);
  return out;
}

Split make_split(const HyperCube& cube, const SplitSpec& spec) {
  require(cube.has_labels(), ErrorKind::kInvalidData,
          "cube '" + cube.domain_id + "' has no labels to split");
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < cube.labels.size(); ++i) {
    if (cube.labels[i] != 0) labeled.push_back(i);
  }
  require(spec.train_per_domain > 0, ErrorKind::kUsage, "train_per_domain must be positive");
  if (labeled.size() < spec.train_per_domain) {
    fail(ErrorKind::kInvalidData, "cube '" + cube.domain_id + "' has " +
                                      std::to_string(labeled.size()) +
                                      " labeled pixels, fewer than the requested " +
                                      std::to_string(spec.train_per_domain));
  }
  if (labeled.size() == spec.train_per_domain && !spec.allow_empty_test) {
    fail(ErrorKind::kInvalidData, "split of cube '" + cube.domain_id +
                                      "' would leave an empty test set");
  }
  Rng rng = make_rng(spec.seed, "split", spec.run_index);
  // Partial Fisher-Yates: the first train_per_domain slots become the sample.
  for (std::size_t i = 0; i < spec.train_per_domain; ++i) {
    const std::size_t j = i + uniform_index(rng, labeled.size() - i);
    std::swap(labeled[i], labeled[j]);
  }
  Split split;
  split.train.assign(labeled.begin(), labeled.begin() + static_cast<std::ptrdiff_t>(spec.train_per_domain));
  split.test.assign(labeled.begin() + static_cast<std::ptrdiff_t>(spec.train_per_domain), labeled.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace hypercd
