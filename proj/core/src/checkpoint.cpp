#include "hypercd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "hypercd/error.hpp"

namespace hypercd {

namespace {

constexpr char kMagic[4] = {'H', 'C', 'P', '1'};

struct Entry {
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

void put_u32(std::vector<std::uint8_t>& out, std::size_t v) {
  require(v <= 0xFFFFFFFFu, ErrorKind::kInvalidData, "checkpoint field exceeds u32 range");
  const auto u = static_cast<std::uint32_t>(v);
  const auto* p = reinterpret_cast<const std::uint8_t*>(&u);
  out.insert(out.end(), p, p + 4);
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::kFormat, std::string("checkpoint truncated reading ") + what + " at byte offset " +
                                   std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::string domain_of(const std::string& name, const std::string& prefix) {
  return name.substr(prefix.size(), name.find('/') - prefix.size());
}

}  // namespace

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const CdcnnParams<T>& params) {
  const auto tensors = params.named_tensors();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, tensors.size());
  for (const auto& [name, p] : tensors) {
    put_u32(out, name.size());
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, p->shape.size());
    for (auto d : p->shape) put_u32(out, d);
    for (T v : p->value) {
      const auto f = static_cast<float>(v);
      const auto* b = reinterpret_cast<const std::uint8_t*>(&f);
      out.insert(out.end(), b, b + 4);
    }
  }
  return out;
}

template <class T>
CdcnnParams<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::kFormat,
          "bad checkpoint magic at byte offset 0 (expected HCP1)");
  Reader in(bytes);
  in.u32("magic");
  const std::uint32_t count = in.u32("tensor count");
  std::map<std::string, Entry> entries;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t len = in.u32("name length");
    std::string name(len, '\0');
    in.raw(name.data(), len, "name");
    Entry e;
    const std::uint32_t rank = in.u32("rank");
    require(rank >= 1 && rank <= 4, ErrorKind::kFormat, "tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.shape.push_back(in.u32("dims"));
      n *= e.shape.back();
    }
    e.data.resize(n);
    in.raw(e.data.data(), n * 4, "payload");
    require(entries.emplace(name, std::move(e)).second, ErrorKind::kFormat, "duplicate tensor '" + name + "'");
  }
  require(in.done(), ErrorKind::kFormat,
          "trailing bytes after the last tensor at byte offset " + std::to_string(in.pos()));

  // Recover the architecture and domains from names and shapes.
  ArchConfig arch;
  arch.n_res_modules = 0;
  arch.residual_only = entries.count("trunk/c3/weight") == 0;
  std::map<std::string, DomainSpec> domains;
  bool have_channels = false;
  for (const auto& [name, e] : entries) {
    if (name.rfind("trunk/res", 0) == 0 && name.size() > 9 && name.ends_with("a/weight")) ++arch.n_res_modules;
    if (name.rfind("enc.", 0) == 0 && name.ends_with("/weight")) {
      require(e.shape.size() == 4, ErrorKind::kFormat, "encoder tensor '" + name + "' must be rank 4");
      auto& d = domains[domain_of(name, "enc.")];
      d.id = domain_of(name, "enc.");
      d.bands = e.shape[1];
      if (name.find("/c1_") != std::string::npos) {
        arch.multiscale_encoder = true;
      } else {
        arch.encoder_kernel = e.shape[2];
        arch.encoder_pad = (e.shape[2] - 1) / 2;
      }
      arch.channels = e.shape[0];
      have_channels = true;
    }
  }
  if (!have_channels) {
    auto it = entries.find("trunk/res0a/weight");
    require(it != entries.end(), ErrorKind::kFormat, "checkpoint holds neither encoders nor residual modules");
    arch.channels = it->second.shape[0];
  }
  for (const auto& [name, e] : entries) {
    if (name.rfind("head.", 0) == 0 && name.ends_with("/weight")) {
      const std::string id = domain_of(name, "head.");
      require(domains.count(id) == 1, ErrorKind::kFormat, "head for '" + id + "' has no matching encoder");
      domains[id].classes = e.shape[0];
    }
  }
  require(arch.has_c2() == (entries.count("trunk/c2/weight") == 1), ErrorKind::kFormat,
          "checkpoint trunk layout is inconsistent (C2 presence)");

  std::vector<DomainSpec> specs;
  for (const auto& [id, d] : domains) specs.push_back(d);
  CdcnnParams<T> params = init_params<T>(arch, specs, 0, 0.0);
  std::set<std::string> used;
  for (auto& [name, p] : params.named_tensors()) {
    auto it = entries.find(name);
    require(it != entries.end(), ErrorKind::kFormat, "checkpoint is missing tensor '" + name + "'");
    require(it->second.shape == p->shape, ErrorKind::kShapeMismatch, "tensor '" + name + "' has an unexpected shape");
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<T>(it->second.data[i]);
    used.insert(name);
  }
  for (const auto& [name, e] : entries) {
    require(used.count(name) == 1, ErrorKind::kFormat, "unrecognized tensor '" + name + "' in checkpoint");
  }
  return params;
}

template <class T>
void save_checkpoint(const CdcnnParams<T>& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed for " + path.string());
}

template <class T>
CdcnnParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo,
          "cannot open checkpoint " + path.string() + " (run `hypercd pretrain` or `hypercd train` first)");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint<T>(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

template std::vector<std::uint8_t> encode_checkpoint<float>(const CdcnnParams<float>&);
template std::vector<std::uint8_t> encode_checkpoint<double>(const CdcnnParams<double>&);
template CdcnnParams<float> decode_checkpoint<float>(const std::vector<std::uint8_t>&);
template CdcnnParams<double> decode_checkpoint<double>(const std::vector<std::uint8_t>&);
template void save_checkpoint<float>(const CdcnnParams<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const CdcnnParams<double>&, const std::filesystem::path&);
template CdcnnParams<float> load_checkpoint<float>(const std::filesystem::path&);
template CdcnnParams<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace hypercd
