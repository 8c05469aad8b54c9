#include "manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>

#include "hypercd/error.hpp"
#include "hypercd/version.hpp"

namespace hypercd::cli {

std::string sha256_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string() + " for checksumming");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  require(ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) == 1, ErrorKind::kIo, "sha256 init failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[md[i] >> 4]);
    hex.push_back(kHex[md[i] & 15]);
  }
  return hex;
}

nlohmann::json RunManifest::to_json(const std::filesystem::path& out_dir) const {
  nlohmann::json j;
  j["tool"] = "hypercd";
  j["version"] = kVersion;
  j["command_line"] = command_line;
  j["subcommand"] = subcommand;
  j["config"] = config;
  j["config_snapshot"] = config_snapshot;
  j["seeds"] = seeds;
  nlohmann::json in = nlohmann::json::array();
  for (const auto& p : inputs) in.push_back({{"path", p.string()}, {"sha256", sha256_hex(p)}});
  j["inputs"] = in;
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : artifacts) out.push_back({{"path", a}, {"sha256", sha256_hex(out_dir / a)}});
  j["artifacts"] = out;
  j["timings_seconds"] = timings;
  return j;
}

std::filesystem::path write_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir) {
  const auto path = out_dir / "manifest.json";
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot write " + path.string());
  f << manifest.to_json(out_dir).dump(2) << "\n";
  require(static_cast<bool>(f), ErrorKind::kIo, "write failed for " + path.string());
  return path;
}

}  // namespace hypercd::cli
