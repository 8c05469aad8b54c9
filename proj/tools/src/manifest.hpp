#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hypercd::cli {

std::string sha256_hex(const std::filesystem::path& path);

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Everything needed to re-run a command: the command line, the effective
// option set (flags, config file and defaults merged), seeds, checksums of
// inputs and outputs, and timings.
struct RunManifest {
  std::vector<std::string> command_line;
  std::string subcommand;
  std::string config_snapshot;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::string> artifacts;  // relative to the output directory
  nlohmann::json timings = nlohmann::json::object();

  nlohmann::json to_json(const std::filesystem::path& out_dir) const;
};

// Writes manifest.json into out_dir and returns its path.
std::filesystem::path write_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir);

}  // namespace hypercd::cli
