#pragma once

// Parameter checkpoints: "HCP1", u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, rank x u32 dims, float32 payload.
// Little-endian. Names follow <component>/<layer>/<weight|bias> with
// components enc.<domain>, trunk and head.<domain>; the architecture and
// domain list are recovered from the names and shapes on load.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hypercd/cdnet.hpp"

namespace hypercd {

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const CdcnnParams<T>& params);

template <class T>
CdcnnParams<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

template <class T>
void save_checkpoint(const CdcnnParams<T>& params, const std::filesystem::path& path);

template <class T>
CdcnnParams<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace hypercd
