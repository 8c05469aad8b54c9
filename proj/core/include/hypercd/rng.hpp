#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hypercd {

using Rng = std::mt19937_64;

// All randomness in the toolkit derives from one 64-bit master seed. A stream
// is identified by (master, purpose tag, index); the tag hash and index are
// folded through SplitMix64 so neighbouring indices give unrelated streams.
//
//   downstream init     derive_seed(master, "init", run)
//   train/test split    derive_seed(master, "split", run)
//   pretraining stage   s = derive_seed(master, "pretrain_stage")
//     initial params    derive_seed(s, "init")
//     regions           derive_seed(derive_seed(s, "pretrain"), "regions", iter)
//     supervised batch  derive_seed(derive_seed(s, "batches"), "batch", iter)
//   synthetic domains   derive_seed(master, "synth.signature", domain) for the
//                       class signatures, derive_seed(master, "synth", domain)
//                       for layout and noise
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(master, tag, index));
}

// Uniform integer in [0, n) that does not depend on the standard library's
// distribution implementation.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Standard normal via Box-Muller on two uniform draws; portable across
// standard library implementations.
double standard_normal(Rng& rng);

}  // namespace hypercd
