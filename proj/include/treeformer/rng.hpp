#pragma once

#include <cstdint>
#include <random>

namespace treeformer {

// splitmix64; used to derive independent seeds for sub-streams so that e.g.
// augmentation draws never alias perturbation draws.
inline uint64_t mix_seed(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream));
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(mix_seed(seed)); }

}  // namespace treeformer
