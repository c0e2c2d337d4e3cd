#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "treeformer/data.hpp"

namespace treeformer::synth {

struct SynthOptions {
  std::filesystem::path out_dir;
  int n = 8;
  int size = 256;
  int density_lo = 5;
  int density_hi = 40;
  uint64_t seed = 0;
  double clutter = 1.0;  // 0 disables background distractors
};

// Gaussian-shaded tree discs with jittered radius/color over varied textured
// backgrounds; exact centers recorded as annotations. Writes images/, ann/
// and manifest.csv under out_dir and returns the image ids.
std::vector<std::string> generate_dataset(const SynthOptions& opts);

// single scene in memory (used by generate_dataset and tests)
data::AnnotatedImage generate_scene(int size, int density_lo, int density_hi, double clutter,
                                    uint64_t seed, const std::string& id);

}  // namespace treeformer::synth
