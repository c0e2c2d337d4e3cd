#pragma once

#include <string>
#include <vector>

#include "treeformer/data.hpp"
#include "treeformer/train/config.hpp"

namespace treeformer::cli {

// Full command-line surface: prepare-data | synth | train | evaluate |
// predict | ablate. Returns 0 on success, 1 on usage errors, 2 on runtime
// errors.
int run(int argc, const char* const* argv);

// the documented ablation switches, canonical names
std::vector<std::string> ablation_switches();
// maps a switch (canonical name or slug alias) onto a config change; throws
// std::invalid_argument listing valid switches for unknown names
void apply_ablation_switch(train::TrainConfig& cfg, const std::string& name);

// reflect-pads an image on the bottom/right to the next multiple of 32
data::ImageF32 pad_to_multiple(const data::ImageF32& img, int multiple);

}  // namespace treeformer::cli
