#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "treeformer/model/network.hpp"
#include "treeformer/nn/layers.hpp"

namespace treeformer::model {

// Checkpoint: JSON header (model config, parameter index, metadata) followed
// by all parameter payloads as little-endian float32. Optimizer moments ride
// along when present so training can resume.
struct CheckpointMeta {
  int epoch = 0;
  double best_val_mae = -1.0;
  std::map<std::string, std::string> train_config;  // flat key=value snapshot
};

void save_checkpoint(const std::filesystem::path& path, const TreeFormer& net,
                     const CheckpointMeta& meta, nn::Adam* optimizer = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<TreeFormer> net;
  CheckpointMeta meta;
  bool has_optimizer = false;
  std::vector<std::vector<float>> adam_m, adam_v;
  int64_t adam_step = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace treeformer::model
