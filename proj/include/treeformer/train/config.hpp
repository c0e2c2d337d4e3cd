#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>

#include "treeformer/model/config.hpp"

namespace treeformer::train {

struct TrainConfig {
  int epochs = 500;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int crop = 256;
  double lambda = 1.0;       // unlabeled loss weight
  int m_levels = 4;          // crop pyramid depth
  double sigma = 4.0;        // GT Gaussian width in image pixels
  std::string perturb_order = "P1,P2,P3";
  std::string caff_variant = "ca";
  std::string tau_schedule = "1,2,3";  // or a single value for a uniform schedule
  uint64_t seed = 0;
  double labeled_fraction = 1.0;
  std::string model_preset = "desk";  // desk | paper

  int max_steps = 0;          // >0 overrides the epoch count
  int unlabeled_batch = 0;    // 0 -> batch_size
  double val_fraction = 0.1;  // labeled images held out for validation
  int eval_every = 0;         // steps between validations; 0 -> end of run only
  int log_every = 1;

  double ot_reg = 10.0;
  int ot_iters = 100;
  double ot_tol = 1e-7;

  bool detach_targets = true;
  bool js_consistency = false;
  bool use_consistency = true;
  bool use_ranking = true;
  bool use_global = true;
  std::string pixel_loss = "dm";  // dm | l2
  bool single_scale_consistency = false;  // "w/ STC"
  bool ranking_finest_only = false;       // "w/ STR"

  bool flip_augment = true;
  bool perturb_labeled = true;
  double clip_norm = 0.0;  // 0 disables the divergence-guard clip

  model::ModelConfig model_config() const;
  std::map<std::string, std::string> to_map() const;
  void apply(const std::map<std::string, std::string>& kv);  // unknown key -> error

  static TrainConfig from_file(const std::filesystem::path& path);
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
};

// flat key=value text; '#' comments and blank lines ignored
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
void write_config_file(const std::filesystem::path& path,
                       const std::map<std::string, std::string>& kv);

}  // namespace treeformer::train
