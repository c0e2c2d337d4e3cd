#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "treeformer/data.hpp"
#include "treeformer/losses.hpp"
#include "treeformer/metrics.hpp"
#include "treeformer/model/checkpoint.hpp"
#include "treeformer/train/config.hpp"

namespace treeformer::train {

struct FitResult {
  std::filesystem::path checkpoint_path;
  metrics::MetricsReport final_eval;  // of the best checkpoint on the validation set
  double best_val_mae = -1.0;
  int steps_run = 0;
};

// Semi-supervised training loop: labeled and unlabeled batches forward
// through the same parameters, supervised DM + count losses on one branch,
// consistency/ranking/count agreement on the other.
class Trainer {
 public:
  // split ids select branch membership; images listed as unlabeled get their
  // points cleared and never feed supervised losses
  Trainer(TrainConfig cfg, std::vector<data::AnnotatedImage> images,
          const data::DatasetSplit& split);

  losses::LossReport train_step(const std::vector<const data::AnnotatedImage*>& labeled,
                                const std::vector<const data::AnnotatedImage*>& unlabeled,
                                uint64_t step_index);

  FitResult fit(const std::filesystem::path& out_dir);

  metrics::MetricsReport evaluate(
      const std::vector<const data::AnnotatedImage*>& images) const;

  model::TreeFormer& net() { return *net_; }
  nn::Adam& optimizer() { return *opt_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<const data::AnnotatedImage*>& train_labeled() const { return labeled_; }
  const std::vector<const data::AnnotatedImage*>& train_unlabeled() const { return unlabeled_; }
  const std::vector<const data::AnnotatedImage*>& validation() const { return val_; }

 private:
  TrainConfig cfg_;
  losses::LossConfig loss_cfg_;
  std::vector<data::AnnotatedImage> images_;
  std::vector<const data::AnnotatedImage*> labeled_, unlabeled_, val_;
  std::unique_ptr<model::TreeFormer> net_;
  std::unique_ptr<nn::Adam> opt_;
};

// eval-mode forward of one full image; returns the finest head D1 as a Grid
Grid predict_density(const model::TreeFormer& net, const data::ImageF32& img);

// evaluation of an arbitrary image set with a given network (used by the
// evaluate/predict CLI paths); sigma drives GT rasterization and the
// localization defaults
metrics::MetricsReport evaluate_images(const model::TreeFormer& net,
                                       const std::vector<const data::AnnotatedImage*>& images,
                                       double sigma);

losses::LossConfig make_loss_config(const TrainConfig& cfg);

}  // namespace treeformer::train
