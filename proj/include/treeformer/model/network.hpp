#pragma once

#include <memory>

#include "treeformer/data.hpp"
#include "treeformer/model/decoder.hpp"
#include "treeformer/model/encoder.hpp"

namespace treeformer::model {

// The full encoder-decoder network. One parameter registry backs both
// branches of semi-supervised training; forward passes never copy weights.
class TreeFormer {
 public:
  TreeFormer(const ModelConfig& cfg, uint64_t seed);

  FeaturePyramid encode(const nn::Tensor& image) const { return encoder_->encode(image); }
  MultiScalePrediction decode(const FeaturePyramid& pyr, bool training, uint64_t seed,
                              int apply_perturb = -1) const {
    return decoder_->decode(pyr, training, seed, apply_perturb);
  }
  MultiScalePrediction forward(const nn::Tensor& image, bool training, uint64_t seed,
                               int apply_perturb = -1) const {
    return decode(encode(image), training, seed, apply_perturb);
  }

  nn::ParamRegistry& params() { return registry_; }
  const nn::ParamRegistry& params() const { return registry_; }
  const ModelConfig& config() const { return cfg_; }
  const Decoder& decoder() const { return *decoder_; }

  int64_t parameter_count() const;

 private:
  ModelConfig cfg_;
  nn::ParamRegistry registry_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
};

// (N,3,H,W) network input from an RGB image, normalized to zero mean
nn::Tensor image_to_tensor(const data::ImageF32& img);

}  // namespace treeformer::model
