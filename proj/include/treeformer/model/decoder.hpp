#pragma once

#include <array>
#include <vector>

#include "treeformer/model/encoder.hpp"
#include "treeformer/model/perturb.hpp"

namespace treeformer::model {

struct MultiScalePrediction {
  std::array<nn::Tensor, 3> d;  // density maps D1..D3, each (N, 1, H/4, W/4)
  nn::Tensor t;                 // token counts (N, 3)
};

// Fuses an upsampled coarse decoder feature with a channel-reweighted fine
// encoder feature. caff_variant selects the attention arrangement; "none"
// degrades to plain 1x1 projections + sum (the "w/o CAFF" ablation).
class CaffBlock {
 public:
  CaffBlock(nn::ParamRegistry& reg, const std::string& prefix, int coarse_ch, int fine_ch,
            int out_ch, const ModelConfig& cfg);
  nn::Tensor forward(const nn::Tensor& coarse, const nn::Tensor& fine, bool training) const;
  // channel-importance vector in (0,1), exposed for tests
  nn::Tensor channel_attention(const nn::Tensor& fine_processed) const;

 private:
  std::string variant_;
  nn::Conv2d coarse_conv_, fine_conv_;
  nn::BatchNorm2d coarse_bn_, fine_bn_;
  nn::Linear ca_fc1_, ca_fc2_;
  nn::Conv2d sa_conv_;
};

// Perturbation + bilinear upsampling + channel-halving conv stack ending in a
// 1-channel ReLU projection.
class TdrHead {
 public:
  TdrHead(nn::ParamRegistry& reg, const std::string& prefix, int in_ch, int tau, int upsample);
  nn::Tensor forward(const nn::Tensor& x, PerturbKind kind, const ModelConfig& cfg, bool training,
                     bool apply_perturb, Rng& rng) const;

 private:
  int upsample_ = 1;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm2d> bns_;
  nn::Conv2d final_conv_;
};

// Perturbation + linear projection of a counter token to a scalar count.
class TctHead {
 public:
  TctHead(nn::ParamRegistry& reg, const std::string& prefix, int width);
  nn::Tensor forward(const nn::Tensor& token, PerturbKind kind, const ModelConfig& cfg,
                     bool apply_perturb, Rng& rng) const;  // (N,C) -> (N,1)

 private:
  nn::Linear proj_;
};

class Decoder {
 public:
  Decoder(nn::ParamRegistry& reg, const ModelConfig& cfg);
  // apply_perturb < 0 follows `training`; 0/1 force the perturbations off/on
  MultiScalePrediction decode(const FeaturePyramid& pyr, bool training, uint64_t seed,
                              int apply_perturb = -1) const;

  const CaffBlock& caff(int scale) const { return caffs_[size_t(scale - 1)]; }
  const TdrHead& tdr(int scale) const { return tdrs_[size_t(scale - 1)]; }
  const TctHead& tct(int index) const { return tcts_[size_t(index)]; }

 private:
  ModelConfig cfg_;
  std::vector<CaffBlock> caffs_;  // index 0..2 = decoder scales 1..3
  std::vector<TdrHead> tdrs_;
  std::vector<TctHead> tcts_;
};

}  // namespace treeformer::model
