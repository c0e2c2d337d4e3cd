#pragma once

#include <array>
#include <vector>

#include "treeformer/model/config.hpp"
#include "treeformer/nn/layers.hpp"

namespace treeformer::model {

struct FeaturePyramid {
  std::array<nn::Tensor, 4> s;        // S1..S4 feature grids (N, C_i, H/2^{i+1}, W/2^{i+1})
  std::array<nn::Tensor, 3> tokens;   // counter tokens of phases 2..4, each (N, C_i)
};

// fixed 2-D sine/cosine positional table for an h x w grid of c-wide tokens
nn::Tensor sincos_position_table(int h, int w, int c);

// One pre-norm transformer block with spatial-reduction attention: keys and
// values are computed from the patch grid downsampled by sr_ratio (the
// counter token, when present, is appended to the reduced sequence).
class PhaseBlock {
 public:
  PhaseBlock(nn::ParamRegistry& reg, const std::string& prefix, const PhaseConfig& cfg);
  nn::Tensor forward(const nn::Tensor& tokens, int hp, int wp, bool has_counter) const;

 private:
  PhaseConfig cfg_;
  nn::LayerNorm norm1_, norm2_;
  nn::Linear q_, k_, v_, proj_;
  nn::Conv2d sr_;
  nn::LayerNorm sr_norm_;
  nn::Linear fc1_, fc2_;
};

class EncoderPhase {
 public:
  EncoderPhase(nn::ParamRegistry& reg, const std::string& prefix, int in_channels,
               const PhaseConfig& cfg);

  struct Output {
    nn::Tensor grid;   // (N, C, hp, wp)
    nn::Tensor token;  // (N, C) when the phase carries a counter token
  };
  Output forward(const nn::Tensor& grid_in) const;

  const PhaseConfig& config() const { return cfg_; }

 private:
  PhaseConfig cfg_;
  nn::Conv2d patch_embed_;
  nn::LayerNorm embed_norm_;
  nn::Tensor counter_token_;
  std::vector<PhaseBlock> blocks_;
  nn::LayerNorm out_norm_;
};

class Encoder {
 public:
  Encoder(nn::ParamRegistry& reg, const ModelConfig& cfg);
  // image: (N, 3, H, W) with H, W divisible by 32
  FeaturePyramid encode(const nn::Tensor& image) const;

 private:
  std::vector<EncoderPhase> phases_;
};

}  // namespace treeformer::model
