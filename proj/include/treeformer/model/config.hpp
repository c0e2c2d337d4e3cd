#pragma once

#include <array>
#include <string>

#include <json.hpp>

namespace treeformer::model {

enum class PerturbKind { FeatureNoise, FeatureMask, SpatialDropout };  // P1, P2, P3

std::string perturb_name(PerturbKind k);
PerturbKind perturb_from_name(const std::string& name);

struct PhaseConfig {
  int patch_stride = 2;
  int channels = 64;
  int depth = 2;
  int heads = 1;
  int sr_ratio = 1;       // spatial reduction of keys/values
  int mlp_ratio = 4;
  bool counter_token = false;  // phases 2..4 carry one
};

struct ModelConfig {
  std::array<PhaseConfig, 4> phases;
  int ca_reduction = 16;             // squeeze ratio of the channel-attention block
  std::string caff_variant = "ca";   // ca | plain | sa | sa_ca | none
  std::array<int, 3> tau = {1, 2, 3};
  std::array<PerturbKind, 3> perturb_order = {PerturbKind::FeatureNoise, PerturbKind::FeatureMask,
                                              PerturbKind::SpatialDropout};
  double noise_bound = 0.3;     // P1 amplitude
  double mask_eps_lo = 0.7;     // P2 threshold draw
  double mask_eps_hi = 0.9;
  double dropout_rate = 0.3;    // P3 channel drop probability

  // decoder widths equal the encoder widths of phases 1..3
  int decoder_channels(int scale) const { return phases[size_t(scale)].channels; }

  // 128/256/512/1024 pyramid with PVT-style depths and attention settings
  static ModelConfig paper();
  // narrow 32/64/128/256 preset, depth 2 per phase, for CPU-scale experiments
  static ModelConfig desk();

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace treeformer::model
