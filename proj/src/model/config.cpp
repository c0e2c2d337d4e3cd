#include "treeformer/model/config.hpp"

#include <stdexcept>

namespace treeformer::model {

std::string perturb_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::FeatureNoise: return "P1";
    case PerturbKind::FeatureMask: return "P2";
    case PerturbKind::SpatialDropout: return "P3";
  }
  return "?";
}

PerturbKind perturb_from_name(const std::string& name) {
  if (name == "P1") return PerturbKind::FeatureNoise;
  if (name == "P2") return PerturbKind::FeatureMask;
  if (name == "P3") return PerturbKind::SpatialDropout;
  throw std::invalid_argument("unknown perturbation name: " + name);
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  // channel widths from the architecture description; depths and attention
  // settings follow the PVT family defaults (head dim 64, wide early FFNs)
  c.phases[0] = {4, 128, 3, 2, 8, 8, false};
  c.phases[1] = {2, 256, 4, 4, 4, 8, true};
  c.phases[2] = {2, 512, 6, 8, 2, 4, true};
  c.phases[3] = {2, 1024, 3, 16, 1, 4, true};
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.phases[0] = {4, 32, 2, 1, 8, 4, false};
  c.phases[1] = {2, 64, 2, 2, 4, 4, true};
  c.phases[2] = {2, 128, 2, 4, 2, 4, true};
  c.phases[3] = {2, 256, 2, 8, 1, 4, true};
  c.ca_reduction = 8;
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["phases"] = nlohmann::json::array();
  for (const auto& p : phases) {
    j["phases"].push_back({{"patch_stride", p.patch_stride},
                           {"channels", p.channels},
                           {"depth", p.depth},
                           {"heads", p.heads},
                           {"sr_ratio", p.sr_ratio},
                           {"mlp_ratio", p.mlp_ratio},
                           {"counter_token", p.counter_token}});
  }
  j["ca_reduction"] = ca_reduction;
  j["caff_variant"] = caff_variant;
  j["tau"] = tau;
  j["perturb_order"] = {perturb_name(perturb_order[0]), perturb_name(perturb_order[1]),
                        perturb_name(perturb_order[2])};
  j["noise_bound"] = noise_bound;
  j["mask_eps_lo"] = mask_eps_lo;
  j["mask_eps_hi"] = mask_eps_hi;
  j["dropout_rate"] = dropout_rate;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (size_t i = 0; i < 4; ++i) {
    const auto& p = j.at("phases").at(i);
    c.phases[i] = {p.at("patch_stride"), p.at("channels"),     p.at("depth"),
                   p.at("heads"),        p.at("sr_ratio"),     p.at("mlp_ratio"),
                   p.at("counter_token")};
  }
  c.ca_reduction = j.at("ca_reduction");
  c.caff_variant = j.at("caff_variant");
  for (size_t i = 0; i < 3; ++i) c.tau[i] = j.at("tau").at(i);
  for (size_t i = 0; i < 3; ++i)
    c.perturb_order[i] = perturb_from_name(j.at("perturb_order").at(i));
  c.noise_bound = j.at("noise_bound");
  c.mask_eps_lo = j.at("mask_eps_lo");
  c.mask_eps_hi = j.at("mask_eps_hi");
  c.dropout_rate = j.at("dropout_rate");
  return c;
}

}  // namespace treeformer::model
