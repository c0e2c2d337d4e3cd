#pragma once

#include <array>
#include <optional>
#include <vector>

#include "treeformer/grid.hpp"
#include "treeformer/ot.hpp"

namespace treeformer::losses {

inline constexpr int kScales = 3;  // decoder emits three density maps

struct CropRect {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

// Nested concentric crops shrinking by factor 0.75 per step; d_1 is the full
// map. Stops early (with fewer than m_levels rects) when a crop would fall
// below 2x2 or stop shrinking strictly.
std::vector<CropRect> make_region_pyramid(int h, int w, int m_levels);

struct LossWeights {
  double alpha1 = 1.0;    // counting term
  double alpha2 = 0.1;    // optimal-transport term
  double alpha3 = 0.01;   // total-variation term
  double lambda_u = 1.0;  // unlabeled branch weight
  double ot_reg = 10.0;
  int ot_iters = 100;
  double ot_tol = 1e-7;
};

struct LossConfig {
  LossWeights weights;
  int region_levels = 4;  // M
  bool js_consistency = false;
  bool detach_targets = true;  // treat d_avg / t_avg as constants in gradients
  bool use_consistency = true;
  bool use_ranking = true;
  bool use_global = true;
  bool ranking_finest_only = false;     // "w/ STR": rank only on D1
  bool consistency_whole_map = false;   // "w/ STC": single region instead of pyramid
  bool l2_pixel_loss = false;           // "w/ L2": elementwise squared error replaces DM
};

struct LossReport {
  double l_c = 0, l_ot = 0, l_tv = 0, l_dm = 0;
  double l_rank = 0, l_consis = 0;
  double l_ts = 0, l_tu = 0;
  double l_s = 0, l_u = 0, l_total = 0;
  int skipped_ot = 0, skipped_tv = 0, skipped_consis = 0;
};

using MapSet = std::vector<const Grid*>;
using MapGrads = std::vector<Grid>;  // d(loss)/d(map), same shapes as preds

// --- pixel level -----------------------------------------------------------

// sum_k | ||D_k||_1 - ||gt||_1 |
double counting_loss(const MapSet& preds, const Grid& gt, MapGrads* grads);

// sum_k W(D_k/||D_k||, gt/||gt||), entropic OT with squared pixel-distance
// cost. Terms with a zero-mass side are skipped and counted in *skipped.
double ot_loss(const MapSet& preds, const Grid& gt, const LossWeights& w, MapGrads* grads,
               int* skipped);

// sum_k 0.5 * || D_k/||D_k|| - gt/||gt|| ||_1
double tv_loss(const MapSet& preds, const Grid& gt, MapGrads* grads, int* skipped);

// sum_k sum_ij (D_k(ij) - gt(ij))^2, the "w/ L2" ablation
double l2_loss(const MapSet& preds, const Grid& gt, MapGrads* grads);

// --- region level ----------------------------------------------------------

// hinge on every nested pair: max(0, sum(sub-crop) - sum(super-crop))
double ranking_loss(const MapSet& preds, const std::vector<CropRect>& rects, MapGrads* grads,
                    bool finest_only = false);

// KL of each scale's normalized crop against the across-scale mean crop
double consistency_loss(const MapSet& preds, const std::vector<CropRect>& rects, bool js_variant,
                        bool detach_mean, MapGrads* grads, int* skipped);

// --- image level -----------------------------------------------------------

double global_count_loss_labeled(const std::array<double, kScales>& t, double t_gt,
                                 std::array<double, kScales>* grads);

double global_count_loss_unlabeled(const std::array<double, kScales>& t,
                                   std::array<double, kScales>* grads, bool detach_mean = true);

// --- composition -----------------------------------------------------------

struct LabeledSample {
  MapSet preds;
  const Grid* gt = nullptr;
  std::array<double, kScales> token_counts{};
  double count_gt = 0.0;
};

struct UnlabeledSample {
  MapSet preds;
  std::array<double, kScales> token_counts{};
};

struct SampleGrads {
  MapGrads maps;
  std::array<double, kScales> tokens{};
};

// L = L_s + lambda * L_u per the report invariants; either sample may be
// null, in which case its branch contributes zero. Unlabeled gradients come
// back already scaled by lambda.
LossReport total_loss(const LabeledSample* labeled, const UnlabeledSample* unlabeled,
                      const LossConfig& cfg, SampleGrads* labeled_grads,
                      SampleGrads* unlabeled_grads);

}  // namespace treeformer::losses
