#pragma once

#include <optional>
#include <vector>

#include "treeformer/data.hpp"
#include "treeformer/grid.hpp"

namespace treeformer::metrics {

struct CountMetrics {
  double mae = 0.0;
  double rms = 0.0;
  std::optional<double> r2;  // empty when gt is constant (undefined denominator)
};

CountMetrics count_metrics(const std::vector<double>& est, const std::vector<double>& gt);

// Grid average mean absolute error at level L for one image: the map is cut
// into a 2^L x 2^L grid of cells and absolute cell-count differences summed.
double game(const Grid& est_map, const Grid& gt_map, int level);

struct Prf {
  double precision = 0.0;  // percentages
  double recall = 0.0;
  double f1 = 0.0;
  int tp = 0, fp = 0, fn = 0;
};

// Peaks = strict 3x3 local maxima above peak_threshold, greedily matched
// nearest-first one-to-one to GT points within match_radius. Point
// coordinates are divided by coord_scale to land in map pixels.
Prf localization_prf(const Grid& est_map, const std::vector<data::TreePoint>& gt_points,
                     double peak_threshold, double match_radius, double coord_scale = 1.0);

std::vector<data::TreePoint> find_peaks(const Grid& est_map, double peak_threshold);

struct MetricsReport {
  int n = 0;
  double e_mae = 0.0;
  double e_rms = 0.0;
  std::optional<double> e_r2;
  double e_game[4] = {0, 0, 0, 0};  // E_G0..E_G3
  double e_p = 0.0, e_r = 0.0, e_f1 = 0.0;
  long tp = 0, fp = 0, fn = 0;
};

struct ImageEval {
  const Grid* est = nullptr;
  const Grid* gt = nullptr;
  const std::vector<data::TreePoint>* points = nullptr;  // at coord_scale * map pixels
};

// Aggregates one evaluation set. Count ground truth is taken from the GT
// density maps so that E_G0 == E_MAE holds exactly. Localization TP/FP/FN are
// micro-averaged over the set.
MetricsReport evaluate_set(const std::vector<ImageEval>& images, double peak_threshold,
                           double match_radius, double coord_scale);

// Peak of a renormalized Gaussian kernel with the given sigma; the default
// localization threshold is half of this.
double gaussian_peak_amplitude(double sigma);

}  // namespace treeformer::metrics
