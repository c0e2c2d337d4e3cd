#include "treeformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace treeformer::metrics {

CountMetrics count_metrics(const std::vector<double>& est, const std::vector<double>& gt) {
  if (est.size() != gt.size()) throw std::invalid_argument("count_metrics: length mismatch");
  if (est.empty()) throw std::invalid_argument("count_metrics: empty input");
  const double n = double(est.size());
  double abs_sum = 0, sq_sum = 0, gt_mean = 0;
  for (double g : gt) gt_mean += g;
  gt_mean /= n;
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < est.size(); ++i) {
    double d = est[i] - gt[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
    ss_res += d * d;
    double t = gt[i] - gt_mean;
    ss_tot += t * t;
  }
  CountMetrics m;
  m.mae = abs_sum / n;
  m.rms = std::sqrt(sq_sum / n);
  if (ss_tot > 0) m.r2 = 1.0 - ss_res / ss_tot;
  return m;
}

double game(const Grid& est_map, const Grid& gt_map, int level) {
  if (est_map.h != gt_map.h || est_map.w != gt_map.w)
    throw std::invalid_argument("game: resolution mismatch");
  if (level < 0 || level > 3) throw std::invalid_argument("game: level must be in 0..3");
  const int cells = 1 << level;
  if (est_map.h % cells != 0 || est_map.w % cells != 0)
    throw std::invalid_argument("game: dims not divisible by 2^L");
  const int ch = est_map.h / cells, cw = est_map.w / cells;
  double total = 0.0;
  for (int cy = 0; cy < cells; ++cy) {
    for (int cx = 0; cx < cells; ++cx) {
      double e = 0, g = 0;
      for (int y = cy * ch; y < (cy + 1) * ch; ++y)
        for (int x = cx * cw; x < (cx + 1) * cw; ++x) {
          e += est_map.at(y, x);
          g += gt_map.at(y, x);
        }
      total += std::abs(e - g);
    }
  }
  return total;
}

std::vector<data::TreePoint> find_peaks(const Grid& m, double peak_threshold) {
  std::vector<data::TreePoint> peaks;
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      double v = m.at(y, x);
      if (v <= peak_threshold) continue;
      bool is_peak = true;
      for (int dy = -1; dy <= 1 && is_peak; ++dy)
        for (int dx = -1; dx <= 1 && is_peak; ++dx) {
          if (dy == 0 && dx == 0) continue;
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= m.h || nx < 0 || nx >= m.w) continue;
          if (m.at(ny, nx) >= v) is_peak = false;  // strict 3x3 maximum
        }
      if (is_peak) peaks.push_back({double(x), double(y)});
    }
  }
  return peaks;
}

Prf localization_prf(const Grid& est_map, const std::vector<data::TreePoint>& gt_points,
                     double peak_threshold, double match_radius, double coord_scale) {
  if (peak_threshold < 0 || match_radius < 0)
    throw std::invalid_argument("localization: threshold and radius must be non-negative");
  auto peaks = find_peaks(est_map, peak_threshold);

  // candidate pairs within radius, nearest first; ties broken by index
  std::vector<std::tuple<double, int, int>> cands;
  for (int pi = 0; pi < int(peaks.size()); ++pi) {
    for (int gi = 0; gi < int(gt_points.size()); ++gi) {
      double gx = gt_points[gi].x / coord_scale;
      double gy = gt_points[gi].y / coord_scale;
      double d = std::hypot(peaks[pi].x - gx, peaks[pi].y - gy);
      if (d <= match_radius) cands.emplace_back(d, pi, gi);
    }
  }
  std::sort(cands.begin(), cands.end());
  std::vector<bool> peak_used(peaks.size(), false), gt_used(gt_points.size(), false);
  int tp = 0;
  for (auto& [d, pi, gi] : cands) {
    if (peak_used[pi] || gt_used[gi]) continue;
    peak_used[pi] = gt_used[gi] = true;
    ++tp;
  }

  Prf r;
  r.tp = tp;
  r.fp = int(peaks.size()) - tp;
  r.fn = int(gt_points.size()) - tp;
  if (peaks.empty() && gt_points.empty()) {
    r.precision = r.recall = r.f1 = 100.0;
    return r;
  }
  r.precision = peaks.empty() ? 0.0 : 100.0 * tp / double(peaks.size());
  r.recall = gt_points.empty() ? 100.0 : 100.0 * tp / double(gt_points.size());
  r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                      : 0.0;
  return r;
}

MetricsReport evaluate_set(const std::vector<ImageEval>& images, double peak_threshold,
                           double match_radius, double coord_scale) {
  if (images.empty()) throw std::invalid_argument("evaluate_set: empty evaluation set");
  MetricsReport rep;
  rep.n = int(images.size());
  std::vector<double> est_counts, gt_counts;
  for (const auto& im : images) {
    est_counts.push_back(im.est->sum());
    gt_counts.push_back(im.gt->sum());
    for (int level = 0; level < 4; ++level) rep.e_game[level] += game(*im.est, *im.gt, level);
    if (im.points) {
      Prf p = localization_prf(*im.est, *im.points, peak_threshold, match_radius, coord_scale);
      rep.tp += p.tp;
      rep.fp += p.fp;
      rep.fn += p.fn;
    }
  }
  for (double& g : rep.e_game) g /= double(rep.n);
  // E_MAE from the same per-image |count diff| terms as E_G0, same order
  rep.e_mae = rep.e_game[0];
  CountMetrics cm = count_metrics(est_counts, gt_counts);
  rep.e_rms = cm.rms;
  rep.e_r2 = cm.r2;
  long det = rep.tp + rep.fp, gt_n = rep.tp + rep.fn;
  if (det == 0 && gt_n == 0) {
    rep.e_p = rep.e_r = rep.e_f1 = 100.0;
  } else {
    rep.e_p = det > 0 ? 100.0 * rep.tp / double(det) : 0.0;
    rep.e_r = gt_n > 0 ? 100.0 * rep.tp / double(gt_n) : 100.0;
    rep.e_f1 = (rep.e_p + rep.e_r) > 0 ? 2.0 * rep.e_p * rep.e_r / (rep.e_p + rep.e_r) : 0.0;
  }
  return rep;
}

double gaussian_peak_amplitude(double sigma) {
  if (sigma <= 0) throw std::invalid_argument("sigma must be positive");
  const int radius = int(std::ceil(4.0 * sigma));
  double total = 0.0, center = 0.0;
  for (int y = -radius; y <= radius; ++y)
    for (int x = -radius; x <= radius; ++x) {
      double r2 = double(x) * x + double(y) * y;
      if (r2 > double(radius) * radius) continue;
      double v = std::exp(-r2 / (2.0 * sigma * sigma));
      total += v;
      if (x == 0 && y == 0) center = v;
    }
  return center / total;
}

}  // namespace treeformer::metrics
