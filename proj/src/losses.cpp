#include "treeformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace treeformer::losses {

namespace {

constexpr double kMix = 1e-9;    // uniform mixing keeps OT marginals positive
constexpr double kFloor = 1e-8;  // consistency-loss normalization floor

double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

void check_same_shape(const MapSet& preds, const Grid& gt) {
  for (const Grid* p : preds) {
    if (!p) throw std::invalid_argument("loss: null prediction map");
    if (p->h != gt.h || p->w != gt.w)
      throw std::invalid_argument("loss: prediction/gt resolution mismatch");
  }
}

void ensure_grads(MapGrads* grads, const MapSet& preds) {
  if (!grads) return;
  grads->clear();
  for (const Grid* p : preds) grads->emplace_back(p->h, p->w);
}

double crop_sum(const Grid& g, const CropRect& r) {
  double s = 0.0;
  for (int y = r.y0; y < r.y0 + r.h; ++y)
    for (int x = r.x0; x < r.x0 + r.w; ++x) s += g.at(y, x);
  return s;
}

}  // namespace

std::vector<CropRect> make_region_pyramid(int h, int w, int m_levels) {
  if (m_levels < 1) throw std::invalid_argument("region pyramid needs M >= 1");
  if (h < 4 || w < 4) throw std::invalid_argument("region pyramid needs a map of at least 4x4");
  std::vector<CropRect> rects;
  int prev_h = 0, prev_w = 0;
  for (int m = 0; m < m_levels; ++m) {
    double scale = std::pow(0.75, m);
    int ch = int(std::lround(scale * h));
    int cw = int(std::lround(scale * w));
    if (ch < 2 || cw < 2) break;
    if (m > 0 && !(ch <= prev_h && cw <= prev_w && (ch < prev_h || cw < prev_w))) break;
    rects.push_back({(w - cw) / 2, (h - ch) / 2, cw, ch});
    prev_h = ch;
    prev_w = cw;
  }
  if (int(rects.size()) < m_levels)
    std::cerr << "region pyramid: M reduced from " << m_levels << " to " << rects.size()
              << " for a " << h << "x" << w << " map\n";
  return rects;
}

double counting_loss(const MapSet& preds, const Grid& gt, MapGrads* grads) {
  check_same_shape(preds, gt);
  ensure_grads(grads, preds);
  double gt_sum = gt.sum();
  double value = 0.0;
  for (size_t k = 0; k < preds.size(); ++k) {
    double diff = preds[k]->sum() - gt_sum;
    value += std::abs(diff);
    if (grads) {
      double s = sign(diff);
      for (double& g : (*grads)[k].v) g += s;
    }
  }
  return value;
}

double ot_loss(const MapSet& preds, const Grid& gt, const LossWeights& w, MapGrads* grads,
               int* skipped) {
  check_same_shape(preds, gt);
  ensure_grads(grads, preds);
  if (skipped) *skipped = 0;

  double gt_sum = gt.sum();
  const size_t n = gt.size();
  double value = 0.0;

  Grid b(gt.h, gt.w);
  if (gt_sum > 0)
    for (size_t i = 0; i < n; ++i) b.v[i] = (1.0 - kMix) * gt.v[i] / gt_sum + kMix / double(n);

  for (size_t k = 0; k < preds.size(); ++k) {
    const Grid& d = *preds[k];
    double s = d.sum();
    if (s <= 0 || gt_sum <= 0) {
      if (skipped) ++*skipped;
      continue;
    }
    Grid a(d.h, d.w);
    for (size_t i = 0; i < n; ++i) a.v[i] = (1.0 - kMix) * d.v[i] / s + kMix / double(n);

    ot::SinkhornOptions opts;
    opts.reg = w.ot_reg;
    opts.max_iters = w.ot_iters;
    opts.tol = w.ot_tol;
    auto res = ot::sinkhorn_grid(a, b, opts);
    value += res.value;

    if (grads) {
      // chain through a = (1-mix) * d/s + mix/n; dV/da = f
      double fa = 0.0;
      for (size_t i = 0; i < n; ++i) fa += res.f.v[i] * (d.v[i] / s);
      for (size_t i = 0; i < n; ++i) (*grads)[k].v[i] += (1.0 - kMix) * (res.f.v[i] - fa) / s;
    }
  }
  return value;
}

double tv_loss(const MapSet& preds, const Grid& gt, MapGrads* grads, int* skipped) {
  check_same_shape(preds, gt);
  ensure_grads(grads, preds);
  if (skipped) *skipped = 0;

  double gt_sum = gt.sum();
  const size_t n = gt.size();
  double value = 0.0;
  for (size_t k = 0; k < preds.size(); ++k) {
    const Grid& d = *preds[k];
    double s = d.sum();
    if (s <= 0 || gt_sum <= 0) {
      if (skipped) ++*skipped;
      continue;
    }
    double term = 0.0, ga = 0.0;
    std::vector<double> g(n);
    for (size_t i = 0; i < n; ++i) {
      double a = d.v[i] / s;
      double diff = a - gt.v[i] / gt_sum;
      term += 0.5 * std::abs(diff);
      g[i] = 0.5 * sign(diff);
      ga += g[i] * a;
    }
    value += term;
    if (grads)
      for (size_t i = 0; i < n; ++i) (*grads)[k].v[i] += (g[i] - ga) / s;
  }
  return value;
}

double l2_loss(const MapSet& preds, const Grid& gt, MapGrads* grads) {
  check_same_shape(preds, gt);
  ensure_grads(grads, preds);
  double value = 0.0;
  for (size_t k = 0; k < preds.size(); ++k) {
    for (size_t i = 0; i < gt.size(); ++i) {
      double diff = preds[k]->v[i] - gt.v[i];
      value += diff * diff;
      if (grads) (*grads)[k].v[i] += 2.0 * diff;
    }
  }
  return value;
}

double ranking_loss(const MapSet& preds, const std::vector<CropRect>& rects, MapGrads* grads,
                    bool finest_only) {
  ensure_grads(grads, preds);
  double value = 0.0;
  const size_t k_end = finest_only ? 1 : preds.size();
  const int m_count = int(rects.size());
  for (size_t k = 0; k < k_end; ++k) {
    std::vector<double> sums(m_count);
    for (int m = 0; m < m_count; ++m) sums[m] = crop_sum(*preds[k], rects[m]);
    for (int m = 0; m < m_count; ++m) {
      for (int nn = m + 1; nn < m_count; ++nn) {
        // rects[nn] is nested inside rects[m]; penalize sub-count > super-count
        double v = sums[nn] - sums[m];
        if (v > 0) {
          value += v;
          if (grads) {
            const CropRect& sub = rects[nn];
            const CropRect& sup = rects[m];
            for (int y = sub.y0; y < sub.y0 + sub.h; ++y)
              for (int x = sub.x0; x < sub.x0 + sub.w; ++x) (*grads)[k].at(y, x) += 1.0;
            for (int y = sup.y0; y < sup.y0 + sup.h; ++y)
              for (int x = sup.x0; x < sup.x0 + sup.w; ++x) (*grads)[k].at(y, x) -= 1.0;
          }
        }
      }
    }
  }
  return value;
}

double consistency_loss(const MapSet& preds, const std::vector<CropRect>& rects, bool js_variant,
                        bool detach_mean, MapGrads* grads, int* skipped) {
  ensure_grads(grads, preds);
  if (skipped) *skipped = 0;
  const size_t kn = preds.size();

  double value = 0.0;
  for (const CropRect& r : rects) {
    const size_t cn = size_t(r.w) * r.h;
    std::vector<int> active;
    std::vector<std::vector<double>> p(kn);
    std::vector<double> denom(kn, 0.0);
    for (size_t k = 0; k < kn; ++k) {
      double s = crop_sum(*preds[k], r);
      if (s <= 0) {
        if (skipped) ++*skipped;
        continue;
      }
      p[k].resize(cn);
      double total = s + kFloor * double(cn);
      size_t i = 0;
      for (int y = r.y0; y < r.y0 + r.h; ++y)
        for (int x = r.x0; x < r.x0 + r.w; ++x, ++i)
          p[k][i] = (preds[k]->at(y, x) + kFloor) / total;
      denom[k] = total;
      active.push_back(int(k));
    }
    if (active.size() < 2) continue;

    std::vector<double> avg(cn, 0.0);
    for (int k : active)
      for (size_t i = 0; i < cn; ++i) avg[i] += p[k][i];
    for (double& a : avg) a /= double(active.size());

    const double js_scale = js_variant ? 1.0 / double(active.size()) : 1.0;
    for (int k : active) {
      double term = 0.0;
      std::vector<double> g(cn);
      double gp = 0.0;
      for (size_t i = 0; i < cn; ++i) {
        double lr = std::log(p[k][i] / avg[i]);
        term += p[k][i] * lr;
        g[i] = js_scale * (detach_mean ? lr + 1.0 : lr);
        gp += g[i] * p[k][i];
      }
      value += js_scale * term;
      if (grads) {
        size_t i = 0;
        for (int y = r.y0; y < r.y0 + r.h; ++y)
          for (int x = r.x0; x < r.x0 + r.w; ++x, ++i)
            (*grads)[k].at(y, x) += (g[i] - gp) / denom[k];
      }
    }
  }
  return value;
}

double global_count_loss_labeled(const std::array<double, kScales>& t, double t_gt,
                                 std::array<double, kScales>* grads) {
  double value = 0.0;
  for (int k = 0; k < kScales; ++k) {
    double diff = t[k] - t_gt;
    value += std::abs(diff);
    if (grads) (*grads)[k] = sign(diff);
  }
  return value;
}

double global_count_loss_unlabeled(const std::array<double, kScales>& t,
                                   std::array<double, kScales>* grads, bool detach_mean) {
  double avg = (t[0] + t[1] + t[2]) / double(kScales);
  double value = 0.0;
  std::array<double, kScales> s{};
  for (int k = 0; k < kScales; ++k) {
    double diff = t[k] - avg;
    value += std::abs(diff);
    s[k] = sign(diff);
  }
  if (grads) {
    double mean_s = (s[0] + s[1] + s[2]) / double(kScales);
    for (int k = 0; k < kScales; ++k) (*grads)[k] = detach_mean ? s[k] : s[k] - mean_s;
  }
  return value;
}

LossReport total_loss(const LabeledSample* labeled, const UnlabeledSample* unlabeled,
                      const LossConfig& cfg, SampleGrads* labeled_grads,
                      SampleGrads* unlabeled_grads) {
  if (!labeled && !unlabeled) throw std::invalid_argument("total_loss: no branch present");
  LossReport rep;
  const LossWeights& w = cfg.weights;

  if (labeled) {
    MapGrads* mg = labeled_grads ? &labeled_grads->maps : nullptr;
    if (cfg.l2_pixel_loss) {
      rep.l_dm = l2_loss(labeled->preds, *labeled->gt, mg);
    } else {
      MapGrads gc, got, gtv;
      rep.l_c = counting_loss(labeled->preds, *labeled->gt, mg ? &gc : nullptr);
      rep.l_ot = ot_loss(labeled->preds, *labeled->gt, w, mg ? &got : nullptr, &rep.skipped_ot);
      rep.l_tv = tv_loss(labeled->preds, *labeled->gt, mg ? &gtv : nullptr, &rep.skipped_tv);
      rep.l_dm = w.alpha1 * rep.l_c + w.alpha2 * rep.l_ot + w.alpha3 * rep.l_tv;
      if (mg) {
        ensure_grads(mg, labeled->preds);
        for (size_t k = 0; k < labeled->preds.size(); ++k)
          for (size_t i = 0; i < (*mg)[k].size(); ++i)
            (*mg)[k].v[i] = w.alpha1 * gc[k].v[i] + w.alpha2 * got[k].v[i] + w.alpha3 * gtv[k].v[i];
      }
    }
    if (cfg.use_global)
      rep.l_ts = global_count_loss_labeled(labeled->token_counts, labeled->count_gt,
                                           labeled_grads ? &labeled_grads->tokens : nullptr);
    rep.l_s = rep.l_dm + rep.l_ts;
  }

  if (unlabeled) {
    const Grid& d0 = *unlabeled->preds[0];
    auto rects = make_region_pyramid(d0.h, d0.w, cfg.region_levels);
    MapGrads* mg = unlabeled_grads ? &unlabeled_grads->maps : nullptr;
    MapGrads gcons, grank;
    if (cfg.use_consistency) {
      std::vector<CropRect> crects =
          cfg.consistency_whole_map ? std::vector<CropRect>{{0, 0, d0.w, d0.h}} : rects;
      rep.l_consis = consistency_loss(unlabeled->preds, crects, cfg.js_consistency,
                                      cfg.detach_targets, mg ? &gcons : nullptr,
                                      &rep.skipped_consis);
    }
    if (cfg.use_ranking)
      rep.l_rank =
          ranking_loss(unlabeled->preds, rects, mg ? &grank : nullptr, cfg.ranking_finest_only);
    if (cfg.use_global)
      rep.l_tu = global_count_loss_unlabeled(unlabeled->token_counts,
                                             unlabeled_grads ? &unlabeled_grads->tokens : nullptr,
                                             cfg.detach_targets);
    rep.l_u = rep.l_consis + rep.l_rank + rep.l_tu;
    if (mg) {
      ensure_grads(mg, unlabeled->preds);
      for (size_t k = 0; k < unlabeled->preds.size(); ++k)
        for (size_t i = 0; i < (*mg)[k].size(); ++i) {
          double g = 0.0;
          if (cfg.use_consistency) g += gcons[k].v[i];
          if (cfg.use_ranking) g += grank[k].v[i];
          (*mg)[k].v[i] = w.lambda_u * g;
        }
    }
    if (unlabeled_grads)
      for (int k = 0; k < kScales; ++k) unlabeled_grads->tokens[k] *= w.lambda_u;
  }

  rep.l_total = rep.l_s + w.lambda_u * rep.l_u;
  return rep;
}

}  // namespace treeformer::losses
