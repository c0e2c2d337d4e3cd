#include "treeformer/train/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "treeformer/nn/functional.hpp"

namespace treeformer::train {

using data::AnnotatedImage;
using model::TreeFormer;
using nn::Tensor;

namespace {

// scalar bridge between the float graph and the double-precision losses:
// forward value is precomputed, backward injects the stored gradients
Tensor loss_bridge(double value, std::vector<Tensor> inputs,
                   std::vector<std::vector<float>> grads) {
  Tensor out = Tensor::zeros({1});
  out.data()[0] = float(value);
  if (nn::Tape::recording()) {
    out.set_requires_grad(true);
    nn::Tape::record([inputs = std::move(inputs), grads = std::move(grads), out]() mutable {
      float g = out.grad()[0];
      for (size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        float* gx = inputs[i].grad();
        const auto& gs = grads[i];
        for (size_t j = 0; j < gs.size(); ++j) gx[j] += g * gs[j];
      }
    });
  }
  return out;
}

Tensor build_batch(const std::vector<data::ImageF32>& crops) {
  const int n = int(crops.size());
  const int h = crops[0].h, w = crops[0].w;
  Tensor t = Tensor::zeros({n, 3, h, w});
  const int64_t hw = int64_t(h) * w;
  for (int i = 0; i < n; ++i) {
    const auto& img = crops[size_t(i)];
    float* base = t.data() + int64_t(i) * 3 * hw;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float* p = img.px(y, x);
        for (int c = 0; c < 3; ++c) base[c * hw + int64_t(y) * w + x] = (p[c] - 0.5f) * 4.f;
      }
  }
  return t;
}

Grid tensor_map_to_grid(const Tensor& d, int sample) {
  const int h = d.dim(2), w = d.dim(3);
  Grid g(h, w);
  const float* src = d.data() + int64_t(sample) * h * w;
  for (size_t i = 0; i < g.size(); ++i) g.v[i] = src[i];
  return g;
}

void guard_finite(const losses::LossReport& rep) {
  const std::pair<const char*, double> fields[] = {
      {"L_c", rep.l_c},       {"L_ot", rep.l_ot},   {"L_tv", rep.l_tv},
      {"L_dm", rep.l_dm},     {"L_rank", rep.l_rank}, {"L_consis", rep.l_consis},
      {"L_ts", rep.l_ts},     {"L_tu", rep.l_tu},   {"L_s", rep.l_s},
      {"L_u", rep.l_u},       {"L_total", rep.l_total}};
  for (const auto& [name, v] : fields)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("divergence guard: loss term ") + name +
                               " is not finite");
}

}  // namespace

losses::LossConfig make_loss_config(const TrainConfig& cfg) {
  losses::LossConfig lc;
  lc.weights.lambda_u = cfg.lambda;
  lc.weights.ot_reg = cfg.ot_reg;
  lc.weights.ot_iters = cfg.ot_iters;
  lc.weights.ot_tol = cfg.ot_tol;
  lc.region_levels = cfg.m_levels;
  lc.js_consistency = cfg.js_consistency;
  lc.detach_targets = cfg.detach_targets;
  lc.use_consistency = cfg.use_consistency;
  lc.use_ranking = cfg.use_ranking;
  lc.use_global = cfg.use_global;
  lc.ranking_finest_only = cfg.ranking_finest_only;
  lc.consistency_whole_map = cfg.single_scale_consistency;
  lc.l2_pixel_loss = cfg.pixel_loss == "l2";
  if (cfg.pixel_loss != "dm" && cfg.pixel_loss != "l2")
    throw std::invalid_argument("pixel_loss must be dm or l2");
  return lc;
}

Trainer::Trainer(TrainConfig cfg, std::vector<data::AnnotatedImage> images,
                 const data::DatasetSplit& split)
    : cfg_(std::move(cfg)), images_(std::move(images)) {
  loss_cfg_ = make_loss_config(cfg_);

  auto find_image = [&](const std::string& id) -> AnnotatedImage* {
    for (auto& im : images_)
      if (im.id == id) return &im;
    throw std::invalid_argument("split id not in manifest: " + id);
  };
  for (const auto& id : split.unlabeled) {
    AnnotatedImage* im = find_image(id);
    im->is_labeled = false;
    im->points.clear();  // unlabeled points must never be read
  }
  std::vector<const AnnotatedImage*> labeled_all;
  for (const auto& id : split.labeled) {
    AnnotatedImage* im = find_image(id);
    im->is_labeled = true;
    labeled_all.push_back(im);
  }
  for (const auto& id : split.unlabeled) unlabeled_.push_back(find_image(id));

  // hold out validation images from the labeled portion
  size_t val_n = size_t(std::lround(cfg_.val_fraction * double(labeled_all.size())));
  if (val_n >= labeled_all.size()) val_n = labeled_all.size() - 1;
  labeled_.assign(labeled_all.begin(), labeled_all.end() - long(val_n));
  val_.assign(labeled_all.end() - long(val_n), labeled_all.end());
  if (val_.empty()) val_ = labeled_;  // validate on the training images

  net_ = std::make_unique<TreeFormer>(cfg_.model_config(), derive_seed(cfg_.seed, 1));
  opt_ = std::make_unique<nn::Adam>(net_->params().trainable_params(), cfg_.learning_rate,
                                    cfg_.weight_decay);
}

losses::LossReport Trainer::train_step(const std::vector<const AnnotatedImage*>& labeled,
                                       const std::vector<const AnnotatedImage*>& unlabeled,
                                       uint64_t step_index) {
  if (labeled.empty() && unlabeled.empty())
    throw std::invalid_argument("train_step: both batches empty");
  const bool use_unlabeled = !unlabeled.empty() && cfg_.lambda != 0.0;

  opt_->zero_grad();
  nn::Tape tape;
  losses::LossReport rep{};
  Tensor total;

  auto augment_seed = [&](uint64_t branch, uint64_t slot) {
    return derive_seed(derive_seed(cfg_.seed, 10 + branch), (step_index << 16) | slot);
  };

  if (!labeled.empty()) {
    std::vector<data::ImageF32> crops;
    std::vector<Grid> gts;
    std::vector<double> count_gt;
    for (size_t i = 0; i < labeled.size(); ++i) {
      auto aug = cfg_.flip_augment
                     ? data::augment(*labeled[i], cfg_.crop, augment_seed(0, i))
                     : [&] {
                         Rng rng = make_rng(augment_seed(0, i));
                         data::CropFlip cf;
                         cf.size = cfg_.crop;
                         cf.x0 = std::uniform_int_distribution<int>(
                             0, labeled[i]->pixels.w - cfg_.crop)(rng);
                         cf.y0 = std::uniform_int_distribution<int>(
                             0, labeled[i]->pixels.h - cfg_.crop)(rng);
                         cf.flip = false;
                         return data::apply_crop_flip(*labeled[i], cf);
                       }();
      Grid full = data::generate_density_map(aug.points, cfg_.crop, cfg_.crop, cfg_.sigma);
      gts.push_back(data::downsample_density(full, 4));
      count_gt.push_back(double(aug.points.size()));
      crops.push_back(std::move(aug.pixels));
    }
    Tensor batch = build_batch(crops);
    auto pred = net_->forward(batch, true, derive_seed(cfg_.seed, 20) ^ mix_seed(step_index),
                              cfg_.perturb_labeled ? 1 : 0);

    const int n = int(labeled.size());
    std::vector<std::vector<float>> bridge_grads(4);
    for (int k = 0; k < 3; ++k)
      bridge_grads[size_t(k)].assign(size_t(pred.d[size_t(k)].numel()), 0.f);
    bridge_grads[3].assign(size_t(pred.t.numel()), 0.f);

    double value = 0.0;
    for (int i = 0; i < n; ++i) {
      Grid d1 = tensor_map_to_grid(pred.d[0], i);
      Grid d2 = tensor_map_to_grid(pred.d[1], i);
      Grid d3 = tensor_map_to_grid(pred.d[2], i);
      losses::LabeledSample sample;
      sample.preds = {&d1, &d2, &d3};
      sample.gt = &gts[size_t(i)];
      for (int k = 0; k < 3; ++k) sample.token_counts[size_t(k)] = pred.t.data()[i * 3 + k];
      sample.count_gt = count_gt[size_t(i)];

      losses::SampleGrads grads;
      auto r = losses::total_loss(&sample, nullptr, loss_cfg_, &grads, nullptr);
      rep.l_c += r.l_c / n;
      rep.l_ot += r.l_ot / n;
      rep.l_tv += r.l_tv / n;
      rep.l_dm += r.l_dm / n;
      rep.l_ts += r.l_ts / n;
      rep.skipped_ot += r.skipped_ot;
      rep.skipped_tv += r.skipped_tv;
      value += r.l_s / n;

      const int64_t map_elems = gts[size_t(i)].h * gts[size_t(i)].w;
      for (int k = 0; k < 3; ++k)
        for (int64_t j = 0; j < map_elems; ++j)
          bridge_grads[size_t(k)][size_t(i * map_elems + j)] =
              float(grads.maps[size_t(k)].v[size_t(j)] / n);
      for (int k = 0; k < 3; ++k)
        bridge_grads[3][size_t(i * 3 + k)] = float(grads.tokens[size_t(k)] / n);
    }
    rep.l_s = rep.l_dm + rep.l_ts;
    Tensor sup = loss_bridge(value, {pred.d[0], pred.d[1], pred.d[2], pred.t},
                             std::move(bridge_grads));
    total = total.defined() ? nn::add(total, sup) : sup;
  }

  if (use_unlabeled) {
    std::vector<data::ImageF32> crops;
    for (size_t i = 0; i < unlabeled.size(); ++i) {
      auto aug = data::augment(*unlabeled[i], cfg_.crop, augment_seed(1, i));
      crops.push_back(std::move(aug.pixels));
    }
    Tensor batch = build_batch(crops);
    auto pred = net_->forward(batch, true, derive_seed(cfg_.seed, 21) ^ mix_seed(step_index), 1);

    const int n = int(unlabeled.size());
    std::vector<std::vector<float>> bridge_grads(4);
    for (int k = 0; k < 3; ++k)
      bridge_grads[size_t(k)].assign(size_t(pred.d[size_t(k)].numel()), 0.f);
    bridge_grads[3].assign(size_t(pred.t.numel()), 0.f);

    double value = 0.0;  // lambda-scaled unlabeled loss
    for (int i = 0; i < n; ++i) {
      Grid d1 = tensor_map_to_grid(pred.d[0], i);
      Grid d2 = tensor_map_to_grid(pred.d[1], i);
      Grid d3 = tensor_map_to_grid(pred.d[2], i);
      losses::UnlabeledSample sample;
      sample.preds = {&d1, &d2, &d3};
      for (int k = 0; k < 3; ++k) sample.token_counts[size_t(k)] = pred.t.data()[i * 3 + k];

      losses::SampleGrads grads;
      auto r = losses::total_loss(nullptr, &sample, loss_cfg_, nullptr, &grads);
      rep.l_consis += r.l_consis / n;
      rep.l_rank += r.l_rank / n;
      rep.l_tu += r.l_tu / n;
      rep.skipped_consis += r.skipped_consis;
      value += r.l_total / n;  // == lambda * l_u

      const int64_t map_elems = int64_t(d1.h) * d1.w;
      for (int k = 0; k < 3; ++k)
        for (int64_t j = 0; j < map_elems; ++j)
          bridge_grads[size_t(k)][size_t(i * map_elems + j)] =
              float(grads.maps[size_t(k)].v[size_t(j)] / n);
      for (int k = 0; k < 3; ++k)
        bridge_grads[3][size_t(i * 3 + k)] = float(grads.tokens[size_t(k)] / n);
    }
    rep.l_u = rep.l_consis + rep.l_rank + rep.l_tu;
    Tensor unsup = loss_bridge(value, {pred.d[0], pred.d[1], pred.d[2], pred.t},
                               std::move(bridge_grads));
    total = total.defined() ? nn::add(total, unsup) : unsup;
  }

  rep.l_total = rep.l_s + cfg_.lambda * rep.l_u;
  guard_finite(rep);

  tape.backward(total);

  if (cfg_.clip_norm > 0) {
    double norm_sq = 0;
    for (auto& p : net_->params().trainable_params())
      if (p.grad_allocated())
        for (int64_t i = 0; i < p.numel(); ++i) norm_sq += double(p.grad()[i]) * p.grad()[i];
    double norm = std::sqrt(norm_sq);
    if (norm > cfg_.clip_norm) {
      float s = float(cfg_.clip_norm / norm);
      for (auto& p : net_->params().trainable_params())
        if (p.grad_allocated())
          for (int64_t i = 0; i < p.numel(); ++i) p.grad()[i] *= s;
    }
  }
  opt_->step();
  return rep;
}

FitResult Trainer::fit(const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.csv");
  log << "step,l_c,l_ot,l_tv,l_dm,l_rank,l_consis,l_ts,l_tu,l_s,l_u,l_total\n";

  const int batch = cfg_.batch_size;
  const int ubatch = cfg_.unlabeled_batch > 0 ? cfg_.unlabeled_batch : batch;
  const int steps_per_epoch = int((labeled_.size() + size_t(batch) - 1) / size_t(batch));
  const int total_steps =
      cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * std::max(1, steps_per_epoch);

  Rng shuffle_rng = make_rng(derive_seed(cfg_.seed, 2));
  std::vector<size_t> lorder(labeled_.size()), uorder(unlabeled_.size());
  for (size_t i = 0; i < lorder.size(); ++i) lorder[i] = i;
  for (size_t i = 0; i < uorder.size(); ++i) uorder[i] = i;
  size_t lpos = lorder.size(), upos = uorder.size();  // trigger initial shuffles

  double best_mae = -1.0;
  std::vector<std::vector<float>> best_params;
  auto snapshot = [&]() {
    best_params.clear();
    for (const auto& e : net_->params().entries())
      best_params.emplace_back(e.tensor.data(), e.tensor.data() + e.tensor.numel());
  };
  auto validate = [&]() {
    auto mrep = evaluate(val_);
    if (best_mae < 0 || mrep.e_mae < best_mae) {
      best_mae = mrep.e_mae;
      snapshot();
    }
    return mrep;
  };

  int step = 0;
  for (; step < total_steps; ++step) {
    std::vector<const AnnotatedImage*> lbatch, ubatch_v;
    for (int i = 0; i < batch && !labeled_.empty(); ++i) {
      if (lpos >= lorder.size()) {
        std::shuffle(lorder.begin(), lorder.end(), shuffle_rng);
        lpos = 0;
      }
      lbatch.push_back(labeled_[lorder[lpos++]]);
    }
    if (cfg_.lambda != 0.0)
      for (int i = 0; i < ubatch && !unlabeled_.empty(); ++i) {
        if (upos >= uorder.size()) {
          std::shuffle(uorder.begin(), uorder.end(), shuffle_rng);
          upos = 0;
        }
        ubatch_v.push_back(unlabeled_[uorder[upos++]]);
      }

    auto rep = train_step(lbatch, ubatch_v, uint64_t(step));
    if (cfg_.log_every > 0 && step % cfg_.log_every == 0) {
      log << step << ',' << rep.l_c << ',' << rep.l_ot << ',' << rep.l_tv << ',' << rep.l_dm
          << ',' << rep.l_rank << ',' << rep.l_consis << ',' << rep.l_ts << ',' << rep.l_tu << ','
          << rep.l_s << ',' << rep.l_u << ',' << rep.l_total << '\n';
    }
    if (cfg_.eval_every > 0 && (step + 1) % cfg_.eval_every == 0) validate();
  }
  validate();

  // restore the best parameters before the final evaluation and save
  {
    size_t idx = 0;
    for (const auto& e : net_->params().entries()) {
      nn::Tensor t = e.tensor;
      std::copy(best_params[idx].begin(), best_params[idx].end(), t.data());
      ++idx;
    }
  }

  FitResult result;
  result.steps_run = step;
  result.best_val_mae = best_mae;
  result.final_eval = evaluate(val_);

  model::CheckpointMeta meta;
  meta.epoch = cfg_.max_steps > 0 ? 0 : cfg_.epochs;
  meta.best_val_mae = best_mae;
  meta.train_config = cfg_.to_map();
  result.checkpoint_path = out_dir / "best.ckpt";
  model::save_checkpoint(result.checkpoint_path, *net_, meta, opt_.get());
  return result;
}

metrics::MetricsReport Trainer::evaluate(
    const std::vector<const AnnotatedImage*>& images) const {
  return evaluate_images(*net_, images, cfg_.sigma);
}

Grid predict_density(const TreeFormer& net, const data::ImageF32& img) {
  Tensor input = model::image_to_tensor(img);
  auto pred = net.forward(input, false, 0);
  Grid map(pred.d[0].dim(2), pred.d[0].dim(3));
  for (size_t i = 0; i < map.size(); ++i) map.v[i] = pred.d[0].data()[i];
  return map;
}

metrics::MetricsReport evaluate_images(const TreeFormer& net,
                                       const std::vector<const AnnotatedImage*>& images,
                                       double sigma) {
  if (images.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<Grid> ests, gts;
  std::vector<const std::vector<data::TreePoint>*> pts;
  ests.reserve(images.size());
  gts.reserve(images.size());
  for (const AnnotatedImage* im : images) {
    ests.push_back(predict_density(net, im->pixels));
    Grid full = data::generate_density_map(im->points, im->pixels.h, im->pixels.w, sigma);
    gts.push_back(data::downsample_density(full, 4));
    pts.push_back(&im->points);
  }
  std::vector<metrics::ImageEval> evals;
  for (size_t i = 0; i < images.size(); ++i) evals.push_back({&ests[i], &gts[i], pts[i]});
  const double sigma_map = sigma / 4.0;
  const double peak_thr = 0.5 * metrics::gaussian_peak_amplitude(sigma_map);
  const double radius = 2.0 * sigma_map;
  return metrics::evaluate_set(evals, peak_thr, radius, 4.0);
}

}  // namespace treeformer::train
