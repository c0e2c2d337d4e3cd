#include "treeformer/model/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "treeformer/nn/functional.hpp"

namespace treeformer::model {

using nn::Tensor;

Tensor feature_noise_with(const Tensor& x, const std::vector<float>& xi) {
  if (int64_t(xi.size()) != x.numel())
    throw std::invalid_argument("feature_noise_with: noise size mismatch");
  std::vector<float> factor(xi.size());
  for (size_t i = 0; i < xi.size(); ++i) factor[i] = 1.f + xi[i];
  return nn::mul_const_mask(x, factor);
}

Tensor feature_noise(const Tensor& x, Rng& rng, double bound) {
  std::uniform_real_distribution<float> u(float(-bound), float(bound));
  std::vector<float> xi(size_t(x.numel()));
  for (auto& v : xi) v = u(rng);
  return feature_noise_with(x, xi);
}

int mask_drop_count(int n, double eps) {
  int lo = int(std::ceil(0.1 * n));
  int hi = std::max(lo, int(std::floor(0.3 * n)));
  int k = int(std::lround((1.0 - eps) * n));
  return std::clamp(k, lo, std::min(hi, n));
}

namespace {
// ranks values ascending (ties by index) and returns the indices of the
// top `drop` cells
std::vector<int> top_cells(const float* values, int n, int drop) {
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (values[a] != values[b]) return values[a] < values[b];
    return a < b;
  });
  return {order.end() - drop, order.end()};
}
}  // namespace

std::vector<int> token_mask_indices(const float* values, int n, double eps) {
  return top_cells(values, n, mask_drop_count(n, eps));
}

Tensor feature_mask(const Tensor& x, Rng& rng, double eps_lo, double eps_hi) {
  if (x.ndim() != 4) throw std::invalid_argument("feature_mask: expect (N,C,H,W)");
  const int N = x.dim(0), C = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  std::uniform_real_distribution<double> u(eps_lo, eps_hi);
  std::vector<float> mask(size_t(x.numel()), 1.f);
  std::vector<float> sums(static_cast<size_t>(hw));
  for (int n = 0; n < N; ++n) {
    std::fill(sums.begin(), sums.end(), 0.f);
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (int64_t(n) * C + c) * hw;
      for (int i = 0; i < hw; ++i) sums[size_t(i)] += xs[i];
    }
    double eps = u(rng);
    for (int idx : top_cells(sums.data(), hw, mask_drop_count(hw, eps)))
      for (int c = 0; c < C; ++c) mask[size_t((int64_t(n) * C + c) * hw + idx)] = 0.f;
  }
  return nn::mul_const_mask(x, mask);
}

Tensor token_mask(const Tensor& x, Rng& rng, double eps_lo, double eps_hi) {
  if (x.ndim() != 2) throw std::invalid_argument("token_mask: expect (N,C)");
  const int N = x.dim(0), C = x.dim(1);
  std::uniform_real_distribution<double> u(eps_lo, eps_hi);
  std::vector<float> mask(size_t(x.numel()), 1.f);
  for (int n = 0; n < N; ++n) {
    double eps = u(rng);
    for (int idx : token_mask_indices(x.data() + int64_t(n) * C, C, eps))
      mask[size_t(int64_t(n) * C + idx)] = 0.f;
  }
  return nn::mul_const_mask(x, mask);
}

Tensor spatial_dropout(const Tensor& x, Rng& rng, double rate) {
  if (x.ndim() != 4) throw std::invalid_argument("spatial_dropout: expect (N,C,H,W)");
  if (rate <= 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in (0,1)");
  const int N = x.dim(0), C = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const float keep_scale = float(1.0 / (1.0 - rate));
  std::vector<float> mask(size_t(x.numel()));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float v = u(rng) < rate ? 0.f : keep_scale;
      float* ms = mask.data() + (int64_t(n) * C + c) * hw;
      std::fill(ms, ms + hw, v);
    }
  return nn::mul_const_mask(x, mask);
}

Tensor token_dropout(const Tensor& x, Rng& rng, double rate) {
  if (x.ndim() != 2) throw std::invalid_argument("token_dropout: expect (N,C)");
  if (rate <= 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in (0,1)");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const float keep_scale = float(1.0 / (1.0 - rate));
  std::vector<float> mask(size_t(x.numel()));
  for (auto& v : mask) v = u(rng) < rate ? 0.f : keep_scale;
  return nn::mul_const_mask(x, mask);
}

Tensor perturb(const Tensor& x, PerturbKind kind, const ModelConfig& cfg, bool training,
               Rng& rng) {
  if (!training) return x;
  switch (kind) {
    case PerturbKind::FeatureNoise: return feature_noise(x, rng, cfg.noise_bound);
    case PerturbKind::FeatureMask: return feature_mask(x, rng, cfg.mask_eps_lo, cfg.mask_eps_hi);
    case PerturbKind::SpatialDropout: return spatial_dropout(x, rng, cfg.dropout_rate);
  }
  throw std::invalid_argument("unknown perturbation kind");
}

Tensor perturb_token(const Tensor& x, PerturbKind kind, const ModelConfig& cfg, bool training,
                     Rng& rng) {
  if (!training) return x;
  switch (kind) {
    case PerturbKind::FeatureNoise: return feature_noise(x, rng, cfg.noise_bound);
    case PerturbKind::FeatureMask: return token_mask(x, rng, cfg.mask_eps_lo, cfg.mask_eps_hi);
    case PerturbKind::SpatialDropout: return token_dropout(x, rng, cfg.dropout_rate);
  }
  throw std::invalid_argument("unknown perturbation kind");
}

}  // namespace treeformer::model
