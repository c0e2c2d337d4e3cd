#pragma once

#include <vector>

#include "treeformer/model/config.hpp"
#include "treeformer/nn/tensor.hpp"
#include "treeformer/rng.hpp"

namespace treeformer::model {

// Training-time feature perturbations (P1/P2/P3). All are identity in eval
// mode; the caller decides when to apply them. Masks and noise are constants
// on the tape, so gradients flow only through the surviving activations.

// P1 with an explicit noise tensor, F~ = F + F (*) xi
nn::Tensor feature_noise_with(const nn::Tensor& x, const std::vector<float>& xi);
// P1: xi ~ U(-bound, bound)
nn::Tensor feature_noise(const nn::Tensor& x, Rng& rng, double bound);

// number of most-active cells P2 zeroes for a draw eps: the target fraction
// (1 - eps) rounded, clamped into [10%, 30%] of n
int mask_drop_count(int n, double eps);

// P2 on (N,C,H,W): rank pixels by their channel sum per sample, zero the
// top cells across all channels
nn::Tensor feature_mask(const nn::Tensor& x, Rng& rng, double eps_lo, double eps_hi);
// P2 on (N,C) token vectors: zero the most active channels
nn::Tensor token_mask(const nn::Tensor& x, Rng& rng, double eps_lo, double eps_hi);
// deterministic core used by tests: indices that would be zeroed
std::vector<int> token_mask_indices(const float* values, int n, double eps);

// P3: whole channels zeroed with probability rate, survivors scaled by
// 1/(1-rate); on (N,C) tokens each channel is one element
nn::Tensor spatial_dropout(const nn::Tensor& x, Rng& rng, double rate);
nn::Tensor token_dropout(const nn::Tensor& x, Rng& rng, double rate);

// dispatch; identity when !training
nn::Tensor perturb(const nn::Tensor& x, PerturbKind kind, const ModelConfig& cfg, bool training,
                   Rng& rng);
nn::Tensor perturb_token(const nn::Tensor& x, PerturbKind kind, const ModelConfig& cfg,
                         bool training, Rng& rng);

}  // namespace treeformer::model
