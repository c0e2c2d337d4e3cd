#pragma once

#include "treeformer/nn/tensor.hpp"

namespace treeformer::nn {

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// x * mask with the mask treated as a constant; used by perturbations
Tensor mul_const_mask(const Tensor& x, const std::vector<float>& mask);
// broadcast (T, C) row table over the leading batch dim of (N, T, C); the
// table is constant (positional embeddings)
Tensor add_rowtable(const Tensor& x, const Tensor& table);
// multiply (N, C) channel weights onto (N, C, H, W)
Tensor mul_channel_weights(const Tensor& x, const Tensor& w);
// multiply a (N, 1, H, W) spatial map onto (N, C, H, W)
Tensor mul_spatial_map(const Tensor& x, const Tensor& m);

// reductions / shape
Tensor sum_all(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);            // (N,C,H,W) -> (N,C)
Tensor grid_to_tokens(const Tensor& x);             // (N,C,H,W) -> (N,H*W,C)
Tensor tokens_to_grid(const Tensor& x, int h, int w);  // (N,T,C) -> (N,C,h,w)
Tensor split_heads(const Tensor& x, int heads);     // (N,T,C) -> (N*heads,T,C/heads)
Tensor merge_heads(const Tensor& x, int heads);     // inverse of split_heads
Tensor append_token(const Tensor& x, const Tensor& token);  // (N,T,C)+(C) -> (N,T+1,C)
Tensor slice_tokens(const Tensor& x, int start, int len);   // (N,T,C) -> (N,len,C)
Tensor concat_tokens(const Tensor& a, const Tensor& b);     // (N,Ta,C)+(N,Tb,C)
Tensor concat_channels(const Tensor& a, const Tensor& b);   // (N,Ca,H,W)+(N,Cb,H,W)
Tensor channel_mean_max(const Tensor& x);  // (N,C,H,W) -> (N,2,H,W) per-pixel stats

// linear algebra
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // (...,Cin)x(Cin,Cout)
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b);    // (B,M,K)@(B,K,N)

// nonlinearities over the last dim
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// conv / norm / resize on (N,C,H,W)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int cout, int k, int stride,
              int pad);
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& run_mean,
                    Tensor& run_var, bool training, float momentum = 0.1f, float eps = 1e-5f);
Tensor upsample_bilinear(const Tensor& x, int factor);

}  // namespace treeformer::nn
