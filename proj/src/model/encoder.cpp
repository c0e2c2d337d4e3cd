#include "treeformer/model/encoder.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

#include "treeformer/nn/functional.hpp"

namespace treeformer::model {

using namespace nn;

Tensor sincos_position_table(int h, int w, int c) {
  if (c % 4 != 0) throw std::invalid_argument("positional table needs channels divisible by 4");
  static std::map<std::tuple<int, int, int>, Tensor> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(h, w, c);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  Tensor table = Tensor::zeros({h * w, c});
  const int quarter = c / 4;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float* row = table.data() + (int64_t(y) * w + x) * c;
      for (int i = 0; i < quarter; ++i) {
        double omega = std::pow(10000.0, -double(i) / quarter);
        row[2 * i] = float(std::sin(y * omega));
        row[2 * i + 1] = float(std::cos(y * omega));
        row[c / 2 + 2 * i] = float(std::sin(x * omega));
        row[c / 2 + 2 * i + 1] = float(std::cos(x * omega));
      }
    }
  cache[key] = table;
  return table;
}

PhaseBlock::PhaseBlock(ParamRegistry& reg, const std::string& prefix, const PhaseConfig& cfg)
    : cfg_(cfg) {
  const int c = cfg.channels;
  if (c % cfg.heads != 0)
    throw std::invalid_argument("phase channels not divisible by head count");
  norm1_ = LayerNorm(reg, prefix + ".norm1", c);
  norm2_ = LayerNorm(reg, prefix + ".norm2", c);
  q_ = Linear(reg, prefix + ".attn.q", c, c);
  k_ = Linear(reg, prefix + ".attn.k", c, c);
  v_ = Linear(reg, prefix + ".attn.v", c, c);
  proj_ = Linear(reg, prefix + ".attn.proj", c, c);
  if (cfg.sr_ratio > 1) {
    sr_ = Conv2d(reg, prefix + ".attn.sr", c, c, cfg.sr_ratio, cfg.sr_ratio, 0);
    sr_norm_ = LayerNorm(reg, prefix + ".attn.sr_norm", c);
  }
  fc1_ = Linear(reg, prefix + ".ffn.fc1", c, c * cfg.mlp_ratio);
  fc2_ = Linear(reg, prefix + ".ffn.fc2", c * cfg.mlp_ratio, c);
}

Tensor PhaseBlock::forward(const Tensor& tokens, int hp, int wp, bool has_counter) const {
  const int c = cfg_.channels;
  const int tp = hp * wp;
  const int dh = c / cfg_.heads;

  Tensor ln = norm1_.forward(tokens);
  Tensor q = q_.forward(ln);

  Tensor kv_src;
  if (cfg_.sr_ratio > 1) {
    Tensor patches = has_counter ? slice_tokens(ln, 0, tp) : ln;
    Tensor reduced = sr_.forward(tokens_to_grid(patches, hp, wp));
    Tensor reduced_tokens = sr_norm_.forward(grid_to_tokens(reduced));
    kv_src = has_counter ? concat_tokens(reduced_tokens, slice_tokens(ln, tp, 1)) : reduced_tokens;
  } else {
    kv_src = ln;
  }
  Tensor k = k_.forward(kv_src);
  Tensor v = v_.forward(kv_src);

  Tensor qh = split_heads(scale(q, 1.f / std::sqrt(float(dh))), cfg_.heads);
  Tensor scores = bmm(qh, split_heads(k, cfg_.heads), true);
  Tensor ctx = bmm(softmax_lastdim(scores), split_heads(v, cfg_.heads), false);
  Tensor attn_out = proj_.forward(merge_heads(ctx, cfg_.heads));
  Tensor x = add(tokens, attn_out);

  Tensor ffn = fc2_.forward(gelu(fc1_.forward(norm2_.forward(x))));
  return add(x, ffn);
}

EncoderPhase::EncoderPhase(ParamRegistry& reg, const std::string& prefix, int in_channels,
                           const PhaseConfig& cfg)
    : cfg_(cfg) {
  patch_embed_ = Conv2d(reg, prefix + ".embed", in_channels, cfg.channels, cfg.patch_stride,
                        cfg.patch_stride, 0);
  embed_norm_ = LayerNorm(reg, prefix + ".embed_norm", cfg.channels);
  if (cfg.counter_token)
    counter_token_ = reg.add(prefix + ".counter_token", {cfg.channels}, Init::Zeros);
  for (int d = 0; d < cfg.depth; ++d)
    blocks_.emplace_back(reg, prefix + ".block" + std::to_string(d), cfg);
  out_norm_ = LayerNorm(reg, prefix + ".out_norm", cfg.channels);
}

EncoderPhase::Output EncoderPhase::forward(const Tensor& grid_in) const {
  if (grid_in.dim(2) % cfg_.patch_stride != 0 || grid_in.dim(3) % cfg_.patch_stride != 0)
    throw std::invalid_argument("encoder phase: spatial dims not divisible by patch stride");
  Tensor emb = patch_embed_.forward(grid_in);
  const int hp = emb.dim(2), wp = emb.dim(3);
  const int tp = hp * wp;

  Tensor toks = embed_norm_.forward(grid_to_tokens(emb));
  toks = add_rowtable(toks, sincos_position_table(hp, wp, cfg_.channels));
  if (cfg_.counter_token) toks = append_token(toks, counter_token_);

  for (const auto& block : blocks_) toks = block.forward(toks, hp, wp, cfg_.counter_token);
  toks = out_norm_.forward(toks);

  Output out;
  if (cfg_.counter_token) {
    out.token = slice_tokens(toks, tp, 1).reshaped({grid_in.dim(0), cfg_.channels});
    out.grid = tokens_to_grid(slice_tokens(toks, 0, tp), hp, wp);
  } else {
    out.grid = tokens_to_grid(toks, hp, wp);
  }
  return out;
}

Encoder::Encoder(ParamRegistry& reg, const ModelConfig& cfg) {
  int in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    phases_.emplace_back(reg, "encoder.phase" + std::to_string(i + 1), in_ch, cfg.phases[size_t(i)]);
    in_ch = cfg.phases[size_t(i)].channels;
  }
}

FeaturePyramid Encoder::encode(const Tensor& image) const {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw std::invalid_argument("encode: expect (N,3,H,W)");
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
    throw std::invalid_argument("encode: input dims must be divisible by 32");

  FeaturePyramid pyr;
  Tensor x = image;
  for (int i = 0; i < 4; ++i) {
    auto out = phases_[size_t(i)].forward(x);
    pyr.s[size_t(i)] = out.grid;
    if (i >= 1) pyr.tokens[size_t(i - 1)] = out.token;
    x = out.grid;
  }
  return pyr;
}

}  // namespace treeformer::model
