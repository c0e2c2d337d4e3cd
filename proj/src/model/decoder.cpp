#include "treeformer/model/decoder.hpp"

#include <stdexcept>

#include "treeformer/nn/functional.hpp"

namespace treeformer::model {

using namespace nn;

CaffBlock::CaffBlock(ParamRegistry& reg, const std::string& prefix, int coarse_ch, int fine_ch,
                     int out_ch, const ModelConfig& cfg)
    : variant_(cfg.caff_variant) {
  if (variant_ == "none") {
    coarse_conv_ = Conv2d(reg, prefix + ".coarse_proj", coarse_ch, out_ch, 1, 1, 0);
    fine_conv_ = Conv2d(reg, prefix + ".fine_proj", fine_ch, out_ch, 1, 1, 0);
    return;
  }
  coarse_conv_ = Conv2d(reg, prefix + ".coarse_conv", coarse_ch, out_ch, 3, 1, 1);
  coarse_bn_ = BatchNorm2d(reg, prefix + ".coarse_bn", out_ch);
  fine_conv_ = Conv2d(reg, prefix + ".fine_conv", fine_ch, out_ch, 3, 1, 1);
  fine_bn_ = BatchNorm2d(reg, prefix + ".fine_bn", out_ch);
  if (variant_ == "ca" || variant_ == "sa_ca") {
    int hidden = std::max(4, out_ch / cfg.ca_reduction);
    ca_fc1_ = Linear(reg, prefix + ".ca_fc1", out_ch, hidden);
    ca_fc2_ = Linear(reg, prefix + ".ca_fc2", hidden, out_ch);
  }
  if (variant_ == "sa" || variant_ == "sa_ca")
    sa_conv_ = Conv2d(reg, prefix + ".sa_conv", 2, 1, 7, 1, 3);
}

Tensor CaffBlock::channel_attention(const Tensor& fine_processed) const {
  Tensor pooled = global_avg_pool(fine_processed);           // (N, C)
  Tensor hidden = relu(ca_fc1_.forward(pooled));
  return sigmoid(ca_fc2_.forward(hidden));                   // weights in (0,1)
}

Tensor CaffBlock::forward(const Tensor& coarse, const Tensor& fine, bool training) const {
  if (coarse.dim(2) * 2 != fine.dim(2) || coarse.dim(3) * 2 != fine.dim(3))
    throw std::invalid_argument("caff: coarse must be half the resolution of fine");
  Tensor up = upsample_bilinear(coarse, 2);
  if (variant_ == "none")
    return add(coarse_conv_.forward(up), fine_conv_.forward(fine));

  Tensor c = relu(coarse_bn_.forward(coarse_conv_.forward(up), training));
  Tensor f = relu(fine_bn_.forward(fine_conv_.forward(fine), training));
  if (variant_ == "ca" || variant_ == "sa_ca")
    f = mul_channel_weights(f, channel_attention(f));
  if (variant_ == "sa" || variant_ == "sa_ca") {
    Tensor attn = sigmoid(sa_conv_.forward(channel_mean_max(f)));
    f = mul_spatial_map(f, attn);
  }
  return add(c, f);
}

TdrHead::TdrHead(ParamRegistry& reg, const std::string& prefix, int in_ch, int tau, int upsample)
    : upsample_(upsample) {
  if (tau < 1) throw std::invalid_argument("tdr: tau must be >= 1");
  if (in_ch >> (tau - 1) < 1)
    throw std::invalid_argument("tdr: channel/tau mismatch, too many halvings");
  int ch = in_ch;
  for (int j = 0; j < tau - 1; ++j) {
    convs_.emplace_back(reg, prefix + ".block" + std::to_string(j) + ".conv", ch, ch / 2, 3, 1, 1);
    bns_.emplace_back(reg, prefix + ".block" + std::to_string(j) + ".bn", ch / 2);
    ch /= 2;
  }
  final_conv_ = Conv2d(reg, prefix + ".final", ch, 1, 1, 1, 0);
}

Tensor TdrHead::forward(const Tensor& x, PerturbKind kind, const ModelConfig& cfg, bool training,
                        bool apply_perturb, Rng& rng) const {
  Tensor h = perturb(x, kind, cfg, apply_perturb, rng);
  h = upsample_bilinear(h, upsample_);
  for (size_t j = 0; j < convs_.size(); ++j)
    h = relu(bns_[j].forward(convs_[j].forward(h), training));
  return relu(final_conv_.forward(h));  // density maps are non-negative
}

TctHead::TctHead(ParamRegistry& reg, const std::string& prefix, int width) {
  proj_ = Linear(reg, prefix + ".proj", width, 1);
}

Tensor TctHead::forward(const Tensor& token, PerturbKind kind, const ModelConfig& cfg,
                        bool apply_perturb, Rng& rng) const {
  Tensor t = perturb_token(token, kind, cfg, apply_perturb, rng);
  return proj_.forward(t);
}

Decoder::Decoder(ParamRegistry& reg, const ModelConfig& cfg) : cfg_(cfg) {
  const int c1 = cfg.phases[0].channels, c2 = cfg.phases[1].channels,
            c3 = cfg.phases[2].channels, c4 = cfg.phases[3].channels;
  caffs_.emplace_back(reg, "decoder.caff1", c2, c1, c1, cfg);
  caffs_.emplace_back(reg, "decoder.caff2", c3, c2, c2, cfg);
  caffs_.emplace_back(reg, "decoder.caff3", c4, c3, c3, cfg);
  const int widths[3] = {c1, c2, c3};
  const int upsample[3] = {1, 2, 4};
  for (int k = 0; k < 3; ++k) {
    tdrs_.emplace_back(reg, "decoder.tdr" + std::to_string(k + 1), widths[k],
                       cfg.tau[size_t(k)], upsample[k]);
  }
  const int token_widths[3] = {c2, c3, c4};
  for (int k = 0; k < 3; ++k)
    tcts_.emplace_back(reg, "decoder.tct" + std::to_string(k + 1), token_widths[k]);
}

MultiScalePrediction Decoder::decode(const FeaturePyramid& pyr, bool training, uint64_t seed,
                                     int apply_perturb) const {
  const bool perturb_on = apply_perturb < 0 ? training : apply_perturb != 0;
  // coarse-to-fine fusion: scale 3 <- (S4, S3), scale 2 <- (scale3, S2),
  // scale 1 <- (scale2, S1)
  Tensor scale3 = caffs_[2].forward(pyr.s[3], pyr.s[2], training);
  Tensor scale2 = caffs_[1].forward(scale3, pyr.s[1], training);
  Tensor scale1 = caffs_[0].forward(scale2, pyr.s[0], training);

  MultiScalePrediction out;
  const Tensor* features[3] = {&scale1, &scale2, &scale3};
  for (int k = 0; k < 3; ++k) {
    Rng rng = make_rng(derive_seed(seed, 0x7d0 + uint64_t(k)));
    out.d[size_t(k)] = tdrs_[size_t(k)].forward(*features[k], cfg_.perturb_order[size_t(k)], cfg_,
                                                training, perturb_on, rng);
  }
  std::array<Tensor, 3> counts;
  for (int k = 0; k < 3; ++k) {
    Rng rng = make_rng(derive_seed(seed, 0x8d0 + uint64_t(k)));
    counts[size_t(k)] = tcts_[size_t(k)].forward(pyr.tokens[size_t(k)],
                                                 cfg_.perturb_order[size_t(k)], cfg_, perturb_on,
                                                 rng);  // (N,1)
  }
  Tensor joined = concat_tokens(counts[0].reshaped({counts[0].dim(0), 1, 1}),
                                counts[1].reshaped({counts[1].dim(0), 1, 1}));
  joined = concat_tokens(joined, counts[2].reshaped({counts[2].dim(0), 1, 1}));
  out.t = joined.reshaped({counts[0].dim(0), 3});
  return out;
}

}  // namespace treeformer::model
