#include "treeformer/model/network.hpp"

namespace treeformer::model {

TreeFormer::TreeFormer(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), registry_(seed) {
  encoder_ = std::make_unique<Encoder>(registry_, cfg_);
  decoder_ = std::make_unique<Decoder>(registry_, cfg_);
}

int64_t TreeFormer::parameter_count() const {
  int64_t n = 0;
  for (const auto& e : registry_.entries())
    if (e.trainable) n += e.tensor.numel();
  return n;
}

nn::Tensor image_to_tensor(const data::ImageF32& img) {
  nn::Tensor t = nn::Tensor::zeros({1, 3, img.h, img.w});
  const int64_t hw = int64_t(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float* p = img.px(y, x);
      for (int c = 0; c < 3; ++c)
        t.data()[c * hw + int64_t(y) * img.w + x] = (p[c] - 0.5f) * 4.f;
    }
  return t;
}

}  // namespace treeformer::model
