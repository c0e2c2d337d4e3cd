#include <doctest.h>
#include <unistd.h>

#include <filesystem>

#include "treeformer/model/checkpoint.hpp"
#include "treeformer/model/network.hpp"
#include "treeformer/nn/functional.hpp"

using namespace treeformer;
using namespace treeformer::model;
using nn::Shape;
using nn::Tensor;

namespace {

Tensor random_image(Rng& rng, int n, int c, int h, int w) {
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  Tensor t = Tensor::zeros({n, c, h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = u(rng);
  return t;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("patch embedding token counts") {
  SUBCASE("phase 1 on a 256x256 image: 4096 tokens of width 128, no counter token") {
    ModelConfig cfg = ModelConfig::paper();
    PhaseConfig pc = cfg.phases[0];
    pc.depth = 0;  // patch embedding only
    nn::ParamRegistry reg(1);
    EncoderPhase phase(reg, "p1", 3, pc);
    Rng rng = make_rng(0);
    auto out = phase.forward(random_image(rng, 1, 3, 256, 256));
    CHECK(out.grid.shape() == Shape{1, 128, 64, 64});  // 64*64 = 4096 tokens
    CHECK(!out.token.defined());
  }
  SUBCASE("phase 2 on 64x64x128: 1024 patch tokens + 1 counter token of width 256") {
    ModelConfig cfg = ModelConfig::paper();
    PhaseConfig pc = cfg.phases[1];
    pc.depth = 1;
    nn::ParamRegistry reg(1);
    EncoderPhase phase(reg, "p2", 128, pc);
    Rng rng = make_rng(0);
    auto out = phase.forward(random_image(rng, 1, 128, 64, 64));
    CHECK(out.grid.shape() == Shape{1, 256, 32, 32});
    REQUIRE(out.token.defined());
    CHECK(out.token.shape() == Shape{1, 256});
  }
  SUBCASE("stride not dividing dims errors") {
    PhaseConfig pc{4, 32, 0, 1, 1, 4, false};
    nn::ParamRegistry reg(1);
    EncoderPhase phase(reg, "p", 3, pc);
    Rng rng = make_rng(0);
    CHECK_THROWS_AS(phase.forward(random_image(rng, 1, 3, 30, 32)), std::invalid_argument);
  }
}

TEST_CASE("sra block") {
  PhaseConfig pc{2, 16, 1, 2, 2, 4, true};
  nn::ParamRegistry reg(3);
  PhaseBlock block(reg, "blk", pc);
  Rng rng = make_rng(1);

  SUBCASE("shape preservation with counter token and reduction") {
    Tensor toks = random_image(rng, 1, 1, 17, 16).reshaped({1, 17, 16});  // 4x4 patches + token
    Tensor out = block.forward(toks, 4, 4, true);
    CHECK(out.shape() == Shape{1, 17, 16});
  }
  SUBCASE("reduction_ratio=1 is standard attention, shape preserved") {
    PhaseConfig pc1{2, 16, 1, 2, 1, 4, false};
    nn::ParamRegistry reg1(3);
    PhaseBlock b1(reg1, "blk", pc1);
    Tensor toks = random_image(rng, 1, 1, 16, 16).reshaped({1, 16, 16});
    CHECK(b1.forward(toks, 4, 4, false).shape() == Shape{1, 16, 16});
  }
  SUBCASE("counter token output reacts to patch token perturbation") {
    Tensor toks = random_image(rng, 1, 1, 5, 16).reshaped({1, 5, 16});  // 2x2 patches + token
    PhaseConfig pc2{2, 16, 1, 2, 1, 4, true};
    nn::ParamRegistry reg2(4);
    PhaseBlock b2(reg2, "blk", pc2);
    Tensor out1 = b2.forward(toks, 2, 2, true);
    toks.data()[3] += 0.7f;  // perturb one element of patch token 0
    Tensor out2 = b2.forward(toks, 2, 2, true);
    bool token_changed = false;
    for (int c = 0; c < 16; ++c)
      if (out1.data()[4 * 16 + c] != out2.data()[4 * 16 + c]) token_changed = true;
    CHECK(token_changed);
  }
}

TEST_CASE("encoder pyramid shapes and determinism") {
  TreeFormer net(ModelConfig::desk(), 7);
  Rng rng = make_rng(2);
  Tensor img = random_image(rng, 1, 3, 64, 64);
  auto pyr = net.encode(img);
  CHECK(pyr.s[0].shape() == Shape{1, 32, 16, 16});
  CHECK(pyr.s[1].shape() == Shape{1, 64, 8, 8});
  CHECK(pyr.s[2].shape() == Shape{1, 128, 4, 4});
  CHECK(pyr.s[3].shape() == Shape{1, 256, 2, 2});
  CHECK(pyr.tokens[0].shape() == Shape{1, 64});
  CHECK(pyr.tokens[1].shape() == Shape{1, 128});
  CHECK(pyr.tokens[2].shape() == Shape{1, 256});

  auto pyr2 = net.encode(img);
  for (int i = 0; i < 4; ++i) CHECK(tensors_equal(pyr.s[size_t(i)], pyr2.s[size_t(i)]));
  CHECK_THROWS_AS(net.encode(random_image(rng, 1, 3, 48, 64)), std::invalid_argument);
}

TEST_CASE("encoder gradient flow: every phase parameter receives gradient") {
  TreeFormer net(ModelConfig::desk(), 11);
  Rng rng = make_rng(3);
  Tensor img = random_image(rng, 1, 3, 64, 64);

  nn::Tape tape;
  auto pyr = net.encode(img);
  // loss on S1 plus the counter tokens reaches every encoder parameter
  Tensor loss = nn::sum_all(nn::mul(pyr.s[0], pyr.s[0]));
  for (int k = 0; k < 3; ++k)
    loss = nn::add(loss, nn::sum_all(nn::mul(pyr.tokens[size_t(k)], pyr.tokens[size_t(k)])));
  tape.backward(loss);

  int checked = 0;
  for (const auto& e : net.params().entries()) {
    if (e.name.rfind("encoder.", 0) != 0 || !e.trainable) continue;
    REQUIRE_MESSAGE(e.tensor.grad_allocated(), e.name);
    float mx = 0;
    nn::Tensor t = e.tensor;
    for (int64_t i = 0; i < t.numel(); ++i) mx = std::max(mx, std::abs(t.grad()[i]));
    CHECK_MESSAGE(mx > 0.f, e.name);
    ++checked;
  }
  CHECK(checked > 40);
}

TEST_CASE("channel attention block") {
  ModelConfig cfg = ModelConfig::desk();
  nn::ParamRegistry reg(5);
  CaffBlock caff(reg, "caff", 64, 32, 32, cfg);
  Rng rng = make_rng(4);

  SUBCASE("zero feature with zero-initialized FCs gives all weights 0.5") {
    // fc weights are trunc-normal; zero them to hit the sigmoid(0) case
    for (const auto& e : reg.entries())
      if (e.name.find("ca_fc") != std::string::npos) {
        nn::Tensor t = e.tensor;
        std::fill(t.data(), t.data() + t.numel(), 0.f);
      }
    Tensor zero_feat = Tensor::zeros({1, 32, 8, 8});
    Tensor w = caff.channel_attention(zero_feat);
    REQUIRE(w.shape() == Shape{1, 32});
    for (int i = 0; i < 32; ++i) CHECK(w.data()[i] == doctest::Approx(0.5f));
  }
  SUBCASE("weights strictly inside (0,1) for random input") {
    Tensor feat = random_image(rng, 2, 32, 8, 8);
    Tensor w = caff.channel_attention(feat);
    for (int64_t i = 0; i < w.numel(); ++i) {
      CHECK(w.data()[i] > 0.f);
      CHECK(w.data()[i] < 1.f);
    }
  }
  SUBCASE("scaling one input channel changes the weight vector") {
    Tensor feat = random_image(rng, 1, 32, 8, 8);
    Tensor w1 = caff.channel_attention(feat);
    for (int i = 0; i < 64; ++i) feat.data()[i] *= 10.f;  // channel 0
    Tensor w2 = caff.channel_attention(feat);
    CHECK(!tensors_equal(w1, w2));
  }
}

TEST_CASE("caff fusion shapes and variants") {
  Rng rng = make_rng(5);
  SUBCASE("paper-width scale 3: (8x8x1024, 16x16x512) -> 16x16x512") {
    ModelConfig cfg = ModelConfig::paper();
    nn::ParamRegistry reg(6);
    CaffBlock caff(reg, "caff3", 1024, 512, 512, cfg);
    Tensor coarse = random_image(rng, 1, 1024, 8, 8);
    Tensor fine = random_image(rng, 1, 512, 16, 16);
    CHECK(caff.forward(coarse, fine, false).shape() == Shape{1, 512, 16, 16});
  }
  SUBCASE("desk-width scale 1: (32x32x64, 64x64x32) -> 64x64x32") {
    ModelConfig cfg = ModelConfig::desk();
    nn::ParamRegistry reg(6);
    CaffBlock caff(reg, "caff1", 64, 32, 32, cfg);
    Tensor coarse = random_image(rng, 1, 64, 32, 32);
    Tensor fine = random_image(rng, 1, 32, 64, 64);
    CHECK(caff.forward(coarse, fine, false).shape() == Shape{1, 32, 64, 64});
  }
  SUBCASE("resolution mismatch errors") {
    ModelConfig cfg = ModelConfig::desk();
    nn::ParamRegistry reg(6);
    CaffBlock caff(reg, "caff", 64, 32, 32, cfg);
    Tensor coarse = random_image(rng, 1, 64, 16, 16);
    Tensor fine = random_image(rng, 1, 32, 64, 64);
    CHECK_THROWS_AS(caff.forward(coarse, fine, false), std::invalid_argument);
  }
  SUBCASE("disabling the attention multiply changes the output") {
    // same seed -> same conv weights; only the variant differs
    ModelConfig with_ca = ModelConfig::desk();
    ModelConfig plain = ModelConfig::desk();
    plain.caff_variant = "plain";
    nn::ParamRegistry reg_a(9), reg_b(9);
    CaffBlock caff_a(reg_a, "c", 64, 32, 32, with_ca);
    CaffBlock caff_b(reg_b, "c", 64, 32, 32, plain);
    Tensor coarse = random_image(rng, 1, 64, 8, 8);
    Tensor fine = random_image(rng, 1, 32, 16, 16);
    Tensor ya = caff_a.forward(coarse, fine, false);
    Tensor yb = caff_b.forward(coarse, fine, false);
    CHECK(!tensors_equal(ya, yb));
  }
  SUBCASE("sa and sa_ca variants run and keep shape") {
    for (const char* variant : {"sa", "sa_ca", "none"}) {
      ModelConfig cfg = ModelConfig::desk();
      cfg.caff_variant = variant;
      nn::ParamRegistry reg(10);
      CaffBlock caff(reg, "c", 64, 32, 32, cfg);
      Tensor coarse = random_image(rng, 1, 64, 8, 8);
      Tensor fine = random_image(rng, 1, 32, 16, 16);
      CHECK(caff.forward(coarse, fine, false).shape() == Shape{1, 32, 16, 16});
    }
  }
}

TEST_CASE("perturbations") {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng = make_rng(6);

  SUBCASE("P1 with zero noise is the identity") {
    Tensor x = random_image(rng, 1, 4, 6, 6);
    std::vector<float> xi(size_t(x.numel()), 0.f);
    Tensor y = feature_noise_with(x, xi);
    CHECK(tensors_equal(x, y));
  }
  SUBCASE("P1 bound |F~ - F| <= 0.3 |F| elementwise") {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_image(rng, 2, 4, 6, 6);
      Rng prng = make_rng(trial);
      Tensor y = feature_noise(x, prng, 0.3);
      for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(std::abs(y.data()[i] - x.data()[i]) <= 0.3f * std::abs(x.data()[i]) + 1e-7f);
    }
  }
  SUBCASE("P2 masks 10-30% of the most active cells") {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_image(rng, 1, 3, 8, 8);
      Rng prng = make_rng(100 + trial);
      Tensor y = feature_mask(x, prng, 0.7, 0.9);
      int masked = 0;
      for (int i = 0; i < 64; ++i) {
        bool all_zero = true;
        for (int c = 0; c < 3; ++c)
          if (y.data()[c * 64 + i] != 0.f) all_zero = false;
        if (all_zero) ++masked;
      }
      CHECK(masked >= 7);   // ceil(0.1*64)
      CHECK(masked <= 19);  // floor(0.3*64)
    }
  }
  SUBCASE("P2 drop-count oracle on a 16-wide token with eps=0.8") {
    CHECK(mask_drop_count(16, 0.8) == 3);
    std::vector<float> vals(16);
    for (int i = 0; i < 16; ++i) vals[size_t(i)] = float(i);
    auto idx = token_mask_indices(vals.data(), 16, 0.8);
    REQUIRE(idx.size() == 3);
    // the three most active channels are 13, 14, 15
    std::sort(idx.begin(), idx.end());
    CHECK(idx == std::vector<int>{13, 14, 15});
  }
  SUBCASE("P3 zeros whole channels and rescales survivors") {
    Tensor x = Tensor::full({1, 8, 4, 4}, 1.f);
    Rng prng = make_rng(9);
    Tensor y = spatial_dropout(x, prng, 0.3);
    const float keep = 1.f / 0.7f;
    for (int c = 0; c < 8; ++c) {
      float first = y.data()[c * 16];
      CHECK((first == 0.f || first == doctest::Approx(keep)));
      for (int i = 1; i < 16; ++i) CHECK(y.data()[c * 16 + i] == first);
    }
  }
  SUBCASE("eval mode is identity for all kinds") {
    Tensor x = random_image(rng, 1, 4, 6, 6);
    for (auto kind : {PerturbKind::FeatureNoise, PerturbKind::FeatureMask,
                      PerturbKind::SpatialDropout}) {
      Rng prng = make_rng(11);
      Tensor y = perturb(x, kind, cfg, false, prng);
      CHECK(tensors_equal(x, y));
    }
  }
}

TEST_CASE("tdr heads") {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng = make_rng(7);

  SUBCASE("paper scale 3: 16x16x512 -> upsample x4 -> 64x64, halvings 512/256/128") {
    nn::ParamRegistry reg(8);
    TdrHead head(reg, "tdr3", 512, 3, 4);
    Tensor x = random_image(rng, 1, 512, 16, 16);
    Rng prng = make_rng(0);
    Tensor y = head.forward(x, PerturbKind::SpatialDropout, cfg, false, false, prng);
    CHECK(y.shape() == Shape{1, 1, 64, 64});
  }
  SUBCASE("scale 1: no upsample, tau=1") {
    nn::ParamRegistry reg(8);
    TdrHead head(reg, "tdr1", 128, 1, 1);
    Tensor x = random_image(rng, 1, 128, 64, 64);
    Rng prng = make_rng(0);
    Tensor y = head.forward(x, PerturbKind::FeatureNoise, cfg, false, false, prng);
    CHECK(y.shape() == Shape{1, 1, 64, 64});
  }
  SUBCASE("eval mode is deterministic") {
    nn::ParamRegistry reg(8);
    TdrHead head(reg, "tdr", 32, 2, 2);
    Tensor x = random_image(rng, 2, 32, 8, 8);
    Rng r1 = make_rng(1), r2 = make_rng(2);
    Tensor y1 = head.forward(x, PerturbKind::FeatureNoise, cfg, false, false, r1);
    Tensor y2 = head.forward(x, PerturbKind::FeatureNoise, cfg, false, false, r2);
    CHECK(tensors_equal(y1, y2));
  }
  SUBCASE("outputs are non-negative") {
    nn::ParamRegistry reg(8);
    TdrHead head(reg, "tdr", 32, 2, 2);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = random_image(rng, 1, 32, 8, 8);
      Rng prng = make_rng(uint64_t(trial));
      Tensor y = head.forward(x, PerturbKind::SpatialDropout, cfg, true, true, prng);
      for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] >= 0.f);
    }
  }
  SUBCASE("too many halvings for the width is a configuration error") {
    nn::ParamRegistry reg(8);
    CHECK_THROWS_AS(TdrHead(reg, "bad", 4, 8, 1), std::invalid_argument);
  }
}

TEST_CASE("tct heads") {
  ModelConfig cfg = ModelConfig::desk();
  SUBCASE("zero token with zero projection gives exactly 0") {
    nn::ParamRegistry reg(9);
    TctHead head(reg, "tct", 16);
    for (const auto& e : reg.entries()) {
      nn::Tensor t = e.tensor;
      std::fill(t.data(), t.data() + t.numel(), 0.f);
    }
    Tensor tok = Tensor::zeros({2, 16});
    Rng prng = make_rng(0);
    Tensor y = head.forward(tok, PerturbKind::FeatureMask, cfg, false, prng);
    CHECK(y.data()[0] == 0.f);
    CHECK(y.data()[1] == 0.f);
  }
  SUBCASE("eval determinism") {
    nn::ParamRegistry reg(10);
    TctHead head(reg, "tct", 8);
    Rng rng = make_rng(1);
    Tensor tok = random_image(rng, 1, 1, 2, 8).reshaped({2, 8});
    Rng r1 = make_rng(5), r2 = make_rng(9);
    Tensor y1 = head.forward(tok, PerturbKind::SpatialDropout, cfg, false, r1);
    Tensor y2 = head.forward(tok, PerturbKind::SpatialDropout, cfg, false, r2);
    CHECK(tensors_equal(y1, y2));
  }
}

TEST_CASE("full decode") {
  ModelConfig cfg = ModelConfig::desk();
  TreeFormer net(cfg, 13);
  Rng rng = make_rng(8);

  SUBCASE("256 input end-to-end: three 64x64 maps and 3 scalars") {
    Tensor img = random_image(rng, 1, 3, 256, 256);
    auto pred = net.forward(img, false, 0);
    for (int k = 0; k < 3; ++k) CHECK(pred.d[size_t(k)].shape() == Shape{1, 1, 64, 64});
    CHECK(pred.t.shape() == Shape{1, 3});
  }
  SUBCASE("all-zero weights give all-zero maps and counts") {
    TreeFormer zero_net(cfg, 14);
    for (const auto& e : zero_net.params().entries()) {
      nn::Tensor t = e.tensor;
      if (e.name.find("running_var") != std::string::npos) continue;  // keep variance 1
      std::fill(t.data(), t.data() + t.numel(), 0.f);
    }
    Tensor img = random_image(rng, 1, 3, 64, 64);
    auto pred = zero_net.forward(img, false, 0);
    for (int k = 0; k < 3; ++k)
      for (int64_t i = 0; i < pred.d[size_t(k)].numel(); ++i)
        CHECK(pred.d[size_t(k)].data()[i] == 0.f);
    for (int k = 0; k < 3; ++k) CHECK(pred.t.data()[k] == 0.f);
  }
  SUBCASE("gradient from a loss on D3 reaches phase-4 parameters") {
    nn::Tape tape;
    Tensor img = random_image(rng, 1, 3, 64, 64);
    auto pred = net.forward(img, true, 123);
    Tensor loss = nn::sum_all(nn::mul(pred.d[2], pred.d[2]));
    tape.backward(loss);
    bool any = false;
    for (const auto& e : net.params().entries()) {
      if (e.name.rfind("encoder.phase4", 0) != 0 || !e.trainable) continue;
      if (!e.tensor.grad_allocated()) continue;
      nn::Tensor t = e.tensor;
      for (int64_t i = 0; i < t.numel(); ++i)
        if (t.grad()[i] != 0.f) any = true;
    }
    CHECK(any);
  }
  SUBCASE("eval-mode purity: decode twice gives identical output") {
    Tensor img = random_image(rng, 1, 3, 64, 64);
    auto p1 = net.forward(img, false, 1);
    auto p2 = net.forward(img, false, 2);
    for (int k = 0; k < 3; ++k) CHECK(tensors_equal(p1.d[size_t(k)], p2.d[size_t(k)]));
    CHECK(tensors_equal(p1.t, p2.t));
  }
  SUBCASE("train-mode with the same seed is reproducible, different seeds differ") {
    Tensor img = random_image(rng, 1, 3, 64, 64);
    auto p1 = net.forward(img, true, 77);
    auto p2 = net.forward(img, true, 77);
    auto p3 = net.forward(img, true, 78);
    CHECK(tensors_equal(p1.d[0], p2.d[0]));
    CHECK(!tensors_equal(p1.d[0], p3.d[0]));
  }
  SUBCASE("non-negativity of all emitted maps in train mode") {
    Tensor img = random_image(rng, 2, 3, 64, 64);
    auto pred = net.forward(img, true, 5);
    for (int k = 0; k < 3; ++k)
      for (int64_t i = 0; i < pred.d[size_t(k)].numel(); ++i)
        CHECK(pred.d[size_t(k)].data()[i] >= 0.f);
  }
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / ("tf_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  ModelConfig cfg = ModelConfig::desk();
  cfg.caff_variant = "sa_ca";
  TreeFormer net(cfg, 21);
  CheckpointMeta meta;
  meta.epoch = 7;
  meta.best_val_mae = 1.25;
  meta.train_config["crop"] = "64";
  nn::Adam opt(net.params().trainable_params(), 1e-3, 1e-5);
  // make optimizer state non-trivial
  {
    nn::Tape tape;
    Rng rng = make_rng(1);
    auto pred = net.forward(random_image(rng, 1, 3, 64, 64), true, 3);
    Tensor loss = nn::sum_all(pred.d[0]);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  save_checkpoint(dir / "net.ckpt", net, meta, &opt);

  auto loaded = load_checkpoint(dir / "net.ckpt");
  CHECK(loaded.meta.epoch == 7);
  CHECK(loaded.meta.best_val_mae == 1.25);
  CHECK(loaded.meta.train_config.at("crop") == "64");
  CHECK(loaded.has_optimizer);
  CHECK(loaded.adam_step == 1);
  CHECK(loaded.net->config().caff_variant == "sa_ca");

  // bit-compatible evaluation after reload
  Rng rng = make_rng(2);
  Tensor img = random_image(rng, 1, 3, 64, 64);
  auto p1 = net.forward(img, false, 0);
  auto p2 = loaded.net->forward(img, false, 0);
  for (int k = 0; k < 3; ++k) CHECK(tensors_equal(p1.d[size_t(k)], p2.d[size_t(k)]));
  CHECK(tensors_equal(p1.t, p2.t));

  fs::remove_all(dir);
}
