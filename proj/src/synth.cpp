#include "treeformer/synth.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "treeformer/rng.hpp"

namespace treeformer::synth {

using data::AnnotatedImage;
using data::ImageF32;

namespace {

struct Color {
  float r, g, b;
};

Color jitter(Rng& rng, Color c, float amount) {
  std::uniform_real_distribution<float> u(-amount, amount);
  return {std::clamp(c.r + u(rng), 0.f, 1.f), std::clamp(c.g + u(rng), 0.f, 1.f),
          std::clamp(c.b + u(rng), 0.f, 1.f)};
}

void paint_background(ImageF32& img, Rng& rng) {
  static const Color palettes[] = {
      {0.30f, 0.42f, 0.22f},  // grass
      {0.46f, 0.42f, 0.27f},  // dry field
      {0.50f, 0.50f, 0.48f},  // pavement
      {0.40f, 0.34f, 0.24f},  // soil
  };
  std::uniform_int_distribution<int> pick(0, 3);
  Color base = jitter(rng, palettes[pick(rng)], 0.05f);

  // a few low-frequency waves give large-scale terrain variation
  std::uniform_real_distribution<float> angle(0.f, 6.2831853f);
  std::uniform_real_distribution<float> period(48.f, 192.f);
  std::uniform_real_distribution<float> amp(0.015f, 0.045f);
  struct Wave {
    float fx, fy, phase, a;
  };
  Wave waves[3];
  for (auto& wv : waves) {
    float th = angle(rng), p = period(rng);
    wv = {std::cos(th) / p, std::sin(th) / p, angle(rng), amp(rng)};
  }
  std::uniform_real_distribution<float> noise(-0.03f, 0.03f);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float v = 0.f;
      for (const auto& wv : waves)
        v += wv.a * std::cos(6.2831853f * (wv.fx * float(x) + wv.fy * float(y)) + wv.phase);
      v += noise(rng);
      float* p = img.px(y, x);
      p[0] = std::clamp(base.r + v, 0.f, 1.f);
      p[1] = std::clamp(base.g + v, 0.f, 1.f);
      p[2] = std::clamp(base.b + v, 0.f, 1.f);
    }
}

void paint_clutter(ImageF32& img, Rng& rng, double level) {
  if (level <= 0) return;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> count_d(0, int(std::lround(5 * level)));
  int count = count_d(rng);
  std::uniform_int_distribution<int> sz(16, 56);
  static const Color tones[] = {
      {0.62f, 0.60f, 0.58f},  // roof
      {0.55f, 0.45f, 0.35f},  // brick
      {0.35f, 0.37f, 0.40f},  // asphalt
      {0.70f, 0.68f, 0.60f},  // concrete
  };
  std::uniform_int_distribution<int> pick(0, 3);
  for (int i = 0; i < count; ++i) {
    int w = sz(rng), h = sz(rng);
    std::uniform_int_distribution<int> px(0, img.w - w), py(0, img.h - h);
    int x0 = px(rng), y0 = py(rng);
    Color c = jitter(rng, tones[pick(rng)], 0.06f);
    float alpha = float(0.75 + 0.25 * u01(rng));
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        float* p = img.px(y, x);
        p[0] = (1 - alpha) * p[0] + alpha * c.r;
        p[1] = (1 - alpha) * p[1] + alpha * c.g;
        p[2] = (1 - alpha) * p[2] + alpha * c.b;
      }
  }
}

void paint_tree(ImageF32& img, Rng& rng, double cx, double cy, double radius) {
  std::uniform_real_distribution<float> gshade(0.24f, 0.40f);
  Color c = {0.f, gshade(rng), 0.f};
  std::uniform_real_distribution<float> tint(0.06f, 0.14f);
  c.r = tint(rng);
  c.b = tint(rng) * 0.8f;
  std::uniform_real_distribution<double> ecc(0.85, 1.18);
  const double rx = radius * ecc(rng), ry = radius * ecc(rng);
  const double hx = 0.35 * rx, hy = -0.35 * ry;  // highlight offset (sun from one corner)

  int x0 = std::max(0, int(std::floor(cx - 1.6 * rx)));
  int x1 = std::min(img.w - 1, int(std::ceil(cx + 1.6 * rx)));
  int y0 = std::max(0, int(std::floor(cy - 1.6 * ry)));
  int y1 = std::min(img.h - 1, int(std::ceil(cy + 1.6 * ry)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double dx = (x - cx) / rx, dy = (y - cy) / ry;
      double d2 = dx * dx + dy * dy;
      double alpha = std::exp(-d2 * 1.9);
      if (alpha < 0.04) continue;
      double hdx = (x - cx - hx) / rx, hdy = (y - cy - hy) / ry;
      double bright = 0.72 + 0.55 * std::exp(-(hdx * hdx + hdy * hdy) / 0.55);
      float* p = img.px(y, x);
      float a = float(std::min(1.0, alpha * 1.35));
      p[0] = (1 - a) * p[0] + a * std::clamp(float(c.r * bright), 0.f, 1.f);
      p[1] = (1 - a) * p[1] + a * std::clamp(float(c.g * bright), 0.f, 1.f);
      p[2] = (1 - a) * p[2] + a * std::clamp(float(c.b * bright), 0.f, 1.f);
    }
}

}  // namespace

AnnotatedImage generate_scene(int size, int density_lo, int density_hi, double clutter,
                              uint64_t seed, const std::string& id) {
  if (size % 32 != 0) throw std::invalid_argument("synth: size must be divisible by 32");
  if (density_lo < 0 || density_hi < density_lo)
    throw std::invalid_argument("synth: bad density range");
  Rng rng = make_rng(seed);
  AnnotatedImage out;
  out.id = id;
  out.is_labeled = true;
  out.gsd = 0.2;
  out.pixels = ImageF32(size, size);

  paint_background(out.pixels, rng);
  paint_clutter(out.pixels, rng, clutter);

  std::uniform_int_distribution<int> count_d(density_lo, density_hi);
  const int count = count_d(rng);
  const double margin = 6.0;
  std::uniform_real_distribution<double> pos(margin, double(size) - margin);
  std::uniform_real_distribution<double> rad(5.0, 9.0);
  const double min_dist = 7.0;
  for (int i = 0; i < count; ++i) {
    double cx = 0, cy = 0;
    for (int tries = 0; tries < 40; ++tries) {
      cx = pos(rng);
      cy = pos(rng);
      bool ok = true;
      for (const auto& p : out.points)
        if (std::hypot(p.x - cx, p.y - cy) < min_dist) ok = false;
      if (ok) break;  // else keep the last draw; overlaps allowed after 40 tries
    }
    double r = rad(rng);
    paint_tree(out.pixels, rng, cx, cy, r);
    out.points.push_back({cx, cy});
  }
  return out;
}

std::vector<std::string> generate_dataset(const SynthOptions& opts) {
  namespace fs = std::filesystem;
  if (opts.n < 1) throw std::invalid_argument("synth: n must be >= 1");
  std::error_code ec;
  fs::create_directories(opts.out_dir / "images", ec);
  fs::create_directories(opts.out_dir / "ann", ec);
  if (!fs::exists(opts.out_dir / "images"))
    throw std::runtime_error("synth: cannot create output directory " + opts.out_dir.string());

  std::vector<std::string> ids;
  std::ofstream manifest(opts.out_dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("synth: cannot write manifest");
  char buf[64];
  for (int i = 0; i < opts.n; ++i) {
    std::snprintf(buf, sizeof(buf), "im_%04d", i);
    std::string id = buf;
    auto scene = generate_scene(opts.size, opts.density_lo, opts.density_hi, opts.clutter,
                                derive_seed(opts.seed, uint64_t(i) + 100), id);
    data::save_image(opts.out_dir / "images" / (id + ".png"), scene.pixels);
    std::ofstream ann(opts.out_dir / "ann" / (id + ".txt"));
    for (const auto& p : scene.points) {
      std::snprintf(buf, sizeof(buf), "%.4f,%.4f", p.x, p.y);
      ann << buf << "\n";
    }
    manifest << id << ", images/" << id << ".png, 1, ann/" << id << ".txt\n";
    ids.push_back(id);
  }
  return ids;
}

}  // namespace treeformer::synth
