#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "treeformer/grid.hpp"

namespace treeformer::data {

struct TreePoint {
  double x = 0.0;  // column, 0-based pixels
  double y = 0.0;  // row, 0-based pixels
};

// Planar float RGB image, values in [0,1], row-major h x w x 3.
struct ImageF32 {
  int h = 0;
  int w = 0;
  std::vector<float> rgb;

  ImageF32() = default;
  ImageF32(int h_, int w_) : h(h_), w(w_), rgb(size_t(h_) * w_ * 3, 0.f) {}
  float* px(int y, int x) { return &rgb[(size_t(y) * w + x) * 3]; }
  const float* px(int y, int x) const { return &rgb[(size_t(y) * w + x) * 3]; }
};

struct AnnotatedImage {
  std::string id;
  ImageF32 pixels;
  std::vector<TreePoint> points;  // empty when !is_labeled
  bool is_labeled = false;
  double gsd = 0.0;  // meters/pixel, metadata only
};

struct DatasetSplit {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  uint64_t seed = 0;
};

// Manifest: one record per image, "id, image_path, labeled_flag, annotation_path?".
// Paths are resolved relative to the manifest's directory. Annotation files hold
// one "x,y" decimal pair per line.
std::vector<AnnotatedImage> parse_annotations(const std::filesystem::path& manifest_path);

// Superposition of isotropic Gaussians, one per point; each kernel is truncated
// at 4*sigma and renormalized over its in-bounds window so every tree
// contributes mass exactly 1.
Grid generate_density_map(const std::vector<TreePoint>& points, int h, int w, double sigma);

// Block-sum downsampling; preserves the integral exactly.
Grid downsample_density(const Grid& d, int factor);

struct CropFlip {
  int x0 = 0;
  int y0 = 0;
  int size = 0;
  bool flip = false;
};

// Deterministic core of augment(); points outside the crop window are dropped.
AnnotatedImage apply_crop_flip(const AnnotatedImage& img, const CropFlip& cf);

// Random crop + horizontal flip (p=0.5), reproducible from the seed.
AnnotatedImage augment(const AnnotatedImage& img, int crop, uint64_t seed);

// floor(fraction*N) labeled (at least 1), remainder unlabeled, order shuffled
// deterministically by seed.
DatasetSplit split_dataset(const std::vector<std::string>& manifest_ids, double labeled_fraction,
                           uint64_t seed);

// Image IO (backed by OpenCV). load returns RGB in [0,1].
ImageF32 load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const ImageF32& img);
// 8-bit heat-map visualization of a density map.
void save_heatmap(const std::filesystem::path& path, const Grid& density);

}  // namespace treeformer::data
