#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace treeformer {

// Dense row-major h x w grid of doubles. Density maps, loss gradients and
// metric inputs all use this type; the integral of a density map is sum().
struct Grid {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

  double& at(int y, int x) { return v[size_t(y) * w + x]; }
  double at(int y, int x) const { return v[size_t(y) * w + x]; }
  size_t size() const { return v.size(); }
  double sum() const;
  double max_value() const;
};

// Binary density-map format: 8-byte header (h: uint32 LE, w: uint32 LE)
// followed by row-major float32 values.
void save_density(const std::filesystem::path& path, const Grid& g);
Grid load_density(const std::filesystem::path& path);

}  // namespace treeformer
