#include "treeformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "treeformer/rng.hpp"

namespace treeformer::data {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  return out;
}

bool parse_flag(const std::string& s, const std::string& id) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw std::runtime_error("manifest entry '" + id + "': bad labeled_flag '" + s + "'");
}

std::vector<TreePoint> read_points(const fs::path& path, const std::string& id) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("annotation file missing for '" + id + "': " + path.string());
  std::vector<TreePoint> pts;
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    double x, y;
    char comma;
    if (!(ss >> x >> comma >> y) || comma != ',')
      throw std::runtime_error("bad annotation line for '" + id + "': " + line);
    pts.push_back({x, y});
  }
  return pts;
}

}  // namespace

std::vector<AnnotatedImage> parse_annotations(const fs::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw std::runtime_error("manifest not found: " + manifest_path.string());
  fs::path base = manifest_path.parent_path();

  std::vector<AnnotatedImage> out;
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_csv(line);
    if (fields.size() < 3)
      throw std::runtime_error("manifest line needs id,image_path,labeled_flag: " + line);

    AnnotatedImage img;
    img.id = fields[0];
    img.is_labeled = parse_flag(fields[2], img.id);

    fs::path img_path = base / fields[1];
    if (!fs::exists(img_path))
      throw std::runtime_error("image file missing for '" + img.id + "': " + img_path.string());
    img.pixels = load_image(img_path);

    if (img.is_labeled) {
      if (fields.size() < 4 || fields[3].empty())
        throw std::runtime_error("labeled entry '" + img.id + "' has no annotation_path");
      img.points = read_points(base / fields[3], img.id);
      for (const auto& p : img.points) {
        if (p.x < 0 || p.x >= img.pixels.w || p.y < 0 || p.y >= img.pixels.h)
          throw std::runtime_error("point out of bounds for '" + img.id + "': (" +
                                   std::to_string(p.x) + "," + std::to_string(p.y) + ") in " +
                                   std::to_string(img.pixels.w) + "x" +
                                   std::to_string(img.pixels.h));
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

Grid generate_density_map(const std::vector<TreePoint>& points, int h, int w, double sigma) {
  if (h < 1 || w < 1) throw std::invalid_argument("density map dims must be >= 1");
  if (sigma <= 0) throw std::invalid_argument("sigma must be positive");
  Grid g(h, w);
  const int radius = int(std::ceil(4.0 * sigma));
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> kernel;
  for (const auto& p : points) {
    if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= h)
      throw std::invalid_argument("point out of density map bounds");
    int cx = int(std::floor(p.x));
    int cy = int(std::floor(p.y));
    int x0 = std::max(0, cx - radius), x1 = std::min(w - 1, cx + radius);
    int y0 = std::max(0, cy - radius), y1 = std::min(h - 1, cy + radius);
    kernel.assign(size_t(y1 - y0 + 1) * (x1 - x0 + 1), 0.0);
    double total = 0.0;
    size_t k = 0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x, ++k) {
        double dx = x - p.x, dy = y - p.y;
        double r2 = dx * dx + dy * dy;
        double val = (r2 <= double(radius) * radius) ? std::exp(-r2 * inv2s2) : 0.0;
        kernel[k] = val;
        total += val;
      }
    }
    // renormalize the truncated (and possibly boundary-clipped) kernel
    k = 0;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x, ++k) g.at(y, x) += kernel[k] / total;
  }
  return g;
}

Grid downsample_density(const Grid& d, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (d.h % factor != 0 || d.w % factor != 0)
    throw std::invalid_argument("downsample factor must divide both dimensions");
  Grid out(d.h / factor, d.w / factor);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) out.at(y / factor, x / factor) += d.at(y, x);
  return out;
}

AnnotatedImage apply_crop_flip(const AnnotatedImage& img, const CropFlip& cf) {
  const int c = cf.size;
  if (c > std::min(img.pixels.h, img.pixels.w))
    throw std::invalid_argument("crop larger than image");
  if (cf.x0 < 0 || cf.y0 < 0 || cf.x0 + c > img.pixels.w || cf.y0 + c > img.pixels.h)
    throw std::invalid_argument("crop window outside image");

  AnnotatedImage out;
  out.id = img.id;
  out.is_labeled = img.is_labeled;
  out.gsd = img.gsd;
  out.pixels = ImageF32(c, c);
  for (int y = 0; y < c; ++y) {
    for (int x = 0; x < c; ++x) {
      int sx = cf.flip ? (cf.x0 + c - 1 - x) : (cf.x0 + x);
      const float* s = img.pixels.px(cf.y0 + y, sx);
      float* d = out.pixels.px(y, x);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  for (const auto& p : img.points) {
    double x = p.x - cf.x0, y = p.y - cf.y0;
    if (x < 0 || x >= c || y < 0 || y >= c) continue;  // dropped from GT too
    if (cf.flip) x = double(c - 1) - x;
    if (x < 0) continue;  // fractional coordinate flipped past the border
    out.points.push_back({x, y});
  }
  return out;
}

AnnotatedImage augment(const AnnotatedImage& img, int crop, uint64_t seed) {
  if (crop > std::min(img.pixels.h, img.pixels.w))
    throw std::invalid_argument("crop larger than image");
  Rng rng = make_rng(seed);
  CropFlip cf;
  cf.size = crop;
  cf.x0 = int(std::uniform_int_distribution<int>(0, img.pixels.w - crop)(rng));
  cf.y0 = int(std::uniform_int_distribution<int>(0, img.pixels.h - crop)(rng));
  cf.flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.5;
  return apply_crop_flip(img, cf);
}

DatasetSplit split_dataset(const std::vector<std::string>& manifest_ids, double labeled_fraction,
                           uint64_t seed) {
  if (manifest_ids.empty()) throw std::invalid_argument("empty manifest");
  if (labeled_fraction <= 0.0 || labeled_fraction > 1.0)
    throw std::invalid_argument("labeled_fraction must be in (0,1]");
  std::vector<std::string> ids = manifest_ids;
  Rng rng = make_rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  size_t n_lab = std::max<size_t>(1, size_t(std::floor(labeled_fraction * double(ids.size()))));
  DatasetSplit split;
  split.seed = seed;
  split.labeled.assign(ids.begin(), ids.begin() + n_lab);
  split.unlabeled.assign(ids.begin() + n_lab, ids.end());
  return split;
}

}  // namespace treeformer::data
