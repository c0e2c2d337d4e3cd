#include "treeformer/grid.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace treeformer {

double Grid::sum() const {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double Grid::max_value() const {
  double m = v.empty() ? 0.0 : v[0];
  for (double x : v) m = std::max(m, x);
  return m;
}

namespace {
void put_u32_le(std::ofstream& f, uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                        static_cast<unsigned char>((x >> 8) & 0xff),
                        static_cast<unsigned char>((x >> 16) & 0xff),
                        static_cast<unsigned char>((x >> 24) & 0xff)};
  f.write(reinterpret_cast<char*>(b), 4);
}

uint32_t get_u32_le(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
}  // namespace

void save_density(const std::filesystem::path& path, const Grid& g) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open density file for writing: " + path.string());
  put_u32_le(f, uint32_t(g.h));
  put_u32_le(f, uint32_t(g.w));
  std::vector<float> buf(g.v.begin(), g.v.end());
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  if (!f) throw std::runtime_error("short write on density file: " + path.string());
}

Grid load_density(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open density file: " + path.string());
  uint32_t h = get_u32_le(f);
  uint32_t w = get_u32_le(f);
  if (!f) throw std::runtime_error("truncated density header: " + path.string());
  Grid g(static_cast<int>(h), static_cast<int>(w));
  std::vector<float> buf(g.size());
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  if (!f) throw std::runtime_error("truncated density payload: " + path.string());
  std::copy(buf.begin(), buf.end(), g.v.begin());
  return g;
}

}  // namespace treeformer
