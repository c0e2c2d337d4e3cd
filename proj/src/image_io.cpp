#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <stdexcept>

#include "treeformer/data.hpp"

namespace treeformer::data {

ImageF32 load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image: " + path.string());
  ImageF32 img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      float* d = img.px(y, x);
      d[0] = row[x][2] / 255.f;
      d[1] = row[x][1] / 255.f;
      d[2] = row[x][0] / 255.f;
    }
  }
  return img;
}

void save_image(const std::filesystem::path& path, const ImageF32& img) {
  cv::Mat bgr(img.h, img.w, CV_8UC3);
  for (int y = 0; y < img.h; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.w; ++x) {
      const float* s = img.px(y, x);
      auto q = [](float v) {
        return (unsigned char)std::lround(std::clamp(v, 0.f, 1.f) * 255.f);
      };
      row[x] = cv::Vec3b(q(s[2]), q(s[1]), q(s[0]));
    }
  }
  if (!cv::imwrite(path.string(), bgr))
    throw std::runtime_error("cannot write image: " + path.string());
}

void save_heatmap(const std::filesystem::path& path, const Grid& density) {
  cv::Mat gray(density.h, density.w, CV_8UC1);
  double mx = density.max_value();
  double scale = mx > 0 ? 255.0 / mx : 0.0;
  for (int y = 0; y < density.h; ++y)
    for (int x = 0; x < density.w; ++x)
      gray.at<unsigned char>(y, x) = (unsigned char)std::lround(density.at(y, x) * scale);
  cv::Mat color;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  if (!cv::imwrite(path.string(), color))
    throw std::runtime_error("cannot write heatmap: " + path.string());
}

}  // namespace treeformer::data
