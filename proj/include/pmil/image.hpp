#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pmil/error.hpp"

namespace pmil {

// Row-major HWC float image, values nominally in [0, 1].
// Continuous pixel coordinates: pixel (ix, iy) covers [ix, ix+1) x [iy, iy+1),
// its center is (ix + 0.5, iy + 0.5), and the image center is (w/2, h/2).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.f)
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  size_t numel() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Bilinear sample at continuous (x, y); border pixels are clamped.
inline float bilinear(const Image& img, double x, double y, int c) {
  const double u = x - 0.5, v = y - 0.5;
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto cl = [](int a, int lo, int hi) { return std::clamp(a, lo, hi); };
  const int x0c = cl(x0, 0, img.width - 1), x1c = cl(x0 + 1, 0, img.width - 1);
  const int y0c = cl(y0, 0, img.height - 1), y1c = cl(y0 + 1, 0, img.height - 1);
  const double a = img.at(y0c, x0c, c) * (1 - fx) + img.at(y0c, x1c, c) * fx;
  const double b = img.at(y1c, x0c, c) * (1 - fx) + img.at(y1c, x1c, c) * fx;
  return static_cast<float>(a * (1 - fy) + b * fy);
}

// Warps src through homography h (src pixel -> dst pixel) into an
// out_h x out_w image by inverse mapping with bilinear sampling.
Image warp_homography(const Image& src, const Eigen::Matrix3d& h, int out_h,
                      int out_w);

Image to_gray(const Image& img);

double image_mae(const Image& a, const Image& b);

// PNG round-trip is 8-bit; quantization error is within 1/510 per channel.
void save_png(const Image& img, const std::string& path);
Image load_png(const std::string& path);

}  // namespace pmil
