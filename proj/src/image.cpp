#include "pmil/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace pmil {

Image warp_homography(const Image& src, const Eigen::Matrix3d& h, int out_h,
                      int out_w) {
  require(out_h > 0 && out_w > 0, "warp_homography: bad output size");
  const Eigen::Matrix3d hinv = h.inverse();
  Image out(out_h, out_w, src.channels);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const Eigen::Vector3d p = hinv * Eigen::Vector3d(x + 0.5, y + 0.5, 1.0);
      const double sx = p.x() / p.z(), sy = p.y() / p.z();
      for (int c = 0; c < src.channels; ++c) {
        out.at(y, x, c) = bilinear(src, sx, sy, c);
      }
    }
  }
  return out;
}

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  require(img.channels == 3, "to_gray: expected 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      out.at(y, x, 0) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) +
                        0.114f * img.at(y, x, 2);
    }
  }
  return out;
}

double image_mae(const Image& a, const Image& b) {
  require(a.same_shape(b), "image_mae: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    acc += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
  }
  return a.data.empty() ? 0.0 : acc / static_cast<double>(a.data.size());
}

void save_png(const Image& img, const std::string& path) {
  require(img.channels == 1 || img.channels == 3, "save_png: channels");
  cv::Mat m(img.height, img.width, img.channels == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.channels == 3) {
        // OpenCV stores BGR
        auto& px = m.at<cv::Vec3b>(y, x);
        for (int c = 0; c < 3; ++c) {
          const float v = std::clamp(img.at(y, x, 2 - c), 0.f, 1.f);
          px[c] = static_cast<unsigned char>(std::lround(v * 255.f));
        }
      } else {
        const float v = std::clamp(img.at(y, x, 0), 0.f, 1.f);
        m.at<unsigned char>(y, x) =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
    }
  }
  if (!cv::imwrite(path, m)) {
    throw RuntimeAbort("save_png: failed to write " + path);
  }
}

Image load_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ValidationError("load_png: cannot read " + path);
  const int ch = m.channels();
  require(ch == 1 || ch == 3, "load_png: unsupported channel count");
  Image out(m.rows, m.cols, ch);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      if (ch == 3) {
        const auto& px = m.at<cv::Vec3b>(y, x);
        for (int c = 0; c < 3; ++c) {
          out.at(y, x, 2 - c) = static_cast<float>(px[c]) / 255.f;
        }
      } else {
        out.at(y, x, 0) = static_cast<float>(m.at<unsigned char>(y, x)) / 255.f;
      }
    }
  }
  return out;
}

}  // namespace pmil
