#include "pmil/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pmil::preprocess {

// Dense flow via quadratic polynomial expansion with a coarse-to-fine
// pyramid. Frames are photometrically normalized first, so a static scene or
// a pure brightness change produces exactly zero displacement everywhere.
namespace {

using Grid = std::vector<double>;  // h x w, row-major

struct Plane {
  int h = 0, w = 0;
  Grid v;
  double at(int y, int x) const {
    return v[static_cast<size_t>(std::clamp(y, 0, h - 1)) * w +
             std::clamp(x, 0, w - 1)];
  }
};

Plane normalized_gray(const Image& img) {
  const Image gray = to_gray(img);
  Plane out;
  out.h = gray.height;
  out.w = gray.width;
  out.v.resize(static_cast<size_t>(out.h) * out.w);
  double mean = 0.0;
  for (size_t i = 0; i < out.v.size(); ++i) mean += gray.data[i];
  mean /= static_cast<double>(out.v.size());
  double var = 0.0;
  for (size_t i = 0; i < out.v.size(); ++i) {
    const double d = gray.data[i] - mean;
    var += d * d;
  }
  const double scale = 1.0 / std::sqrt(var / out.v.size() + 1e-12);
  for (size_t i = 0; i < out.v.size(); ++i) {
    out.v[i] = (gray.data[i] - mean) * scale;
  }
  return out;
}

Plane downsample2(const Plane& src) {
  Plane out;
  out.h = (src.h + 1) / 2;
  out.w = (src.w + 1) / 2;
  out.v.resize(static_cast<size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      const double sum = src.at(2 * y, 2 * x) + src.at(2 * y, 2 * x + 1) +
                         src.at(2 * y + 1, 2 * x) + src.at(2 * y + 1, 2 * x + 1);
      out.v[static_cast<size_t>(y) * out.w + x] = 0.25 * sum;
    }
  }
  return out;
}

// Six quadratic-expansion coefficient planes: c, bx, by, axx, ayy, axy for
// I(p + q) ~ q^T A q + b^T q + c under a Gaussian-weighted local fit.
struct Expansion {
  int h = 0, w = 0;
  std::array<Grid, 6> coef;

  double interp(int plane, double y, double x) const {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    auto v = [&](int yy, int xx) {
      return coef[plane][static_cast<size_t>(std::clamp(yy, 0, h - 1)) * w +
                         std::clamp(xx, 0, w - 1)];
    };
    const double a = v(y0, x0) * (1 - fx) + v(y0, x0 + 1) * fx;
    const double b = v(y0 + 1, x0) * (1 - fx) + v(y0 + 1, x0 + 1) * fx;
    return a * (1 - fy) + b * fy;
  }
};

Expansion polynomial_expansion(const Plane& img, int poly_n, double sigma) {
  const int n = (poly_n - 1) / 2;
  std::vector<double> g(2 * n + 1);
  double gsum = 0.0;
  for (int i = -n; i <= n; ++i) {
    g[i + n] = std::exp(-0.5 * i * i / (sigma * sigma));
    gsum += g[i + n];
  }
  for (double& v : g) v /= gsum;

  // Separable weighted moments m_ab = sum w x^a y^b I.
  // First pass over x with kernels g, g*x, g*x^2; then over y.
  const int h = img.h, w = img.w;
  std::array<Grid, 3> row;  // a = 0, 1, 2
  for (auto& r : row) r.assign(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m0 = 0, m1 = 0, m2 = 0;
      for (int i = -n; i <= n; ++i) {
        const double val = img.at(y, x + i) * g[i + n];
        m0 += val;
        m1 += val * i;
        m2 += val * i * i;
      }
      const size_t idx = static_cast<size_t>(y) * w + x;
      row[0][idx] = m0;
      row[1][idx] = m1;
      row[2][idx] = m2;
    }
  }
  // m[ab]: 00, 10, 01, 20, 02, 11
  std::array<Grid, 6> m;
  for (auto& mm : m) mm.assign(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s00 = 0, s10 = 0, s01 = 0, s20 = 0, s02 = 0, s11 = 0;
      for (int i = -n; i <= n; ++i) {
        const int yy = std::clamp(y + i, 0, h - 1);
        const size_t idx = static_cast<size_t>(yy) * w + x;
        const double gy = g[i + n];
        s00 += row[0][idx] * gy;
        s10 += row[1][idx] * gy;
        s01 += row[0][idx] * gy * i;
        s20 += row[2][idx] * gy;
        s02 += row[0][idx] * gy * i * i;
        s11 += row[1][idx] * gy * i;
      }
      const size_t idx = static_cast<size_t>(y) * w + x;
      m[0][idx] = s00;
      m[1][idx] = s10;
      m[2][idx] = s01;
      m[3][idx] = s20;
      m[4][idx] = s02;
      m[5][idx] = s11;
    }
  }

  // Gram matrix of the weighted basis (1, x, y, x^2, y^2, xy); by symmetry
  // only a handful of scalars matter.
  double w0 = 0, w2 = 0, w4 = 0, w22 = 0;
  for (int i = -n; i <= n; ++i) {
    for (int j = -n; j <= n; ++j) {
      const double ww = g[i + n] * g[j + n];
      w0 += ww;
      w2 += ww * i * i;
      w4 += ww * i * i * i * i;
      w22 += ww * i * i * j * j;
    }
  }
  // Solve G r = m per pixel. G couples (1, x^2, y^2); x, y, xy are
  // independent. Invert the 3x3 block once.
  Eigen::Matrix3d gblock;
  gblock << w0, w2, w2, w2, w4, w22, w2, w22, w4;
  const Eigen::Matrix3d ginv = gblock.inverse();

  Expansion out;
  out.h = h;
  out.w = w;
  for (auto& c : out.coef) c.assign(static_cast<size_t>(h) * w, 0.0);
  for (size_t idx = 0; idx < m[0].size(); ++idx) {
    const Eigen::Vector3d rhs(m[0][idx], m[3][idx], m[4][idx]);
    const Eigen::Vector3d sol = ginv * rhs;
    out.coef[0][idx] = sol[0];            // c
    out.coef[1][idx] = m[1][idx] / w2;    // bx
    out.coef[2][idx] = m[2][idx] / w2;    // by
    out.coef[3][idx] = sol[1];            // axx
    out.coef[4][idx] = sol[2];            // ayy
    out.coef[5][idx] = m[5][idx] / w22;   // axy
  }
  return out;
}

struct FlowField {
  int h = 0, w = 0;
  Grid dx, dy;
};

FlowField upsample_flow(const FlowField& src, int h, int w) {
  FlowField out;
  out.h = h;
  out.w = w;
  out.dx.assign(static_cast<size_t>(h) * w, 0.0);
  out.dy.assign(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sy = std::min(y / 2, src.h - 1);
      const int sx = std::min(x / 2, src.w - 1);
      const size_t sidx = static_cast<size_t>(sy) * src.w + sx;
      const size_t idx = static_cast<size_t>(y) * w + x;
      out.dx[idx] = 2.0 * src.dx[sidx];
      out.dy[idx] = 2.0 * src.dy[sidx];
    }
  }
  return out;
}

void flow_iteration(const Expansion& e1, const Expansion& e2, FlowField& flow,
                    int winsize) {
  const int h = e1.h, w = e1.w;
  const int half = winsize / 2;
  // Per-pixel matched-expansion terms.
  Grid a11(static_cast<size_t>(h) * w), a12(a11), a22(a11), hb1(a11), hb2(a11);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t idx = static_cast<size_t>(y) * w + x;
      const double d0x = flow.dx[idx], d0y = flow.dy[idx];
      const double wy = std::clamp(y + d0y, 0.0, h - 1.0);
      const double wx = std::clamp(x + d0x, 0.0, w - 1.0);

      const double axx = 0.5 * (e1.coef[3][idx] + e2.interp(3, wy, wx));
      const double ayy = 0.5 * (e1.coef[4][idx] + e2.interp(4, wy, wx));
      const double axy = 0.25 * (e1.coef[5][idx] + e2.interp(5, wy, wx));
      const double dbx = -0.5 * (e2.interp(1, wy, wx) - e1.coef[1][idx]) +
                         axx * d0x + axy * d0y;
      const double dby = -0.5 * (e2.interp(2, wy, wx) - e1.coef[2][idx]) +
                         axy * d0x + ayy * d0y;

      // Accumulate A^T A and A^T db with A = [[axx, axy], [axy, ayy]].
      a11[idx] = axx * axx + axy * axy;
      a12[idx] = axy * (axx + ayy);
      a22[idx] = ayy * ayy + axy * axy;
      hb1[idx] = axx * dbx + axy * dby;
      hb2[idx] = axy * dbx + ayy * dby;
    }
  }
  // Box-window sums (separable) and the 2x2 solve.
  auto box = [&](Grid& grid) {
    Grid tmp(grid.size());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += grid[static_cast<size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
        }
        tmp[static_cast<size_t>(y) * w + x] = acc;
      }
    }
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += tmp[static_cast<size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
        }
        grid[static_cast<size_t>(y) * w + x] = acc;
      }
    }
  };
  box(a11);
  box(a12);
  box(a22);
  box(hb1);
  box(hb2);

  for (size_t idx = 0; idx < a11.size(); ++idx) {
    const double det = a11[idx] * a22[idx] - a12[idx] * a12[idx];
    const double reg = 1e-9 * (1.0 + a11[idx] + a22[idx]);
    const double d = det + reg * reg + reg * (a11[idx] + a22[idx]);
    flow.dx[idx] = ((a22[idx] + reg) * hb1[idx] - a12[idx] * hb2[idx]) / d;
    flow.dy[idx] = ((a11[idx] + reg) * hb2[idx] - a12[idx] * hb1[idx]) / d;
  }
}

FlowField dense_flow(const Plane& f1, const Plane& f2,
                     const FlowParams& params) {
  std::vector<Plane> pyr1{f1}, pyr2{f2};
  for (int level = 1; level < params.levels; ++level) {
    if (pyr1.back().h < 2 * params.poly_n || pyr1.back().w < 2 * params.poly_n) {
      break;
    }
    pyr1.push_back(downsample2(pyr1.back()));
    pyr2.push_back(downsample2(pyr2.back()));
  }

  FlowField flow;
  for (size_t level = pyr1.size(); level-- > 0;) {
    const Plane& p1 = pyr1[level];
    const Plane& p2 = pyr2[level];
    if (flow.h == 0) {
      flow.h = p1.h;
      flow.w = p1.w;
      flow.dx.assign(static_cast<size_t>(p1.h) * p1.w, 0.0);
      flow.dy.assign(static_cast<size_t>(p1.h) * p1.w, 0.0);
    } else {
      flow = upsample_flow(flow, p1.h, p1.w);
    }
    const Expansion e1 =
        polynomial_expansion(p1, params.poly_n, params.poly_sigma);
    const Expansion e2 =
        polynomial_expansion(p2, params.poly_n, params.poly_sigma);
    for (int it = 0; it < params.iterations; ++it) {
      flow_iteration(e1, e2, flow, params.winsize);
    }
  }
  return flow;
}

}  // namespace

std::vector<FlowScore> compute_flow_magnitude(
    const std::vector<Image>& frames, const std::vector<double>& timestamps,
    int view_id, const FlowParams& params) {
  require(frames.size() >= 2, "compute_flow_magnitude: need >= 2 frames");
  require(frames.size() == timestamps.size(),
          "compute_flow_magnitude: one timestamp per frame");
  for (size_t i = 1; i < frames.size(); ++i) {
    require(frames[i].same_shape(frames[0]),
            "compute_flow_magnitude: resolution mismatch");
  }

  std::vector<FlowScore> scores;
  scores.reserve(frames.size() - 1);
  Plane prev = normalized_gray(frames[0]);
  for (size_t i = 1; i < frames.size(); ++i) {
    Plane next = normalized_gray(frames[i]);
    const FlowField flow = dense_flow(prev, next, params);
    double acc = 0.0;
    for (size_t idx = 0; idx < flow.dx.size(); ++idx) {
      acc += std::sqrt(flow.dx[idx] * flow.dx[idx] +
                       flow.dy[idx] * flow.dy[idx]);
    }
    FlowScore score;
    score.timestamp = timestamps[i];
    score.view_id = view_id;
    score.magnitude = acc / static_cast<double>(flow.dx.size());
    scores.push_back(score);
    prev = std::move(next);
  }
  return scores;
}

std::vector<double> select_top_motion(const std::vector<FlowScore>& scores,
                                      double top_percent) {
  require(!scores.empty(), "select_top_motion: empty scores");
  require(top_percent > 0.0 && top_percent <= 100.0,
          "select_top_motion: top_percent in (0, 100]");
  const auto n = static_cast<long long>(scores.size());
  long long count = std::llround(top_percent / 100.0 * n);
  count = std::clamp<long long>(count, 1, n);

  std::vector<double> mags;
  mags.reserve(scores.size());
  for (const auto& s : scores) mags.push_back(s.magnitude);
  std::nth_element(mags.begin(), mags.begin() + (count - 1), mags.end(),
                   std::greater<double>());
  const double threshold = mags[count - 1];

  std::vector<double> selected;
  for (const auto& s : scores) {
    if (s.magnitude >= threshold) selected.push_back(s.timestamp);
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

Image extract_background(const std::vector<Image>& frames) {
  require(frames.size() >= 3, "extract_background: need >= 3 frames");
  for (const auto& f : frames) {
    require(f.same_shape(frames[0]), "extract_background: shape mismatch");
  }
  Image out(frames[0].height, frames[0].width, frames[0].channels);
  std::vector<float> vals(frames.size());
  const size_t n = out.numel();
  const size_t half = frames.size() / 2;
  for (size_t i = 0; i < n; ++i) {
    for (size_t f = 0; f < frames.size(); ++f) vals[f] = frames[f].data[i];
    std::nth_element(vals.begin(), vals.begin() + half, vals.end());
    float median = vals[half];
    if (frames.size() % 2 == 0) {
      const float lower =
          *std::max_element(vals.begin(), vals.begin() + half);
      median = 0.5f * (median + lower);
    }
    out.data[i] = median;
  }
  return out;
}

void validate(const VideoSegment& segment) {
  require(!segment.timestamps.empty(), "VideoSegment: empty");
  require(segment.timestamps.size() == segment.crops.size(),
          "VideoSegment: one crop per frame");
  const double len = segment.length_seconds();
  require(len >= 10.0 - 1e-9 && len <= 120.0 + 1e-9,
          "VideoSegment: length must be within [10 s, 120 s]");
  for (size_t i = 1; i < segment.timestamps.size(); ++i) {
    require(segment.timestamps[i] > segment.timestamps[i - 1],
            "VideoSegment: timestamps must strictly increase");
  }
}

std::vector<VideoSegment> build_segments(
    const std::vector<DetectionRecord>& detections,
    const std::vector<LabelPeriod>& periods, const SegmentRules& rules) {
  require(rules.frame_interval > 0, "build_segments: frame_interval > 0");
  require(rules.min_seconds > 0 && rules.max_seconds >= rules.min_seconds,
          "build_segments: bad segment bounds");
  for (size_t i = 1; i < detections.size(); ++i) {
    require(detections[i].timestamp > detections[i - 1].timestamp,
            "build_segments: detections must be time-ordered");
  }

  const auto max_frames = static_cast<size_t>(
      std::llround(rules.max_seconds / rules.frame_interval));
  const auto min_frames = static_cast<size_t>(
      std::llround(rules.min_seconds / rules.frame_interval));

  std::vector<VideoSegment> out;
  for (const auto& period : periods) {
    // Runs of consecutive present detections inside this period.
    std::vector<std::pair<size_t, size_t>> runs;  // [begin, end)
    size_t begin = 0;
    bool open = false;
    for (size_t i = 0; i <= detections.size(); ++i) {
      const bool inside =
          i < detections.size() && detections[i].present &&
          detections[i].timestamp >= period.t_begin &&
          detections[i].timestamp < period.t_end;
      if (inside && !open) {
        begin = i;
        open = true;
      } else if (!inside && open) {
        runs.emplace_back(begin, i);
        open = false;
      }
    }

    int chunk_idx = 0;
    for (const auto& [run_begin, run_end] : runs) {
      for (size_t s = run_begin; s < run_end; s += max_frames) {
        const size_t e = std::min(run_end, s + max_frames);
        if (e - s < min_frames) continue;
        VideoSegment segment;
        segment.period_id = period.period_id;
        segment.label_pain = period.label_pain;
        segment.frame_interval = rules.frame_interval;
        char buf[48];
        std::snprintf(buf, sizeof(buf), "p%04d_c%03d", period.period_id,
                      chunk_idx++);
        segment.segment_id = buf;
        for (size_t i = s; i < e; ++i) {
          segment.timestamps.push_back(detections[i].timestamp);
          segment.crops.push_back(detections[i].box);
        }
        out.push_back(std::move(segment));
      }
    }
  }
  return out;
}

geometry::CropSpec crop_from_box(const Eigen::Vector4d& box,
                                 int out_resolution) {
  require(box[2] > 0 && box[3] > 0, "crop_from_box: box size must be > 0");
  geometry::CropSpec crop;
  crop.center = Eigen::Vector2d(box[0] + box[2] / 2, box[1] + box[3] / 2);
  const double side = std::max(box[2], box[3]);
  crop.size = Eigen::Vector2d(side, side);
  crop.output_resolution = Eigen::Vector2i(out_resolution, out_resolution);
  return crop;
}

void save_segments(const std::string& path,
                   const std::vector<VideoSegment>& segments) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("save_segments: cannot open " + path);
  f << "painmil-segments v1\n";
  char buf[64];
  auto f6 = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  for (const auto& s : segments) {
    f << "segment id=" << s.segment_id << " period=" << s.period_id
      << " label=" << (s.label_pain ? "pain" : "no_pain")
      << " interval=" << f6(s.frame_interval) << " frames=" << s.timestamps.size()
      << "\n";
    for (size_t i = 0; i < s.timestamps.size(); ++i) {
      const auto& b = s.crops[i];
      f << "  " << f6(s.timestamps[i]) << ' ' << f6(b[0]) << ' ' << f6(b[1])
        << ' ' << f6(b[2]) << ' ' << f6(b[3]) << "\n";
    }
  }
}

std::vector<VideoSegment> load_segments(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("load_segments: cannot open " + path);
  std::string line;
  std::getline(f, line);
  require(line == "painmil-segments v1", "load_segments: bad header");
  std::vector<VideoSegment> out;
  size_t pending = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    if (line.rfind("segment ", 0) == 0) {
      require(pending == 0, "load_segments: truncated segment");
      VideoSegment segment;
      std::string tok;
      ss >> tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        require(eq != std::string::npos, "load_segments: bad token " + tok);
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "id") segment.segment_id = val;
        else if (key == "period") segment.period_id = std::stoi(val);
        else if (key == "label") segment.label_pain = val == "pain";
        else if (key == "interval") segment.frame_interval = std::stod(val);
        else if (key == "frames") pending = std::stoul(val);
        else throw ValidationError("load_segments: unknown key " + key);
      }
      out.push_back(std::move(segment));
    } else {
      require(!out.empty() && pending > 0, "load_segments: stray frame row");
      double t;
      Eigen::Vector4d b;
      ss >> t >> b[0] >> b[1] >> b[2] >> b[3];
      require(static_cast<bool>(ss), "load_segments: malformed frame row");
      out.back().timestamps.push_back(t);
      out.back().crops.push_back(b);
      --pending;
    }
  }
  require(pending == 0, "load_segments: truncated file");
  return out;
}

}  // namespace pmil::preprocess
