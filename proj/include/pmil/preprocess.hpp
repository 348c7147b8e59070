#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmil/geometry.hpp"
#include "pmil/image.hpp"

// Frame selection, background extraction, and segment construction.
namespace pmil::preprocess {

struct FlowScore {
  double timestamp = 0.0;  // arrival frame of the pair
  int view_id = 0;
  double magnitude = 0.0;  // mean per-pixel flow magnitude, pixels/frame
};

struct FlowParams {
  double pyr_scale = 0.5;
  int levels = 3;
  int winsize = 15;
  int iterations = 3;
  int poly_n = 5;
  double poly_sigma = 1.2;
};

// Dense polynomial-expansion flow between consecutive frames; one score per
// pair. Frames must share a resolution.
std::vector<FlowScore> compute_flow_magnitude(
    const std::vector<Image>& frames, const std::vector<double>& timestamps,
    int view_id, const FlowParams& params = {});

// Timestamps whose magnitude reaches the top `top_percent` of scores. The
// threshold is the count-th largest magnitude, ties included, so the
// selection is a lower bound on the requested fraction and is invariant to
// input ordering.
std::vector<double> select_top_motion(const std::vector<FlowScore>& scores,
                                      double top_percent = 1.0);

// Per-pixel temporal median over the window. Needs >= 3 frames.
Image extract_background(const std::vector<Image>& frames);

struct DetectionRecord {
  double timestamp = 0.0;
  bool present = false;
  Eigen::Vector4d box = Eigen::Vector4d::Zero();  // x, y, w, h
};

struct LabelPeriod {
  int period_id = 0;
  double t_begin = 0.0;
  double t_end = 0.0;  // half-open [t_begin, t_end)
  bool label_pain = false;
};

struct VideoSegment {
  std::string segment_id;
  int period_id = 0;
  bool label_pain = false;
  std::vector<double> timestamps;
  std::vector<Eigen::Vector4d> crops;
  double frame_interval = 0.0;
  // Duration covered: frame count times the sampling interval.
  double length_seconds() const {
    return static_cast<double>(timestamps.size()) * frame_interval;
  }
};

void validate(const VideoSegment& segment);

struct SegmentRules {
  double min_seconds = 10.0;
  double max_seconds = 120.0;
  double frame_interval = 0.5;  // seconds between detection records
};

// Contiguous detected runs, never spanning a label-period boundary, cut into
// chunks of at most max_seconds; runs shorter than min_seconds are dropped.
std::vector<VideoSegment> build_segments(
    const std::vector<DetectionRecord>& detections,
    const std::vector<LabelPeriod>& periods, const SegmentRules& rules);

// A detection box as a square crop warped to the model resolution.
geometry::CropSpec crop_from_box(const Eigen::Vector4d& box, int out_resolution);

// Segment-index file: one line per segment with timestamps and crop
// rectangles.
void save_segments(const std::string& path,
                   const std::vector<VideoSegment>& segments);
std::vector<VideoSegment> load_segments(const std::string& path);

}  // namespace pmil::preprocess
