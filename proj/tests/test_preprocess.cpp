#include "pmil/preprocess.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "pmil/rng.hpp"
#include "pmil/synthdata.hpp"

using namespace pmil;
using namespace pmil::preprocess;

namespace {

// Smooth random texture so the flow estimator has gradients to work with.
Image textured_image(int res, std::uint64_t seed) {
  Rng rng(seed);
  Image img(res, res, 3);
  std::vector<double> fx, fy, ph, amp;
  for (int k = 0; k < 8; ++k) {
    fx.push_back(rng.uniform(0.02, 0.2));
    fy.push_back(rng.uniform(0.02, 0.2));
    ph.push_back(rng.uniform(0, 6.28));
    amp.push_back(rng.uniform(0.05, 0.2));
  }
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      double v = 0.5;
      for (int k = 0; k < 8; ++k) {
        v += amp[k] * std::sin(fx[k] * x + fy[k] * y + ph[k]);
      }
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<float>(std::clamp(v + 0.05 * c, 0.0, 1.0));
      }
    }
  }
  return img;
}

Image shifted(const Image& src, int dx) {
  Image out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const int sx = std::clamp(x - dx, 0, src.width - 1);
      for (int c = 0; c < src.channels; ++c) {
        out.at(y, x, c) = src.at(y, sx, c);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("flow magnitude on a static pair is zero") {
  const Image frame = textured_image(64, 3);
  const auto scores =
      compute_flow_magnitude({frame, frame}, {0.0, 0.1}, 0);
  REQUIRE(scores.size() == 1);
  CHECK(scores[0].magnitude < 1e-6);
  CHECK(scores[0].timestamp == 0.1);
}

TEST_CASE("flow magnitude recovers a global 3 px shift") {
  const Image a = textured_image(128, 5);
  const Image b = shifted(a, 3);
  const auto scores = compute_flow_magnitude({a, b}, {0.0, 0.1}, 0);
  REQUIRE(scores.size() == 1);
  CHECK(scores[0].magnitude > 2.5);
  CHECK(scores[0].magnitude < 3.5);
}

TEST_CASE("pure brightness change yields near-zero flow") {
  // Keep the brighter frame inside [0, 1] so the change stays photometric.
  Image a = textured_image(128, 9);
  for (float& v : a.data) v = 0.1f + 0.6f * v;

  Image scaled = a;
  for (float& v : scaled.data) v *= 1.08f;
  CHECK(compute_flow_magnitude({a, scaled}, {0.0, 0.1}, 0)[0].magnitude < 0.5);

  Image gamma = a;
  for (float& v : gamma.data) v = std::pow(v, 0.9f);
  CHECK(compute_flow_magnitude({a, gamma}, {0.0, 0.1}, 0)[0].magnitude < 0.5);
}

TEST_CASE("flow rejects mismatched resolutions") {
  const Image a = textured_image(64, 1);
  const Image b = textured_image(32, 1);
  CHECK_THROWS_AS(compute_flow_magnitude({a, b}, {0.0, 0.1}, 0),
                  ValidationError);
}

TEST_CASE("select_top_motion") {
  SUBCASE("all-equal magnitudes select everything") {
    std::vector<FlowScore> scores;
    for (int i = 0; i < 50; ++i) scores.push_back({i * 0.1, 0, 1.0});
    CHECK(select_top_motion(scores, 1.0).size() == 50);
  }

  SUBCASE("one spike among 1000 gives ten timestamps including the spike") {
    Rng rng(17);
    std::vector<FlowScore> scores;
    for (int i = 0; i < 1000; ++i) {
      scores.push_back({static_cast<double>(i), 0, rng.uniform(0.0, 1.0)});
    }
    scores[437].magnitude = 50.0;
    const auto picked = select_top_motion(scores, 1.0);

    // Sort-based oracle: the tenth largest magnitude is the threshold.
    std::vector<double> mags;
    for (const auto& s : scores) mags.push_back(s.magnitude);
    std::sort(mags.begin(), mags.end(), std::greater<double>());
    std::vector<double> expected;
    for (const auto& s : scores) {
      if (s.magnitude >= mags[9]) expected.push_back(s.timestamp);
    }
    std::sort(expected.begin(), expected.end());

    CHECK(picked.size() == 10);
    CHECK(picked == expected);
    CHECK(std::find(picked.begin(), picked.end(), 437.0) != picked.end());
  }

  SUBCASE("percentile 100 selects everything") {
    std::vector<FlowScore> scores;
    Rng rng(3);
    for (int i = 0; i < 77; ++i) {
      scores.push_back({static_cast<double>(i), 0, rng.uniform()});
    }
    CHECK(select_top_motion(scores, 100.0).size() == 77);
  }

  SUBCASE("output is invariant to input ordering") {
    Rng rng(23);
    std::vector<FlowScore> scores;
    for (int i = 0; i < 200; ++i) {
      scores.push_back({static_cast<double>(i), 0, rng.uniform()});
    }
    const auto before = select_top_motion(scores, 5.0);
    for (size_t i = scores.size(); i > 1; --i) {
      std::swap(scores[i - 1], scores[rng.below(i)]);
    }
    CHECK(select_top_motion(scores, 5.0) == before);
  }
}

TEST_CASE("extract_background") {
  SUBCASE("constant frames reproduce the frame exactly") {
    const Image frame = textured_image(32, 11);
    const Image bg = extract_background({frame, frame, frame});
    CHECK(bg.data == frame.data);
  }

  SUBCASE("median over a moving figure recovers the true background") {
    synthdata::SceneConfig cfg;
    cfg.n_subjects = 1;
    cfg.n_views = 2;
    cfg.image_resolution = 32;
    cfg.fps = 2.0;
    cfg.seed = 5;
    const auto seq = synthdata::generate_sequence(cfg, 0, 0, 30.0, 0.0, 0);
    std::vector<Image> frames;
    for (const auto& step : seq.frames) frames.push_back(step.views[0].image);
    REQUIRE(frames.size() >= 50);
    const Image bg = extract_background(frames);
    CHECK(image_mae(bg, synthdata::background_base(cfg, 0, 0)) <= 0.02);
  }

  SUBCASE("per-window medians beat a global median under a camera nudge") {
    synthdata::SceneConfig cfg;
    cfg.n_subjects = 1;
    cfg.n_views = 2;
    cfg.image_resolution = 32;
    cfg.fps = 2.0;
    cfg.seed = 6;
    cfg.background_shift_px = 6;
    cfg.background_shift_after = 0;  // window 1 onward is nudged

    std::vector<Image> window0, window1, all;
    for (int window = 0; window < 2; ++window) {
      const auto seq =
          synthdata::generate_sequence(cfg, 0, window, 25.0, 0.0, window);
      for (const auto& step : seq.frames) {
        (window == 0 ? window0 : window1).push_back(step.views[0].image);
        all.push_back(step.views[0].image);
      }
    }
    const Image base0 = synthdata::background_base(cfg, 0, 0);
    const Image base1 = synthdata::background_base(cfg, 0, 1);
    const Image global_bg = extract_background(all);
    const double per_window_mae =
        0.5 * (image_mae(extract_background(window0), base0) +
               image_mae(extract_background(window1), base1));
    const double global_mae = 0.5 * (image_mae(global_bg, base0) +
                                     image_mae(global_bg, base1));
    CHECK(per_window_mae < global_mae);
  }
}

TEST_CASE("build_segments") {
  SegmentRules rules;
  rules.frame_interval = 0.5;

  auto full_detections = [](double seconds, double dt) {
    std::vector<DetectionRecord> out;
    for (double t = 0; t < seconds; t += dt) {
      out.push_back({t, true, {1, 2, 10, 10}});
    }
    return out;
  };

  SUBCASE("300 s fully detected cuts into 120 + 120 + 60") {
    const std::vector<LabelPeriod> periods{{0, 0.0, 300.0, true}};
    const auto segments =
        build_segments(full_detections(300.0, 0.5), periods, rules);
    REQUIRE(segments.size() == 3);
    CHECK(segments[0].length_seconds() == doctest::Approx(120.0));
    CHECK(segments[1].length_seconds() == doctest::Approx(120.0));
    CHECK(segments[2].length_seconds() == doctest::Approx(60.0));
    for (const auto& s : segments) {
      CHECK(s.label_pain);
      validate(s);
    }
  }

  SUBCASE("an 8 s run is dropped") {
    const std::vector<LabelPeriod> periods{{0, 0.0, 10.0, false}};
    const auto segments =
        build_segments(full_detections(8.0, 0.5), periods, rules);
    CHECK(segments.empty());
  }

  SUBCASE("a detection gap splits a run into independent cuts") {
    // 240 s run with a 2 s gap at t = 100: expect [0, 100) and
    // [102, 240) handled separately.
    std::vector<DetectionRecord> detections;
    for (double t = 0; t < 240.0; t += 0.5) {
      const bool present = !(t >= 100.0 && t < 102.0);
      detections.push_back({t, present, {0, 0, 5, 5}});
    }
    const std::vector<LabelPeriod> periods{{3, 0.0, 240.0, false}};
    const auto segments = build_segments(detections, periods, rules);

    // By hand: run one is 100 s (a single chunk, under the 120 s cap);
    // run two is 138 s -> 120 + 18, and the 18 s tail survives (>= 10 s).
    REQUIRE(segments.size() == 3);
    CHECK(segments[0].timestamps.front() == 0.0);
    CHECK(segments[0].length_seconds() == doctest::Approx(100.0));
    CHECK(segments[1].timestamps.front() == 102.0);
    CHECK(segments[1].length_seconds() == doctest::Approx(120.0));
    CHECK(segments[2].length_seconds() == doctest::Approx(18.0));
  }

  SUBCASE("segments never span a label-period boundary") {
    std::vector<LabelPeriod> periods{{0, 0.0, 90.0, false},
                                     {1, 90.0, 180.0, true}};
    const auto segments =
        build_segments(full_detections(180.0, 0.5), periods, rules);
    REQUIRE(segments.size() == 2);
    CHECK(segments[0].length_seconds() == doctest::Approx(90.0));
    CHECK_FALSE(segments[0].label_pain);
    CHECK(segments[1].label_pain);
    for (const auto& s : segments) {
      const bool in_first = s.timestamps.back() < 90.0;
      const bool in_second = s.timestamps.front() >= 90.0;
      CHECK((in_first || in_second));
    }
  }

  SUBCASE("every frame of every segment carries a crop") {
    const std::vector<LabelPeriod> periods{{0, 0.0, 60.0, true}};
    const auto segments =
        build_segments(full_detections(60.0, 0.5), periods, rules);
    for (const auto& s : segments) {
      CHECK(s.timestamps.size() == s.crops.size());
    }
  }
}

TEST_CASE("segment index file round-trips") {
  SegmentRules rules;
  rules.frame_interval = 1.0;
  std::vector<DetectionRecord> detections;
  for (double t = 0; t < 45.0; t += 1.0) {
    detections.push_back({t, true, {t, 2 * t, 30, 40}});
  }
  const std::vector<LabelPeriod> periods{{7, 0.0, 45.0, true}};
  const auto segments = build_segments(detections, periods, rules);
  REQUIRE_FALSE(segments.empty());

  const std::string path =
      (std::filesystem::temp_directory_path() / "pmil_segments.idx").string();
  save_segments(path, segments);
  const auto loaded = load_segments(path);
  REQUIRE(loaded.size() == segments.size());
  CHECK(loaded[0].segment_id == segments[0].segment_id);
  CHECK(loaded[0].label_pain == segments[0].label_pain);
  CHECK(loaded[0].timestamps == segments[0].timestamps);
  CHECK(loaded[0].crops[2] == segments[0].crops[2]);
  std::filesystem::remove(path);
}

TEST_CASE("crop_from_box squares the detection box") {
  const auto crop = crop_from_box({10, 20, 30, 50}, 64);
  CHECK(crop.center.x() == doctest::Approx(25.0));
  CHECK(crop.center.y() == doctest::Approx(45.0));
  CHECK(crop.size.x() == doctest::Approx(50.0));
  CHECK(crop.size.y() == doctest::Approx(50.0));
  CHECK(crop.output_resolution.x() == 64);
}
