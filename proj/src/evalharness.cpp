#include "pmil/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "pmil/geometry.hpp"
#include "pmil/rng.hpp"

namespace pmil::evalharness {

namespace fs = std::filesystem;

double f1_unweighted(const Confusion& confusion) {
  double sum = 0.0;
  for (int cls = 0; cls < 2; ++cls) {
    const double tp = static_cast<double>(confusion.counts[cls][cls]);
    const double pred = static_cast<double>(confusion.counts[0][cls] +
                                            confusion.counts[1][cls]);
    const double truth = static_cast<double>(confusion.counts[cls][0] +
                                             confusion.counts[cls][1]);
    const double precision = pred > 0 ? tp / pred : 0.0;
    const double recall = truth > 0 ? tp / truth : 0.0;
    const double denom = precision + recall;
    sum += denom > 0 ? 2.0 * precision * recall / denom : 0.0;
  }
  return sum / 2.0;
}

double accuracy(const Confusion& confusion) {
  const double total = static_cast<double>(confusion.total());
  if (total == 0) return 0.0;
  return static_cast<double>(confusion.counts[0][0] + confusion.counts[1][1]) /
         total;
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("read_csv: cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pipeline preparation
// ---------------------------------------------------------------------------

namespace {

// One sequence buffered as 8-bit frames; the peak working set.
struct BufferedSequence {
  int subject = 0;
  int sequence_id = 0;
  int background_id = 0;
  bool label_pain = false;
  double fps = 0.0;
  std::vector<double> timestamps;
  std::vector<std::vector<std::vector<unsigned char>>> frames;  // [step][view]
  std::vector<std::vector<char>> has_box;                       // [step][view]
  std::vector<std::vector<Eigen::Vector4d>> boxes;
  std::vector<std::vector<Eigen::Matrix<double, 8, 2>>> keypoints;
  std::vector<char> has_keypoints;  // per step
  std::vector<Eigen::VectorXd> pose_params;  // empty rows for real data
  int n_views = 0;
  int resolution = 0;
};

BufferedSequence buffer_generated(const synthdata::SceneConfig& scene,
                                  int subject, int sequence_id,
                                  double seconds, double fraction,
                                  int background_id) {
  BufferedSequence buf;
  buf.subject = subject;
  buf.sequence_id = sequence_id;
  buf.background_id = background_id;
  buf.label_pain = fraction > 0.0;
  buf.fps = scene.fps;
  buf.n_views = scene.n_views;
  buf.resolution = scene.image_resolution;
  synthdata::generate_sequence_streamed(
      scene, subject, sequence_id, seconds, fraction, background_id,
      [&buf](const synthdata::TimeStep& step) {
        buf.timestamps.push_back(step.timestamp);
        buf.pose_params.push_back(step.pose_params);
        buf.has_keypoints.push_back(1);
        std::vector<std::vector<unsigned char>> views;
        std::vector<Eigen::Vector4d> boxes;
        std::vector<Eigen::Matrix<double, 8, 2>> kps;
        std::vector<char> present;
        for (const auto& frame : step.views) {
          views.push_back(mvs::encode_crop_u8(frame.image));
          boxes.push_back(frame.detection);
          kps.push_back(frame.keypoints_2d);
          present.push_back(1);
        }
        buf.frames.push_back(std::move(views));
        buf.boxes.push_back(std::move(boxes));
        buf.keypoints.push_back(std::move(kps));
        buf.has_box.push_back(std::move(present));
      });
  return buf;
}

BufferedSequence buffer_from_dataset(const synthdata::Dataset& dataset,
                                     const synthdata::SequenceEntry& entry) {
  BufferedSequence buf;
  buf.subject = entry.subject_id;
  buf.sequence_id = entry.sequence_id;
  buf.background_id = entry.background_id;
  buf.label_pain = entry.label_pain;
  buf.fps = dataset.scene.fps;
  buf.n_views = dataset.scene.n_views;
  buf.resolution = dataset.scene.image_resolution;

  std::map<double, std::map<int, const synthdata::FrameRow*>> by_time;
  for (const auto& row : entry.rows) by_time[row.timestamp][row.view_id] = &row;
  for (const auto& [t, views] : by_time) {
    buf.timestamps.push_back(t);
    std::vector<std::vector<unsigned char>> frames(buf.n_views);
    std::vector<Eigen::Vector4d> boxes(buf.n_views, Eigen::Vector4d::Zero());
    std::vector<Eigen::Matrix<double, 8, 2>> kps(
        buf.n_views, Eigen::Matrix<double, 8, 2>::Zero());
    std::vector<char> present(buf.n_views, 0);
    char step_kp = 1;
    for (int v = 0; v < buf.n_views; ++v) {
      const auto it = views.find(v);
      require(it != views.end(),
              "dataset: every view must be present per timestamp");
      const synthdata::FrameRow& row = *it->second;
      const Image img =
          load_png((fs::path(dataset.root_dir) / row.image_path).string());
      require(img.height == buf.resolution && img.width == buf.resolution,
              "dataset: image resolution mismatch");
      frames[v] = mvs::encode_crop_u8(img);
      if (row.has_box) {
        boxes[v] = row.box;
        present[v] = 1;
      }
      if (row.has_keypoints) kps[v] = row.keypoints;
      step_kp = step_kp && row.has_keypoints;
    }
    buf.frames.push_back(std::move(frames));
    buf.boxes.push_back(std::move(boxes));
    buf.keypoints.push_back(std::move(kps));
    buf.has_box.push_back(std::move(present));
    buf.has_keypoints.push_back(step_kp);
    buf.pose_params.emplace_back();
  }
  return buf;
}

std::vector<unsigned char> warp_crop(const Image& frame,
                                     const Eigen::Matrix3d& homography,
                                     int out_res) {
  return mvs::encode_crop_u8(
      warp_homography(frame, homography, out_res, out_res));
}

void absorb_sequence(PipelineData& data, const BufferedSequence& buf,
                     const std::vector<synthdata::RigCamera>& rig,
                     const PipelineConfig& cfg) {
  const int n_views = buf.n_views;
  const int n_steps = static_cast<int>(buf.timestamps.size());
  require(n_steps >= 2, "absorb_sequence: need at least 2 steps");
  const int out_res = cfg.model_resolution;

  // Motion scores summed across views per timestep; high-motion timesteps
  // feed the synthesis pool.
  std::vector<double> step_magnitude(n_steps, 0.0);
  for (int v = 0; v < n_views; ++v) {
    std::vector<Image> view_frames;
    view_frames.reserve(n_steps);
    for (int s = 0; s < n_steps; ++s) {
      view_frames.push_back(mvs::decode_crop_u8(buf.frames[s][v], buf.resolution));
    }
    const auto scores = preprocess::compute_flow_magnitude(
        view_frames, buf.timestamps, v, cfg.flow);
    for (size_t i = 0; i < scores.size(); ++i) {
      step_magnitude[i + 1] += scores[i].magnitude;
    }

    // Per-window (per-sequence) background: median over a stride sample.
    const int stride = std::max(1, n_steps / 60);
    std::vector<Image> samples;
    for (int s = 0; s < n_steps; s += stride) samples.push_back(view_frames[s]);
    data.pool.window_background[{v, buf.sequence_id}] =
        preprocess::extract_background(samples);
  }

  // Selection: top-percent by motion, or a uniform stride of the same size.
  std::vector<int> selected_steps;
  {
    std::vector<preprocess::FlowScore> scores;
    for (int s = 1; s < n_steps; ++s) {
      preprocess::FlowScore fsc;
      fsc.timestamp = static_cast<double>(s);
      fsc.view_id = -1;
      fsc.magnitude = step_magnitude[s];
      scores.push_back(fsc);
    }
    if (cfg.uniform_sampling) {
      const auto n = static_cast<long long>(scores.size());
      long long count = std::llround(cfg.top_motion_percent / 100.0 * n);
      count = std::clamp<long long>(count, 1, n);
      for (long long i = 0; i < count; ++i) {
        selected_steps.push_back(
            1 + static_cast<int>(i * n / count));
      }
    } else {
      for (const double s :
           preprocess::select_top_motion(scores, cfg.top_motion_percent)) {
        selected_steps.push_back(static_cast<int>(s));
      }
    }
  }

  for (const int s : selected_steps) {
    bool all_views = true;
    for (int v = 0; v < n_views; ++v) all_views = all_views && buf.has_box[s][v];
    if (!all_views) continue;
    mvs::PoolFrame frame;
    frame.subject = buf.subject;
    frame.sequence_id = buf.sequence_id;
    frame.timestamp = buf.timestamps[s];
    frame.pose_params = buf.pose_params[s];
    for (int v = 0; v < n_views; ++v) {
      const geometry::CropSpec crop =
          preprocess::crop_from_box(buf.boxes[s][v], out_res);
      const Eigen::Matrix3d h =
          geometry::crop_shear_homography(rig[v].view, crop);
      const Image full = mvs::decode_crop_u8(buf.frames[s][v], buf.resolution);
      frame.crops.push_back(warp_crop(full, h, out_res));
      frame.crop_homography.push_back(h);
      frame.adjusted_rotation.push_back(
          geometry::adjust_rotation_for_crop(rig[v].view, crop).rotation);
      Eigen::Matrix<double, Eigen::Dynamic, 2> kp;
      if (buf.has_keypoints[s]) {
        kp.resize(synthdata::kNumJoints, 2);
        for (int j = 0; j < synthdata::kNumJoints; ++j) {
          const Eigen::Vector3d warped =
              h * Eigen::Vector3d(buf.keypoints[s][v](j, 0),
                                  buf.keypoints[s][v](j, 1), 1.0);
          kp.row(j) = (warped.head<2>() / warped.z()).transpose();
        }
      }
      frame.keypoints_crop.push_back(std::move(kp));
    }
    data.pool.frames.push_back(std::move(frame));
  }
  data.pool.sequence_window[buf.sequence_id] = buf.sequence_id;

  // Classification segments: per view, at head_fps, built from detections.
  const int stride =
      std::max(1, static_cast<int>(std::llround(buf.fps / cfg.head_fps)));
  require(std::abs(stride * cfg.head_fps - buf.fps) < 1e-6,
          "pipeline: head_fps must divide the capture rate");
  preprocess::SegmentRules rules;
  rules.min_seconds = cfg.min_segment_seconds;
  rules.max_seconds = cfg.max_segment_seconds;
  rules.frame_interval = stride / buf.fps;
  std::vector<preprocess::LabelPeriod> periods(1);
  periods[0].period_id = buf.sequence_id;
  periods[0].t_begin = 0.0;
  periods[0].t_end = buf.timestamps.back() + 1.0;
  periods[0].label_pain = buf.label_pain;

  for (int v = 0; v < n_views; ++v) {
    std::vector<preprocess::DetectionRecord> detections;
    for (int s = 0; s < n_steps; s += stride) {
      preprocess::DetectionRecord rec;
      rec.timestamp = buf.timestamps[s];
      rec.present = buf.has_box[s][v] != 0;
      rec.box = buf.boxes[s][v];
      detections.push_back(rec);
    }
    const auto segments = preprocess::build_segments(detections, periods, rules);
    for (const auto& segment : segments) {
      SegmentFrames sf;
      sf.segment_id = segment.segment_id + "_v" + std::to_string(v);
      sf.subject = buf.subject;
      sf.sequence_id = buf.sequence_id;
      sf.view = v;
      sf.label_pain = segment.label_pain;
      sf.frame_interval = segment.frame_interval;
      sf.timestamps = segment.timestamps;
      for (size_t i = 0; i < segment.timestamps.size(); ++i) {
        const int s = static_cast<int>(
            std::llround(segment.timestamps[i] * buf.fps));
        const geometry::CropSpec crop =
            preprocess::crop_from_box(segment.crops[i], out_res);
        const Eigen::Matrix3d h =
            geometry::crop_shear_homography(rig[v].view, crop);
        const Image full = mvs::decode_crop_u8(buf.frames[s][v], buf.resolution);
        sf.crops.push_back(warp_crop(full, h, out_res));
      }
      data.segments.push_back(std::move(sf));
    }
  }
}

void finalize_backgrounds(PipelineData& data) {
  // Corpus-wide fallback: median over every window median. Used by the
  // uniform-sampling ablation, where per-window backgrounds are disabled.
  const int n_views = data.n_views;
  data.pool.global_background.resize(n_views);
  for (int v = 0; v < n_views; ++v) {
    std::vector<Image> medians;
    for (const auto& [key, bg] : data.pool.window_background) {
      if (key.first == v) medians.push_back(bg);
    }
    require(!medians.empty(), "finalize_backgrounds: no windows for a view");
    data.pool.global_background[v] =
        medians.size() >= 3 ? preprocess::extract_background(medians)
                            : medians.front();
  }
}

}  // namespace

PipelineData prepare_pipeline_data(const PipelineConfig& cfg) {
  synthdata::validate(cfg.scene);
  PipelineData data;
  data.resolution = cfg.model_resolution;
  data.n_views = cfg.scene.n_views;
  data.pool.resolution = cfg.model_resolution;
  data.pool.n_views = cfg.scene.n_views;

  const auto rig = synthdata::make_rig(cfg.scene);
  for (int subject = 0; subject < cfg.scene.n_subjects; ++subject) {
    Rng split = Rng(cfg.scene.seed).fork(0x1AB).fork(subject);
    int n_pain = cfg.gen.sequences_per_subject / 2 +
                 static_cast<int>(split.below(3)) - 1;
    n_pain = std::clamp(n_pain, 1, cfg.gen.sequences_per_subject - 1);
    for (int q = 0; q < cfg.gen.sequences_per_subject; ++q) {
      const int seq_id = subject * cfg.gen.sequences_per_subject + q;
      const double fraction = q < n_pain ? cfg.gen.positive_fraction : 0.0;
      const BufferedSequence buf = buffer_generated(
          cfg.scene, subject, seq_id, cfg.gen.sequence_seconds, fraction, q);
      absorb_sequence(data, buf, rig, cfg);
    }
  }
  finalize_backgrounds(data);
  return data;
}

PipelineData prepare_pipeline_data(const synthdata::Dataset& dataset,
                                   const PipelineConfig& cfg) {
  PipelineData data;
  data.resolution = cfg.model_resolution;
  data.n_views = dataset.scene.n_views;
  data.pool.resolution = cfg.model_resolution;
  data.pool.n_views = dataset.scene.n_views;

  std::vector<synthdata::RigCamera> rig;
  for (const auto& view : dataset.rig) {
    synthdata::RigCamera cam;
    cam.view = view;
    rig.push_back(cam);
  }
  for (const auto& entry : dataset.sequences) {
    const BufferedSequence buf = buffer_from_dataset(dataset, entry);
    absorb_sequence(data, buf, rig, cfg);
  }
  finalize_backgrounds(data);
  return data;
}

painmil::BagOfClips bag_from_segment(mvs::MvsModel<float>& encoder,
                                     const SegmentFrames& segment,
                                     int clip_len, double head_fps) {
  (void)head_fps;
  painmil::BagOfClips bag;
  bag.segment_id = segment.segment_id;
  bag.subject = segment.subject;
  bag.label_pain = segment.label_pain;

  const int res = encoder.arch().resolution;
  const int n_frames = static_cast<int>(segment.crops.size());
  const int pose_dim = encoder.arch().pose_dim();
  Eigen::MatrixXf features(n_frames, pose_dim);
  constexpr int kChunk = 64;
  for (int begin = 0; begin < n_frames; begin += kChunk) {
    const int count = std::min(kChunk, n_frames - begin);
    nn::Tensor<float> x({count, 3, res, res});
    for (int i = 0; i < count; ++i) {
      mvs::image_into_tensor(
          x, i, mvs::decode_crop_u8(segment.crops[begin + i], res));
    }
    const auto latents = encoder.encode_batch(x);
    for (int i = 0; i < count; ++i) {
      for (int d = 0; d < pose_dim; ++d) {
        features(begin + i, d) =
            latents.pose.v[static_cast<size_t>(i) * pose_dim + d];
      }
    }
  }

  const int n_clips = n_frames / clip_len;
  for (int c = 0; c < n_clips; ++c) {
    painmil::ClipFeature clip;
    clip.frames = features.middleRows(c * clip_len, clip_len);
    bag.clips.push_back(std::move(clip));
  }
  return bag;
}

// ---------------------------------------------------------------------------
// LOSO
// ---------------------------------------------------------------------------

int most_balanced_subject(const std::vector<SegmentFrames>& segments) {
  std::map<int, std::pair<int, int>> counts;  // subject -> (pain, nopain)
  for (const auto& s : segments) {
    auto& c = counts[s.subject];
    (s.label_pain ? c.first : c.second) += 1;
  }
  require(!counts.empty(), "most_balanced_subject: no segments");
  int best = -1;
  int best_gap = std::numeric_limits<int>::max();
  for (const auto& [subject, c] : counts) {
    const int gap = std::abs(c.first - c.second);
    if (gap < best_gap) {
      best_gap = gap;
      best = subject;
    }
  }
  return best;
}

int validation_subject_for_fold(int designated, int test_subject,
                                const std::vector<int>& subjects) {
  if (designated != test_subject) return designated;
  for (const int s : subjects) {
    if (s != test_subject) return s;
  }
  throw ValidationError("validation_subject_for_fold: only one subject");
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0
                   : std::accumulate(v.begin(), v.end(), 0.0) /
                         static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (const double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

void write_fold_metrics(const std::string& path,
                        const std::vector<painmil::EpochMetrics>& epochs) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("write_fold_metrics: cannot open " + path);
  f << "epoch,train_loss,val_f1,val_acc,test_f1,test_acc\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f\n", e.epoch,
                  e.train_loss, e.val_f1, e.val_acc, e.test_f1, e.test_acc);
    f << buf;
  }
}

}  // namespace

LosoSummary run_loso(const PipelineData& data, const LosoOptions& opt) {
  std::set<int> subject_set;
  for (const auto& s : data.segments) subject_set.insert(s.subject);
  for (const auto& f : data.pool.frames) subject_set.insert(f.subject);
  const std::vector<int> subjects(subject_set.begin(), subject_set.end());
  require(subjects.size() >= 3, "run_loso: need at least 3 subjects");

  const int designated = most_balanced_subject(data.segments);
  LosoSummary summary;

  if (!opt.run_dir.empty()) {
    fs::create_directories(opt.run_dir);
    save_segment_table((fs::path(opt.run_dir) / "segments.idx").string(),
                       data.segments);
  }

  Rng fold_seeds = Rng(opt.seed).fork(0x1050);
  for (size_t fold = 0; fold < subjects.size(); ++fold) {
    const int test_subject = subjects[fold];
    const bool has_segments =
        std::any_of(data.segments.begin(), data.segments.end(),
                    [test_subject](const SegmentFrames& s) {
                      return s.subject == test_subject;
                    });
    if (!has_segments) {
      std::fprintf(stderr, "run_loso: fold skipped: subject %d has no segments\n",
                   test_subject);
      summary.skipped_subjects.push_back(test_subject);
      continue;
    }
    const int val_subject =
        validation_subject_for_fold(designated, test_subject, subjects);

    FoldResult fold_result;
    fold_result.test_subject = test_subject;
    fold_result.validation_subject = val_subject;

    // Backbone: subject-exclusive for the test subject. Self-supervised, so
    // the validation subject may stay in.
    mvs::MvsTrainConfig mvs_cfg = opt.mvs_cfg;
    mvs_cfg.exclude_subject = test_subject;
    mvs_cfg.seed = fold_seeds.fork(2 * fold).next_u64();
    mvs::TrainedMvs backbone = mvs::train_mvs(data.pool, opt.arch, mvs_cfg);

    std::vector<painmil::BagOfClips> train_bags, val_bags, test_bags;
    for (const auto& segment : data.segments) {
      painmil::BagOfClips bag = bag_from_segment(
          *backbone.model, segment, opt.head_arch.clip_len, opt.head_fps);
      if (bag.size() < 1) continue;
      if (segment.subject == test_subject) {
        test_bags.push_back(std::move(bag));
      } else if (segment.subject == val_subject) {
        val_bags.push_back(std::move(bag));
        if (!opt.exclude_validation_from_head_training) {
          train_bags.push_back(val_bags.back());
        }
      } else {
        train_bags.push_back(std::move(bag));
      }
    }

    painmil::HeadTrainConfig head_cfg = opt.head_cfg;
    head_cfg.seed = fold_seeds.fork(2 * fold + 1).next_u64();
    painmil::TrainedHead trained = painmil::train_pain_head(
        train_bags, val_bags, test_bags, opt.head_arch, head_cfg);

    fold_result.epochs = trained.per_epoch;
    fold_result.best_val_epoch = trained.best_epoch;
    int best_test_epoch = 1;
    for (const auto& e : trained.per_epoch) {
      if (e.test_f1 > fold_result.oracle_f1) {
        fold_result.oracle_f1 = e.test_f1;
        fold_result.oracle_acc = e.test_acc;
        best_test_epoch = e.epoch;
      }
      if (e.epoch == trained.best_epoch) {
        fold_result.true_f1 = e.test_f1;
        fold_result.true_acc = e.test_acc;
      }
    }
    fold_result.best_test_epoch = best_test_epoch;

    if (!opt.run_dir.empty()) {
      const fs::path fold_dir =
          fs::path(opt.run_dir) / ("fold_" + std::to_string(test_subject));
      fs::create_directories(fold_dir / "checkpoints");
      write_fold_metrics((fold_dir / "metrics.csv").string(),
                         fold_result.epochs);
      painmil::export_predictions(
          (fold_dir / "predictions.csv").string(),
          painmil::evaluate_bags(*trained.head, test_bags, head_cfg.schedule));
      mvs::save_mvs_model((fold_dir / "checkpoints" / "backbone.ckpt").string(),
                          opt.arch, *backbone.model, nullptr);
      painmil::save_head_model(
          (fold_dir / "checkpoints" / "head_best.ckpt").string(),
          opt.head_arch, *trained.head);
      mvs::save_curve((fold_dir / "loss_curve.csv").string(), backbone.curve);
    }
    summary.folds.push_back(std::move(fold_result));
  }

  std::vector<double> tf1, ta, of1, oa;
  for (const auto& f : summary.folds) {
    tf1.push_back(f.true_f1);
    ta.push_back(f.true_acc);
    of1.push_back(f.oracle_f1);
    oa.push_back(f.oracle_acc);
  }
  summary.mean_true_f1 = mean_of(tf1);
  summary.std_true_f1 = std_of(tf1);
  summary.mean_true_acc = mean_of(ta);
  summary.std_true_acc = std_of(ta);
  summary.mean_oracle_f1 = mean_of(of1);
  summary.std_oracle_f1 = std_of(of1);
  summary.mean_oracle_acc = mean_of(oa);
  summary.std_oracle_acc = std_of(oa);

  if (!opt.run_dir.empty()) {
    save_summary((fs::path(opt.run_dir) / "summary.csv").string(), summary);
  }
  return summary;
}

void save_summary(const std::string& path, const LosoSummary& summary) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("save_summary: cannot open " + path);
  f << "fold,test_subject,validation_subject,best_val_epoch,best_test_epoch,"
       "true_f1,true_acc,oracle_f1,oracle_acc\n";
  char buf[200];
  for (size_t i = 0; i < summary.folds.size(); ++i) {
    const auto& fr = summary.folds[i];
    std::snprintf(buf, sizeof(buf), "%zu,%d,%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n", i,
                  fr.test_subject, fr.validation_subject, fr.best_val_epoch,
                  fr.best_test_epoch, fr.true_f1, fr.true_acc, fr.oracle_f1,
                  fr.oracle_acc);
    f << buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,,,,,%.6f,%.6f,%.6f,%.6f\n",
                summary.mean_true_f1, summary.mean_true_acc,
                summary.mean_oracle_f1, summary.mean_oracle_acc);
  f << buf;
  std::snprintf(buf, sizeof(buf), "std,,,,,%.6f,%.6f,%.6f,%.6f\n",
                summary.std_true_f1, summary.std_true_acc,
                summary.std_oracle_f1, summary.std_oracle_acc);
  f << buf;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

std::vector<int> rank_by_distance(const Eigen::MatrixXd& rotated_query,
                                  const std::vector<Eigen::MatrixXd>& gallery) {
  require(!gallery.empty(), "rank_by_distance: empty gallery");
  std::vector<std::pair<double, int>> scored;
  scored.reserve(gallery.size());
  for (size_t g = 0; g < gallery.size(); ++g) {
    scored.emplace_back((rotated_query - gallery[g]).norm(),
                        static_cast<int>(g));
  }
  std::stable_sort(scored.begin(), scored.end());
  std::vector<int> order;
  order.reserve(scored.size());
  for (const auto& [dist, idx] : scored) order.push_back(idx);
  return order;
}

namespace {

double pose_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() == 0 || b.size() == 0 || a.size() != b.size()) {
    return std::numeric_limits<double>::infinity();
  }
  double acc = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    acc += std::abs(std::remainder(a[i] - b[i], 2 * M_PI));
  }
  return acc / static_cast<double>(a.size());
}

Eigen::MatrixXd encode_pose(mvs::MvsModel<float>& model,
                            const std::vector<unsigned char>& crop, int res) {
  return model.encode(mvs::decode_crop_u8(crop, res)).pose;
}

}  // namespace

NnProbeReport nn_probe(mvs::MvsModel<float>& model,
                       const mvs::TrainingPool& pool, int query_subject,
                       double pose_tolerance_rad, int max_queries,
                       std::uint64_t seed) {
  const int res = pool.resolution;
  const int n_views = pool.n_views;
  std::vector<int> query_frames, gallery_frames;
  for (size_t i = 0; i < pool.frames.size(); ++i) {
    (pool.frames[i].subject == query_subject ? query_frames : gallery_frames)
        .push_back(static_cast<int>(i));
  }
  require(!gallery_frames.empty(), "nn_probe: empty gallery");
  require(!query_frames.empty(), "nn_probe: no query frames");

  // Gallery latents per view, computed once.
  std::vector<std::vector<Eigen::MatrixXd>> gallery_pose(n_views);
  for (int v = 0; v < n_views; ++v) {
    gallery_pose[v].reserve(gallery_frames.size());
    for (const int g : gallery_frames) {
      gallery_pose[v].push_back(encode_pose(model, pool.frames[g].crops[v], res));
    }
  }

  Rng rng = Rng(seed).fork(0x44);
  NnProbeReport report;
  int hits1 = 0, hits3 = 0;
  double chance_acc = 0.0;

  const int n_queries =
      std::min<int>(max_queries, static_cast<int>(query_frames.size()));
  for (int qi = 0; qi < n_queries; ++qi) {
    const int q = query_frames[qi * static_cast<int>(query_frames.size()) /
                               n_queries];
    const auto& qf = pool.frames[q];
    const int view_i = static_cast<int>(rng.below(n_views));
    int view_j = static_cast<int>(rng.below(n_views));

    const Eigen::MatrixXd pose_i = encode_pose(model, qf.crops[view_i], res);

    // Per-item rotation: each gallery frame has its own crop-adjusted view.
    std::vector<std::pair<double, int>> scored;
    std::vector<char> correct(gallery_frames.size(), 0);
    int n_correct = 0;
    for (size_t gi = 0; gi < gallery_frames.size(); ++gi) {
      const auto& gf = pool.frames[gallery_frames[gi]];
      const Eigen::Matrix3d rot = gf.adjusted_rotation[view_j] *
                                  qf.adjusted_rotation[view_i].transpose();
      const Eigen::MatrixXd rotated = pose_i * rot.transpose();
      scored.emplace_back((rotated - gallery_pose[view_j][gi]).norm(),
                          static_cast<int>(gi));
      if (pose_distance(qf.pose_params, gf.pose_params) <= pose_tolerance_rad) {
        correct[gi] = 1;
        ++n_correct;
      }
    }
    if (n_correct == 0) continue;  // no attainable match for this query
    std::stable_sort(scored.begin(), scored.end());

    RetrievalProbe probe;
    probe.query_frame = q;
    probe.query_view = view_i;
    probe.target_view = view_j;
    probe.rank_of_ground_truth = 0;
    for (size_t r = 0; r < scored.size(); ++r) {
      if (r < 8) probe.ranked.push_back(gallery_frames[scored[r].second]);
      if (probe.rank_of_ground_truth == 0 && correct[scored[r].second]) {
        probe.rank_of_ground_truth = static_cast<int>(r) + 1;
      }
    }
    probe.top1_correct = probe.rank_of_ground_truth == 1;
    probe.top3_correct =
        probe.rank_of_ground_truth >= 1 && probe.rank_of_ground_truth <= 3;
    hits1 += probe.top1_correct ? 1 : 0;
    hits3 += probe.top3_correct ? 1 : 0;
    chance_acc +=
        static_cast<double>(n_correct) / static_cast<double>(gallery_frames.size());
    report.probes.push_back(std::move(probe));
  }

  require(!report.probes.empty(), "nn_probe: no queries with attainable matches");
  const double n = static_cast<double>(report.probes.size());
  report.top1_accuracy = hits1 / n;
  report.top3_accuracy = hits3 / n;
  report.chance_rate = chance_acc / n;
  return report;
}

namespace {

struct Silhouette {
  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  Eigen::Vector3d mean_color = Eigen::Vector3d::Zero();
  int area = 0;
};

Silhouette silhouette_of(const Image& recon, const Image& background,
                         double threshold = 0.10) {
  Silhouette s;
  for (int y = 0; y < recon.height; ++y) {
    for (int x = 0; x < recon.width; ++x) {
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) {
        diff += std::abs(recon.at(y, x, c) - background.at(y, x, c));
      }
      if (diff / 3.0 > threshold) {
        s.centroid += Eigen::Vector2d(x + 0.5, y + 0.5);
        for (int c = 0; c < 3; ++c) s.mean_color[c] += recon.at(y, x, c);
        ++s.area;
      }
    }
  }
  if (s.area > 0) {
    s.centroid /= s.area;
    s.mean_color /= s.area;
  }
  return s;
}

}  // namespace

AppearanceSwapReport appearance_swap_probe(mvs::MvsModel<float>& model,
                                           const mvs::TrainingPool& pool,
                                           int max_pairs, std::uint64_t seed) {
  const int res = pool.resolution;
  Rng rng = Rng(seed).fork(0x5A);
  AppearanceSwapReport report;
  double shift_acc = 0.0, drift_acc = 0.0, self_acc = 0.0;

  require(pool.frames.size() >= 2, "appearance_swap_probe: pool too small");
  for (int attempt = 0; attempt < 8 * max_pairs && report.n_pairs < max_pairs;
       ++attempt) {
    const auto& qf =
        pool.frames[static_cast<size_t>(rng.below(pool.frames.size()))];
    const auto& df =
        pool.frames[static_cast<size_t>(rng.below(pool.frames.size()))];
    if (qf.subject == df.subject) continue;
    const int v = static_cast<int>(rng.below(pool.n_views));

    const Image query = mvs::decode_crop_u8(qf.crops[v], res);
    const Image donor = mvs::decode_crop_u8(df.crops[v], res);
    const int window = pool.sequence_window.at(qf.sequence_id);
    const Image bg = warp_homography(pool.window_background.at({v, window}),
                                     qf.crop_homography[v], res, res);

    const mvs::EncoderOutput own = model.encode(query);
    const mvs::EncoderOutput other = model.encode(donor);
    const Image recon_own = model.decode(own.pose, own.appearance, bg);
    const Image recon_swap = model.decode(own.pose, other.appearance, bg);
    const Image recon_self = model.decode(own.pose, own.appearance, bg);
    self_acc += image_mae(recon_own, recon_self);

    const Silhouette sil_own = silhouette_of(recon_own, bg);
    const Silhouette sil_swap = silhouette_of(recon_swap, bg);
    if (sil_own.area < 8 || sil_swap.area < 8 ||
        qf.keypoints_crop[v].rows() == 0) {
      continue;
    }
    const Eigen::Vector3d donor_color = synthdata::subject_palette(df.subject);
    shift_acc += (sil_own.mean_color - donor_color).norm() -
                 (sil_swap.mean_color - donor_color).norm();

    const Eigen::Vector2d kp_centroid =
        qf.keypoints_crop[v].colwise().mean().transpose();
    drift_acc += (sil_swap.centroid - kp_centroid).norm() -
                 (sil_own.centroid - kp_centroid).norm();
    ++report.n_pairs;
  }
  require(report.n_pairs > 0, "appearance_swap_probe: no valid pairs");
  report.mean_color_shift = shift_acc / report.n_pairs;
  report.mean_keypoint_drift = drift_acc / report.n_pairs;
  report.mean_self_swap_mae = self_acc / report.n_pairs;
  return report;
}

// ---------------------------------------------------------------------------
// Scratch preset
// ---------------------------------------------------------------------------

ScratchResult train_scratch(const PipelineData& data, int test_subject,
                            int val_subject, const ScratchOptions& opt) {
  require(opt.head_arch.clip_len == 1,
          "train_scratch: joint training runs on frame inputs");
  require(opt.head_arch.feature_dim == opt.arch.pose_dim(),
          "train_scratch: head width must match the pose latent");
  const int res = opt.arch.resolution;
  const int pdim = opt.arch.pose_dim();

  std::vector<const SegmentFrames*> train_segments, val_segments,
      test_segments;
  for (const auto& segment : data.segments) {
    if (segment.subject == test_subject) test_segments.push_back(&segment);
    else if (segment.subject == val_subject) val_segments.push_back(&segment);
    else train_segments.push_back(&segment);
  }
  require(!train_segments.empty(), "train_scratch: no training segments");

  mvs::MvsModel<float> model(opt.arch);
  painmil::PainHead<float> head(opt.head_arch);
  std::vector<nn::ParamBlock<float>*> params = model.params();
  for (auto* p : head.params()) params.push_back(p);
  nn::Adam<float> adam(params, static_cast<float>(opt.learning_rate));
  Rng rng = Rng(opt.seed).fork(0x5C4A);

  double count_pain = 0, count_nopain = 0;
  for (const auto* segment : train_segments) {
    (segment->label_pain ? count_pain : count_nopain) +=
        static_cast<double>(segment->crops.size());
  }
  require(count_pain > 0 && count_nopain > 0,
          "train_scratch: training needs both classes");
  const Eigen::Vector2d weights =
      painmil::ce_class_weights(count_pain, count_nopain);

  auto encode_frames = [&](const SegmentFrames& segment) {
    const int n = static_cast<int>(segment.crops.size());
    nn::Tensor<float> x({n, 3, res, res});
    for (int i = 0; i < n; ++i) {
      mvs::image_into_tensor(x, i, mvs::decode_crop_u8(segment.crops[i], res));
    }
    return x;
  };
  auto clips_from_pose = [&](const nn::Tensor<float>& pose) {
    std::vector<painmil::ClipFeature> clips(pose.dim(0));
    for (int i = 0; i < pose.dim(0); ++i) {
      clips[i].frames.resize(1, pdim);
      for (int d = 0; d < pdim; ++d) {
        clips[i].frames(0, d) = pose.v[static_cast<size_t>(i) * pdim + d];
      }
    }
    return clips;
  };

  auto evaluate = [&](const std::vector<const SegmentFrames*>& segments,
                      double* f1, double* acc) {
    Confusion confusion;
    Rng unused(0);
    for (const auto* segment : segments) {
      const auto latents = model.encode_batch(encode_frames(*segment));
      const auto clips = clips_from_pose(latents.pose);
      const nn::Tensor<float> probs = head.forward(clips, false, unused);
      const int n = static_cast<int>(clips.size());
      Eigen::MatrixXd pm(n, 2);
      for (int i = 0; i < n; ++i) {
        pm(i, 0) = probs.v[2 * static_cast<size_t>(i)];
        pm(i, 1) = probs.v[2 * static_cast<size_t>(i) + 1];
      }
      const auto pred = painmil::mil_aggregate(
          pm, painmil::k_from_divisor(n, opt.schedule.test_divisor));
      confusion.add(segment->label_pain, pred.bag[1] > pred.bag[0]);
    }
    *f1 = f1_unweighted(confusion);
    *acc = accuracy(confusion);
  };

  ScratchResult result;
  std::vector<int> order(train_segments.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<size_t>(rng.below(i))]);
    }
    double loss_acc = 0.0;
    for (const int idx : order) {
      const SegmentFrames& segment = *train_segments[static_cast<size_t>(idx)];
      const auto latents = model.encode_batch(encode_frames(segment));
      const auto clips = clips_from_pose(latents.pose);
      const nn::Tensor<float> probs = head.forward(clips, true, rng);
      const int n = static_cast<int>(clips.size());
      Eigen::MatrixXd pm(n, 2);
      for (int i = 0; i < n; ++i) {
        pm(i, 0) = probs.v[2 * static_cast<size_t>(i)];
        pm(i, 1) = probs.v[2 * static_cast<size_t>(i) + 1];
      }
      const int k = painmil::choose_k(n, opt.schedule, true, rng);
      const auto pred = painmil::mil_aggregate(pm, k);
      const int label = segment.label_pain ? 1 : 0;
      const double w = label ? weights[1] : weights[0];
      const auto ce = painmil::weighted_ce(pred.bag, segment.label_pain,
                                           count_pain, count_nopain);
      loss_acc += ce.loss;
      if (!std::isfinite(ce.loss)) {
        throw RuntimeAbort("train_scratch: non-finite loss");
      }
      nn::Tensor<float> dprobs(probs.shape);
      const double denom = std::max(pred.bag[label], 1e-7) * k;
      for (const int sel : pred.selected) {
        dprobs.v[2 * static_cast<size_t>(sel) + label] =
            static_cast<float>(-w / denom);
      }
      adam.zero_grad();
      const nn::Tensor<float> dfeat = head.backward(dprobs);
      nn::Tensor<float> dpose({n, pdim});
      std::copy(dfeat.v.begin(), dfeat.v.end(), dpose.v.begin());
      nn::Tensor<float> dapp({n, opt.arch.appearance_dim});
      model.encode_backward(dpose, dapp);
      adam.step();
    }

    if (epoch % opt.eval_every == 0 || epoch == opt.epochs) {
      painmil::EpochMetrics m;
      m.epoch = epoch;
      m.train_loss = loss_acc / static_cast<double>(train_segments.size());
      if (!val_segments.empty()) evaluate(val_segments, &m.val_f1, &m.val_acc);
      if (!test_segments.empty()) {
        evaluate(test_segments, &m.test_f1, &m.test_acc);
      }
      result.metrics.push_back(m);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Segment table + clip export
// ---------------------------------------------------------------------------

void save_segment_table(const std::string& path,
                        const std::vector<SegmentFrames>& segments) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("save_segment_table: cannot open " + path);
  f << "segment_table v1\n";
  char buf[32];
  for (const auto& s : segments) {
    f << s.segment_id << ' ' << s.subject << ' ' << s.sequence_id << ' '
      << s.view << ' ' << (s.label_pain ? "pain" : "no_pain") << ' ';
    std::snprintf(buf, sizeof(buf), "%.6f", s.frame_interval);
    f << buf << ' ';
    for (size_t i = 0; i < s.timestamps.size(); ++i) {
      if (i) f << ';';
      std::snprintf(buf, sizeof(buf), "%.6f", s.timestamps[i]);
      f << buf;
    }
    f << "\n";
  }
}

std::vector<SegmentTableRow> load_segment_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("load_segment_table: cannot open " + path);
  std::string line;
  std::getline(f, line);
  require(line == "segment_table v1", "load_segment_table: bad header");
  std::vector<SegmentTableRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    SegmentTableRow row;
    std::string label, times;
    ss >> row.segment_id >> row.subject >> row.sequence_id >> row.view >>
        label >> row.frame_interval >> times;
    require(static_cast<bool>(ss), "load_segment_table: malformed row");
    row.label_pain = label == "pain";
    std::stringstream ts(times);
    std::string tok;
    while (std::getline(ts, tok, ';')) row.timestamps.push_back(std::stod(tok));
    rows.push_back(std::move(row));
  }
  return rows;
}

void export_clip_strips(const synthdata::Dataset& dataset,
                        const std::vector<SegmentTableRow>& table,
                        const std::string& predictions_csv, int top_n,
                        int clip_len, const std::string& out_dir) {
  struct PredRow {
    std::string segment_id;
    double y_pain = 0.0;
    std::vector<int> selected;
  };
  std::vector<PredRow> preds;
  {
    const auto rows = read_csv_rows(predictions_csv);
    for (size_t i = 1; i < rows.size(); ++i) {
      PredRow p;
      p.segment_id = rows[i][0];
      std::stringstream ss(rows[i][3]);
      std::string tok;
      while (std::getline(ss, tok, ';')) {
        if (!tok.empty()) p.selected.push_back(std::stoi(tok));
      }
      p.y_pain = std::stod(rows[i][5]);
      preds.push_back(std::move(p));
    }
  }
  std::stable_sort(preds.begin(), preds.end(),
                   [](const PredRow& a, const PredRow& b) {
                     return a.y_pain > b.y_pain;
                   });

  std::map<std::string, const SegmentTableRow*> by_id;
  for (const auto& row : table) by_id[row.segment_id] = &row;

  fs::create_directories(out_dir);
  const int res = 64;
  int exported = 0;
  for (const auto& pred : preds) {
    if (exported >= top_n) break;
    const auto it = by_id.find(pred.segment_id);
    if (it == by_id.end()) continue;
    const SegmentTableRow& row = *it->second;

    const synthdata::SequenceEntry* entry = nullptr;
    for (const auto& e : dataset.sequences) {
      if (e.sequence_id == row.sequence_id) entry = &e;
    }
    if (!entry) continue;
    std::map<long long, const synthdata::FrameRow*> frames_by_us;
    for (const auto& fr : entry->rows) {
      if (fr.view_id == row.view) {
        frames_by_us[std::llround(fr.timestamp * 1e6)] = &fr;
      }
    }

    std::vector<Image> strip_rows;
    for (const int clip_idx : pred.selected) {
      std::vector<Image> frames;
      for (int f = clip_idx * clip_len;
           f < (clip_idx + 1) * clip_len &&
           f < static_cast<int>(row.timestamps.size());
           ++f) {
        const auto fit =
            frames_by_us.find(std::llround(row.timestamps[f] * 1e6));
        if (fit == frames_by_us.end() || !fit->second->has_box) continue;
        const Image full = load_png(
            (fs::path(dataset.root_dir) / fit->second->image_path).string());
        const auto crop = preprocess::crop_from_box(fit->second->box, res);
        const auto rig_view = dataset.rig.at(static_cast<size_t>(row.view));
        frames.push_back(warp_homography(
            full, geometry::crop_shear_homography(rig_view, crop), res, res));
      }
      if (frames.empty()) continue;
      Image strip(res, res * static_cast<int>(frames.size()), 3);
      for (size_t i = 0; i < frames.size(); ++i) {
        for (int y = 0; y < res; ++y) {
          for (int x = 0; x < res; ++x) {
            for (int c = 0; c < 3; ++c) {
              strip.at(y, static_cast<int>(i) * res + x, c) =
                  frames[i].at(y, x, c);
            }
          }
        }
      }
      strip_rows.push_back(std::move(strip));
    }
    if (strip_rows.empty()) continue;
    int max_w = 0;
    for (const auto& s : strip_rows) max_w = std::max(max_w, s.width);
    Image sheet(res * static_cast<int>(strip_rows.size()), max_w, 3, 0.95f);
    for (size_t r = 0; r < strip_rows.size(); ++r) {
      for (int y = 0; y < res; ++y) {
        for (int x = 0; x < strip_rows[r].width; ++x) {
          for (int c = 0; c < 3; ++c) {
            sheet.at(static_cast<int>(r) * res + y, x, c) =
                strip_rows[r].at(y, x, c);
          }
        }
      }
    }
    save_png(sheet,
             (fs::path(out_dir) / (pred.segment_id + ".png")).string());
    ++exported;
  }
}

// ---------------------------------------------------------------------------
// Artifact rendering
// ---------------------------------------------------------------------------

void render_loss_curve(const std::string& csv_path,
                       const std::string& out_png) {
  const auto rows = read_csv_rows(csv_path);
  require(rows.size() >= 2, "render_loss_curve: empty curve");
  std::vector<double> total;
  for (size_t i = 1; i < rows.size(); ++i) total.push_back(std::stod(rows[i][3]));
  const double vmax = *std::max_element(total.begin(), total.end());

  cv::Mat canvas(360, 640, CV_8UC3, cv::Scalar(250, 250, 250));
  const int x0 = 50, y0 = 310, w = 560, h = 270;
  cv::line(canvas, {x0, y0}, {x0 + w, y0}, cv::Scalar(40, 40, 40), 1);
  cv::line(canvas, {x0, y0}, {x0, y0 - h}, cv::Scalar(40, 40, 40), 1);
  for (size_t i = 1; i < total.size(); ++i) {
    auto pt = [&](size_t idx) {
      const int x = x0 + static_cast<int>(idx * w / std::max<size_t>(1, total.size() - 1));
      const int y = y0 - static_cast<int>(total[idx] / std::max(vmax, 1e-12) * h);
      return cv::Point(x, y);
    };
    cv::line(canvas, pt(i - 1), pt(i), cv::Scalar(180, 80, 30), 2);
  }
  cv::putText(canvas, "training loss", {x0, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.6,
              cv::Scalar(30, 30, 30), 1);
  cv::imwrite(out_png, canvas);
}

void render_fold_bars(const std::string& summary_csv,
                      const std::string& out_png) {
  const auto rows = read_csv_rows(summary_csv);
  std::vector<std::pair<std::string, double>> bars;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][0] == "mean" || rows[i][0] == "std") continue;
    bars.emplace_back("s" + rows[i][1], std::stod(rows[i][5]));
  }
  require(!bars.empty(), "render_fold_bars: no folds");

  cv::Mat canvas(360, 640, CV_8UC3, cv::Scalar(250, 250, 250));
  const int x0 = 50, y0 = 310, w = 560, h = 260;
  cv::line(canvas, {x0, y0}, {x0 + w, y0}, cv::Scalar(40, 40, 40), 1);
  const int bw = w / static_cast<int>(bars.size());
  for (size_t i = 0; i < bars.size(); ++i) {
    const int bh = static_cast<int>(std::clamp(bars[i].second, 0.0, 1.0) * h);
    cv::rectangle(canvas,
                  cv::Rect(x0 + static_cast<int>(i) * bw + 6, y0 - bh, bw - 12, bh),
                  cv::Scalar(90, 140, 60), cv::FILLED);
    cv::putText(canvas, bars[i].first,
                {x0 + static_cast<int>(i) * bw + 8, y0 + 20},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(30, 30, 30), 1);
  }
  cv::putText(canvas, "per-fold test F1", {x0, 30}, cv::FONT_HERSHEY_SIMPLEX,
              0.6, cv::Scalar(30, 30, 30), 1);
  cv::imwrite(out_png, canvas);
}

void render_retrieval_grid(const mvs::TrainingPool& pool,
                           const std::vector<RetrievalProbe>& probes,
                           const std::vector<int>& gallery_frames,
                           const std::string& out_png, int max_rows) {
  (void)gallery_frames;
  require(!probes.empty(), "render_retrieval_grid: no probes");
  const int res = pool.resolution;
  const int rows = std::min<int>(max_rows, static_cast<int>(probes.size()));
  const int cols = 4;  // query + top 3
  const int pad = 4;
  cv::Mat canvas(rows * (res + pad) + pad, cols * (res + pad) + pad, CV_8UC3,
                 cv::Scalar(235, 235, 235));
  auto blit = [&](const std::vector<unsigned char>& crop, int row, int col) {
    const Image img = mvs::decode_crop_u8(crop, res);
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        auto& px = canvas.at<cv::Vec3b>(pad + row * (res + pad) + y,
                                        pad + col * (res + pad) + x);
        for (int c = 0; c < 3; ++c) {
          px[c] = static_cast<unsigned char>(
              std::lround(std::clamp(img.at(y, x, 2 - c), 0.f, 1.f) * 255.f));
        }
      }
    }
  };
  for (int r = 0; r < rows; ++r) {
    const RetrievalProbe& probe = probes[r];
    blit(pool.frames[probe.query_frame].crops[probe.query_view], r, 0);
    for (int c = 0; c < 3 && c < static_cast<int>(probe.ranked.size()); ++c) {
      blit(pool.frames[probe.ranked[c]].crops[probe.target_view], r, c + 1);
    }
  }
  cv::imwrite(out_png, canvas);
}

}  // namespace pmil::evalharness
