#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "pmil/geometry.hpp"
#include "pmil/image.hpp"
#include "pmil/rng.hpp"

// Deterministic multi-view scene generator: an articulated stick figure with
// an ellipsoid body, rendered from a surround rig. Stands in for restricted
// surveillance footage and provides exact ground truth for every
// disentanglement probe.
namespace pmil::synthdata {

struct SceneConfig {
  int n_subjects = 8;
  int n_views = 4;
  int image_resolution = 64;
  int pose_dof = 6;  // active articulation parameters, 2..8
  double fps = 10.0;
  std::uint64_t seed = 1;
  // Per-window background variation (lighting drift between sequences).
  double background_brightness_jitter = 0.12;
  // Optional mid-corpus camera nudge: backgrounds with id > shift_after are
  // drawn shifted by shift_px pixels.
  int background_shift_px = 0;
  int background_shift_after = -1;
};

void validate(const SceneConfig& cfg);

struct RigCamera {
  geometry::CameraView view;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

std::vector<RigCamera> make_rig(const SceneConfig& cfg);

constexpr int kNumJoints = 8;
constexpr int kMaxPoseDof = 8;
// Pose parameter order: body yaw, head pitch, four leg swings
// (front-left, front-right, hind-left, hind-right), head yaw, tail swing.
constexpr int kHindLeftSwing = 4;
// A leg swung past this angle counts as lifted; the behavior motif drives
// the hind-left swing well beyond it, normal gait stays below.
constexpr double kLiftThreshold = 0.5;

Eigen::VectorXd neutral_pose(int pose_dof);
void validate_pose(const Eigen::VectorXd& pose_params);

// 3D joint positions (world units) for the skeleton at the given pose.
Eigen::Matrix<double, kNumJoints, 3> skeleton_joints(
    const Eigen::VectorXd& pose_params, const Eigen::Vector3d& root);

// Subject identity only recolors; it never moves geometry.
Eigen::Vector3d subject_palette(int subject_id);

Eigen::Vector2d project(const RigCamera& cam, const Eigen::Vector3d& point);

struct GroundTruthFrame {
  Eigen::VectorXd pose_params;
  int subject_id = 0;
  int view_id = 0;
  double timestamp = 0.0;
  Image image;
  Eigen::Matrix<double, kNumJoints, 2> keypoints_2d;
  bool behavior_flag = false;
  Eigen::Vector4d detection = Eigen::Vector4d::Zero();  // x, y, w, h
};

// Noise-free background pattern for a view/window; the oracle for median
// extraction tests.
Image background_base(const SceneConfig& cfg, int view_id, int background_id);

// Background with the per-frame low-amplitude noise applied.
Image render_background(const SceneConfig& cfg, int view_id, int background_id,
                        std::uint64_t noise_tag);

GroundTruthFrame render_frame(const SceneConfig& cfg,
                              const Eigen::VectorXd& pose_params,
                              int subject_id, const RigCamera& cam,
                              int background_id,
                              const Eigen::Vector3d& root = Eigen::Vector3d::Zero(),
                              double timestamp = 0.0,
                              std::uint64_t noise_tag = 0);

struct TimeStep {
  double timestamp = 0.0;
  bool behavior_flag = false;
  Eigen::VectorXd pose_params;
  Eigen::Vector3d root = Eigen::Vector3d::Zero();
  std::vector<GroundTruthFrame> views;
};

struct LabeledSequence {
  int sequence_id = 0;
  int subject_id = 0;
  int background_id = 0;
  bool label_pain = false;
  double fps = 0.0;
  std::vector<TimeStep> frames;
};

// The behavior-flag schedule used by generate_sequence: exactly
// round(positive_fraction * n_frames) flagged frames (at least one when the
// fraction is positive), grouped into a few bursts.
std::vector<char> schedule_behavior_flags(const SceneConfig& cfg,
                                          int subject_id, int sequence_id,
                                          int n_frames,
                                          double positive_fraction);

// Streams one rendered timestep at a time so long sequences never have to be
// resident in memory.
void generate_sequence_streamed(
    const SceneConfig& cfg, int subject_id, int sequence_id,
    double duration_seconds, double positive_fraction, int background_id,
    const std::function<void(const TimeStep&)>& sink);

LabeledSequence generate_sequence(const SceneConfig& cfg, int subject_id,
                                  int sequence_id, double duration_seconds,
                                  double positive_fraction,
                                  int background_id = 0);

// ---------------------------------------------------------------------------
// Dataset on disk. The manifest schema doubles as the ingestion contract for
// real footage: behavior flags and keypoints are optional there, detection
// boxes may come from an external detector instead of ground truth.
// ---------------------------------------------------------------------------

struct FrameRow {
  double timestamp = 0.0;
  int view_id = 0;
  std::string image_path;
  int behavior_flag = -1;  // -1 = unknown
  bool has_box = false;
  Eigen::Vector4d box = Eigen::Vector4d::Zero();
  bool has_keypoints = false;
  Eigen::Matrix<double, kNumJoints, 2> keypoints;
};

struct SequenceEntry {
  int sequence_id = 0;
  int subject_id = 0;
  int background_id = 0;
  bool label_pain = false;
  std::vector<FrameRow> rows;
};

struct Dataset {
  std::string root_dir;
  SceneConfig scene;
  std::vector<geometry::CameraView> rig;
  std::vector<SequenceEntry> sequences;
};

struct GenerateSpec {
  int sequences_per_subject = 4;
  double sequence_seconds = 60.0;
  double positive_fraction = 0.25;
};

// Writes manifest + rig + PNG frames under out_dir. Byte-identical for
// identical (config, spec).
void write_dataset(const SceneConfig& cfg, const GenerateSpec& spec,
                   const std::string& out_dir);

Dataset load_dataset(const std::string& dir);

}  // namespace pmil::synthdata
