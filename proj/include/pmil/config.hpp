#pragma once

#include <string>
#include <vector>

#include "pmil/error.hpp"

// Run configuration: one flat key-value document per run. Unknown keys are
// rejected, flags override file values, and the resolved document is
// persisted next to every artifact.
namespace pmil::cli {

struct RunConfig {
  std::uint64_t seed = 1;

  // scene
  int scene_n_subjects = 8;
  int scene_n_views = 4;
  int scene_resolution = 64;
  int scene_pose_dof = 6;
  double scene_fps = 10.0;
  int scene_sequences_per_subject = 4;
  double scene_sequence_seconds = 60.0;
  double scene_positive_fraction = 0.25;
  int scene_background_shift_px = 0;
  int scene_background_shift_after = -1;

  // preprocess
  double pre_top_motion_percent = 1.0;
  double pre_min_segment_seconds = 10.0;
  double pre_max_segment_seconds = 120.0;

  // backbone
  int mvs_epochs = 50;
  double mvs_learning_rate = 0.001;
  double mvs_alpha = 2.0;
  int mvs_batch_size = 16;
  int mvs_pose_rows = 200;
  int mvs_appearance_dim = 128;
  int mvs_base_channels = 24;
  int mvs_max_channels = 96;
  int mvs_samples_per_epoch = 0;
  bool mvs_no_appearance_swap = false;
  bool mvs_no_background_input = false;
  bool mvs_uniform_sampling = false;

  // classification head
  int head_epochs = 10;
  double head_learning_rate = 0.001;
  std::string head_mode = "frame";  // frame | clip
  int head_clip_len = 10;           // clip mode: 5 s at 2 fps
  double head_clip_fps = 2.0;
  double head_frame_fps = 1.0;
  std::string head_loss = "ours_mil";
  double head_dropout = 0.5;
  std::vector<int> head_d_set = {1, 2, 4, 8};
  int head_test_d = 8;
  bool head_hide_and_seek = false;
  double head_p_hide = 0.5;
  int head_has_grid = 5;

  // scratch preset: encoder and head trained jointly
  int scratch_epochs = 50;
  double scratch_learning_rate = 0.0001;
  int scratch_eval_every = 5;
};

void validate(const RunConfig& cfg);

RunConfig default_config();

// Strict JSON round-trip: unknown keys raise a ValidationError.
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);
std::string to_json_string(const RunConfig& cfg);
RunConfig from_json_string(const std::string& text);

// "key=value" overrides on top of a base config.
RunConfig apply_overrides(RunConfig cfg,
                          const std::vector<std::string>& overrides);

// FNV-1a over the canonical serialization; embedded in every artifact so
// stage mismatches are detectable.
std::string config_hash(const RunConfig& cfg);

// Per-stage seeds fan out deterministically from the root seed.
std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage);

}  // namespace pmil::cli
