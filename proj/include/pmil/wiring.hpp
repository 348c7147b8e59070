#pragma once

#include "pmil/config.hpp"
#include "pmil/evalharness.hpp"
#include "pmil/mvs.hpp"
#include "pmil/painmil.hpp"
#include "pmil/synthdata.hpp"

// RunConfig -> per-module configuration objects.
namespace pmil::cli {

inline synthdata::SceneConfig scene_from(const RunConfig& c) {
  synthdata::SceneConfig scene;
  scene.n_subjects = c.scene_n_subjects;
  scene.n_views = c.scene_n_views;
  scene.image_resolution = c.scene_resolution;
  scene.pose_dof = c.scene_pose_dof;
  scene.fps = c.scene_fps;
  scene.seed = stage_seed(c, "data");
  scene.background_shift_px = c.scene_background_shift_px;
  scene.background_shift_after = c.scene_background_shift_after;
  return scene;
}

inline synthdata::GenerateSpec gen_from(const RunConfig& c) {
  synthdata::GenerateSpec gen;
  gen.sequences_per_subject = c.scene_sequences_per_subject;
  gen.sequence_seconds = c.scene_sequence_seconds;
  gen.positive_fraction = c.scene_positive_fraction;
  return gen;
}

inline double head_fps_from(const RunConfig& c) {
  return c.head_mode == "clip" ? c.head_clip_fps : c.head_frame_fps;
}

inline int clip_len_from(const RunConfig& c) {
  return c.head_mode == "clip" ? c.head_clip_len : 1;
}

inline evalharness::PipelineConfig pipeline_from(const RunConfig& c) {
  evalharness::PipelineConfig p;
  p.scene = scene_from(c);
  p.gen = gen_from(c);
  p.top_motion_percent = c.pre_top_motion_percent;
  p.min_segment_seconds = c.pre_min_segment_seconds;
  p.max_segment_seconds = c.pre_max_segment_seconds;
  p.head_fps = head_fps_from(c);
  p.model_resolution = c.scene_resolution;
  p.uniform_sampling = c.mvs_uniform_sampling;
  return p;
}

inline mvs::MvsArch arch_from(const RunConfig& c) {
  mvs::MvsArch arch;
  arch.resolution = c.scene_resolution;
  arch.pose_rows = c.mvs_pose_rows;
  arch.appearance_dim = c.mvs_appearance_dim;
  arch.base_channels = c.mvs_base_channels;
  arch.max_channels = c.mvs_max_channels;
  arch.init_seed = stage_seed(c, "mvs_init");
  return arch;
}

inline mvs::MvsTrainConfig mvs_cfg_from(const RunConfig& c) {
  mvs::MvsTrainConfig t;
  t.epochs = c.mvs_epochs;
  t.learning_rate = c.mvs_learning_rate;
  t.alpha = c.mvs_alpha;
  t.batch_size = c.mvs_batch_size;
  t.samples_per_epoch = c.mvs_samples_per_epoch;
  t.no_appearance_swap = c.mvs_no_appearance_swap;
  t.no_background_input = c.mvs_no_background_input;
  t.uniform_sampling = c.mvs_uniform_sampling;
  t.seed = stage_seed(c, "mvs");
  return t;
}

inline painmil::HeadArch head_arch_from(const RunConfig& c) {
  painmil::HeadArch arch;
  arch.feature_dim = c.mvs_pose_rows * 3;
  arch.clip_len = clip_len_from(c);
  arch.dropout = c.head_dropout;
  arch.init_seed = stage_seed(c, "head_init");
  return arch;
}

inline painmil::HeadTrainConfig head_cfg_from(const RunConfig& c) {
  painmil::HeadTrainConfig t;
  t.epochs = c.head_epochs;
  t.learning_rate = c.head_learning_rate;
  t.schedule.train_divisors = c.head_d_set;
  t.schedule.test_divisor = c.head_test_d;
  t.variant = painmil::loss_variant_from_string(c.head_loss);
  t.hide_and_seek = c.head_hide_and_seek;
  t.has_grid = c.head_has_grid;
  t.p_hide = c.head_p_hide;
  t.seed = stage_seed(c, "head");
  return t;
}

inline evalharness::LosoOptions loso_from(const RunConfig& c,
                                          const std::string& run_dir) {
  evalharness::LosoOptions opt;
  opt.arch = arch_from(c);
  opt.mvs_cfg = mvs_cfg_from(c);
  opt.head_arch = head_arch_from(c);
  opt.head_cfg = head_cfg_from(c);
  opt.head_fps = head_fps_from(c);
  opt.seed = stage_seed(c, "loso");
  opt.run_dir = run_dir;
  return opt;
}

}  // namespace pmil::cli
