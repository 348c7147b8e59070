#include "pmil/config.hpp"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "pmil/painmil.hpp"
#include "pmil/rng.hpp"

namespace pmil::cli {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["scene.n_subjects"] = c.scene_n_subjects;
  j["scene.n_views"] = c.scene_n_views;
  j["scene.resolution"] = c.scene_resolution;
  j["scene.pose_dof"] = c.scene_pose_dof;
  j["scene.fps"] = c.scene_fps;
  j["scene.sequences_per_subject"] = c.scene_sequences_per_subject;
  j["scene.sequence_seconds"] = c.scene_sequence_seconds;
  j["scene.positive_fraction"] = c.scene_positive_fraction;
  j["scene.background_shift_px"] = c.scene_background_shift_px;
  j["scene.background_shift_after"] = c.scene_background_shift_after;
  j["preprocess.top_motion_percent"] = c.pre_top_motion_percent;
  j["preprocess.min_segment_seconds"] = c.pre_min_segment_seconds;
  j["preprocess.max_segment_seconds"] = c.pre_max_segment_seconds;
  j["mvs.epochs"] = c.mvs_epochs;
  j["mvs.learning_rate"] = c.mvs_learning_rate;
  j["mvs.alpha"] = c.mvs_alpha;
  j["mvs.batch_size"] = c.mvs_batch_size;
  j["mvs.pose_rows"] = c.mvs_pose_rows;
  j["mvs.appearance_dim"] = c.mvs_appearance_dim;
  j["mvs.base_channels"] = c.mvs_base_channels;
  j["mvs.max_channels"] = c.mvs_max_channels;
  j["mvs.samples_per_epoch"] = c.mvs_samples_per_epoch;
  j["mvs.no_appearance_swap"] = c.mvs_no_appearance_swap;
  j["mvs.no_background_input"] = c.mvs_no_background_input;
  j["mvs.uniform_sampling"] = c.mvs_uniform_sampling;
  j["head.epochs"] = c.head_epochs;
  j["head.learning_rate"] = c.head_learning_rate;
  j["head.mode"] = c.head_mode;
  j["head.clip_len"] = c.head_clip_len;
  j["head.clip_fps"] = c.head_clip_fps;
  j["head.frame_fps"] = c.head_frame_fps;
  j["head.loss"] = c.head_loss;
  j["head.dropout"] = c.head_dropout;
  j["head.d_set"] = c.head_d_set;
  j["head.test_d"] = c.head_test_d;
  j["head.hide_and_seek"] = c.head_hide_and_seek;
  j["head.p_hide"] = c.head_p_hide;
  j["head.has_grid"] = c.head_has_grid;
  j["scratch.epochs"] = c.scratch_epochs;
  j["scratch.learning_rate"] = c.scratch_learning_rate;
  j["scratch.eval_every"] = c.scratch_eval_every;
  return j;
}

void assign_key(RunConfig& c, const std::string& key, const json& value) {
  auto as_bool = [&value, &key]() {
    if (value.is_boolean()) return value.get<bool>();
    if (value.is_string()) {
      const std::string s = value.get<std::string>();
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
    }
    if (value.is_number_integer()) return value.get<long long>() != 0;
    throw ValidationError("config: key " + key + " expects a boolean");
  };
  if (key == "seed") c.seed = value.get<std::uint64_t>();
  else if (key == "scene.n_subjects") c.scene_n_subjects = value.get<int>();
  else if (key == "scene.n_views") c.scene_n_views = value.get<int>();
  else if (key == "scene.resolution") c.scene_resolution = value.get<int>();
  else if (key == "scene.pose_dof") c.scene_pose_dof = value.get<int>();
  else if (key == "scene.fps") c.scene_fps = value.get<double>();
  else if (key == "scene.sequences_per_subject")
    c.scene_sequences_per_subject = value.get<int>();
  else if (key == "scene.sequence_seconds")
    c.scene_sequence_seconds = value.get<double>();
  else if (key == "scene.positive_fraction")
    c.scene_positive_fraction = value.get<double>();
  else if (key == "scene.background_shift_px")
    c.scene_background_shift_px = value.get<int>();
  else if (key == "scene.background_shift_after")
    c.scene_background_shift_after = value.get<int>();
  else if (key == "preprocess.top_motion_percent")
    c.pre_top_motion_percent = value.get<double>();
  else if (key == "preprocess.min_segment_seconds")
    c.pre_min_segment_seconds = value.get<double>();
  else if (key == "preprocess.max_segment_seconds")
    c.pre_max_segment_seconds = value.get<double>();
  else if (key == "mvs.epochs") c.mvs_epochs = value.get<int>();
  else if (key == "mvs.learning_rate") c.mvs_learning_rate = value.get<double>();
  else if (key == "mvs.alpha") c.mvs_alpha = value.get<double>();
  else if (key == "mvs.batch_size") c.mvs_batch_size = value.get<int>();
  else if (key == "mvs.pose_rows") c.mvs_pose_rows = value.get<int>();
  else if (key == "mvs.appearance_dim")
    c.mvs_appearance_dim = value.get<int>();
  else if (key == "mvs.base_channels") c.mvs_base_channels = value.get<int>();
  else if (key == "mvs.max_channels") c.mvs_max_channels = value.get<int>();
  else if (key == "mvs.samples_per_epoch")
    c.mvs_samples_per_epoch = value.get<int>();
  else if (key == "mvs.no_appearance_swap") c.mvs_no_appearance_swap = as_bool();
  else if (key == "mvs.no_background_input")
    c.mvs_no_background_input = as_bool();
  else if (key == "mvs.uniform_sampling") c.mvs_uniform_sampling = as_bool();
  else if (key == "head.epochs") c.head_epochs = value.get<int>();
  else if (key == "head.learning_rate")
    c.head_learning_rate = value.get<double>();
  else if (key == "head.mode") c.head_mode = value.get<std::string>();
  else if (key == "head.clip_len") c.head_clip_len = value.get<int>();
  else if (key == "head.clip_fps") c.head_clip_fps = value.get<double>();
  else if (key == "head.frame_fps") c.head_frame_fps = value.get<double>();
  else if (key == "head.loss") c.head_loss = value.get<std::string>();
  else if (key == "head.dropout") c.head_dropout = value.get<double>();
  else if (key == "head.d_set") c.head_d_set = value.get<std::vector<int>>();
  else if (key == "head.test_d") c.head_test_d = value.get<int>();
  else if (key == "head.hide_and_seek") c.head_hide_and_seek = as_bool();
  else if (key == "head.p_hide") c.head_p_hide = value.get<double>();
  else if (key == "head.has_grid") c.head_has_grid = value.get<int>();
  else if (key == "scratch.epochs") c.scratch_epochs = value.get<int>();
  else if (key == "scratch.learning_rate")
    c.scratch_learning_rate = value.get<double>();
  else if (key == "scratch.eval_every") c.scratch_eval_every = value.get<int>();
  else throw ValidationError("config: unknown key " + key);
}

}  // namespace

void validate(const RunConfig& c) {
  require(c.scene_n_subjects >= 1 && c.scene_n_views >= 2,
          "config: scene needs >= 1 subject and >= 2 views");
  require(c.scene_resolution >= 16, "config: resolution >= 16");
  require(c.scene_pose_dof >= 2 && c.scene_pose_dof <= 8,
          "config: pose_dof in [2, 8]");
  require(c.scene_fps > 0 && c.head_clip_fps > 0 && c.head_frame_fps > 0,
          "config: rates must be positive");
  require(c.scene_positive_fraction >= 0 && c.scene_positive_fraction <= 1,
          "config: positive_fraction in [0, 1]");
  require(c.pre_top_motion_percent > 0 && c.pre_top_motion_percent <= 100,
          "config: top_motion_percent in (0, 100]");
  require(c.pre_min_segment_seconds > 0 &&
              c.pre_max_segment_seconds >= c.pre_min_segment_seconds,
          "config: segment bounds out of order");
  require(c.mvs_epochs >= 1 && c.head_epochs >= 1, "config: epochs >= 1");
  require(c.mvs_learning_rate > 0 && c.head_learning_rate > 0,
          "config: learning rates must be positive");
  require(c.mvs_alpha >= 0, "config: alpha >= 0");
  require(c.mvs_pose_rows >= 1 && c.mvs_appearance_dim >= 1,
          "config: latent sizes must be positive");
  require(c.head_mode == "frame" || c.head_mode == "clip",
          "config: head.mode must be frame or clip");
  require(c.head_clip_len >= 1, "config: clip_len >= 1");
  require(!c.head_d_set.empty(), "config: d_set must be non-empty");
  for (const int d : c.head_d_set) require(d >= 1, "config: divisors >= 1");
  require(c.head_test_d >= 1, "config: test_d >= 1");
  require(c.head_dropout >= 0 && c.head_dropout < 1,
          "config: dropout in [0, 1)");
  require(c.head_p_hide >= 0 && c.head_p_hide <= 1,
          "config: p_hide in [0, 1]");
  require(c.head_has_grid >= 1, "config: has_grid >= 1");
  painmil::LossVariant unused = painmil::loss_variant_from_string(c.head_loss);
  (void)unused;
}

RunConfig default_config() { return RunConfig{}; }

RunConfig from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  require(j.is_object(), "config: top level must be an object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) assign_key(cfg, key, value);
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return from_json_string(text);
}

std::string to_json_string(const RunConfig& cfg) {
  return to_json(cfg).dump(2) + "\n";
}

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("config: cannot write " + path);
  f << to_json_string(cfg);
}

RunConfig apply_overrides(RunConfig cfg,
                          const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos && eq > 0,
            "override must look like key=value: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;  // unquoted strings
    }
    assign_key(cfg, key, value);
  }
  validate(cfg);
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string canonical = to_json(cfg).dump();
  std::uint64_t hash = 1469598103934665603ull;
  for (const unsigned char ch : canonical) {
    hash ^= ch;
    hash *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash));
  return buf;
}

std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) {
  std::uint64_t tag = 0;
  for (const unsigned char ch : stage) tag = tag * 131 + ch;
  return Rng(cfg.seed).fork(tag).next_u64();
}

}  // namespace pmil::cli
