#include "pmil/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace pmil::synthdata {

namespace fs = std::filesystem;

namespace {

constexpr double kBodyHeight = 0.78;
constexpr double kLegLength = 0.62;
const Eigen::Vector3d kBodySemiAxes(0.52, 0.24, 0.28);
constexpr double kHeadRadius = 0.15;

Eigen::Matrix3d yaw_rotation(double yaw) {
  Eigen::Matrix3d r;
  const double c = std::cos(yaw), s = std::sin(yaw);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

double pose_param(const Eigen::VectorXd& p, int i, double neutral = 0.0) {
  return i < p.size() ? p[i] : neutral;
}

// Muted stall tones per view, so background disentanglement is non-trivial
// across views.
Eigen::Vector3d view_tone(int view_id) {
  static const Eigen::Vector3d tones[] = {
      {0.34, 0.31, 0.27}, {0.27, 0.31, 0.34}, {0.32, 0.33, 0.28},
      {0.30, 0.27, 0.32}, {0.35, 0.33, 0.30}, {0.28, 0.33, 0.31},
  };
  return tones[view_id % 6];
}

struct PaintPart {
  enum Kind { kCapsule, kEllipsoid, kSphere } kind;
  Eigen::Vector3d a, b;      // capsule endpoints or center
  double radius = 0.0;       // world units
  Eigen::Matrix3d shape;     // ellipsoid world-frame quadric axes
  Eigen::Vector3f color;
  double depth = 0.0;
};

Eigen::Vector3f part_color(const Eigen::Vector3d& base, double factor) {
  Eigen::Vector3d c = base * factor;
  return c.cwiseMin(1.0).cwiseMax(0.0).cast<float>();
}

}  // namespace

void validate(const SceneConfig& cfg) {
  require(cfg.n_subjects >= 1, "SceneConfig: n_subjects >= 1");
  require(cfg.n_views >= 2, "SceneConfig: n_views >= 2");
  require(cfg.pose_dof >= 2 && cfg.pose_dof <= kMaxPoseDof,
          "SceneConfig: pose_dof must be in [2, 8]");
  require(cfg.image_resolution >= 16, "SceneConfig: resolution >= 16");
  require(cfg.fps > 0, "SceneConfig: fps > 0");
}

std::vector<RigCamera> make_rig(const SceneConfig& cfg) {
  validate(cfg);
  std::vector<RigCamera> rig;
  const double res = cfg.image_resolution;
  const Eigen::Vector3d target(0.0, 0.0, 0.65);
  const Eigen::Vector3d up(0.0, 0.0, 1.0);
  for (int i = 0; i < cfg.n_views; ++i) {
    const double angle = 2.0 * std::numbers::pi * (i + 0.5) / cfg.n_views;
    const Eigen::Vector3d pos(3.1 * std::cos(angle), 3.1 * std::sin(angle),
                              1.55);
    const Eigen::Vector3d fwd = (target - pos).normalized();
    const Eigen::Vector3d right = fwd.cross(up).normalized();
    const Eigen::Vector3d down = fwd.cross(right);
    Eigen::Matrix3d rot;
    rot.row(0) = right;
    rot.row(1) = down;
    rot.row(2) = fwd;
    RigCamera cam;
    cam.view = geometry::make_camera(i, rot, 1.15 * res, 1.15 * res, 0.5 * res,
                                     0.5 * res);
    cam.position = pos;
    rig.push_back(cam);
  }
  return rig;
}

Eigen::VectorXd neutral_pose(int pose_dof) {
  require(pose_dof >= 2 && pose_dof <= kMaxPoseDof, "pose_dof out of range");
  return Eigen::VectorXd::Zero(pose_dof);
}

void validate_pose(const Eigen::VectorXd& p) {
  require(p.size() >= 2 && p.size() <= kMaxPoseDof,
          "pose_params: expected 2..8 entries");
  require(p.allFinite(), "pose_params: non-finite");
  static const double limits[kMaxPoseDof] = {1e30, 1.2, 1.3, 1.3,
                                             1.3,  1.3, 1.0, 1.0};
  for (int i = 0; i < p.size(); ++i) {
    require(std::abs(p[i]) <= limits[i], "pose_params: joint out of range");
  }
}

Eigen::Matrix<double, kNumJoints, 3> skeleton_joints(
    const Eigen::VectorXd& p, const Eigen::Vector3d& root) {
  validate_pose(p);
  const double yaw = pose_param(p, 0);
  const double head_pitch = pose_param(p, 1);
  const double head_yaw = pose_param(p, 6);
  const double tail_swing = pose_param(p, 7);
  const Eigen::Matrix3d r = yaw_rotation(yaw);
  const Eigen::Vector3d center = root + Eigen::Vector3d(0, 0, kBodyHeight);

  Eigen::Matrix<double, kNumJoints, 3> joints;
  joints.row(0) = center;
  const Eigen::Vector3d neck_base = center + r * Eigen::Vector3d(0.52, 0, 0.12);
  joints.row(1) = neck_base;
  const Eigen::Vector3d head_dir(std::cos(head_pitch) * std::cos(head_yaw),
                                 std::cos(head_pitch) * std::sin(head_yaw),
                                 std::sin(head_pitch));
  joints.row(2) = neck_base + r * (0.34 * head_dir);

  const double hip_x[4] = {0.40, 0.40, -0.40, -0.40};
  const double hip_y[4] = {0.20, -0.20, 0.20, -0.20};
  for (int leg = 0; leg < 4; ++leg) {
    const double swing = pose_param(p, 2 + leg);
    const Eigen::Vector3d hip =
        center + r * Eigen::Vector3d(hip_x[leg], hip_y[leg], -0.12);
    const Eigen::Vector3d leg_vec =
        r * Eigen::Vector3d(kLegLength * std::sin(swing), 0.0,
                            -kLegLength * std::cos(swing));
    joints.row(3 + leg) = hip + leg_vec;
  }

  joints.row(7) =
      center + r * Eigen::Vector3d(-0.52 - 0.25 * std::cos(tail_swing),
                                   0.25 * std::sin(tail_swing), 0.02);
  return joints;
}

Eigen::Vector3d subject_palette(int subject_id) {
  // Distinct hues around the color wheel keep appearance probes
  // unambiguous.
  const double hue = std::fmod(subject_id * 0.61803398875, 1.0) * 6.0;
  const double sat = 0.55, val = 0.60;
  const int i = static_cast<int>(hue) % 6;
  const double f = hue - std::floor(hue);
  const double q = val * (1 - sat * f);
  const double t = val * (1 - sat * (1 - f));
  const double pp = val * (1 - sat);
  switch (i) {
    case 0: return {val, t, pp};
    case 1: return {q, val, pp};
    case 2: return {pp, val, t};
    case 3: return {pp, q, val};
    case 4: return {t, pp, val};
    default: return {val, pp, q};
  }
}

Eigen::Vector2d project(const RigCamera& cam, const Eigen::Vector3d& point) {
  const Eigen::Vector3d pc = cam.view.rotation * (point - cam.position);
  require(pc.z() > 1e-9, "project: point behind camera");
  const Eigen::Matrix3d& k = cam.view.intrinsics;
  return {k(0, 0) * pc.x() / pc.z() + k(0, 2),
          k(1, 1) * pc.y() / pc.z() + k(1, 2)};
}

Image background_base(const SceneConfig& cfg, int view_id, int background_id) {
  const int res = cfg.image_resolution;
  Image img(res, res, 3);
  const Eigen::Vector3d tone = view_tone(view_id);
  Rng level_rng = Rng(cfg.seed).fork(0xB6).fork(view_id * 131 + background_id);
  const double brightness =
      1.0 + cfg.background_brightness_jitter * (2.0 * level_rng.uniform() - 1.0);

  // Gradient direction and panel placement vary per view only.
  Rng layout = Rng(cfg.seed).fork(0xB7).fork(view_id);
  const double gx = layout.uniform(-0.3, 0.3);
  const double gy = layout.uniform(0.1, 0.35);
  const int px0 = static_cast<int>(layout.uniform(0.05, 0.3) * res);
  const int px1 = static_cast<int>(layout.uniform(0.55, 0.8) * res);
  const int pw = static_cast<int>(layout.uniform(0.12, 0.22) * res);
  const int shift = (cfg.background_shift_after >= 0 &&
                     background_id > cfg.background_shift_after)
                        ? cfg.background_shift_px
                        : 0;

  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const double xs = x - shift;
      double shade = 0.85 + gx * xs / res + gy * static_cast<double>(y) / res;
      if ((xs >= px0 && xs < px0 + pw) || (xs >= px1 && xs < px1 + pw)) {
        shade *= (y < res / 2) ? 1.18 : 0.82;
      }
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<float>(
            std::clamp(tone[c] * brightness * shade, 0.0, 1.0));
      }
    }
  }
  return img;
}

Image render_background(const SceneConfig& cfg, int view_id, int background_id,
                        std::uint64_t noise_tag) {
  Image img = background_base(cfg, view_id, background_id);
  Rng noise =
      Rng(cfg.seed).fork(0xBC).fork(view_id * 1009 + background_id).fork(noise_tag);
  for (float& v : img.data) {
    v = std::clamp(v + static_cast<float>(noise.uniform(-0.005, 0.005)), 0.f,
                   1.f);
  }
  return img;
}

namespace {

void raster_parts(Image& img, const RigCamera& cam,
                  std::vector<PaintPart>& parts) {
  // Painter's algorithm: far parts first.
  std::sort(parts.begin(), parts.end(),
            [](const PaintPart& a, const PaintPart& b) { return a.depth > b.depth; });
  const Eigen::Matrix3d& k = cam.view.intrinsics;
  const double fx = k(0, 0), fy = k(1, 1);
  const int res_x = img.width, res_y = img.height;

  for (const PaintPart& part : parts) {
    if (part.kind == PaintPart::kCapsule || part.kind == PaintPart::kSphere) {
      const Eigen::Vector3d ca = cam.view.rotation * (part.a - cam.position);
      const Eigen::Vector3d cb = part.kind == PaintPart::kCapsule
                                     ? cam.view.rotation * (part.b - cam.position)
                                     : ca;
      if (ca.z() < 0.05 || cb.z() < 0.05) continue;
      const Eigen::Vector2d pa(fx * ca.x() / ca.z() + k(0, 2),
                               fy * ca.y() / ca.z() + k(1, 2));
      const Eigen::Vector2d pb(fx * cb.x() / cb.z() + k(0, 2),
                               fy * cb.y() / cb.z() + k(1, 2));
      const double rpix = fx * part.radius / (0.5 * (ca.z() + cb.z()));
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(pa.x(), pb.x()) - rpix)));
      const int x1 = std::min(res_x - 1, static_cast<int>(std::ceil(std::max(pa.x(), pb.x()) + rpix)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(pa.y(), pb.y()) - rpix)));
      const int y1 = std::min(res_y - 1, static_cast<int>(std::ceil(std::max(pa.y(), pb.y()) + rpix)));
      const Eigen::Vector2d d = pb - pa;
      const double len2 = d.squaredNorm();
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const Eigen::Vector2d q(x + 0.5, y + 0.5);
          double tt = len2 > 1e-12 ? std::clamp((q - pa).dot(d) / len2, 0.0, 1.0) : 0.0;
          if ((q - (pa + tt * d)).norm() <= rpix) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = part.color[c];
          }
        }
      }
    } else {
      const Eigen::Vector3d cc = cam.view.rotation * (part.a - cam.position);
      if (cc.z() < 0.05) continue;
      const Eigen::Vector2d pc(fx * cc.x() / cc.z() + k(0, 2),
                               fy * cc.y() / cc.z() + k(1, 2));
      // Screen-space ellipse via the projection Jacobian.
      Eigen::Matrix<double, 2, 3> jc;
      jc << fx / cc.z(), 0, -fx * cc.x() / (cc.z() * cc.z()), 0, fy / cc.z(),
          -fy * cc.y() / (cc.z() * cc.z());
      const Eigen::Matrix<double, 2, 3> jw = jc * cam.view.rotation;
      const Eigen::Matrix2d cov = jw * part.shape * jw.transpose();
      const Eigen::Matrix2d cov_inv = cov.inverse();
      const double ex = std::sqrt(std::max(cov(0, 0), 1e-12));
      const double ey = std::sqrt(std::max(cov(1, 1), 1e-12));
      const int x0 = std::max(0, static_cast<int>(std::floor(pc.x() - ex)));
      const int x1 = std::min(res_x - 1, static_cast<int>(std::ceil(pc.x() + ex)));
      const int y0 = std::max(0, static_cast<int>(std::floor(pc.y() - ey)));
      const int y1 = std::min(res_y - 1, static_cast<int>(std::ceil(pc.y() + ey)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const Eigen::Vector2d q(x + 0.5 - pc.x(), y + 0.5 - pc.y());
          if (q.dot(cov_inv * q) <= 1.0) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = part.color[c];
          }
        }
      }
    }
  }
}

}  // namespace

GroundTruthFrame render_frame(const SceneConfig& cfg,
                              const Eigen::VectorXd& pose_params,
                              int subject_id, const RigCamera& cam,
                              int background_id, const Eigen::Vector3d& root,
                              double timestamp, std::uint64_t noise_tag) {
  validate(cfg);
  validate_pose(pose_params);
  require(subject_id >= 0, "render_frame: subject_id >= 0");

  GroundTruthFrame out;
  out.pose_params = pose_params;
  out.subject_id = subject_id;
  out.view_id = cam.view.view_id;
  out.timestamp = timestamp;
  out.image = render_background(cfg, cam.view.view_id, background_id, noise_tag);

  const auto joints = skeleton_joints(pose_params, root);
  const Eigen::Vector3d base = subject_palette(subject_id);
  const double yaw = pose_param(pose_params, 0);
  const Eigen::Matrix3d r = yaw_rotation(yaw);

  auto depth_of = [&](const Eigen::Vector3d& p) {
    return (cam.view.rotation * (p - cam.position)).z();
  };

  std::vector<PaintPart> parts;
  for (int leg = 0; leg < 4; ++leg) {
    PaintPart part;
    part.kind = PaintPart::kCapsule;
    const Eigen::Vector3d hip =
        joints.row(0).transpose() +
        r * Eigen::Vector3d(leg < 2 ? 0.40 : -0.40, (leg % 2 == 0) ? 0.20 : -0.20,
                            -0.12);
    part.a = hip;
    part.b = joints.row(3 + leg);
    part.radius = 0.045;
    part.color = part_color(base, 0.72 + 0.02 * leg);
    part.depth = depth_of(0.5 * (part.a + part.b));
    parts.push_back(part);
  }
  {
    PaintPart tail;
    tail.kind = PaintPart::kCapsule;
    tail.a = joints.row(0).transpose() + r * Eigen::Vector3d(-0.50, 0, 0.06);
    tail.b = joints.row(7);
    tail.radius = 0.03;
    tail.color = part_color(base, 0.64);
    tail.depth = depth_of(0.5 * (tail.a + tail.b));
    parts.push_back(tail);
  }
  {
    PaintPart body;
    body.kind = PaintPart::kEllipsoid;
    body.a = joints.row(0);
    body.shape = r * kBodySemiAxes.cwiseProduct(kBodySemiAxes).asDiagonal() *
                 r.transpose();
    body.color = part_color(base, 1.0);
    body.depth = depth_of(body.a);
    parts.push_back(body);
  }
  {
    PaintPart neck;
    neck.kind = PaintPart::kCapsule;
    neck.a = joints.row(1);
    neck.b = joints.row(2);
    neck.radius = 0.07;
    neck.color = part_color(base, 0.92);
    neck.depth = depth_of(0.5 * (neck.a + neck.b));
    parts.push_back(neck);
  }
  {
    PaintPart head;
    head.kind = PaintPart::kSphere;
    head.a = joints.row(2);
    head.radius = kHeadRadius;
    head.color = part_color(base, 1.18);
    head.depth = depth_of(head.a);
    parts.push_back(head);
  }

  raster_parts(out.image, cam, parts);

  for (int j = 0; j < kNumJoints; ++j) {
    out.keypoints_2d.row(j) = project(cam, joints.row(j));
  }

  // Detection box: keypoints plus projected body extent, padded and squared.
  const Eigen::Vector3d cc = cam.view.rotation * (joints.row(0).transpose() - cam.position);
  const double fx = cam.view.intrinsics(0, 0);
  const double body_ext = fx * kBodySemiAxes.maxCoeff() / cc.z();
  double x_min = out.keypoints_2d.col(0).minCoeff();
  double x_max = out.keypoints_2d.col(0).maxCoeff();
  double y_min = out.keypoints_2d.col(1).minCoeff();
  double y_max = out.keypoints_2d.col(1).maxCoeff();
  const Eigen::Vector2d body_px = project(cam, joints.row(0));
  x_min = std::min(x_min, body_px.x() - body_ext);
  x_max = std::max(x_max, body_px.x() + body_ext);
  y_min = std::min(y_min, body_px.y() - body_ext);
  y_max = std::max(y_max, body_px.y() + body_ext);
  double side = 1.15 * std::max(x_max - x_min, y_max - y_min);
  side = std::max(side, 12.0);
  const double cx = 0.5 * (x_min + x_max), cy = 0.5 * (y_min + y_max);
  out.detection << cx - side / 2, cy - side / 2, side, side;
  return out;
}

namespace {

struct TrajectoryParams {
  double yaw0, yaw_rate, yaw_amp, yaw_freq, yaw_phase;
  double head_base, head_amp, head_freq, head_phase;
  double leg_amp[4], leg_freq[4], leg_phase[4];
  double hyaw_amp, hyaw_freq, hyaw_phase;
  double tail_amp, tail_freq, tail_phase;
  double wander_amp[2], wander_freq[2], wander_phase[2];
};

TrajectoryParams sample_trajectory_params(Rng rng) {
  TrajectoryParams tp;
  tp.yaw0 = rng.uniform(0, 2 * std::numbers::pi);
  tp.yaw_rate = (rng.bernoulli(0.5) ? 1 : -1) * 2 * std::numbers::pi /
                rng.uniform(35.0, 70.0);
  tp.yaw_amp = 0.25;
  tp.yaw_freq = rng.uniform(0.05, 0.15);
  tp.yaw_phase = rng.uniform(0, 2 * std::numbers::pi);
  tp.head_base = rng.uniform(0.05, 0.30);
  tp.head_amp = rng.uniform(0.15, 0.35);
  tp.head_freq = rng.uniform(0.08, 0.20);
  tp.head_phase = rng.uniform(0, 2 * std::numbers::pi);
  const double gait_phase = rng.uniform(0, 2 * std::numbers::pi);
  const double gait_freq = rng.uniform(0.25, 0.50);
  for (int leg = 0; leg < 4; ++leg) {
    tp.leg_amp[leg] = rng.uniform(0.18, 0.32);
    tp.leg_freq[leg] = gait_freq * rng.uniform(0.9, 1.1);
    const double off = (leg == 0 || leg == 3) ? 0.0 : std::numbers::pi;
    tp.leg_phase[leg] = gait_phase + off + rng.uniform(-0.3, 0.3);
  }
  tp.hyaw_amp = rng.uniform(0.1, 0.3);
  tp.hyaw_freq = rng.uniform(0.05, 0.15);
  tp.hyaw_phase = rng.uniform(0, 2 * std::numbers::pi);
  tp.tail_amp = rng.uniform(0.15, 0.35);
  tp.tail_freq = rng.uniform(0.3, 0.5);
  tp.tail_phase = rng.uniform(0, 2 * std::numbers::pi);
  for (int i = 0; i < 2; ++i) {
    tp.wander_amp[i] = rng.uniform(0.20, 0.38);
    tp.wander_freq[i] = rng.uniform(0.03, 0.08);
    tp.wander_phase[i] = rng.uniform(0, 2 * std::numbers::pi);
  }
  return tp;
}

std::vector<char> schedule_motif(int n_frames, double positive_fraction,
                                 double fps, Rng rng) {
  std::vector<char> flags(n_frames, 0);
  if (positive_fraction <= 0.0 || n_frames == 0) return flags;
  int flagged = static_cast<int>(std::llround(positive_fraction * n_frames));
  flagged = std::clamp(flagged, 1, n_frames);
  const int burst_target = std::max(1, static_cast<int>(std::llround(5.0 * fps)));
  const int n_bursts = std::clamp(flagged / burst_target, 1, 4);
  const int region = n_frames / n_bursts;
  int remaining = flagged;
  for (int b = 0; b < n_bursts; ++b) {
    const int len = (b == n_bursts - 1)
                        ? remaining
                        : std::min(remaining, flagged / n_bursts);
    const int region_begin = b * region;
    const int slack = std::max(0, region - len);
    const int start =
        region_begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(slack) + 1));
    for (int i = start; i < std::min(n_frames, start + len); ++i) flags[i] = 1;
    remaining -= len;
  }
  // Rounding may leave a shortfall when bursts hit region edges; top up from
  // the front so the total stays exact.
  int total = 0;
  for (char f : flags) total += f;
  for (int i = 0; i < n_frames && total < flagged; ++i) {
    if (!flags[i]) {
      flags[i] = 1;
      ++total;
    }
  }
  return flags;
}

}  // namespace

std::vector<char> schedule_behavior_flags(const SceneConfig& cfg,
                                          int subject_id, int sequence_id,
                                          int n_frames,
                                          double positive_fraction) {
  require(positive_fraction >= 0.0 && positive_fraction <= 1.0,
          "schedule_behavior_flags: positive_fraction in [0, 1]");
  Rng rng = Rng(cfg.seed).fork(0x5E9).fork(subject_id).fork(sequence_id);
  return schedule_motif(n_frames, positive_fraction, cfg.fps, rng.fork(2));
}

void generate_sequence_streamed(
    const SceneConfig& cfg, int subject_id, int sequence_id,
    double duration_seconds, double positive_fraction, int background_id,
    const std::function<void(const TimeStep&)>& sink) {
  validate(cfg);
  require(subject_id >= 0 && subject_id < cfg.n_subjects,
          "generate_sequence: bad subject_id");
  require(duration_seconds >= 10.0, "generate_sequence: duration >= 10 s");
  require(positive_fraction >= 0.0 && positive_fraction <= 1.0,
          "generate_sequence: positive_fraction in [0, 1]");

  const auto rig = make_rig(cfg);
  Rng rng = Rng(cfg.seed).fork(0x5E9).fork(subject_id).fork(sequence_id);
  const TrajectoryParams tp = sample_trajectory_params(rng.fork(1));
  const int n_frames =
      static_cast<int>(std::llround(duration_seconds * cfg.fps));
  const auto flags = schedule_behavior_flags(cfg, subject_id, sequence_id,
                                             n_frames, positive_fraction);

  const int motif_joint =
      cfg.pose_dof > kHindLeftSwing ? kHindLeftSwing : cfg.pose_dof - 1;
  int burst_start = -1;

  for (int f = 0; f < n_frames; ++f) {
    const double t = f / cfg.fps;
    TimeStep step;
    step.timestamp = t;
    step.behavior_flag = flags[f] != 0;

    Eigen::VectorXd pose = neutral_pose(cfg.pose_dof);
    auto sine = [t](double amp, double freq, double phase) {
      return amp * std::sin(2 * std::numbers::pi * freq * t + phase);
    };
    pose[0] = tp.yaw0 + tp.yaw_rate * t + sine(tp.yaw_amp, tp.yaw_freq, tp.yaw_phase);
    pose[0] = std::remainder(pose[0], 2 * std::numbers::pi);
    if (cfg.pose_dof > 1) {
      pose[1] = tp.head_base + sine(tp.head_amp, tp.head_freq, tp.head_phase);
    }
    for (int leg = 0; leg < 4 && 2 + leg < cfg.pose_dof; ++leg) {
      pose[2 + leg] = sine(tp.leg_amp[leg], tp.leg_freq[leg], tp.leg_phase[leg]);
    }
    if (cfg.pose_dof > 6) {
      pose[6] = sine(tp.hyaw_amp, tp.hyaw_freq, tp.hyaw_phase);
    }
    if (cfg.pose_dof > 7) {
      pose[7] = sine(tp.tail_amp, tp.tail_freq, tp.tail_phase);
    }

    if (step.behavior_flag) {
      if (f == 0 || !flags[f - 1]) burst_start = f;
      const double tb = (f - burst_start) / cfg.fps;
      // Limb-lift cycle: swings the motif joint well past the lift
      // threshold, period 1.6 s.
      const double lift =
          0.62 + 0.45 * (0.5 - 0.5 * std::cos(2 * std::numbers::pi * tb / 1.6));
      pose[motif_joint] = lift;
    }

    step.root = Eigen::Vector3d(
        sine(tp.wander_amp[0], tp.wander_freq[0], tp.wander_phase[0]),
        sine(tp.wander_amp[1], tp.wander_freq[1], tp.wander_phase[1]), 0.0);
    step.pose_params = pose;

    step.views.reserve(rig.size());
    for (const auto& cam : rig) {
      const std::uint64_t noise_tag =
          static_cast<std::uint64_t>(sequence_id) * 1000003u +
          static_cast<std::uint64_t>(f) * 16u + cam.view.view_id;
      step.views.push_back(render_frame(cfg, pose, subject_id, cam,
                                        background_id, step.root, t, noise_tag));
      step.views.back().behavior_flag = step.behavior_flag;
    }
    sink(step);
  }
}

LabeledSequence generate_sequence(const SceneConfig& cfg, int subject_id,
                                  int sequence_id, double duration_seconds,
                                  double positive_fraction, int background_id) {
  LabeledSequence seq;
  seq.sequence_id = sequence_id;
  seq.subject_id = subject_id;
  seq.background_id = background_id;
  seq.label_pain = positive_fraction > 0.0;
  seq.fps = cfg.fps;
  generate_sequence_streamed(
      cfg, subject_id, sequence_id, duration_seconds, positive_fraction,
      background_id, [&seq](const TimeStep& step) { seq.frames.push_back(step); });
  return seq;
}

// ---------------------------------------------------------------------------
// Dataset io
// ---------------------------------------------------------------------------

namespace {

std::string frame_image_name(int subject, int seq, int view, int frame) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/s%02d_q%03d_v%d_f%05d.png", subject,
                seq, view, frame);
  return buf;
}

}  // namespace

void write_dataset(const SceneConfig& cfg, const GenerateSpec& spec,
                   const std::string& out_dir) {
  validate(cfg);
  require(spec.sequences_per_subject >= 2,
          "write_dataset: need >= 2 sequences per subject");
  fs::create_directories(fs::path(out_dir) / "images");

  std::vector<geometry::CameraView> rig_views;
  for (const auto& cam : make_rig(cfg)) rig_views.push_back(cam.view);
  geometry::save_rig((fs::path(out_dir) / "rig.txt").string(), rig_views);

  std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
  if (!manifest) throw RuntimeAbort("write_dataset: cannot open manifest");
  manifest << "painmil-dataset v1\n";
  manifest << "scene n_subjects=" << cfg.n_subjects << " n_views=" << cfg.n_views
           << " resolution=" << cfg.image_resolution << " pose_dof=" << cfg.pose_dof
           << " fps=" << cfg.fps << " seed=" << cfg.seed << "\n";

  char buf[64];
  auto f6 = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };

  for (int subject = 0; subject < cfg.n_subjects; ++subject) {
    // Pain/no-pain split varies a little per subject so validation-subject
    // selection by balance is non-trivial.
    Rng split = Rng(cfg.seed).fork(0x1AB).fork(subject);
    int n_pain = spec.sequences_per_subject / 2 +
                 static_cast<int>(split.below(3)) - 1;
    n_pain = std::clamp(n_pain, 1, spec.sequences_per_subject - 1);

    for (int q = 0; q < spec.sequences_per_subject; ++q) {
      const int seq_id = subject * spec.sequences_per_subject + q;
      const bool pain = q < n_pain;
      const double fraction = pain ? spec.positive_fraction : 0.0;
      manifest << "sequence id=" << seq_id << " subject=" << subject
               << " label=" << (pain ? "pain" : "no_pain")
               << " background=" << q << "\n";
      int frame_idx = 0;
      generate_sequence_streamed(
          cfg, subject, seq_id, spec.sequence_seconds, fraction, q,
          [&](const TimeStep& step) {
            for (const auto& view_frame : step.views) {
              const std::string rel = frame_image_name(
                  subject, seq_id, view_frame.view_id, frame_idx);
              save_png(view_frame.image, (fs::path(out_dir) / rel).string());
              manifest << "frame t=" << f6(step.timestamp)
                       << " view=" << view_frame.view_id << " path=" << rel
                       << " flag=" << (step.behavior_flag ? 1 : 0) << " box=";
              const auto& b = view_frame.detection;
              manifest << f6(b[0]) << ',' << f6(b[1]) << ',' << f6(b[2]) << ','
                       << f6(b[3]) << " kp=";
              for (int j = 0; j < kNumJoints; ++j) {
                if (j) manifest << ',';
                manifest << f6(view_frame.keypoints_2d(j, 0)) << ','
                         << f6(view_frame.keypoints_2d(j, 1));
              }
              manifest << "\n";
            }
            ++frame_idx;
          });
    }
  }
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

// key=value tokens
std::string field(const std::vector<std::string>& toks, const std::string& key,
                  bool required = true) {
  const std::string prefix = key + "=";
  for (const auto& t : toks) {
    if (t.rfind(prefix, 0) == 0) return t.substr(prefix.size());
  }
  if (required) throw ValidationError("manifest: missing field " + key);
  return "";
}

std::vector<double> parse_csv_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw ValidationError("load_dataset: no manifest in " + dir);
  Dataset ds;
  ds.root_dir = dir;
  ds.rig = geometry::load_rig((fs::path(dir) / "rig.txt").string());

  std::string line;
  std::getline(manifest, line);
  require(line == "painmil-dataset v1", "load_dataset: bad manifest header");

  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto toks = split_ws(line);
    if (toks[0] == "scene") {
      ds.scene.n_subjects = std::stoi(field(toks, "n_subjects"));
      ds.scene.n_views = std::stoi(field(toks, "n_views"));
      ds.scene.image_resolution = std::stoi(field(toks, "resolution"));
      ds.scene.pose_dof = std::stoi(field(toks, "pose_dof"));
      ds.scene.fps = std::stod(field(toks, "fps"));
      ds.scene.seed = std::stoull(field(toks, "seed"));
    } else if (toks[0] == "sequence") {
      SequenceEntry entry;
      entry.sequence_id = std::stoi(field(toks, "id"));
      entry.subject_id = std::stoi(field(toks, "subject"));
      entry.background_id = std::stoi(field(toks, "background"));
      const std::string label = field(toks, "label");
      require(label == "pain" || label == "no_pain",
              "load_dataset: bad label " + label);
      entry.label_pain = label == "pain";
      ds.sequences.push_back(std::move(entry));
    } else if (toks[0] == "frame") {
      require(!ds.sequences.empty(), "load_dataset: frame before sequence");
      FrameRow row;
      row.timestamp = std::stod(field(toks, "t"));
      row.view_id = std::stoi(field(toks, "view"));
      row.image_path = field(toks, "path");
      const std::string flag = field(toks, "flag", false);
      if (!flag.empty() && flag != "-") row.behavior_flag = std::stoi(flag);
      const std::string box = field(toks, "box", false);
      if (!box.empty() && box != "-") {
        const auto vals = parse_csv_doubles(box);
        require(vals.size() == 4, "load_dataset: box needs 4 values");
        row.box = Eigen::Vector4d(vals[0], vals[1], vals[2], vals[3]);
        row.has_box = true;
      }
      const std::string kp = field(toks, "kp", false);
      if (!kp.empty() && kp != "-") {
        const auto vals = parse_csv_doubles(kp);
        require(vals.size() == 2 * kNumJoints,
                "load_dataset: kp needs 16 values");
        for (int j = 0; j < kNumJoints; ++j) {
          row.keypoints(j, 0) = vals[2 * j];
          row.keypoints(j, 1) = vals[2 * j + 1];
        }
        row.has_keypoints = true;
      }
      ds.sequences.back().rows.push_back(std::move(row));
    } else {
      throw ValidationError("load_dataset: unknown record " + toks[0]);
    }
  }
  return ds;
}

}  // namespace pmil::synthdata
