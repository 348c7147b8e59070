#include "pmil/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pmil::geometry {

namespace {

constexpr double kOrthoTol = 1e-9;

bool is_rotation(const Eigen::Matrix3d& r, double tol) {
  const Eigen::Matrix3d gram = r * r.transpose();
  return (gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

}  // namespace

CameraView make_camera(int view_id, const Eigen::Matrix3d& rotation, double fx,
                       double fy, double cx, double cy) {
  CameraView view;
  view.view_id = view_id;
  view.rotation = rotation;
  view.intrinsics << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  view.principal_point = Eigen::Vector2d(cx, cy);
  validate(view);
  return view;
}

void validate(const CameraView& view) {
  require(view.rotation.allFinite(), "CameraView: non-finite rotation");
  require(is_rotation(view.rotation, kOrthoTol),
          "CameraView: rotation is not orthonormal with det +1");
  const Eigen::Matrix3d& k = view.intrinsics;
  require(k.allFinite(), "CameraView: non-finite intrinsics");
  require(k(2, 2) == 1.0, "CameraView: intrinsics[2][2] must be 1");
  require(k(1, 0) == 0.0 && k(2, 0) == 0.0 && k(2, 1) == 0.0,
          "CameraView: intrinsics must be upper-triangular");
  require(k(0, 0) > 0.0 && k(1, 1) > 0.0,
          "CameraView: focal lengths must be positive");
}

void validate(const PoseLatent& latent) {
  require(latent.points.rows() == PoseLatent::kRows,
          "PoseLatent: expected 200 rows");
  require(latent.points.allFinite(), "PoseLatent: non-finite values");
}

void validate(const CropSpec& crop) {
  require(crop.size.x() > 0 && crop.size.y() > 0, "CropSpec: size must be > 0");
  require(crop.output_resolution.x() > 0 && crop.output_resolution.y() > 0,
          "CropSpec: output_resolution must be > 0");
  require(crop.center.allFinite(), "CropSpec: non-finite center");
}

Eigen::Matrix3d relative_rotation(const CameraView& src,
                                  const CameraView& dst) {
  validate(src);
  validate(dst);
  return dst.rotation * src.rotation.transpose();
}

Eigen::Matrix<double, Eigen::Dynamic, 3> rotate_rows(
    const Eigen::Matrix<double, Eigen::Dynamic, 3>& rows,
    const Eigen::Matrix3d& r) {
  require(is_rotation(r, kOrthoTol), "rotate_rows: R is not a rotation");
  // out_row = R * row, i.e. out = rows * R^T.
  return rows * r.transpose();
}

PoseLatent rotate_pose(const PoseLatent& latent, const Eigen::Matrix3d& r) {
  validate(latent);
  PoseLatent out;
  out.points = rotate_rows(latent.points, r);
  return out;
}

Eigen::Matrix3d virtual_rotation(const CameraView& view,
                                 const Eigen::Vector2d& pixel) {
  validate(view);
  Eigen::Vector3d ray =
      view.intrinsics.inverse() * Eigen::Vector3d(pixel.x(), pixel.y(), 1.0);
  require(ray.allFinite() && ray.z() > 0.0,
          "virtual_rotation: crop center ray is behind the camera");
  ray.normalize();
  const Eigen::Vector3d z(0, 0, 1);
  // Minimal rotation with R * ray = z: axis = ray x z, angle = acos(ray . z).
  const Eigen::Vector3d axis = ray.cross(z);
  const double s = axis.norm();
  const double c = ray.dot(z);
  if (s < 1e-15) return Eigen::Matrix3d::Identity();
  const Eigen::Vector3d a = axis / s;
  const double angle = std::atan2(s, c);
  return Eigen::AngleAxisd(angle, a).toRotationMatrix();
}

Eigen::Matrix3d crop_shear_homography(const CameraView& view,
                                      const CropSpec& crop) {
  validate(view);
  validate(crop);
  const Eigen::Matrix3d r_virt = virtual_rotation(view, crop.center);
  const Eigen::Matrix3d rot_warp =
      view.intrinsics * r_virt * view.intrinsics.inverse();
  // After rot_warp the crop center lands on the principal point; scale and
  // translate the crop window onto the output raster.
  const double sx = crop.output_resolution.x() / crop.size.x();
  const double sy = crop.output_resolution.y() / crop.size.y();
  Eigen::Matrix3d window = Eigen::Matrix3d::Identity();
  window(0, 0) = sx;
  window(1, 1) = sy;
  window(0, 2) = 0.5 * crop.output_resolution.x() - sx * view.principal_point.x();
  window(1, 2) = 0.5 * crop.output_resolution.y() - sy * view.principal_point.y();
  return window * rot_warp;
}

CameraView adjust_rotation_for_crop(const CameraView& view,
                                    const CropSpec& crop) {
  validate(view);
  validate(crop);
  CameraView out = view;
  out.rotation = virtual_rotation(view, crop.center) * view.rotation;
  return out;
}

void save_rig(const std::string& path, const std::vector<CameraView>& views) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("save_rig: cannot open " + path);
  char buf[32];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto& view : views) {
    validate(view);
    require(view.intrinsics(0, 1) == 0.0, "save_rig: skew not serializable");
    f << view.view_id;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) f << ' ' << fmt(view.rotation(r, c));
    }
    f << ' ' << fmt(view.intrinsics(0, 0)) << ' ' << fmt(view.intrinsics(1, 1))
      << ' ' << fmt(view.intrinsics(0, 2)) << ' ' << fmt(view.intrinsics(1, 2))
      << '\n';
  }
}

std::vector<CameraView> load_rig(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("load_rig: cannot open " + path);
  std::vector<CameraView> views;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    int view_id;
    Eigen::Matrix3d rot;
    double fx, fy, cx, cy;
    ss >> view_id;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) ss >> rot(r, c);
    }
    ss >> fx >> fy >> cx >> cy;
    if (!ss) throw ValidationError("load_rig: malformed line: " + line);
    views.push_back(make_camera(view_id, rot, fx, fy, cx, cy));
  }
  return views;
}

}  // namespace pmil::geometry
