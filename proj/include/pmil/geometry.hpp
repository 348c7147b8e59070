#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmil/error.hpp"

namespace pmil::geometry {

// A pinhole view: world-to-camera rotation plus intrinsics. Camera centers
// are deliberately absent; the latent-rotation machinery only needs relative
// orientation.
struct CameraView {
  int view_id = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();   // world -> camera
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();  // pixels
  Eigen::Vector2d principal_point = Eigen::Vector2d::Zero();
};

CameraView make_camera(int view_id, const Eigen::Matrix3d& rotation, double fx,
                       double fy, double cx, double cy);

void validate(const CameraView& view);

// The rotation-covariant latent: rows are unitless 3-vectors that transform
// with the relative camera rotation.
struct PoseLatent {
  static constexpr int kRows = 200;
  Eigen::Matrix<double, Eigen::Dynamic, 3> points;
};

void validate(const PoseLatent& latent);

// A detection crop to be shear-normalized: center/size in source pixels,
// output_resolution in target pixels.
struct CropSpec {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  Eigen::Vector2d size = Eigen::Vector2d::Zero();
  Eigen::Vector2i output_resolution = Eigen::Vector2i::Zero();
};

void validate(const CropSpec& crop);

// R_{src->dst} = R_dst * R_src^T. Orthonormal with det +1 for valid inputs.
Eigen::Matrix3d relative_rotation(const CameraView& src, const CameraView& dst);

// Applies out_row = R * row to every latent row. Row norms are preserved.
PoseLatent rotate_pose(const PoseLatent& latent, const Eigen::Matrix3d& r);

// Generic row rotation shared with models whose latent has a non-default row
// count.
Eigen::Matrix<double, Eigen::Dynamic, 3> rotate_rows(
    const Eigen::Matrix<double, Eigen::Dynamic, 3>& rows,
    const Eigen::Matrix3d& r);

// Minimal rotation taking the back-projected ray of `pixel` onto the optical
// axis. Identity when the pixel is the principal point.
Eigen::Matrix3d virtual_rotation(const CameraView& view,
                                 const Eigen::Vector2d& pixel);

// Warp making the crop appear taken by a virtual camera aimed at the crop
// center: H = S * K * R_virt * K^-1, with S scaling the crop window to the
// output resolution. H maps crop.center to the output-crop center.
Eigen::Matrix3d crop_shear_homography(const CameraView& view,
                                      const CropSpec& crop);

// The virtual view whose optical axis passes through the crop center;
// rotation = R_virt * view.rotation. Feed pairs of these to
// relative_rotation so latent rotations are computed about crop centers.
CameraView adjust_rotation_for_crop(const CameraView& view,
                                    const CropSpec& crop);

// Plain-text rig manifest: one line per view,
//   view_id r00 r01 r02 r10 r11 r12 r20 r21 r22 fx fy cx cy
// written with 17 significant digits so doubles round-trip bit-exactly.
void save_rig(const std::string& path, const std::vector<CameraView>& views);
std::vector<CameraView> load_rig(const std::string& path);

}  // namespace pmil::geometry
