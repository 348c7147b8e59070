#include "pmil/geometry.hpp"

#include <doctest.h>

#include <filesystem>

#include "pmil/image.hpp"
#include "pmil/rng.hpp"
#include "support/testutil.hpp"

using namespace pmil;
using namespace pmil::geometry;

namespace {

CameraView camera_with(const Eigen::Matrix3d& rot, double fx = 80, double fy = 80,
                       double cx = 32, double cy = 32, int id = 0) {
  return make_camera(id, rot, fx, fy, cx, cy);
}

PoseLatent random_latent(Rng& rng) {
  PoseLatent latent;
  latent.points.resize(PoseLatent::kRows, 3);
  for (int r = 0; r < PoseLatent::kRows; ++r) {
    for (int c = 0; c < 3; ++c) latent.points(r, c) = rng.normal();
  }
  return latent;
}

}  // namespace

TEST_CASE("relative_rotation identity and composition") {
  Rng rng(42);
  const CameraView a = camera_with(testutil::random_rotation(rng));
  const CameraView b = camera_with(testutil::random_rotation(rng));
  const CameraView c = camera_with(testutil::random_rotation(rng));

  CHECK((relative_rotation(a, a) - Eigen::Matrix3d::Identity()).norm() ==
        doctest::Approx(0.0).epsilon(1e-12));

  const Eigen::Matrix3d ab = relative_rotation(a, b);
  const Eigen::Matrix3d bc = relative_rotation(b, c);
  const Eigen::Matrix3d ac = relative_rotation(a, c);
  CHECK((bc * ab - ac).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("relative_rotation stays orthonormal over random pairs") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const CameraView a = camera_with(testutil::random_rotation(rng));
    const CameraView b = camera_with(testutil::random_rotation(rng));
    const Eigen::Matrix3d r = relative_rotation(a, b);
    CHECK((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
          1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    // Swapping the roles transposes the result.
    CHECK((relative_rotation(b, a) - r.transpose()).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("relative_rotation rejects a non-orthonormal input") {
  CameraView bad;
  bad.rotation = Eigen::Matrix3d::Identity();
  bad.rotation(0, 0) = 1.5;
  bad.intrinsics << 80, 0, 32, 0, 80, 32, 0, 0, 1;
  bad.principal_point = {32, 32};
  const CameraView good = camera_with(Eigen::Matrix3d::Identity());
  CHECK_THROWS_AS(relative_rotation(bad, good), ValidationError);
}

TEST_CASE("rotate_pose identity, round-trip, axis case") {
  Rng rng(3);
  const PoseLatent latent = random_latent(rng);

  const PoseLatent same = rotate_pose(latent, Eigen::Matrix3d::Identity());
  CHECK((same.points - latent.points).cwiseAbs().maxCoeff() == 0.0);

  const Eigen::Matrix3d r = testutil::random_rotation(rng);
  const PoseLatent back = rotate_pose(rotate_pose(latent, r), r.transpose());
  CHECK((back.points - latent.points).cwiseAbs().maxCoeff() < 1e-9);

  // 90 degrees about z maps (1, 0, 0) to (0, 1, 0).
  Eigen::Matrix3d rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  PoseLatent row = latent;
  row.points.setZero();
  row.points(0, 0) = 1.0;
  const PoseLatent turned = rotate_pose(row, rz);
  CHECK(turned.points(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(turned.points(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rotate_pose is an isometry on latent rows") {
  Rng rng(11);
  const PoseLatent latent = random_latent(rng);
  const PoseLatent rotated = rotate_pose(latent, testutil::random_rotation(rng));
  for (int i = 0; i < 20; ++i) {
    const int a = static_cast<int>(rng.below(PoseLatent::kRows));
    const int b = static_cast<int>(rng.below(PoseLatent::kRows));
    const double before = (latent.points.row(a) - latent.points.row(b)).norm();
    const double after =
        (rotated.points.row(a) - rotated.points.row(b)).norm();
    CHECK(after == doctest::Approx(before).epsilon(1e-9));
  }
  // Row norms survive as well.
  for (int r = 0; r < PoseLatent::kRows; ++r) {
    CHECK(rotated.points.row(r).norm() ==
          doctest::Approx(latent.points.row(r).norm()).epsilon(1e-9));
  }
}

TEST_CASE("crop_shear_homography at the principal point is scale+translate") {
  Rng rng(5);
  const CameraView view = camera_with(testutil::random_rotation(rng));
  CropSpec crop;
  crop.center = view.principal_point;
  crop.size = {20, 20};
  crop.output_resolution = {64, 64};

  const Eigen::Matrix3d h = crop_shear_homography(view, crop);
  Eigen::Matrix3d expected = Eigen::Matrix3d::Identity();
  expected(0, 0) = 64.0 / 20.0;
  expected(1, 1) = 64.0 / 20.0;
  expected(0, 2) = 32.0 - expected(0, 0) * 32.0;
  expected(1, 2) = 32.0 - expected(1, 1) * 32.0;
  CHECK((h - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("crop_shear_homography maps the crop center to the output center") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const CameraView view = camera_with(testutil::random_rotation(rng));
    CropSpec crop;
    crop.center = {rng.uniform(2, 62), rng.uniform(2, 62)};
    crop.size = {rng.uniform(8, 40), rng.uniform(8, 40)};
    crop.output_resolution = {64, 64};
    const Eigen::Matrix3d h = crop_shear_homography(view, crop);

    const Eigen::Vector3d mapped =
        h * Eigen::Vector3d(crop.center.x(), crop.center.y(), 1.0);
    CHECK(mapped.x() / mapped.z() == doctest::Approx(32.0).epsilon(1e-6));
    CHECK(mapped.y() / mapped.z() == doctest::Approx(32.0).epsilon(1e-6));

    CHECK((h.inverse() * h - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
          1e-9);
  }
}

TEST_CASE("virtual rotation aligns the crop-center ray with the optical axis") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const CameraView view = camera_with(testutil::random_rotation(rng));
    const Eigen::Vector2d pixel(rng.uniform(1, 63), rng.uniform(1, 63));
    const Eigen::Matrix3d r_virt = virtual_rotation(view, pixel);
    Eigen::Vector3d ray =
        view.intrinsics.inverse() * Eigen::Vector3d(pixel.x(), pixel.y(), 1.0);
    ray.normalize();
    const Eigen::Vector3d aligned = r_virt * ray;
    const double angle = std::atan2(aligned.head<2>().norm(), aligned.z());
    CHECK(angle < 1e-7);
  }
}

TEST_CASE("adjust_rotation_for_crop") {
  Rng rng(19);
  const CameraView view = camera_with(testutil::random_rotation(rng));

  SUBCASE("crop at the principal point leaves the view unchanged") {
    CropSpec crop;
    crop.center = view.principal_point;
    crop.size = {16, 16};
    crop.output_resolution = {64, 64};
    const CameraView adjusted = adjust_rotation_for_crop(view, crop);
    CHECK((adjusted.rotation - view.rotation).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("adjusted rotations stay orthonormal") {
    for (int trial = 0; trial < 50; ++trial) {
      CropSpec crop;
      crop.center = {rng.uniform(1, 63), rng.uniform(1, 63)};
      crop.size = {12, 12};
      crop.output_resolution = {32, 32};
      const Eigen::Matrix3d r = adjust_rotation_for_crop(view, crop).rotation;
      CHECK((r * r.transpose() - Eigen::Matrix3d::Identity())
                .cwiseAbs()
                .maxCoeff() < 1e-9);
    }
  }

  SUBCASE("co-centered views: crop-adjusted relative rotation maps rays") {
    // Two cameras sharing a center see every point's ray related by the
    // relative rotation exactly; crop adjustment must preserve that.
    for (int trial = 0; trial < 50; ++trial) {
      const CameraView vi = camera_with(testutil::random_rotation(rng), 80, 80,
                                        32, 32, 0);
      const CameraView vj = camera_with(testutil::random_rotation(rng), 80, 80,
                                        32, 32, 1);
      Eigen::Vector3d point(rng.normal(), rng.normal(), rng.normal());
      // Keep the point in front of both cameras.
      if ((vi.rotation * point).z() <= 0.2 || (vj.rotation * point).z() <= 0.2) {
        continue;
      }
      auto pixel_of = [](const CameraView& v, const Eigen::Vector3d& p) {
        const Eigen::Vector3d cam = v.rotation * p;
        return Eigen::Vector2d(
            v.intrinsics(0, 0) * cam.x() / cam.z() + v.intrinsics(0, 2),
            v.intrinsics(1, 1) * cam.y() / cam.z() + v.intrinsics(1, 2));
      };
      CropSpec ci, cj;
      ci.center = pixel_of(vi, point);
      cj.center = pixel_of(vj, point);
      ci.size = cj.size = {16, 16};
      ci.output_resolution = cj.output_resolution = {64, 64};

      const CameraView ai = adjust_rotation_for_crop(vi, ci);
      const CameraView aj = adjust_rotation_for_crop(vj, cj);
      const Eigen::Matrix3d rel = relative_rotation(ai, aj);

      const Eigen::Vector3d ray_i = (ai.rotation * point).normalized();
      const Eigen::Vector3d ray_j = (aj.rotation * point).normalized();
      CHECK((rel * ray_i - ray_j).norm() < 1e-6);
    }
  }
}

TEST_CASE("rig manifest round-trips doubles bit-exactly") {
  Rng rng(23);
  std::vector<CameraView> rig;
  for (int i = 0; i < 4; ++i) {
    rig.push_back(make_camera(i, testutil::random_rotation(rng),
                              rng.uniform(50, 120), rng.uniform(50, 120),
                              rng.uniform(20, 40), rng.uniform(20, 40)));
  }
  const std::string path =
      (std::filesystem::temp_directory_path() / "pmil_rig_test.txt").string();
  save_rig(path, rig);
  const std::vector<CameraView> loaded = load_rig(path);
  REQUIRE(loaded.size() == rig.size());
  for (size_t i = 0; i < rig.size(); ++i) {
    CHECK(loaded[i].view_id == rig[i].view_id);
    CHECK(loaded[i].rotation == rig[i].rotation);
    CHECK(loaded[i].intrinsics == rig[i].intrinsics);
    CHECK(loaded[i].principal_point == rig[i].principal_point);
  }
  std::filesystem::remove(path);
}

TEST_CASE("warp_homography identity and shift") {
  Image img(16, 16, 3);
  Rng rng(29);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());

  const Image same =
      warp_homography(img, Eigen::Matrix3d::Identity(), 16, 16);
  CHECK(image_mae(same, img) < 1e-6);

  Eigen::Matrix3d shift = Eigen::Matrix3d::Identity();
  shift(0, 2) = 3.0;  // source pixel x maps to x+3
  const Image moved = warp_homography(img, shift, 16, 16);
  CHECK(moved.at(5, 7, 0) == doctest::Approx(img.at(5, 4, 0)).epsilon(1e-6));
}
