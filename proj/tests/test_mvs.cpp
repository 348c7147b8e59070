#include "pmil/mvs.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "pmil/evalharness.hpp"
#include "pmil/rng.hpp"
#include "pmil/synthdata.hpp"

using namespace pmil;
using namespace pmil::mvs;

namespace {

MvsArch tiny_arch() {
  MvsArch arch;
  arch.resolution = 8;
  arch.pose_rows = 4;
  arch.appearance_dim = 8;
  arch.base_channels = 4;
  arch.max_channels = 8;
  arch.init_seed = 3;
  return arch;
}

Image random_image(int res, std::uint64_t seed) {
  Rng rng(seed);
  Image img(res, res, 3);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

evalharness::PipelineData small_pipeline(std::uint64_t seed,
                                         bool uniform = false) {
  evalharness::PipelineConfig cfg;
  cfg.scene.n_subjects = 3;
  cfg.scene.n_views = 2;
  cfg.scene.image_resolution = 16;
  cfg.scene.fps = 2.0;
  cfg.scene.seed = seed;
  cfg.gen.sequences_per_subject = 2;
  cfg.gen.sequence_seconds = 12.0;
  cfg.gen.positive_fraction = 0.5;
  cfg.top_motion_percent = 50.0;
  cfg.head_fps = 1.0;
  cfg.model_resolution = 16;
  cfg.uniform_sampling = uniform;
  return evalharness::prepare_pipeline_data(cfg);
}

}  // namespace

TEST_CASE("untrained encoder emits finite latents of the declared shapes") {
  MvsArch arch;
  arch.resolution = 32;
  MvsModel<float> model(arch);
  const EncoderOutput out = model.encode(random_image(32, 5));
  CHECK(out.pose.rows() == 200);
  CHECK(out.pose.cols() == 3);
  CHECK(out.appearance.size() == 128);
  CHECK(out.pose.allFinite());
  CHECK(out.appearance.allFinite());
}

TEST_CASE("encode is deterministic and validates the resolution") {
  MvsArch arch = tiny_arch();
  MvsModel<float> model(arch);
  const Image img = random_image(8, 9);
  const EncoderOutput a = model.encode(img);
  const EncoderOutput b = model.encode(img);
  CHECK(a.pose == b.pose);
  CHECK(a.appearance == b.appearance);
  CHECK_THROWS_AS(model.encode(random_image(16, 1)), ValidationError);
}

TEST_CASE("decode output is image-shaped, bounded, and NaN-free") {
  MvsArch arch = tiny_arch();
  MvsModel<float> model(arch);
  const EncoderOutput lat = model.encode(random_image(8, 11));
  const Image bg = random_image(8, 12);
  const Image out = model.decode(lat.pose, lat.appearance, bg);
  CHECK(out.height == 8);
  CHECK(out.width == 8);
  CHECK(out.channels == 3);
  for (const float v : out.data) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.f);
    CHECK(v <= 1.f);
  }

  Image zero_bg(8, 8, 3, 0.f);
  const Image out2 = model.decode(lat.pose, lat.appearance, zero_bg);
  for (const float v : out2.data) CHECK(std::isfinite(v));
}

TEST_CASE("decoder output responds to every latent input") {
  // Finite-difference probe on an untrained tiny model: the summed output
  // must move when any pose or appearance entry moves.
  MvsArch arch = tiny_arch();
  MvsModel<float> model(arch);
  const Image bg = random_image(8, 21);
  Eigen::MatrixXd pose = Eigen::MatrixXd::Zero(arch.pose_rows, 3);
  Eigen::VectorXd app = Eigen::VectorXd::Zero(arch.appearance_dim);
  Rng rng(22);
  for (int r = 0; r < pose.rows(); ++r) {
    for (int c = 0; c < 3; ++c) pose(r, c) = rng.normal();
  }
  for (int i = 0; i < app.size(); ++i) app[i] = rng.normal();

  auto total = [&](const Eigen::MatrixXd& p, const Eigen::VectorXd& a) {
    const Image img = model.decode(p, a, bg);
    double acc = 0.0;
    for (const float v : img.data) acc += v;
    return acc;
  };
  const double step = 0.25;
  int responsive_pose = 0;
  for (int r = 0; r < pose.rows(); ++r) {
    for (int c = 0; c < 3; ++c) {
      Eigen::MatrixXd plus = pose, minus = pose;
      plus(r, c) += step;
      minus(r, c) -= step;
      if (std::abs(total(plus, app) - total(minus, app)) > 1e-6) {
        ++responsive_pose;
      }
    }
  }
  CHECK(responsive_pose == pose.rows() * 3);

  int responsive_app = 0;
  for (int i = 0; i < app.size(); ++i) {
    Eigen::VectorXd plus = app, minus = app;
    plus[i] += step;
    minus[i] -= step;
    if (std::abs(total(pose, plus) - total(pose, minus)) > 1e-6) {
      ++responsive_app;
    }
  }
  CHECK(responsive_app == app.size());
}

TEST_CASE("mvs_loss report") {
  PerceptualNet<float> pnet(16, 7);
  const Image a = random_image(16, 31);
  const Image b = random_image(16, 32);

  SUBCASE("identical pair scores zero") {
    const MVSLossReport r = mvs_loss(a, a, pnet, 2.0);
    CHECK(r.mse == 0.0);
    CHECK(r.perceptual == 0.0);
    CHECK(r.total == 0.0);
  }

  SUBCASE("alpha zero reduces the total to the mse") {
    const MVSLossReport r = mvs_loss(a, b, pnet, 0.0);
    CHECK(r.total == r.mse);
    CHECK(r.mse > 0.0);
  }

  SUBCASE("total equals an independent mse + 2 x perceptual recomputation") {
    const MVSLossReport r = mvs_loss(a, b, pnet, 2.0);
    // Hand-recompute the pixel term.
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
      const double d = static_cast<double>(a.data[i]) - b.data[i];
      mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    CHECK(r.mse == doctest::Approx(mse).epsilon(1e-9));
    CHECK(r.total == doctest::Approx(r.mse + 2.0 * r.perceptual).epsilon(1e-6));
  }
}

TEST_CASE("batch sampler covers all ordered view pairs and keeps t' fresh") {
  const evalharness::PipelineData data = small_pipeline(41);
  REQUIRE(data.pool.frames.size() >= 6);
  BatchSampler sampler(data.pool, -1, false, false);
  Rng rng(55);

  std::map<std::pair<int, int>, int> pair_counts;
  int identity_rotations = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    const SynthesisExample ex = sampler.sample(rng);
    pair_counts[{ex.view_input, ex.view_target}] += 1;
    CHECK(ex.swap_frame != ex.input_frame);
    CHECK(data.pool.frames[ex.swap_frame].subject ==
          data.pool.frames[ex.input_frame].subject);
    if (ex.view_input == ex.view_target) ++identity_rotations;
  }
  // 2 views -> 4 ordered pairs, all observed, roughly uniform.
  CHECK(pair_counts.size() == 4);
  for (const auto& [pair, count] : pair_counts) {
    CHECK(count > 2000);
    CHECK(count < 3000);
  }
  CHECK(identity_rotations > 0);
}

TEST_CASE("batch sampler skips subjects with fewer than two timestamps") {
  evalharness::PipelineData data = small_pipeline(42);
  // Keep exactly one frame of subject 0.
  mvs::TrainingPool pruned = data.pool;
  pruned.frames.clear();
  bool kept_one = false;
  for (const auto& f : data.pool.frames) {
    if (f.subject == 0) {
      if (kept_one) continue;
      kept_one = true;
    }
    pruned.frames.push_back(f);
  }
  BatchSampler sampler(pruned, -1, false, false);
  CHECK(sampler.subjects().count(0) == 0);
  REQUIRE_FALSE(sampler.warnings().empty());
  CHECK(sampler.warnings()[0].find("subject 0") != std::string::npos);
}

TEST_CASE("training drops the loss and honors the excluded subject") {
  const evalharness::PipelineData data = small_pipeline(43);
  MvsArch arch;
  arch.resolution = 16;
  arch.pose_rows = 16;
  arch.appearance_dim = 16;
  arch.base_channels = 8;
  arch.max_channels = 16;
  arch.init_seed = 5;

  MvsTrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.samples_per_epoch = 64;
  cfg.exclude_subject = 1;
  cfg.seed = 77;
  const TrainedMvs trained = train_mvs(data.pool, arch, cfg);

  REQUIRE(trained.curve.size() == 8);
  CHECK(trained.curve.back().total < 0.5 * trained.curve.front().total);
  CHECK(trained.subjects_seen.count(1) == 0);
  CHECK(trained.subjects_seen.size() >= 2);
}

TEST_CASE("checkpoints round-trip the model bit-exactly") {
  const evalharness::PipelineData data = small_pipeline(44);
  MvsArch arch;
  arch.resolution = 16;
  arch.pose_rows = 8;
  arch.appearance_dim = 8;
  arch.base_channels = 4;
  arch.max_channels = 8;

  MvsTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.samples_per_epoch = 16;
  cfg.seed = 9;
  TrainedMvs trained = train_mvs(data.pool, arch, cfg);

  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "pmil_mvs_ckpt.bin").string();
  save_mvs_model(path, arch, *trained.model, nullptr);
  TrainedMvs loaded = load_mvs_model(path);

  const Image probe = random_image(16, 91);
  const EncoderOutput a = trained.model->encode(probe);
  const EncoderOutput b = loaded.model->encode(probe);
  CHECK(a.pose == b.pose);
  CHECK(a.appearance == b.appearance);
  fs::remove(path);
}

TEST_CASE("loss curve csv is written alongside checkpoints") {
  const evalharness::PipelineData data = small_pipeline(45);
  MvsArch arch;
  arch.resolution = 16;
  arch.pose_rows = 8;
  arch.appearance_dim = 8;
  arch.base_channels = 4;
  arch.max_channels = 8;

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pmil_mvs_run";
  fs::remove_all(dir);
  MvsTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.samples_per_epoch = 8;
  cfg.seed = 10;
  cfg.checkpoint_dir = dir.string();
  train_mvs(data.pool, arch, cfg);

  CHECK(fs::exists(dir / "mvs_epoch_001.ckpt"));
  CHECK(fs::exists(dir / "mvs_epoch_002.ckpt"));
  std::ifstream f(dir / "loss_curve.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "epoch,mse,perceptual,total");
  fs::remove_all(dir);
}
