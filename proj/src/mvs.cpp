#include "pmil/mvs.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

namespace pmil::mvs {

namespace fs = std::filesystem;
using nlohmann::json;

void validate(const MvsArch& arch) {
  require(arch.resolution >= 8, "MvsArch: resolution >= 8");
  require((arch.resolution & (arch.resolution - 1)) == 0,
          "MvsArch: resolution must be a power of two");
  require(arch.bottleneck_hw >= 2 && arch.resolution > arch.bottleneck_hw,
          "MvsArch: bottleneck must be smaller than the resolution");
  require(arch.pose_rows >= 1 && arch.appearance_dim >= 1,
          "MvsArch: latent sizes must be positive");
  require(arch.base_channels >= 2, "MvsArch: base_channels >= 2");
}

Image decode_crop_u8(const std::vector<unsigned char>& bytes, int resolution) {
  require(bytes.size() == static_cast<size_t>(resolution) * resolution * 3,
          "decode_crop_u8: byte count mismatch");
  Image img(resolution, resolution, 3);
  for (size_t i = 0; i < bytes.size(); ++i) {
    img.data[i] = static_cast<float>(bytes[i]) / 255.f;
  }
  return img;
}

std::vector<unsigned char> encode_crop_u8(const Image& img) {
  std::vector<unsigned char> bytes(img.numel());
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(
        std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  }
  return bytes;
}

// ---------------------------------------------------------------------------
// BatchSampler
// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const TrainingPool& pool, int exclude_subject,
                           bool no_appearance_swap, bool use_global_background)
    : pool_(&pool), no_swap_(no_appearance_swap),
      global_bg_(use_global_background) {
  std::map<int, std::vector<int>> candidates;
  for (size_t i = 0; i < pool.frames.size(); ++i) {
    const auto& frame = pool.frames[i];
    if (frame.subject == exclude_subject) continue;
    candidates[frame.subject].push_back(static_cast<int>(i));
  }
  for (auto& [subject, idx] : candidates) {
    if (idx.size() < 2) {
      warnings_.push_back("subject " + std::to_string(subject) +
                          " skipped: fewer than 2 usable timestamps");
      continue;
    }
    subjects_.insert(subject);
    by_subject_[subject] = idx;
    eligible_.insert(eligible_.end(), idx.begin(), idx.end());
  }
}

SynthesisExample BatchSampler::sample(Rng& rng) const {
  require(!eligible_.empty(), "BatchSampler: empty pool");
  const int n_views = pool_->n_views;
  const int res = pool_->resolution;
  const int idx =
      eligible_[static_cast<size_t>(rng.below(eligible_.size()))];
  const PoolFrame& frame = pool_->frames[idx];
  const int i = static_cast<int>(rng.below(n_views));
  const int j = static_cast<int>(rng.below(n_views));

  SynthesisExample ex;
  ex.view_input = i;
  ex.view_target = j;
  ex.input_frame = idx;
  ex.swap_frame = idx;
  ex.subject = frame.subject;
  ex.input = decode_crop_u8(frame.crops[i], res);
  ex.target = decode_crop_u8(frame.crops[j], res);
  if (no_swap_) {
    ex.swap = ex.input;
  } else {
    const auto& same_subject = by_subject_.at(frame.subject);
    int other = idx;
    while (other == idx) {
      other = same_subject[static_cast<size_t>(rng.below(same_subject.size()))];
    }
    ex.swap_frame = other;
    ex.swap = decode_crop_u8(pool_->frames[other].crops[i], res);
  }
  ex.rotation =
      frame.adjusted_rotation[j] * frame.adjusted_rotation[i].transpose();

  const Image* bg_full = nullptr;
  if (global_bg_) {
    bg_full = &pool_->global_background.at(j);
  } else {
    const int window = pool_->sequence_window.at(frame.sequence_id);
    bg_full = &pool_->window_background.at({j, window});
  }
  ex.background = warp_homography(*bg_full, frame.crop_homography[j], res, res);
  return ex;
}

// ---------------------------------------------------------------------------
// Loss + gradients
// ---------------------------------------------------------------------------

template <typename T>
MVSLossReport mvs_step_gradients(MvsModel<T>& model, PerceptualNet<T>& pnet,
                                 const nn::Tensor<T>& inputs2n,
                                 const nn::Tensor<T>& targets,
                                 const nn::Tensor<T>& backgrounds,
                                 const std::vector<Eigen::Matrix3d>& rotations,
                                 double alpha) {
  const int b = targets.dim(0);
  require(inputs2n.dim(0) == 2 * b, "mvs_step: inputs must stack [x; swap]");
  require(static_cast<int>(rotations.size()) == b, "mvs_step: one R per pair");
  const int rows = model.arch().pose_rows;
  const int pdim = model.arch().pose_dim();

  auto latents = model.encode_batch(inputs2n);
  // Pose comes from the input half, appearance from the swap half.
  nn::Tensor<T> pose_rot({b, pdim});
  for (int s = 0; s < b; ++s) {
    const T* p = latents.pose.v.data() + static_cast<size_t>(s) * pdim;
    T* out = pose_rot.v.data() + static_cast<size_t>(s) * pdim;
    const Eigen::Matrix3d& r = rotations[s];
    for (int k = 0; k < rows; ++k) {
      for (int c = 0; c < 3; ++c) {
        out[k * 3 + c] = static_cast<T>(r(c, 0)) * p[k * 3 + 0] +
                         static_cast<T>(r(c, 1)) * p[k * 3 + 1] +
                         static_cast<T>(r(c, 2)) * p[k * 3 + 2];
      }
    }
  }
  nn::Tensor<T> app = nn::slice_batch(latents.app, b, b);

  nn::Tensor<T> pred = model.decode_batch(pose_rot, app, backgrounds);

  MVSLossReport report;
  report.alpha = alpha;
  const double mse_norm = static_cast<double>(pred.numel());
  nn::Tensor<T> dpred(pred.shape);
  double mse_acc = 0.0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const double diff =
        static_cast<double>(pred.v[i]) - static_cast<double>(targets.v[i]);
    mse_acc += diff * diff;
    dpred.v[i] = static_cast<T>(2.0 * diff / mse_norm);
  }
  report.mse = mse_acc / mse_norm;

  // Target features first so the cached activations belong to the prediction.
  nn::Tensor<T> feat_target = pnet.features(targets);
  nn::Tensor<T> feat_pred = pnet.features(pred);
  const double perc_norm = static_cast<double>(feat_pred.numel());
  nn::Tensor<T> dfeat(feat_pred.shape);
  double perc_acc = 0.0;
  for (size_t i = 0; i < feat_pred.v.size(); ++i) {
    const double diff = static_cast<double>(feat_pred.v[i]) -
                        static_cast<double>(feat_target.v[i]);
    perc_acc += diff * diff;
    dfeat.v[i] = static_cast<T>(alpha * 2.0 * diff / perc_norm);
  }
  report.perceptual = perc_acc / perc_norm;
  report.total = report.mse + alpha * report.perceptual;

  nn::Tensor<T> dpred_perc = pnet.backward_input(dfeat);
  for (size_t i = 0; i < dpred.v.size(); ++i) dpred.v[i] += dpred_perc.v[i];

  auto [dpose_rot, dapp] = model.decode_backward(dpred);

  // Un-rotate: dL/dpose = dL/dpose_rot * R.
  nn::Tensor<T> dpose_all({2 * b, pdim});
  for (int s = 0; s < b; ++s) {
    const T* dout = dpose_rot.v.data() + static_cast<size_t>(s) * pdim;
    T* dp = dpose_all.v.data() + static_cast<size_t>(s) * pdim;
    const Eigen::Matrix3d& r = rotations[s];
    for (int k = 0; k < rows; ++k) {
      for (int c = 0; c < 3; ++c) {
        dp[k * 3 + c] = static_cast<T>(r(0, c)) * dout[k * 3 + 0] +
                        static_cast<T>(r(1, c)) * dout[k * 3 + 1] +
                        static_cast<T>(r(2, c)) * dout[k * 3 + 2];
      }
    }
  }
  nn::Tensor<T> dapp_all({2 * b, model.arch().appearance_dim});
  std::copy(dapp.v.begin(), dapp.v.end(),
            dapp_all.v.begin() + dapp.v.size());
  model.encode_backward(dpose_all, dapp_all);
  return report;
}

template MVSLossReport mvs_step_gradients<float>(
    MvsModel<float>&, PerceptualNet<float>&, const nn::Tensor<float>&,
    const nn::Tensor<float>&, const nn::Tensor<float>&,
    const std::vector<Eigen::Matrix3d>&, double);
template MVSLossReport mvs_step_gradients<double>(
    MvsModel<double>&, PerceptualNet<double>&, const nn::Tensor<double>&,
    const nn::Tensor<double>&, const nn::Tensor<double>&,
    const std::vector<Eigen::Matrix3d>&, double);

MVSLossReport mvs_loss(const Image& predicted, const Image& target,
                       PerceptualNet<float>& extractor, double alpha) {
  require(predicted.same_shape(target), "mvs_loss: shape mismatch");
  MVSLossReport report;
  report.alpha = alpha;
  double acc = 0.0;
  for (size_t i = 0; i < predicted.data.size(); ++i) {
    const double diff =
        static_cast<double>(predicted.data[i]) - target.data[i];
    acc += diff * diff;
  }
  report.mse = acc / static_cast<double>(predicted.numel());

  nn::Tensor<float> tp({1, 3, predicted.height, predicted.width});
  nn::Tensor<float> tt(tp.shape);
  image_into_tensor(tp, 0, predicted);
  image_into_tensor(tt, 0, target);
  const nn::Tensor<float> fp = extractor.features(tp);
  const nn::Tensor<float> ft = extractor.features(tt);
  double perc = 0.0;
  for (size_t i = 0; i < fp.v.size(); ++i) {
    const double diff = static_cast<double>(fp.v[i]) - ft.v[i];
    perc += diff * diff;
  }
  report.perceptual = perc / static_cast<double>(fp.numel());
  report.total = report.mse + alpha * report.perceptual;
  return report;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainedMvs train_mvs(const TrainingPool& pool, const MvsArch& arch,
                     const MvsTrainConfig& cfg) {
  validate(arch);
  require(pool.resolution == arch.resolution,
          "train_mvs: pool resolution must match the architecture");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, "train_mvs: bad config");

  TrainedMvs trained;
  trained.arch = arch;
  trained.model = std::make_unique<MvsModel<float>>(arch);
  trained.perceptual =
      std::make_unique<PerceptualNet<float>>(arch.resolution, arch.init_seed);

  BatchSampler sampler(pool, cfg.exclude_subject, cfg.no_appearance_swap,
                       cfg.uniform_sampling);
  require(!sampler.empty(), "train_mvs: no usable training subjects");
  trained.subjects_seen = sampler.subjects();

  nn::Adam<float> opt(trained.model->params(),
                      static_cast<float>(cfg.learning_rate));
  Rng rng = Rng(cfg.seed).fork(0x7EA1);
  const int res = arch.resolution;
  const int samples_per_epoch = cfg.samples_per_epoch > 0
                                    ? cfg.samples_per_epoch
                                    : static_cast<int>(sampler.pool_size());

  if (!cfg.checkpoint_dir.empty()) {
    fs::create_directories(cfg.checkpoint_dir);
  }

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double mse = 0.0, perc = 0.0, total = 0.0;
    int batches = 0;
    int done = 0;
    while (done < samples_per_epoch) {
      const int nb = std::min(cfg.batch_size, samples_per_epoch - done);
      nn::Tensor<float> inputs2n({2 * nb, 3, res, res});
      nn::Tensor<float> targets({nb, 3, res, res});
      nn::Tensor<float> backgrounds({nb, 3, res, res});
      std::vector<Eigen::Matrix3d> rotations(nb);
      for (int s = 0; s < nb; ++s) {
        const SynthesisExample ex = sampler.sample(rng);
        image_into_tensor(inputs2n, s, ex.input);
        image_into_tensor(inputs2n, nb + s, ex.swap);
        image_into_tensor(targets, s, ex.target);
        if (!cfg.no_background_input) {
          image_into_tensor(backgrounds, s, ex.background);
        }
        rotations[s] = ex.rotation;
      }
      opt.zero_grad();
      const MVSLossReport report =
          mvs_step_gradients(*trained.model, *trained.perceptual, inputs2n,
                             targets, backgrounds, rotations, cfg.alpha);
      if (!std::isfinite(report.total)) {
        throw RuntimeAbort("train_mvs: non-finite loss at epoch " +
                           std::to_string(epoch));
      }
      opt.step();
      mse += report.mse;
      perc += report.perceptual;
      total += report.total;
      ++batches;
      done += nb;
    }
    CurveRow row;
    row.epoch = epoch;
    row.mse = mse / batches;
    row.perceptual = perc / batches;
    row.total = total / batches;
    trained.curve.push_back(row);

    if (!cfg.checkpoint_dir.empty()) {
      char name[64];
      std::snprintf(name, sizeof(name), "mvs_epoch_%03d.ckpt", epoch);
      save_mvs_model((fs::path(cfg.checkpoint_dir) / name).string(), arch,
                     *trained.model, &opt);
      save_curve((fs::path(cfg.checkpoint_dir) / "loss_curve.csv").string(),
                 trained.curve);
    }
  }
  return trained;
}

void save_curve(const std::string& path, const std::vector<CurveRow>& curve) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("save_curve: cannot open " + path);
  f << "epoch,mse,perceptual,total\n";
  char buf[128];
  for (const auto& row : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g,%.8g\n", row.epoch, row.mse,
                  row.perceptual, row.total);
    f << buf;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'M', 'I', 'L', 'C', 'K', 'P', '1'};

void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_floats(std::ofstream& f, const std::vector<float>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> read_floats(std::ifstream& f, size_t n) {
  std::vector<float> v(n);
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(n * sizeof(float)));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& kind,
                     const std::string& arch_json,
                     std::vector<nn::ParamBlock<float>*> blocks,
                     nn::Adam<float>* optimizer) {
  json header;
  header["kind"] = kind;
  header["arch"] = json::parse(arch_json);
  header["optimizer"] = optimizer != nullptr;
  header["step"] = optimizer ? optimizer->step_count() : 0;
  json table = json::array();
  for (const auto* b : blocks) {
    table.push_back({{"name", b->name}, {"size", b->w.size()}});
  }
  header["blocks"] = table;
  const std::string header_str = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeAbort("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  write_u64(f, header_str.size());
  f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto* b : blocks) write_floats(f, b->w);
  if (optimizer) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      write_floats(f, optimizer->moment1()[i]);
      write_floats(f, optimizer->moment2()[i]);
    }
  }
  if (!f) throw RuntimeAbort("save_checkpoint: write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  require(f && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          "load_checkpoint: bad magic in " + path);
  const std::uint64_t header_len = read_u64(f);
  std::string header_str(header_len, '\0');
  f.read(header_str.data(), static_cast<std::streamsize>(header_len));
  require(static_cast<bool>(f), "load_checkpoint: truncated header");
  const json header = json::parse(header_str);

  CheckpointData out;
  out.kind = header.at("kind").get<std::string>();
  out.arch_json = header.at("arch").dump();
  out.has_optimizer = header.at("optimizer").get<bool>();
  out.step_count = header.at("step").get<long long>();
  std::vector<std::pair<std::string, size_t>> table;
  for (const auto& entry : header.at("blocks")) {
    table.emplace_back(entry.at("name").get<std::string>(),
                       entry.at("size").get<size_t>());
  }
  for (const auto& [name, size] : table) {
    out.blocks[name] = read_floats(f, size);
  }
  if (out.has_optimizer) {
    for (const auto& [name, size] : table) {
      out.moment1[name] = read_floats(f, size);
      out.moment2[name] = read_floats(f, size);
    }
  }
  require(static_cast<bool>(f), "load_checkpoint: truncated data");
  return out;
}

void save_mvs_model(const std::string& path, const MvsArch& arch,
                    MvsModel<float>& model, nn::Adam<float>* optimizer) {
  json aj;
  aj["resolution"] = arch.resolution;
  aj["pose_rows"] = arch.pose_rows;
  aj["appearance_dim"] = arch.appearance_dim;
  aj["base_channels"] = arch.base_channels;
  aj["max_channels"] = arch.max_channels;
  aj["bottleneck_hw"] = arch.bottleneck_hw;
  aj["init_seed"] = arch.init_seed;
  save_checkpoint(path, "mvs", aj.dump(), model.params(), optimizer);
}

TrainedMvs load_mvs_model(const std::string& path) {
  const CheckpointData data = load_checkpoint(path);
  require(data.kind == "mvs", "load_mvs_model: checkpoint is not an mvs model");
  const json aj = json::parse(data.arch_json);
  MvsArch arch;
  arch.resolution = aj.at("resolution").get<int>();
  arch.pose_rows = aj.at("pose_rows").get<int>();
  arch.appearance_dim = aj.at("appearance_dim").get<int>();
  arch.base_channels = aj.at("base_channels").get<int>();
  arch.max_channels = aj.at("max_channels").get<int>();
  arch.bottleneck_hw = aj.at("bottleneck_hw").get<int>();
  arch.init_seed = aj.at("init_seed").get<std::uint64_t>();

  TrainedMvs trained;
  trained.arch = arch;
  trained.model = std::make_unique<MvsModel<float>>(arch);
  trained.perceptual =
      std::make_unique<PerceptualNet<float>>(arch.resolution, arch.init_seed);
  for (auto* block : trained.model->params()) {
    const auto it = data.blocks.find(block->name);
    require(it != data.blocks.end(),
            "load_mvs_model: missing block " + block->name);
    require(it->second.size() == block->w.size(),
            "load_mvs_model: size mismatch for " + block->name);
    block->w = it->second;
  }
  return trained;
}

}  // namespace pmil::mvs
