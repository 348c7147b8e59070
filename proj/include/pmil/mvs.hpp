#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "pmil/image.hpp"
#include "pmil/nn.hpp"
#include "pmil/rng.hpp"

// Self-supervised multi-view synthesis: an encoder splitting each crop into a
// rotation-covariant pose latent and an appearance code, and a decoder that
// reassembles the scene from (rotated pose, swapped appearance, target-view
// background).
namespace pmil::mvs {

struct MvsArch {
  int resolution = 64;
  int pose_rows = 200;  // latent is pose_rows x 3
  int appearance_dim = 128;
  int base_channels = 24;
  int max_channels = 96;
  int bottleneck_hw = 4;
  std::uint64_t init_seed = 7;

  int pose_dim() const { return pose_rows * 3; }
  int n_down() const {
    int n = 0, r = resolution;
    while (r > bottleneck_hw) {
      r /= 2;
      ++n;
    }
    return n;
  }
};

void validate(const MvsArch& arch);

struct EncoderOutput {
  Eigen::MatrixXd pose;        // pose_rows x 3
  Eigen::VectorXd appearance;  // appearance_dim
};

struct MVSLossReport {
  double mse = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

// Image <-> [N, 3, H, W] tensor plumbing.
template <typename T>
void image_into_tensor(nn::Tensor<T>& t, int n, const Image& img) {
  const int h = t.dim(2), w = t.dim(3);
  require(img.height == h && img.width == w && img.channels == 3,
          "image_into_tensor: shape mismatch");
  T* base = t.v.data() + static_cast<size_t>(n) * 3 * h * w;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        base[(static_cast<size_t>(c) * h + y) * w + x] =
            static_cast<T>(img.at(y, x, c));
      }
    }
  }
}

template <typename T>
Image tensor_to_image(const nn::Tensor<T>& t, int n) {
  const int h = t.dim(2), w = t.dim(3);
  Image img(h, w, 3);
  const T* base = t.v.data() + static_cast<size_t>(n) * 3 * h * w;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        img.at(y, x, c) = static_cast<float>(
            base[(static_cast<size_t>(c) * h + y) * w + x]);
      }
    }
  }
  return img;
}

// Frozen random convolutional stack providing the fixed feature space for the
// perceptual term. Weights are excluded from every optimizer; backward only
// propagates image gradients.
template <typename T>
class PerceptualNet {
 public:
  PerceptualNet(int resolution, std::uint64_t seed) {
    const int stages = resolution >= 32 ? 2 : 1;
    Rng rng = Rng(seed).fork(0xFEA7);
    int ch = 3;
    for (int s = 0; s < stages; ++s) {
      const int out = 8 << s;
      convs_.emplace_back(new nn::Conv2d<T>("perceptual" + std::to_string(s),
                                            ch, out, 3, 2, 1));
      convs_.back()->init(rng);
      ch = out;
    }
    tail_ = std::make_unique<nn::Conv2d<T>>("perceptual_tail", ch, ch, 3, 1, 1);
    tail_->init(rng);
  }

  nn::Tensor<T> features(const nn::Tensor<T>& x) {
    nn::Tensor<T> h = x;
    relus_.assign(convs_.size() + 1, nn::ReLU<T>());
    for (size_t i = 0; i < convs_.size(); ++i) {
      h = relus_[i].forward(convs_[i]->forward(h));
    }
    return relus_.back().forward(tail_->forward(h));
  }

  // Gradient w.r.t. the input image of the most recent features() call.
  nn::Tensor<T> backward_input(const nn::Tensor<T>& dfeat) {
    nn::Tensor<T> d = tail_->backward(relus_.back().backward(dfeat));
    for (size_t i = convs_.size(); i-- > 0;) {
      d = convs_[i]->backward(relus_[i].backward(d));
    }
    return d;
  }

 private:
  std::vector<std::unique_ptr<nn::Conv2d<T>>> convs_;
  std::unique_ptr<nn::Conv2d<T>> tail_;
  std::vector<nn::ReLU<T>> relus_;
};

template <typename T>
class MvsModel {
 public:
  explicit MvsModel(const MvsArch& arch) : arch_(arch) {
    validate(arch);
    Rng rng = Rng(arch.init_seed).fork(0x30DE1);
    int ch = 3;
    int out = arch.base_channels;
    for (int s = 0; s < arch.n_down(); ++s) {
      enc_convs_.emplace_back(new nn::Conv2d<T>("enc" + std::to_string(s), ch,
                                                out, 3, 2, 1));
      enc_convs_.back()->init(rng);
      enc_ch_.push_back(out);
      ch = out;
      out = std::min(out * 2, arch.max_channels);
    }
    const int flat = ch * arch.bottleneck_hw * arch.bottleneck_hw;
    pose_head_ = std::make_unique<nn::Linear<T>>("pose_head", flat,
                                                 arch.pose_dim());
    pose_head_->init(rng);
    app_head_ = std::make_unique<nn::Linear<T>>("app_head", flat,
                                                arch.appearance_dim);
    app_head_->init(rng);

    dec_fc_ = std::make_unique<nn::Linear<T>>("dec_fc", arch.pose_dim(), flat);
    dec_fc_->init(rng);
    dec_bottleneck_ = std::make_unique<nn::Conv2d<T>>(
        "dec_bottleneck", ch + arch.appearance_dim, ch, 3, 1, 1);
    dec_bottleneck_->init(rng);
    int dch = ch;
    for (int s = 1; s < arch.n_down(); ++s) {
      const int dout = std::max(12, ch >> s);
      dec_convs_.emplace_back(new nn::Conv2d<T>("dec" + std::to_string(s), dch,
                                                dout, 3, 1, 1));
      dec_convs_.back()->init(rng);
      dch = dout;
    }
    last_dec_ch_ = dch;
    const int tail_ch = std::max(4, arch.base_channels / 2);
    tail1_ = std::make_unique<nn::Conv2d<T>>("dec_tail1", dch + 3, tail_ch, 3,
                                             1, 1);
    tail1_->init(rng);
    tail2_ = std::make_unique<nn::Conv2d<T>>("dec_tail2", tail_ch, 3, 3, 1, 1);
    tail2_->init(rng);
  }

  const MvsArch& arch() const { return arch_; }

  // ----- batched graph -----

  struct Latents {
    nn::Tensor<T> pose;  // [N, pose_dim]
    nn::Tensor<T> app;   // [N, appearance_dim]
  };

  Latents encode_batch(const nn::Tensor<T>& x) {
    require(x.shape.size() == 4 && x.dim(1) == 3 &&
                x.dim(2) == arch_.resolution && x.dim(3) == arch_.resolution,
            "encode: input must be [N, 3, res, res]");
    enc_relus_.assign(enc_convs_.size(), nn::ReLU<T>());
    nn::Tensor<T> h = x;
    for (size_t i = 0; i < enc_convs_.size(); ++i) {
      h = enc_relus_[i].forward(enc_convs_[i]->forward(h));
    }
    bottleneck_shape_ = h.shape;
    nn::Tensor<T> flat = nn::reshape(
        h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
    Latents out;
    out.pose = pose_head_->forward(flat);
    out.app = app_head_->forward(flat);
    return out;
  }

  nn::Tensor<T> encode_backward(const nn::Tensor<T>& dpose,
                                const nn::Tensor<T>& dapp) {
    nn::Tensor<T> dflat = pose_head_->backward(dpose);
    const nn::Tensor<T> dflat_app = app_head_->backward(dapp);
    for (size_t i = 0; i < dflat.v.size(); ++i) dflat.v[i] += dflat_app.v[i];
    nn::Tensor<T> d = nn::reshape(std::move(dflat), bottleneck_shape_);
    for (size_t i = enc_convs_.size(); i-- > 0;) {
      d = enc_convs_[i]->backward(enc_relus_[i].backward(d));
    }
    return d;
  }

  nn::Tensor<T> decode_batch(const nn::Tensor<T>& pose, const nn::Tensor<T>& app,
                             const nn::Tensor<T>& bg) {
    const int n = pose.dim(0);
    require(pose.dim(1) == arch_.pose_dim(), "decode: pose width");
    require(app.dim(0) == n && app.dim(1) == arch_.appearance_dim,
            "decode: appearance width");
    require(bg.dim(0) == n && bg.dim(1) == 3 && bg.dim(2) == arch_.resolution &&
                bg.dim(3) == arch_.resolution,
            "decode: background must match the model resolution");
    dec_relus_.assign(dec_convs_.size() + 3, nn::ReLU<T>());
    dec_ups_.assign(dec_convs_.size() + 1, nn::Upsample2x<T>());

    const int bh = arch_.bottleneck_hw;
    const int cb = enc_ch_.back();
    nn::Tensor<T> h = dec_relus_[0].forward(dec_fc_->forward(pose));
    h = nn::reshape(std::move(h), {n, cb, bh, bh});
    h = nn::concat_channels(h, nn::tile_to_map(app, bh, bh));
    h = dec_relus_[1].forward(dec_bottleneck_->forward(h));
    for (size_t s = 0; s < dec_convs_.size(); ++s) {
      h = dec_ups_[s].forward(h);
      h = dec_relus_[2 + s].forward(dec_convs_[s]->forward(h));
    }
    h = dec_ups_.back().forward(h);  // reaches full resolution
    h = nn::concat_channels(h, bg);
    h = dec_relus_.back().forward(tail1_->forward(h));
    h = tail2_->forward(h);
    return out_sigmoid_.forward(h);
  }

  // Returns (dpose, dapp); the background is an input, its gradient is
  // dropped.
  std::pair<nn::Tensor<T>, nn::Tensor<T>> decode_backward(
      const nn::Tensor<T>& dpred) {
    nn::Tensor<T> d = out_sigmoid_.backward(dpred);
    d = tail2_->backward(d);
    d = tail1_->backward(dec_relus_.back().backward(d));
    auto [dmain, dbg] = nn::split_channels(d, last_dec_ch_);
    d = dec_ups_.back().backward(dmain);
    for (size_t s = dec_convs_.size(); s-- > 0;) {
      d = dec_convs_[s]->backward(dec_relus_[2 + s].backward(d));
      d = dec_ups_[s].backward(d);
    }
    d = dec_bottleneck_->backward(dec_relus_[1].backward(d));
    auto [dfeat, dapp_map] = nn::split_channels(d, enc_ch_.back());
    nn::Tensor<T> dapp = nn::sum_spatial(dapp_map);
    const int n = dfeat.dim(0);
    const int flat = enc_ch_.back() * arch_.bottleneck_hw * arch_.bottleneck_hw;
    nn::Tensor<T> dflat = nn::reshape(std::move(dfeat), {n, flat});
    nn::Tensor<T> dpose = dec_fc_->backward(dec_relus_[0].backward(dflat));
    return {std::move(dpose), std::move(dapp)};
  }

  std::vector<nn::ParamBlock<T>*> params() {
    std::vector<nn::ParamBlock<T>*> out;
    auto add = [&out](std::vector<nn::ParamBlock<T>*> blocks) {
      out.insert(out.end(), blocks.begin(), blocks.end());
    };
    for (auto& c : enc_convs_) add(c->params());
    add(pose_head_->params());
    add(app_head_->params());
    add(dec_fc_->params());
    add(dec_bottleneck_->params());
    for (auto& c : dec_convs_) add(c->params());
    add(tail1_->params());
    add(tail2_->params());
    return out;
  }

  // ----- single-image inference -----

  EncoderOutput encode(const Image& img) {
    nn::Tensor<T> x({1, 3, arch_.resolution, arch_.resolution});
    image_into_tensor(x, 0, img);
    const Latents lat = encode_batch(x);
    EncoderOutput out;
    out.pose.resize(arch_.pose_rows, 3);
    for (int r = 0; r < arch_.pose_rows; ++r) {
      for (int c = 0; c < 3; ++c) {
        out.pose(r, c) = static_cast<double>(lat.pose.v[r * 3 + c]);
      }
    }
    out.appearance.resize(arch_.appearance_dim);
    for (int i = 0; i < arch_.appearance_dim; ++i) {
      out.appearance[i] = static_cast<double>(lat.app.v[i]);
    }
    return out;
  }

  Image decode(const Eigen::MatrixXd& pose, const Eigen::VectorXd& appearance,
               const Image& background) {
    require(pose.rows() == arch_.pose_rows && pose.cols() == 3,
            "decode: pose latent shape");
    require(appearance.size() == arch_.appearance_dim,
            "decode: appearance shape");
    nn::Tensor<T> pose_t({1, arch_.pose_dim()});
    for (int r = 0; r < arch_.pose_rows; ++r) {
      for (int c = 0; c < 3; ++c) {
        pose_t.v[r * 3 + c] = static_cast<T>(pose(r, c));
      }
    }
    nn::Tensor<T> app_t({1, arch_.appearance_dim});
    for (int i = 0; i < arch_.appearance_dim; ++i) {
      app_t.v[i] = static_cast<T>(appearance[i]);
    }
    nn::Tensor<T> bg_t({1, 3, arch_.resolution, arch_.resolution});
    image_into_tensor(bg_t, 0, background);
    return tensor_to_image(decode_batch(pose_t, app_t, bg_t), 0);
  }

 private:
  MvsArch arch_;
  std::vector<std::unique_ptr<nn::Conv2d<T>>> enc_convs_;
  std::vector<int> enc_ch_;
  std::vector<nn::ReLU<T>> enc_relus_;
  std::unique_ptr<nn::Linear<T>> pose_head_, app_head_;
  std::vector<int> bottleneck_shape_;

  std::unique_ptr<nn::Linear<T>> dec_fc_;
  std::unique_ptr<nn::Conv2d<T>> dec_bottleneck_;
  std::vector<std::unique_ptr<nn::Conv2d<T>>> dec_convs_;
  std::unique_ptr<nn::Conv2d<T>> tail1_, tail2_;
  std::vector<nn::ReLU<T>> dec_relus_;
  std::vector<nn::Upsample2x<T>> dec_ups_;
  nn::Sigmoid<T> out_sigmoid_;
  int last_dec_ch_ = 0;
};

// ---------------------------------------------------------------------------
// Training data + loop
// ---------------------------------------------------------------------------

// One motion-selected timestep with every view crop-normalized. Rotations are
// crop-adjusted; keypoints/pose ground truth ride along for the probes.
struct PoolFrame {
  int subject = 0;
  int sequence_id = 0;
  double timestamp = 0.0;
  std::vector<std::vector<unsigned char>> crops;  // per view, RGB8 HWC
  std::vector<Eigen::Matrix3d> adjusted_rotation;
  std::vector<Eigen::Matrix3d> crop_homography;   // source px -> crop px
  // Ground truth for the probes; empty when ingesting real footage.
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, 2>> keypoints_crop;
  Eigen::VectorXd pose_params;
};

struct TrainingPool {
  int resolution = 0;
  int n_views = 0;
  std::vector<PoolFrame> frames;
  // Backgrounds per (view, window id) plus corpus-wide fallbacks.
  std::map<std::pair<int, int>, Image> window_background;
  std::vector<Image> global_background;
  std::map<int, int> sequence_window;  // sequence id -> window id
};

Image decode_crop_u8(const std::vector<unsigned char>& bytes, int resolution);
std::vector<unsigned char> encode_crop_u8(const Image& img);

// One training example, crop-normalized to the model resolution.
struct SynthesisExample {
  Image input;        // x_{i,t}
  Image target;       // x_{j,t}
  Image swap;         // x_{i,t'}, same subject and view, different time
  Image background;   // target-view background warped by the target crop
  Eigen::Matrix3d rotation;  // R_{i->j} about the crop centers
  // Sampling audit trail.
  int view_input = 0;
  int view_target = 0;
  int input_frame = 0;
  int swap_frame = 0;
  int subject = 0;
};

// Uniform over ordered view pairs (i = j included); t' uniform over the same
// subject-and-view pool with t' != t. Subjects with fewer than two usable
// timesteps are skipped with a warning.
class BatchSampler {
 public:
  BatchSampler(const TrainingPool& pool, int exclude_subject,
               bool no_appearance_swap, bool use_global_background);

  bool empty() const { return eligible_.empty(); }
  size_t pool_size() const { return eligible_.size(); }
  const std::set<int>& subjects() const { return subjects_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  SynthesisExample sample(Rng& rng) const;

 private:
  const TrainingPool* pool_;
  bool no_swap_;
  bool global_bg_;
  std::vector<int> eligible_;
  std::map<int, std::vector<int>> by_subject_;
  std::set<int> subjects_;
  std::vector<std::string> warnings_;
};

struct MvsTrainConfig {
  int epochs = 50;
  double learning_rate = 0.001;
  double alpha = 2.0;
  int batch_size = 16;
  int samples_per_epoch = 0;  // 0: one pass over the eligible pool
  bool no_appearance_swap = false;
  bool no_background_input = false;
  bool uniform_sampling = false;  // pool must be built uniformly as well
  int exclude_subject = -1;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // per-epoch checkpoints when non-empty
};

struct CurveRow {
  int epoch = 0;
  double mse = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

struct TrainedMvs {
  MvsArch arch;
  std::unique_ptr<MvsModel<float>> model;
  std::unique_ptr<PerceptualNet<float>> perceptual;
  std::vector<CurveRow> curve;
  std::set<int> subjects_seen;
};

// Accumulates gradients for one batch and reports the loss terms. inputs2n
// stacks the B input images above the B swap images.
template <typename T>
MVSLossReport mvs_step_gradients(MvsModel<T>& model, PerceptualNet<T>& pnet,
                                 const nn::Tensor<T>& inputs2n,
                                 const nn::Tensor<T>& targets,
                                 const nn::Tensor<T>& backgrounds,
                                 const std::vector<Eigen::Matrix3d>& rotations,
                                 double alpha);

// Loss for a single synthesized/target pair; the standalone report used by
// tests and probes.
MVSLossReport mvs_loss(const Image& predicted, const Image& target,
                       PerceptualNet<float>& extractor, double alpha = 2.0);

TrainedMvs train_mvs(const TrainingPool& pool, const MvsArch& arch,
                     const MvsTrainConfig& cfg);

void save_curve(const std::string& path, const std::vector<CurveRow>& curve);

// Versioned checkpoint container shared with the classification head:
// a JSON header (architecture + block table) followed by raw little-endian
// float32 arrays, optionally with Adam state.
void save_checkpoint(const std::string& path, const std::string& kind,
                     const std::string& arch_json,
                     std::vector<nn::ParamBlock<float>*> blocks,
                     nn::Adam<float>* optimizer);

struct CheckpointData {
  std::string kind;
  std::string arch_json;
  std::map<std::string, std::vector<float>> blocks;
  std::map<std::string, std::vector<float>> moment1, moment2;
  long long step_count = 0;
  bool has_optimizer = false;
};

CheckpointData load_checkpoint(const std::string& path);

void save_mvs_model(const std::string& path, const MvsArch& arch,
                    MvsModel<float>& model, nn::Adam<float>* optimizer);
TrainedMvs load_mvs_model(const std::string& path);

}  // namespace pmil::mvs
