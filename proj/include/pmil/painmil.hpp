#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "pmil/nn.hpp"
#include "pmil/rng.hpp"

// Weakly supervised classification over bags of clip features: a small
// fully-connected head plus top-k aggregation losses. Column convention
// everywhere: index 0 = no-pain, index 1 = pain.
namespace pmil::painmil {

// Time-ordered flattened pose latents, one row per frame of the clip.
struct ClipFeature {
  Eigen::MatrixXf frames;  // l x feature_dim
  int length() const { return static_cast<int>(frames.rows()); }
};

struct BagOfClips {
  std::string segment_id;
  int subject = 0;
  bool label_pain = false;
  std::vector<ClipFeature> clips;
  int size() const { return static_cast<int>(clips.size()); }
};

void validate(const BagOfClips& bag);

struct MILPrediction {
  Eigen::MatrixXd per_clip;   // n x 2 softmax confidences
  std::vector<int> selected;  // S, ascending clip indices
  Eigen::Vector2d bag = Eigen::Vector2d::Zero();  // (y_nopain, y_pain)
};

// k = max(1, floor(n / d)); d drawn uniformly from the training set during
// training and pinned during testing.
struct KSchedule {
  std::vector<int> train_divisors{1, 2, 4, 8};
  int test_divisor = 8;
};

int k_from_divisor(int n, int d);
int choose_k(int n, const KSchedule& schedule, bool training, Rng& rng);

// Shared-index aggregation: S holds the k clips with the highest pain
// confidence (ties to the lower index); both bag entries average over the
// same S, so the bag vector of softmax rows still sums to one.
MILPrediction mil_aggregate(const Eigen::MatrixXd& per_clip, int k);

// Per-class top-k baseline: pain and no-pain averaged over independent index
// sets; the bag vector need not sum to one.
Eigen::Vector2d mil_aggregate_og(const Eigen::MatrixXd& per_clip, int k);

// Class-balanced cross entropy on a bag confidence vector:
// w_pain = 2(1 - p/(p+np)), w_nopain = 2(1 - np/(p+np)).
struct WeightedCeResult {
  double loss = 0.0;
  bool clamped = false;  // true confidence hit the 1e-12 floor
};
WeightedCeResult weighted_ce(const Eigen::Vector2d& bag, bool label_pain,
                             double count_pain, double count_nopain);
// Returned in column order: (w_nopain, w_pain). Weights sum to 2.
Eigen::Vector2d ce_class_weights(double count_pain, double count_nopain);

// Random temporal erasing over `grid` blocks of the clip; at least one block
// always survives.
ClipFeature hide_and_seek_mask(const ClipFeature& clip, int grid, double p_hide,
                               Rng& rng);

// ---------------------------------------------------------------------------
// Classification head: per-frame 600->64 map, concatenation to 64*l, one more
// hidden layer, then a two-way softmax.
// ---------------------------------------------------------------------------

struct HeadArch {
  int feature_dim = 600;
  int clip_len = 1;
  int hidden1 = 64;
  int hidden2 = 64;
  double dropout = 0.5;
  std::uint64_t init_seed = 11;
};

template <typename T>
class PainHead {
 public:
  explicit PainHead(const HeadArch& arch)
      : arch_(arch),
        fc1_("head_fc1", arch.feature_dim, arch.hidden1),
        fc2_("head_fc2", arch.hidden1 * arch.clip_len, arch.hidden2),
        fc3_("head_fc3", arch.hidden2, 2),
        drop1_(arch.dropout), drop2_(arch.dropout) {
    Rng rng = Rng(arch.init_seed).fork(0x4EAD);
    fc1_.init(rng);
    fc2_.init(rng);
    fc3_.init(rng);
  }

  const HeadArch& arch() const { return arch_; }

  // Softmax confidences for every clip of a bag: [n, 2]. Deterministic when
  // dropout_active is false.
  nn::Tensor<T> forward(const std::vector<ClipFeature>& clips,
                        bool dropout_active, Rng& rng) {
    const int n = static_cast<int>(clips.size());
    require(n >= 1, "PainHead: empty bag");
    const int l = arch_.clip_len, fd = arch_.feature_dim;
    nn::Tensor<T> x({n * l, fd});
    for (int c = 0; c < n; ++c) {
      require(clips[c].length() == l && clips[c].frames.cols() == fd,
              "PainHead: clip length mismatch");
      for (int f = 0; f < l; ++f) {
        for (int d = 0; d < fd; ++d) {
          x.v[(static_cast<size_t>(c) * l + f) * fd + d] =
              static_cast<T>(clips[c].frames(f, d));
        }
      }
    }
    nn::Tensor<T> h = drop1_.forward(relu1_.forward(fc1_.forward(x)),
                                     dropout_active, rng);
    h = nn::reshape(std::move(h), {n, arch_.hidden1 * l});
    h = drop2_.forward(relu2_.forward(fc2_.forward(h)), dropout_active, rng);
    logits_ = fc3_.forward(h);
    probs_ = nn::softmax_rows(logits_);
    return probs_;
  }

  const nn::Tensor<T>& probs() const { return probs_; }

  // Backward from dL/dprobs; accumulates parameter gradients and returns
  // dL/d(input features) shaped [n*l, feature_dim].
  nn::Tensor<T> backward(const nn::Tensor<T>& dprobs) {
    nn::Tensor<T> d = nn::softmax_rows_backward(probs_, dprobs);
    d = fc3_.backward(d);
    d = fc2_.backward(relu2_.backward(drop2_.backward(d)));
    const int n = d.dim(0);
    d = nn::reshape(std::move(d), {n * arch_.clip_len, arch_.hidden1});
    return fc1_.backward(relu1_.backward(drop1_.backward(d)));
  }

  std::vector<nn::ParamBlock<T>*> params() {
    std::vector<nn::ParamBlock<T>*> out;
    for (auto* p : fc1_.params()) out.push_back(p);
    for (auto* p : fc2_.params()) out.push_back(p);
    for (auto* p : fc3_.params()) out.push_back(p);
    return out;
  }

 private:
  HeadArch arch_;
  nn::Linear<T> fc1_, fc2_, fc3_;
  nn::ReLU<T> relu1_, relu2_;
  nn::Dropout<T> drop1_, drop2_;
  nn::Tensor<T> logits_, probs_;
};

// Convenience single-clip inference.
Eigen::Vector2d head_forward(PainHead<float>& head, const ClipFeature& clip);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class LossVariant { kOursMil, kMilOg, kCePerClip };

LossVariant loss_variant_from_string(const std::string& name);
std::string to_string(LossVariant variant);

struct HeadTrainConfig {
  int epochs = 10;
  double learning_rate = 0.001;
  KSchedule schedule;
  LossVariant variant = LossVariant::kOursMil;
  bool hide_and_seek = false;
  int has_grid = 5;
  double p_hide = 0.5;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0, val_acc = 0.0;
  double test_f1 = 0.0, test_acc = 0.0;
};

struct BagPrediction {
  std::string segment_id;
  int n = 0, k = 0;
  std::vector<int> selected;
  Eigen::Vector2d bag = Eigen::Vector2d::Zero();
  bool label_pain = false;
  bool predicted_pain = false;
};

struct TrainedHead {
  HeadArch arch;
  std::unique_ptr<PainHead<float>> head;  // best validation epoch
  std::vector<EpochMetrics> per_epoch;
  int best_epoch = 0;
  double weight_pain = 1.0, weight_nopain = 1.0;
};

// Class counts in the supervision unit: frames when clip_len == 1, segments
// otherwise.
struct ClassCounts {
  double pain = 0.0;
  double nopain = 0.0;
};
ClassCounts class_counts(const std::vector<BagOfClips>& bags, int clip_len);

// Evaluates with the fixed test divisor; aggregation is the shared-index
// variant for every loss so results stay comparable.
std::vector<BagPrediction> evaluate_bags(PainHead<float>& head,
                                         const std::vector<BagOfClips>& bags,
                                         const KSchedule& schedule);

TrainedHead train_pain_head(const std::vector<BagOfClips>& train_bags,
                            const std::vector<BagOfClips>& val_bags,
                            const std::vector<BagOfClips>& test_bags,
                            const HeadArch& arch, const HeadTrainConfig& cfg);

void export_predictions(const std::string& path,
                        const std::vector<BagPrediction>& predictions);

void save_head_model(const std::string& path, const HeadArch& arch,
                     PainHead<float>& head);
TrainedHead load_head_model(const std::string& path);

// ---------------------------------------------------------------------------
// Planted-signal bags: a controlled feature-space benchmark for the loss
// variants. Flagged clips carry a fixed motif direction; distractor clips at
// a lower scale appear in bags of both labels, so per-clip supervision by the
// bag label is systematically noisy.
// ---------------------------------------------------------------------------

struct PlantedBagsConfig {
  int n_train_bags = 96;
  int n_val_bags = 24;
  int n_test_bags = 40;
  int clips_per_bag = 24;
  int feature_dim = 600;
  int clip_len = 1;
  double positive_fraction = 0.25;
  double signal_scale = 4.5;
  double distractor_scale = 2.2;
  double distractor_rate = 0.12;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

struct PlantedBags {
  std::vector<BagOfClips> train, val, test;
};

PlantedBags make_planted_bags(const PlantedBagsConfig& cfg);

}  // namespace pmil::painmil
