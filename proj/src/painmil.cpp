#include "pmil/painmil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "pmil/metrics.hpp"
#include "pmil/mvs.hpp"

namespace pmil::painmil {

using nlohmann::json;

void validate(const BagOfClips& bag) {
  require(bag.size() >= 1, "BagOfClips: needs at least one clip");
  const int l = bag.clips[0].length();
  for (const auto& clip : bag.clips) {
    require(clip.length() == l, "BagOfClips: clips must share a length");
    require(clip.frames.allFinite(), "BagOfClips: non-finite features");
  }
}

int k_from_divisor(int n, int d) {
  require(n >= 1 && d >= 1, "k_from_divisor: n, d >= 1");
  return std::max(1, n / d);
}

int choose_k(int n, const KSchedule& schedule, bool training, Rng& rng) {
  require(!schedule.train_divisors.empty(), "choose_k: empty divisor set");
  const int d = training
                    ? schedule.train_divisors[static_cast<size_t>(
                          rng.below(schedule.train_divisors.size()))]
                    : schedule.test_divisor;
  return k_from_divisor(n, d);
}

namespace {

// Indices of the k largest values, ties to the lower index, returned
// ascending.
std::vector<int> topk_indices(const Eigen::VectorXd& values, int k) {
  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&values](int a, int b) {
    return values[a] > values[b];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

void validate_per_clip(const Eigen::MatrixXd& per_clip, int k) {
  require(per_clip.rows() >= 1 && per_clip.cols() == 2,
          "mil_aggregate: per_clip must be n x 2");
  require(k >= 1 && k <= per_clip.rows(), "mil_aggregate: k must be in [1, n]");
  for (int i = 0; i < per_clip.rows(); ++i) {
    require(per_clip(i, 0) >= -1e-9 && per_clip(i, 1) >= -1e-9 &&
                std::abs(per_clip(i, 0) + per_clip(i, 1) - 1.0) <= 1e-6,
            "mil_aggregate: rows must be softmax outputs");
  }
}

}  // namespace

MILPrediction mil_aggregate(const Eigen::MatrixXd& per_clip, int k) {
  validate_per_clip(per_clip, k);
  MILPrediction out;
  out.per_clip = per_clip;
  out.selected = topk_indices(per_clip.col(1), k);
  // Both classes average over the same pain-selected S; summation in
  // ascending index order keeps results bit-identical with the enumeration
  // oracle.
  double sum_np = 0.0, sum_p = 0.0;
  for (const int idx : out.selected) {
    sum_np += per_clip(idx, 0);
    sum_p += per_clip(idx, 1);
  }
  out.bag[0] = sum_np / k;
  out.bag[1] = sum_p / k;
  return out;
}

Eigen::Vector2d mil_aggregate_og(const Eigen::MatrixXd& per_clip, int k) {
  validate_per_clip(per_clip, k);
  Eigen::Vector2d bag;
  for (int c = 0; c < 2; ++c) {
    const std::vector<int> sel = topk_indices(per_clip.col(c), k);
    double sum = 0.0;
    for (const int idx : sel) sum += per_clip(idx, c);
    bag[c] = sum / k;
  }
  return bag;
}

Eigen::Vector2d ce_class_weights(double count_pain, double count_nopain) {
  require(count_pain > 0 && count_nopain > 0,
          "ce_class_weights: counts must be positive");
  const double total = count_pain + count_nopain;
  return {2.0 * (1.0 - count_nopain / total),
          2.0 * (1.0 - count_pain / total)};
}

WeightedCeResult weighted_ce(const Eigen::Vector2d& bag, bool label_pain,
                             double count_pain, double count_nopain) {
  require(bag[0] >= 0.0 && bag[0] <= 1.0 + 1e-9 && bag[1] >= 0.0 &&
              bag[1] <= 1.0 + 1e-9,
          "weighted_ce: bag confidences must lie in [0, 1]");
  const Eigen::Vector2d w = ce_class_weights(count_pain, count_nopain);
  const int label = label_pain ? 1 : 0;
  WeightedCeResult out;
  double confidence = bag[label];
  if (confidence < 1e-12) {
    confidence = 1e-12;
    out.clamped = true;
  }
  out.loss = -w[label] * std::log(confidence);
  return out;
}

ClipFeature hide_and_seek_mask(const ClipFeature& clip, int grid, double p_hide,
                               Rng& rng) {
  require(grid >= 1, "hide_and_seek: grid >= 1");
  require(p_hide >= 0.0 && p_hide <= 1.0, "hide_and_seek: p_hide in [0, 1]");
  const int l = clip.length();
  const int blocks = std::min(grid, l);
  std::vector<char> erase(blocks);
  int erased = 0;
  for (int b = 0; b < blocks; ++b) {
    erase[b] = rng.bernoulli(p_hide) ? 1 : 0;
    erased += erase[b];
  }
  if (erased == blocks) {
    erase[static_cast<size_t>(rng.below(blocks))] = 0;
  }
  ClipFeature out = clip;
  for (int b = 0; b < blocks; ++b) {
    if (!erase[b]) continue;
    const int begin = b * l / blocks;
    const int end = (b + 1) * l / blocks;
    for (int f = begin; f < end; ++f) out.frames.row(f).setZero();
  }
  return out;
}

Eigen::Vector2d head_forward(PainHead<float>& head, const ClipFeature& clip) {
  Rng unused(0);
  const nn::Tensor<float> probs = head.forward({clip}, false, unused);
  return {static_cast<double>(probs.v[0]), static_cast<double>(probs.v[1])};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

LossVariant loss_variant_from_string(const std::string& name) {
  if (name == "ours_mil") return LossVariant::kOursMil;
  if (name == "mil_og") return LossVariant::kMilOg;
  if (name == "ce_per_clip") return LossVariant::kCePerClip;
  throw ValidationError("unknown loss variant: " + name);
}

std::string to_string(LossVariant variant) {
  switch (variant) {
    case LossVariant::kOursMil: return "ours_mil";
    case LossVariant::kMilOg: return "mil_og";
    case LossVariant::kCePerClip: return "ce_per_clip";
  }
  return "?";
}

ClassCounts class_counts(const std::vector<BagOfClips>& bags, int clip_len) {
  ClassCounts counts;
  for (const auto& bag : bags) {
    const double unit = clip_len == 1 ? bag.size() : 1.0;
    (bag.label_pain ? counts.pain : counts.nopain) += unit;
  }
  return counts;
}

namespace {

Eigen::MatrixXd probs_to_matrix(const nn::Tensor<float>& probs) {
  const int n = probs.dim(0);
  Eigen::MatrixXd out(n, 2);
  for (int i = 0; i < n; ++i) {
    out(i, 0) = probs.v[2 * static_cast<size_t>(i)];
    out(i, 1) = probs.v[2 * static_cast<size_t>(i) + 1];
  }
  return out;
}

constexpr double kGradFloor = 1e-7;

}  // namespace

std::vector<BagPrediction> evaluate_bags(PainHead<float>& head,
                                         const std::vector<BagOfClips>& bags,
                                         const KSchedule& schedule) {
  std::vector<BagPrediction> out;
  Rng unused(0);
  for (const auto& bag : bags) {
    validate(bag);
    const nn::Tensor<float> probs = head.forward(bag.clips, false, unused);
    const int k = k_from_divisor(bag.size(), schedule.test_divisor);
    const MILPrediction pred = mil_aggregate(probs_to_matrix(probs), k);
    BagPrediction row;
    row.segment_id = bag.segment_id;
    row.n = bag.size();
    row.k = k;
    row.selected = pred.selected;
    row.bag = pred.bag;
    row.label_pain = bag.label_pain;
    row.predicted_pain = pred.bag[1] > pred.bag[0];
    out.push_back(std::move(row));
  }
  return out;
}

namespace {

evalharness::Confusion confusion_of(const std::vector<BagPrediction>& preds) {
  evalharness::Confusion confusion;
  for (const auto& p : preds) confusion.add(p.label_pain, p.predicted_pain);
  return confusion;
}

}  // namespace

TrainedHead train_pain_head(const std::vector<BagOfClips>& train_bags,
                            const std::vector<BagOfClips>& val_bags,
                            const std::vector<BagOfClips>& test_bags,
                            const HeadArch& arch, const HeadTrainConfig& cfg) {
  require(!train_bags.empty(), "train_pain_head: no training bags");
  for (const auto& bag : train_bags) validate(bag);

  TrainedHead out;
  out.arch = arch;
  out.head = std::make_unique<PainHead<float>>(arch);
  const ClassCounts counts = class_counts(train_bags, arch.clip_len);
  require(counts.pain > 0 && counts.nopain > 0,
          "train_pain_head: training bags must cover both classes");
  const Eigen::Vector2d weights = ce_class_weights(counts.pain, counts.nopain);
  out.weight_nopain = weights[0];
  out.weight_pain = weights[1];

  nn::Adam<float> opt(out.head->params(),
                      static_cast<float>(cfg.learning_rate));
  Rng rng = Rng(cfg.seed).fork(0x4EAD2);

  std::vector<std::vector<float>> best_params;
  double best_val_f1 = -1.0;

  std::vector<int> order(train_bags.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with the counter-based stream keeps epochs reproducible.
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<size_t>(rng.below(i))]);
    }
    double loss_acc = 0.0;
    for (const int bag_idx : order) {
      const BagOfClips& bag = train_bags[static_cast<size_t>(bag_idx)];
      const BagOfClips* active = &bag;
      BagOfClips masked;
      if (cfg.hide_and_seek) {
        masked = bag;
        for (auto& clip : masked.clips) {
          clip = hide_and_seek_mask(clip, cfg.has_grid, cfg.p_hide, rng);
        }
        active = &masked;
      }
      const nn::Tensor<float> probs = out.head->forward(active->clips, true, rng);
      const Eigen::MatrixXd pm = probs_to_matrix(probs);
      const int n = active->size();
      const int label = bag.label_pain ? 1 : 0;
      const double w = bag.label_pain ? out.weight_pain : out.weight_nopain;

      nn::Tensor<float> dprobs(probs.shape);
      double loss = 0.0;
      switch (cfg.variant) {
        case LossVariant::kOursMil: {
          const int k = choose_k(n, cfg.schedule, true, rng);
          const MILPrediction pred = mil_aggregate(pm, k);
          loss = weighted_ce(pred.bag, bag.label_pain, counts.pain,
                             counts.nopain).loss;
          const double denom =
              std::max(pred.bag[label], kGradFloor) * k;
          for (const int idx : pred.selected) {
            dprobs.v[2 * static_cast<size_t>(idx) + label] =
                static_cast<float>(-w / denom);
          }
          break;
        }
        case LossVariant::kMilOg: {
          const int k = choose_k(n, cfg.schedule, true, rng);
          const Eigen::Vector2d bag_og = mil_aggregate_og(pm, k);
          Eigen::Vector2d clamped = bag_og.cwiseMin(1.0);
          loss = weighted_ce(clamped, bag.label_pain, counts.pain,
                             counts.nopain).loss;
          const std::vector<int> sel = topk_indices(pm.col(label), k);
          const double denom = std::max(bag_og[label], kGradFloor) * k;
          for (const int idx : sel) {
            dprobs.v[2 * static_cast<size_t>(idx) + label] =
                static_cast<float>(-w / denom);
          }
          break;
        }
        case LossVariant::kCePerClip: {
          for (int t = 0; t < n; ++t) {
            const double p = std::max(pm(t, label), 1e-12);
            loss += -w * std::log(p) / n;
            dprobs.v[2 * static_cast<size_t>(t) + label] = static_cast<float>(
                -w / (std::max(pm(t, label), kGradFloor) * n));
          }
          break;
        }
      }
      if (!std::isfinite(loss)) {
        throw RuntimeAbort("train_pain_head: non-finite loss at epoch " +
                           std::to_string(epoch));
      }
      opt.zero_grad();
      out.head->backward(dprobs);
      opt.step();
      loss_acc += loss;
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_loss = loss_acc / static_cast<double>(train_bags.size());
    if (!val_bags.empty()) {
      const auto confusion =
          confusion_of(evaluate_bags(*out.head, val_bags, cfg.schedule));
      metrics.val_f1 = evalharness::f1_unweighted(confusion);
      metrics.val_acc = evalharness::accuracy(confusion);
    }
    if (!test_bags.empty()) {
      const auto confusion =
          confusion_of(evaluate_bags(*out.head, test_bags, cfg.schedule));
      metrics.test_f1 = evalharness::f1_unweighted(confusion);
      metrics.test_acc = evalharness::accuracy(confusion);
    }
    out.per_epoch.push_back(metrics);

    if (metrics.val_f1 > best_val_f1) {
      best_val_f1 = metrics.val_f1;
      out.best_epoch = epoch;
      best_params.clear();
      for (auto* block : out.head->params()) best_params.push_back(block->w);
    }
  }

  if (!best_params.empty()) {
    auto blocks = out.head->params();
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i]->w = best_params[i];
  }
  return out;
}

void export_predictions(const std::string& path,
                        const std::vector<BagPrediction>& predictions) {
  std::ofstream f(path);
  if (!f) throw RuntimeAbort("export_predictions: cannot open " + path);
  f << "segment_id,n,k,S,y_np,y_p,label\n";
  char buf[64];
  for (const auto& p : predictions) {
    f << p.segment_id << ',' << p.n << ',' << p.k << ',';
    for (size_t i = 0; i < p.selected.size(); ++i) {
      if (i) f << ';';
      f << p.selected[i];
    }
    std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,", p.bag[0], p.bag[1]);
    f << buf << (p.label_pain ? "pain" : "no_pain") << "\n";
  }
}

void save_head_model(const std::string& path, const HeadArch& arch,
                     PainHead<float>& head) {
  json aj;
  aj["feature_dim"] = arch.feature_dim;
  aj["clip_len"] = arch.clip_len;
  aj["hidden1"] = arch.hidden1;
  aj["hidden2"] = arch.hidden2;
  aj["dropout"] = arch.dropout;
  aj["init_seed"] = arch.init_seed;
  mvs::save_checkpoint(path, "pain_head", aj.dump(), head.params(), nullptr);
}

TrainedHead load_head_model(const std::string& path) {
  const mvs::CheckpointData data = mvs::load_checkpoint(path);
  require(data.kind == "pain_head",
          "load_head_model: checkpoint is not a pain head");
  const json aj = json::parse(data.arch_json);
  HeadArch arch;
  arch.feature_dim = aj.at("feature_dim").get<int>();
  arch.clip_len = aj.at("clip_len").get<int>();
  arch.hidden1 = aj.at("hidden1").get<int>();
  arch.hidden2 = aj.at("hidden2").get<int>();
  arch.dropout = aj.at("dropout").get<double>();
  arch.init_seed = aj.at("init_seed").get<std::uint64_t>();

  TrainedHead out;
  out.arch = arch;
  out.head = std::make_unique<PainHead<float>>(arch);
  for (auto* block : out.head->params()) {
    const auto it = data.blocks.find(block->name);
    require(it != data.blocks.end() && it->second.size() == block->w.size(),
            "load_head_model: block mismatch for " + block->name);
    block->w = it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planted-signal bags
// ---------------------------------------------------------------------------

namespace {

BagOfClips make_planted_bag(const PlantedBagsConfig& cfg,
                            const Eigen::VectorXf& motif, bool label_pain,
                            int subject, const std::string& id, Rng rng) {
  BagOfClips bag;
  bag.segment_id = id;
  bag.subject = subject;
  bag.label_pain = label_pain;

  int flagged = 0;
  std::vector<char> has_signal(cfg.clips_per_bag, 0);
  if (label_pain) {
    flagged = std::max(
        1, static_cast<int>(std::llround(cfg.positive_fraction *
                                         cfg.clips_per_bag)));
    std::vector<int> idx(cfg.clips_per_bag);
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[static_cast<size_t>(rng.below(i))]);
    }
    for (int i = 0; i < flagged; ++i) has_signal[idx[i]] = 1;
  }

  for (int c = 0; c < cfg.clips_per_bag; ++c) {
    ClipFeature clip;
    clip.frames.resize(cfg.clip_len, cfg.feature_dim);
    for (int f = 0; f < cfg.clip_len; ++f) {
      for (int d = 0; d < cfg.feature_dim; ++d) {
        clip.frames(f, d) =
            static_cast<float>(rng.normal() * cfg.noise_scale);
      }
    }
    double scale = 0.0;
    if (has_signal[c]) {
      scale = cfg.signal_scale * rng.uniform(0.85, 1.15);
    } else if (rng.bernoulli(cfg.distractor_rate)) {
      // Ambiguous medium-strength motif present in bags of both labels.
      scale = cfg.distractor_scale * rng.uniform(0.7, 1.3);
    }
    if (scale != 0.0) {
      for (int f = 0; f < cfg.clip_len; ++f) {
        clip.frames.row(f) += static_cast<float>(scale) * motif.transpose();
      }
    }
    bag.clips.push_back(std::move(clip));
  }
  return bag;
}

std::vector<BagOfClips> make_planted_split(const PlantedBagsConfig& cfg,
                                           const Eigen::VectorXf& motif,
                                           int n_bags, int subject,
                                           const std::string& prefix,
                                           Rng rng) {
  std::vector<BagOfClips> bags;
  for (int b = 0; b < n_bags; ++b) {
    const bool pain = b % 2 == 0;
    bags.push_back(make_planted_bag(cfg, motif, pain, subject,
                                    prefix + std::to_string(b),
                                    rng.fork(b)));
  }
  return bags;
}

}  // namespace

PlantedBags make_planted_bags(const PlantedBagsConfig& cfg) {
  require(cfg.clips_per_bag >= 2 && cfg.feature_dim >= 2 && cfg.clip_len >= 1,
          "make_planted_bags: bad sizes");
  require(cfg.positive_fraction > 0.0 && cfg.positive_fraction <= 1.0,
          "make_planted_bags: positive_fraction in (0, 1]");
  Rng root = Rng(cfg.seed).fork(0x9A6);
  Rng motif_rng = root.fork(1);
  Eigen::VectorXf motif(cfg.feature_dim);
  for (int d = 0; d < cfg.feature_dim; ++d) {
    motif[d] = static_cast<float>(motif_rng.normal());
  }
  // Unit motif: its projection competes with the N(0,1) noise projection, so
  // per-clip decisions stay genuinely ambiguous at the default scales.
  motif.normalize();

  PlantedBags out;
  out.train = make_planted_split(cfg, motif, cfg.n_train_bags, 0, "train_",
                                 root.fork(2));
  out.val = make_planted_split(cfg, motif, cfg.n_val_bags, 1, "val_",
                               root.fork(3));
  out.test = make_planted_split(cfg, motif, cfg.n_test_bags, 2, "test_",
                                root.fork(4));
  return out;
}

}  // namespace pmil::painmil
