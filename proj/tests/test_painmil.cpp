#include "pmil/painmil.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "pmil/metrics.hpp"
#include "support/testutil.hpp"
#include "pmil/rng.hpp"

using namespace pmil;
using namespace pmil::painmil;

namespace {

Eigen::MatrixXd rows_from_pain(const std::vector<double>& pain) {
  Eigen::MatrixXd m(static_cast<int>(pain.size()), 2);
  for (size_t i = 0; i < pain.size(); ++i) {
    m(static_cast<int>(i), 1) = pain[i];
    m(static_cast<int>(i), 0) = 1.0 - pain[i];
  }
  return m;
}

// Brute-force oracle: full sort by (pain desc, index asc), then averages in
// ascending index order - an independent route to the same floats.
struct OracleResult {
  std::vector<int> selected;
  double y_np = 0, y_p = 0;
};

OracleResult oracle_shared(const Eigen::MatrixXd& per_clip, int k) {
  std::vector<int> order(per_clip.rows());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (per_clip(a, 1) != per_clip(b, 1)) return per_clip(a, 1) > per_clip(b, 1);
    return a < b;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  OracleResult out;
  out.selected = order;
  double sp = 0, snp = 0;
  for (const int idx : order) {
    sp += per_clip(idx, 1);
    snp += per_clip(idx, 0);
  }
  out.y_p = sp / k;
  out.y_np = snp / k;
  return out;
}

double oracle_top(const Eigen::MatrixXd& per_clip, int col, int k) {
  std::vector<int> order(per_clip.rows());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (per_clip(a, col) != per_clip(b, col)) {
      return per_clip(a, col) > per_clip(b, col);
    }
    return a < b;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  double s = 0;
  for (const int idx : order) s += per_clip(idx, col);
  return s / k;
}

ClipFeature make_clip(int l, int dim, Rng& rng) {
  ClipFeature clip;
  clip.frames.resize(l, dim);
  for (int f = 0; f < l; ++f) {
    for (int d = 0; d < dim; ++d) {
      clip.frames(f, d) = static_cast<float>(rng.normal());
    }
  }
  return clip;
}

}  // namespace

TEST_CASE("choose_k arithmetic and clamping") {
  CHECK(k_from_divisor(240, 8) == 30);
  CHECK(k_from_divisor(7, 8) == 1);  // floor(7/8) = 0, clamped up
  CHECK(k_from_divisor(8, 8) == 1);
  CHECK(k_from_divisor(5, 2) == 2);

  KSchedule schedule;
  Rng rng(5);
  CHECK(choose_k(240, schedule, false, rng) == 30);

  std::map<int, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const int k = choose_k(240, schedule, true, rng);
    counts[k] += 1;  // k = 240/d identifies d uniquely
  }
  REQUIRE(counts.size() == 4);
  for (const auto& [k, n] : counts) {
    CHECK(n > draws * (0.25 - 0.02));
    CHECK(n < draws * (0.25 + 0.02));
  }
}

TEST_CASE("mil_aggregate forced example") {
  const Eigen::MatrixXd rows = rows_from_pain({0.9, 0.2, 0.7, 0.4});
  const MILPrediction pred = mil_aggregate(rows, 2);
  CHECK(pred.selected == std::vector<int>{0, 2});
  CHECK(pred.bag[1] == doctest::Approx(0.8));
  CHECK(pred.bag[0] == doctest::Approx(0.2));
  CHECK(pred.bag[0] + pred.bag[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("mil_aggregate with k = n averages whole columns") {
  const Eigen::MatrixXd rows = rows_from_pain({0.1, 0.5, 0.9, 0.3});
  const MILPrediction pred = mil_aggregate(rows, 4);
  CHECK(pred.bag[1] == doctest::Approx(rows.col(1).mean()));
  CHECK(pred.bag[0] == doctest::Approx(rows.col(0).mean()));
}

TEST_CASE("mil_aggregate_og forced example and non-unit sum") {
  const Eigen::MatrixXd rows = rows_from_pain({0.9, 0.2, 0.7, 0.4});
  const Eigen::Vector2d bag = mil_aggregate_og(rows, 2);
  CHECK(bag[1] == doctest::Approx(0.8));   // top pain: 0.9, 0.7
  CHECK(bag[0] == doctest::Approx(0.7));   // top no-pain: 0.8, 0.6
  CHECK(bag[0] + bag[1] == doctest::Approx(1.5));

  // Uniform rows collapse both variants to the same value.
  const Eigen::MatrixXd uniform = rows_from_pain({0.5, 0.5, 0.5});
  const Eigen::Vector2d og = mil_aggregate_og(uniform, 2);
  const MILPrediction shared = mil_aggregate(uniform, 2);
  CHECK(og[0] == shared.bag[0]);
  CHECK(og[1] == shared.bag[1]);
}

TEST_CASE("aggregates match the enumeration oracle exactly on a small grid") {
  // n <= 4 here; the acceptance suite sweeps n <= 6.
  const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  for (int n = 1; n <= 4; ++n) {
    std::vector<int> digits(n, 0);
    while (true) {
      std::vector<double> pain(n);
      for (int i = 0; i < n; ++i) pain[i] = grid[digits[i]];
      const Eigen::MatrixXd rows = rows_from_pain(pain);
      for (int k = 1; k <= n; ++k) {
        const MILPrediction pred = mil_aggregate(rows, k);
        const OracleResult oracle = oracle_shared(rows, k);
        CHECK(pred.selected == oracle.selected);
        CHECK(pred.bag[1] == oracle.y_p);
        CHECK(pred.bag[0] == oracle.y_np);
        const Eigen::Vector2d og = mil_aggregate_og(rows, k);
        CHECK(og[1] == oracle_top(rows, 1, k));
        CHECK(og[0] == oracle_top(rows, 0, k));
      }
      int pos = n - 1;
      while (pos >= 0 && digits[pos] == 4) digits[pos--] = 0;
      if (pos < 0) break;
      digits[pos] += 1;
    }
  }
}

TEST_CASE("mil_aggregate bag is permutation invariant") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(8));
    std::vector<double> pain(n);
    for (double& p : pain) p = rng.uniform(0.05, 0.95);
    const Eigen::MatrixXd rows = rows_from_pain(pain);
    const int k = 1 + static_cast<int>(rng.below(n));
    const MILPrediction base = mil_aggregate(rows, k);

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (size_t i = perm.size(); i > 1; --i) {
      std::swap(perm[i - 1], perm[rng.below(i)]);
    }
    Eigen::MatrixXd shuffled(n, 2);
    for (int i = 0; i < n; ++i) shuffled.row(i) = rows.row(perm[i]);
    const MILPrediction moved = mil_aggregate(shuffled, k);
    CHECK(moved.bag[0] == doctest::Approx(base.bag[0]).epsilon(1e-12));
    CHECK(moved.bag[1] == doctest::Approx(base.bag[1]).epsilon(1e-12));
  }
}

TEST_CASE("raising a selected pain confidence never lowers the bag pain") {
  Rng rng(37);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng.below(6));
    std::vector<double> pain(n);
    for (double& p : pain) p = rng.uniform(0.05, 0.9);
    const Eigen::MatrixXd rows = rows_from_pain(pain);
    const int k = 1 + static_cast<int>(rng.below(n));
    const MILPrediction before = mil_aggregate(rows, k);

    const int bump = before.selected[rng.below(before.selected.size())];
    std::vector<double> pain2 = pain;
    pain2[bump] = std::min(1.0, pain2[bump] + rng.uniform(0.0, 0.1));
    const MILPrediction after = mil_aggregate(rows_from_pain(pain2), k);
    CHECK(after.bag[1] >= before.bag[1] - 1e-12);
  }
}

TEST_CASE("weighted cross entropy") {
  SUBCASE("balanced counts reduce to plain cross entropy") {
    const Eigen::Vector2d w = ce_class_weights(100, 100);
    CHECK(w[0] == doctest::Approx(1.0));
    CHECK(w[1] == doctest::Approx(1.0));
    const WeightedCeResult r = weighted_ce({0.3, 0.7}, true, 100, 100);
    CHECK(r.loss == doctest::Approx(-std::log(0.7)));
  }

  SUBCASE("segment-count weights match direct arithmetic") {
    // Counts 3310 pain / 3183 no-pain.
    const Eigen::Vector2d w = ce_class_weights(3310, 3183);
    CHECK(w[1] == doctest::Approx(2.0 * (1.0 - 3310.0 / 6493.0)).epsilon(1e-12));
    CHECK(w[0] == doctest::Approx(2.0 * (1.0 - 3183.0 / 6493.0)).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.9804).epsilon(1e-4));
    CHECK(w[0] == doctest::Approx(1.0196).epsilon(1e-4));
    CHECK(w[0] + w[1] == doctest::Approx(2.0).epsilon(1e-12));
  }

  SUBCASE("a perfect prediction costs zero") {
    const WeightedCeResult r = weighted_ce({0.0, 1.0}, true, 10, 10);
    CHECK(r.loss == doctest::Approx(0.0));
    CHECK_FALSE(r.clamped);
  }

  SUBCASE("zero true-class confidence clamps and flags") {
    const WeightedCeResult r = weighted_ce({1.0, 0.0}, true, 10, 10);
    CHECK(r.clamped);
    CHECK(r.loss == doctest::Approx(-std::log(1e-12)));
  }
}

TEST_CASE("head forward shapes, softmax rows, and determinism") {
  HeadArch arch;
  arch.feature_dim = 40;
  arch.clip_len = 3;
  arch.init_seed = 21;
  PainHead<float> head(arch);
  Rng rng(5);
  std::vector<ClipFeature> clips;
  for (int i = 0; i < 4; ++i) clips.push_back(make_clip(3, 40, rng));

  Rng r1(9);
  const nn::Tensor<float> p1 = head.forward(clips, false, r1);
  REQUIRE(p1.shape == std::vector<int>{4, 2});
  for (int i = 0; i < 4; ++i) {
    CHECK(p1.v[2 * i] + p1.v[2 * i + 1] == doctest::Approx(1.0).epsilon(1e-6));
  }
  Rng r2(10);
  const nn::Tensor<float> p2 = head.forward(clips, false, r2);
  CHECK(p1.v == p2.v);

  // Frame mode: a bare 600 -> 64 -> 64 -> 2 stack.
  HeadArch frame_arch;
  frame_arch.clip_len = 1;
  PainHead<float> frame_head(frame_arch);
  const ClipFeature clip = make_clip(1, 600, rng);
  const Eigen::Vector2d out = head_forward(frame_head, clip);
  CHECK(out[0] + out[1] == doctest::Approx(1.0).epsilon(1e-6));

  ClipFeature wrong = make_clip(2, 600, rng);
  Rng r3(1);
  CHECK_THROWS_AS(frame_head.forward({wrong}, false, r3), ValidationError);
}

TEST_CASE("loss gradient through aggregation matches finite differences") {
  // Fixed top-k selection at the evaluation point; well-separated pain
  // values keep S stable under the probe steps.
  HeadArch arch;
  arch.feature_dim = 12;
  arch.clip_len = 1;
  arch.hidden1 = 8;
  arch.hidden2 = 8;
  arch.dropout = 0.0;
  arch.init_seed = 77;

  for (const LossVariant variant :
       {LossVariant::kOursMil, LossVariant::kMilOg, LossVariant::kCePerClip}) {
    PainHead<double> head(arch);
    Rng rng(13);
    std::vector<ClipFeature> clips;
    for (int i = 0; i < 5; ++i) clips.push_back(make_clip(1, 12, rng));
    const int k = 2;
    const double cp = 30, cnp = 50;
    const bool label_pain = true;
    const Eigen::Vector2d w = ce_class_weights(cp, cnp);

    auto forward_probs = [&]() {
      Rng unused(0);
      return head.forward(clips, false, unused);
    };
    auto matrix_of = [](const nn::Tensor<double>& probs) {
      Eigen::MatrixXd m(probs.dim(0), 2);
      for (int i = 0; i < probs.dim(0); ++i) {
        m(i, 0) = probs.v[2 * i];
        m(i, 1) = probs.v[2 * i + 1];
      }
      return m;
    };
    // Selection frozen at the unperturbed point.
    const Eigen::MatrixXd base = matrix_of(forward_probs());
    const std::vector<int> s_shared = mil_aggregate(base, k).selected;
    std::vector<int> s_label(s_shared);
    {
      std::vector<int> order(base.rows());
      std::iota(order.begin(), order.end(), 0);
      const int col = label_pain ? 1 : 0;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return base(a, col) > base(b, col);
      });
      order.resize(k);
      std::sort(order.begin(), order.end());
      s_label = order;
    }

    auto loss_of = [&](const Eigen::MatrixXd& pm) {
      const int label = label_pain ? 1 : 0;
      if (variant == LossVariant::kCePerClip) {
        double acc = 0;
        for (int t = 0; t < pm.rows(); ++t) {
          acc += -w[label] * std::log(std::max(pm(t, label), 1e-12));
        }
        return acc / pm.rows();
      }
      const auto& sel = variant == LossVariant::kOursMil ? s_shared : s_label;
      double y = 0;
      for (const int idx : sel) y += pm(idx, label);
      y /= k;
      return -w[label] * std::log(std::max(y, 1e-12));
    };

    auto grads = [&]() {
      for (auto* p : head.params()) std::fill(p->g.begin(), p->g.end(), 0.0);
      const nn::Tensor<double> probs = forward_probs();
      const Eigen::MatrixXd pm = matrix_of(probs);
      nn::Tensor<double> dprobs(probs.shape);
      const int label = 1;
      if (variant == LossVariant::kCePerClip) {
        for (int t = 0; t < pm.rows(); ++t) {
          dprobs.v[2 * t + label] = -w[label] / (pm(t, label) * pm.rows());
        }
      } else {
        const auto& sel = variant == LossVariant::kOursMil ? s_shared : s_label;
        double y = 0;
        for (const int idx : sel) y += pm(idx, label);
        y /= k;
        for (const int idx : sel) {
          dprobs.v[2 * idx + label] = -w[label] / (y * k);
        }
      }
      head.backward(dprobs);
    };
    auto loss_fn = [&]() { return loss_of(matrix_of(forward_probs())); };

    const double err =
        testutil::max_param_grad_error(head.params(), loss_fn, grads, 1e-6);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("hide and seek masking") {
  Rng rng(17);
  ClipFeature clip = make_clip(10, 20, rng);

  SUBCASE("p_hide zero is the identity") {
    Rng r(3);
    const ClipFeature out = hide_and_seek_mask(clip, 5, 0.0, r);
    CHECK(out.frames == clip.frames);
  }

  SUBCASE("p_hide one leaves exactly one surviving block") {
    Rng r(4);
    const ClipFeature out = hide_and_seek_mask(clip, 5, 1.0, r);
    int surviving_blocks = 0;
    for (int b = 0; b < 5; ++b) {
      const bool alive = out.frames.middleRows(2 * b, 2).cwiseAbs().sum() > 0;
      surviving_blocks += alive;
    }
    CHECK(surviving_blocks == 1);
  }

  SUBCASE("per-block erase frequency tracks p_hide") {
    Rng r(5);
    int erased = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      const ClipFeature out = hide_and_seek_mask(clip, 10, 0.5, r);
      for (int b = 0; b < 10; ++b) {
        erased += out.frames.row(b).cwiseAbs().sum() == 0;
      }
    }
    const double freq = erased / (10.0 * draws);
    CHECK(freq > 0.48);
    CHECK(freq < 0.52);
  }
}

TEST_CASE("class counts follow the supervision unit") {
  std::vector<BagOfClips> bags(3);
  Rng rng(3);
  for (int i = 0; i < 3; ++i) {
    bags[i].label_pain = i < 2;
    for (int c = 0; c < 4 + i; ++c) bags[i].clips.push_back(make_clip(1, 4, rng));
  }
  const ClassCounts frame_counts = class_counts(bags, 1);
  CHECK(frame_counts.pain == 4 + 5);
  CHECK(frame_counts.nopain == 6);
  const ClassCounts segment_counts = class_counts(bags, 10);
  CHECK(segment_counts.pain == 2);
  CHECK(segment_counts.nopain == 1);
}

TEST_CASE("planted bags are deterministic with the requested structure") {
  PlantedBagsConfig cfg;
  cfg.n_train_bags = 6;
  cfg.n_val_bags = 2;
  cfg.n_test_bags = 4;
  cfg.clips_per_bag = 8;
  cfg.feature_dim = 16;
  cfg.seed = 12;
  const PlantedBags a = make_planted_bags(cfg);
  const PlantedBags b = make_planted_bags(cfg);
  REQUIRE(a.train.size() == 6);
  REQUIRE(a.val.size() == 2);
  REQUIRE(a.test.size() == 4);
  CHECK(a.train[0].clips[0].frames == b.train[0].clips[0].frames);
  int pain = 0;
  for (const auto& bag : a.train) pain += bag.label_pain;
  CHECK(pain == 3);
}

TEST_CASE("head training learns easy planted bags and stays frozen-free") {
  PlantedBagsConfig cfg;
  cfg.n_train_bags = 24;
  cfg.n_val_bags = 8;
  cfg.n_test_bags = 16;
  cfg.clips_per_bag = 16;
  cfg.feature_dim = 32;
  cfg.signal_scale = 3.0;     // deliberately easy
  cfg.distractor_rate = 0.0;
  cfg.positive_fraction = 0.5;
  cfg.seed = 5;
  const PlantedBags bags = make_planted_bags(cfg);

  HeadArch arch;
  arch.feature_dim = 32;
  arch.clip_len = 1;
  arch.init_seed = 8;
  HeadTrainConfig train_cfg;
  train_cfg.epochs = 12;
  train_cfg.seed = 19;
  const TrainedHead trained =
      train_pain_head(bags.train, bags.val, bags.test, arch, train_cfg);

  REQUIRE(trained.per_epoch.size() == 12);
  CHECK(trained.best_epoch >= 1);
  double best_test_f1 = 0;
  for (const auto& m : trained.per_epoch) {
    best_test_f1 = std::max(best_test_f1, m.test_f1);
  }
  CHECK(best_test_f1 > 0.8);

  // Evaluation-time bag vectors keep summing to one.
  const auto preds =
      evaluate_bags(*trained.head, bags.test, train_cfg.schedule);
  for (const auto& p : preds) {
    CHECK(p.bag[0] + p.bag[1] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(p.k == k_from_divisor(p.n, 8));
  }
}

TEST_CASE("prediction export format") {
  std::vector<BagPrediction> preds(1);
  preds[0].segment_id = "p0001_c000_v2";
  preds[0].n = 12;
  preds[0].k = 3;
  preds[0].selected = {0, 4, 7};
  preds[0].bag = {0.25, 0.75};
  preds[0].label_pain = true;
  const std::string path =
      (std::filesystem::temp_directory_path() / "pmil_preds.csv").string();
  export_predictions(path, preds);
  std::ifstream f(path);
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "segment_id,n,k,S,y_np,y_p,label");
  CHECK(row == "p0001_c000_v2,12,3,0;4;7,0.250000,0.750000,pain");
  std::filesystem::remove(path);
}

TEST_CASE("head checkpoints round-trip") {
  HeadArch arch;
  arch.feature_dim = 24;
  arch.clip_len = 2;
  arch.init_seed = 31;
  PainHead<float> head(arch);
  const std::string path =
      (std::filesystem::temp_directory_path() / "pmil_head.ckpt").string();
  save_head_model(path, arch, head);
  TrainedHead loaded = load_head_model(path);
  CHECK(loaded.arch.clip_len == 2);

  Rng rng(3);
  const ClipFeature clip = make_clip(2, 24, rng);
  const Eigen::Vector2d a = head_forward(head, clip);
  const Eigen::Vector2d b = head_forward(*loaded.head, clip);
  CHECK(a == b);
  std::filesystem::remove(path);
}
