#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "pmil/metrics.hpp"
#include "pmil/mvs.hpp"
#include "pmil/painmil.hpp"
#include "pmil/preprocess.hpp"
#include "pmil/synthdata.hpp"

// Cross-validation protocol, disentanglement probes, and experiment
// orchestration.
namespace pmil::evalharness {

// ---------------------------------------------------------------------------
// Pipeline data: everything the trainers need, crop-normalized up front.
// ---------------------------------------------------------------------------

// Crop-normalized frames of one classification segment (one bag).
struct SegmentFrames {
  std::string segment_id;
  int subject = 0;
  int sequence_id = 0;
  int view = 0;
  bool label_pain = false;
  double frame_interval = 0.0;
  std::vector<double> timestamps;
  std::vector<std::vector<unsigned char>> crops;  // model-res RGB8
};

struct PipelineConfig {
  synthdata::SceneConfig scene;
  synthdata::GenerateSpec gen;
  double top_motion_percent = 1.0;
  double min_segment_seconds = 10.0;
  double max_segment_seconds = 120.0;
  double head_fps = 1.0;  // classification sampling rate
  int model_resolution = 64;
  bool uniform_sampling = false;  // uniform frame selection, global background
  preprocess::FlowParams flow;
};

struct PipelineData {
  int resolution = 0;
  int n_views = 0;
  mvs::TrainingPool pool;
  std::vector<SegmentFrames> segments;
};

// Generates the synthetic corpus sequence by sequence and absorbs it; peak
// memory stays at one buffered sequence.
PipelineData prepare_pipeline_data(const PipelineConfig& cfg);

// Same preparation from an on-disk dataset (synthetic or ingested real
// footage following the manifest contract).
PipelineData prepare_pipeline_data(const synthdata::Dataset& dataset,
                                   const PipelineConfig& cfg);

// Frozen-encoder features for a segment, cut into length-l clips (trailing
// partial clips dropped).
painmil::BagOfClips bag_from_segment(mvs::MvsModel<float>& encoder,
                                     const SegmentFrames& segment,
                                     int clip_len, double head_fps);

// ---------------------------------------------------------------------------
// Leave-one-subject-out protocol
// ---------------------------------------------------------------------------

struct LosoOptions {
  mvs::MvsArch arch;
  mvs::MvsTrainConfig mvs_cfg;
  painmil::HeadArch head_arch;
  painmil::HeadTrainConfig head_cfg;
  double head_fps = 1.0;
  std::uint64_t seed = 0;
  std::string run_dir;  // artifacts written when non-empty
  // Early stopping on a subject the head also trains on would be optimistic;
  // the validation subject is held out of head training by default.
  bool exclude_validation_from_head_training = true;
};

struct FoldResult {
  int test_subject = -1;
  int validation_subject = -1;
  std::vector<painmil::EpochMetrics> epochs;
  int best_val_epoch = 0;   // selection by validation F1
  int best_test_epoch = 0;  // hindsight upper bound
  double true_f1 = 0.0, true_acc = 0.0;
  double oracle_f1 = 0.0, oracle_acc = 0.0;
};

struct LosoSummary {
  std::vector<FoldResult> folds;
  std::vector<int> skipped_subjects;
  double mean_true_f1 = 0.0, std_true_f1 = 0.0;
  double mean_true_acc = 0.0, std_true_acc = 0.0;
  double mean_oracle_f1 = 0.0, std_oracle_f1 = 0.0;
  double mean_oracle_acc = 0.0, std_oracle_acc = 0.0;
};

// The designated validation subject: most balanced pain/no-pain segment
// counts, ties to the lowest id. Substituted by the first other subject when
// it coincides with the test subject.
int most_balanced_subject(const std::vector<SegmentFrames>& segments);
int validation_subject_for_fold(int designated, int test_subject,
                                const std::vector<int>& subjects);

LosoSummary run_loso(const PipelineData& data, const LosoOptions& opt);

void save_summary(const std::string& path, const LosoSummary& summary);

// ---------------------------------------------------------------------------
// Disentanglement probes
// ---------------------------------------------------------------------------

struct RetrievalProbe {
  int query_frame = 0;
  int query_view = 0;
  int target_view = 0;
  std::vector<int> ranked;  // gallery order, best first (truncated)
  int rank_of_ground_truth = 0;  // 1-based rank of the first correct item
  bool top1_correct = false;
  bool top3_correct = false;
};

struct NnProbeReport {
  std::vector<RetrievalProbe> probes;
  double top1_accuracy = 0.0;
  double top3_accuracy = 0.0;
  double chance_rate = 0.0;  // empirical per-gallery hit probability
};

// Pure ranking core, exposed for oracle tests: L2 over latent rows.
std::vector<int> rank_by_distance(const Eigen::MatrixXd& rotated_query,
                                  const std::vector<Eigen::MatrixXd>& gallery);

// Queries come from `query_subject`, galleries from every other subject;
// each query latent is rotated into the target view with crop-adjusted
// relative rotations. Correctness: mean absolute joint-angle difference
// within `pose_tolerance_rad`.
NnProbeReport nn_probe(mvs::MvsModel<float>& model,
                       const mvs::TrainingPool& pool, int query_subject,
                       double pose_tolerance_rad = 15.0 * M_PI / 180.0,
                       int max_queries = 64, std::uint64_t seed = 0);

struct AppearanceSwapReport {
  int n_pairs = 0;
  double mean_color_shift = 0.0;     // movement toward the donor palette
  double mean_keypoint_drift = 0.0;  // extra centroid error caused by the swap
  double mean_self_swap_mae = 0.0;   // own-appearance swap must be a no-op
};

AppearanceSwapReport appearance_swap_probe(mvs::MvsModel<float>& model,
                                           const mvs::TrainingPool& pool,
                                           int max_pairs = 48,
                                           std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Scratch preset: encoder and head trained jointly on frame inputs, the same
// MIL loss, evaluated every few epochs.
// ---------------------------------------------------------------------------

struct ScratchOptions {
  mvs::MvsArch arch;
  painmil::HeadArch head_arch;  // clip_len must be 1
  painmil::KSchedule schedule;
  int epochs = 50;
  double learning_rate = 0.0001;
  int eval_every = 5;
  std::uint64_t seed = 0;
};

struct ScratchResult {
  std::vector<painmil::EpochMetrics> metrics;  // evaluated epochs only
};

ScratchResult train_scratch(const PipelineData& data, int test_subject,
                            int val_subject, const ScratchOptions& opt);

// ---------------------------------------------------------------------------
// Segment table: the run-level index tying predictions back to dataset
// frames, consumed by the clip exporter.
// ---------------------------------------------------------------------------

void save_segment_table(const std::string& path,
                        const std::vector<SegmentFrames>& segments);

struct SegmentTableRow {
  std::string segment_id;
  int subject = 0, sequence_id = 0, view = 0;
  bool label_pain = false;
  double frame_interval = 0.0;
  std::vector<double> timestamps;
};

std::vector<SegmentTableRow> load_segment_table(const std::string& path);

// Dumps the selected top-S clips of the highest-pain segments as horizontal
// image strips for qualitative review.
void export_clip_strips(const synthdata::Dataset& dataset,
                        const std::vector<SegmentTableRow>& table,
                        const std::string& predictions_csv, int top_n,
                        int clip_len, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Artifact rendering (consumes CSVs and crops; never recomputes metrics)
// ---------------------------------------------------------------------------

void render_loss_curve(const std::string& csv_path, const std::string& out_png);
void render_fold_bars(const std::string& summary_csv,
                      const std::string& out_png);
void render_retrieval_grid(const mvs::TrainingPool& pool,
                           const std::vector<RetrievalProbe>& probes,
                           const std::vector<int>& gallery_frames,
                           const std::string& out_png, int max_rows = 8);

}  // namespace pmil::evalharness
