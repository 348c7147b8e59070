// Command-line orchestration for the multi-view pose disentanglement and
// weakly supervised pain classification pipeline.
//
// Exit codes: 0 success, 2 validation/config error, 3 runtime abort.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "pmil/config.hpp"
#include "pmil/evalharness.hpp"
#include "pmil/wiring.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmil;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
  cmd->add_option("--config", opts->config_path,
                  "JSON config file (flat key-value document)");
  cmd->add_option("--set", opts->overrides,
                  "override a config key, e.g. --set mvs.epochs=2");
}

cli::RunConfig resolve_config(const CommonOpts& opts) {
  cli::RunConfig cfg = opts.config_path.empty()
                           ? cli::default_config()
                           : cli::load_config(opts.config_path);
  return cli::apply_overrides(cfg, opts.overrides);
}

// --out paths are rooted at $PAINMIL_RUN_ROOT when relative.
std::string resolve_out(const std::string& out) {
  const char* root = std::getenv("PAINMIL_RUN_ROOT");
  if (root && *root && !fs::path(out).is_absolute()) {
    return (fs::path(root) / out).string();
  }
  return out;
}

void persist_run_info(const std::string& dir, const cli::RunConfig& cfg,
                      const std::string& command) {
  fs::create_directories(dir);
  cli::save_config(cfg, (fs::path(dir) / "config.json").string());
  json info;
  info["command"] = command;
  info["config_hash"] = cli::config_hash(cfg);
  info["seed"] = cfg.seed;
  std::ofstream f(fs::path(dir) / "run_info.json");
  f << info.dump(2) << "\n";
}

void warn_on_hash_mismatch(const std::string& artifact_path,
                           const cli::RunConfig& cfg) {
  const fs::path info_path = fs::path(artifact_path).parent_path() /
                             "run_info.json";
  if (!fs::exists(info_path)) return;
  std::ifstream f(info_path);
  json info;
  f >> info;
  const std::string prior = info.value("config_hash", "");
  if (!prior.empty() && prior != cli::config_hash(cfg)) {
    std::cerr << "warning: config hash mismatch between stages ("
              << artifact_path << " was produced under " << prior << ")\n";
  }
}

int cmd_gen_data(const CommonOpts& common, const std::string& out,
                 bool force) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string out_dir = resolve_out(out);
  if (fs::exists(fs::path(out_dir) / "manifest.txt") && !force) {
    std::cerr << "error: " << out_dir
              << " already has a dataset; pass --force to overwrite\n";
    return 2;
  }
  synthdata::write_dataset(cli::scene_from(cfg), cli::gen_from(cfg), out_dir);
  persist_run_info(out_dir, cfg, "gen-data");
  std::cout << "dataset written to " << out_dir << "\n";
  return 0;
}

int cmd_train_mvs(const CommonOpts& common, const std::string& dataset_dir,
                  const std::string& out, int exclude_subject) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string run_dir = resolve_out(out);
  const synthdata::Dataset dataset = synthdata::load_dataset(dataset_dir);
  const evalharness::PipelineData data =
      evalharness::prepare_pipeline_data(dataset, cli::pipeline_from(cfg));

  mvs::MvsTrainConfig train_cfg = cli::mvs_cfg_from(cfg);
  train_cfg.exclude_subject = exclude_subject;
  fs::create_directories(run_dir);
  train_cfg.checkpoint_dir = (fs::path(run_dir) / "checkpoints").string();
  const mvs::TrainedMvs trained =
      mvs::train_mvs(data.pool, cli::arch_from(cfg), train_cfg);

  mvs::save_mvs_model((fs::path(run_dir) / "backbone.ckpt").string(),
                      trained.arch, *trained.model, nullptr);
  mvs::save_curve((fs::path(run_dir) / "loss_curve.csv").string(),
                  trained.curve);
  persist_run_info(run_dir, cfg, "train-mvs");
  std::cout << "backbone written to " << run_dir << " (final loss "
            << trained.curve.back().total << ")\n";
  return 0;
}

int cmd_train_pain(const CommonOpts& common, const std::string& dataset_dir,
                   const std::string& backbone_path, const std::string& out,
                   int test_subject, bool scratch) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string run_dir = resolve_out(out);
  const synthdata::Dataset dataset = synthdata::load_dataset(dataset_dir);
  const evalharness::PipelineData data =
      evalharness::prepare_pipeline_data(dataset, cli::pipeline_from(cfg));

  std::set<int> subject_set;
  for (const auto& s : data.segments) subject_set.insert(s.subject);
  const std::vector<int> subjects(subject_set.begin(), subject_set.end());
  const int designated = evalharness::most_balanced_subject(data.segments);
  const int val_subject = evalharness::validation_subject_for_fold(
      designated, test_subject, subjects);

  fs::create_directories(run_dir);
  if (scratch) {
    evalharness::ScratchOptions opt;
    opt.arch = cli::arch_from(cfg);
    opt.head_arch = cli::head_arch_from(cfg);
    opt.head_arch.clip_len = 1;
    opt.schedule = cli::head_cfg_from(cfg).schedule;
    opt.epochs = cfg.scratch_epochs;
    opt.learning_rate = cfg.scratch_learning_rate;
    opt.eval_every = cfg.scratch_eval_every;
    opt.seed = cli::stage_seed(cfg, "scratch");
    const evalharness::ScratchResult result =
        evalharness::train_scratch(data, test_subject, val_subject, opt);
    std::ofstream f(fs::path(run_dir) / "metrics.csv");
    f << "epoch,train_loss,val_f1,val_acc,test_f1,test_acc\n";
    for (const auto& m : result.metrics) {
      f << m.epoch << ',' << m.train_loss << ',' << m.val_f1 << ',' << m.val_acc
        << ',' << m.test_f1 << ',' << m.test_acc << "\n";
    }
    persist_run_info(run_dir, cfg, "train-pain --scratch");
    std::cout << "scratch metrics written to " << run_dir << "\n";
    return 0;
  }

  if (!fs::exists(backbone_path)) {
    std::cerr << "error: missing checkpoint " << backbone_path << "\n";
    return 2;
  }
  warn_on_hash_mismatch(backbone_path, cfg);
  mvs::TrainedMvs backbone = mvs::load_mvs_model(backbone_path);

  std::vector<painmil::BagOfClips> train_bags, val_bags, test_bags;
  const int clip_len = cli::clip_len_from(cfg);
  for (const auto& segment : data.segments) {
    painmil::BagOfClips bag = evalharness::bag_from_segment(
        *backbone.model, segment, clip_len, cli::head_fps_from(cfg));
    if (bag.size() < 1) continue;
    if (segment.subject == test_subject) test_bags.push_back(std::move(bag));
    else if (segment.subject == val_subject) val_bags.push_back(std::move(bag));
    else train_bags.push_back(std::move(bag));
  }

  painmil::HeadArch head_arch = cli::head_arch_from(cfg);
  const painmil::TrainedHead trained = painmil::train_pain_head(
      train_bags, val_bags, test_bags, head_arch, cli::head_cfg_from(cfg));

  painmil::save_head_model((fs::path(run_dir) / "head_best.ckpt").string(),
                           head_arch, *trained.head);
  std::ofstream f(fs::path(run_dir) / "metrics.csv");
  f << "epoch,train_loss,val_f1,val_acc,test_f1,test_acc\n";
  for (const auto& m : trained.per_epoch) {
    f << m.epoch << ',' << m.train_loss << ',' << m.val_f1 << ',' << m.val_acc
      << ',' << m.test_f1 << ',' << m.test_acc << "\n";
  }
  const auto& eval_bags = test_bags.empty() ? val_bags : test_bags;
  painmil::export_predictions(
      (fs::path(run_dir) / "predictions.csv").string(),
      painmil::evaluate_bags(*trained.head, eval_bags,
                             cli::head_cfg_from(cfg).schedule));
  evalharness::save_segment_table(
      (fs::path(run_dir) / "segments.idx").string(), data.segments);
  persist_run_info(run_dir, cfg, "train-pain");
  std::cout << "head written to " << run_dir << " (best epoch "
            << trained.best_epoch << ")\n";
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& dataset_dir,
             const std::string& out) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string run_dir = resolve_out(out);
  const synthdata::Dataset dataset = synthdata::load_dataset(dataset_dir);
  const evalharness::PipelineData data =
      evalharness::prepare_pipeline_data(dataset, cli::pipeline_from(cfg));

  const evalharness::LosoSummary summary =
      evalharness::run_loso(data, cli::loso_from(cfg, run_dir));
  persist_run_info(run_dir, cfg, "eval");
  std::cout << "folds: " << summary.folds.size() << "  true F1 "
            << summary.mean_true_f1 << " +/- " << summary.std_true_f1
            << "  oracle F1 " << summary.mean_oracle_f1 << " +/- "
            << summary.std_oracle_f1 << "\n";
  if (!summary.skipped_subjects.empty()) {
    for (const int s : summary.skipped_subjects) {
      std::cerr << "fold skipped: subject " << s << " (no segments)\n";
    }
    return 2;
  }
  return 0;
}

int cmd_retrieve_nn(const CommonOpts& common, const std::string& dataset_dir,
                    const std::string& backbone_path, const std::string& out,
                    int subject) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string out_dir = resolve_out(out);
  if (!fs::exists(backbone_path)) {
    std::cerr << "error: missing checkpoint " << backbone_path << "\n";
    return 2;
  }
  warn_on_hash_mismatch(backbone_path, cfg);
  const synthdata::Dataset dataset = synthdata::load_dataset(dataset_dir);
  const evalharness::PipelineData data =
      evalharness::prepare_pipeline_data(dataset, cli::pipeline_from(cfg));
  mvs::TrainedMvs backbone = mvs::load_mvs_model(backbone_path);

  const evalharness::NnProbeReport report = evalharness::nn_probe(
      *backbone.model, data.pool, subject, 15.0 * M_PI / 180.0, 64,
      cli::stage_seed(cfg, "probe"));

  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "retrieval.csv");
  f << "query_frame,query_view,target_view,rank_of_ground_truth,top1,top3\n";
  for (const auto& p : report.probes) {
    f << p.query_frame << ',' << p.query_view << ',' << p.target_view << ','
      << p.rank_of_ground_truth << ',' << p.top1_correct << ','
      << p.top3_correct << "\n";
  }
  f << "# top1=" << report.top1_accuracy << " top3=" << report.top3_accuracy
    << " chance=" << report.chance_rate << "\n";
  std::vector<int> gallery;
  evalharness::render_retrieval_grid(
      data.pool, report.probes, gallery,
      (fs::path(out_dir) / "retrieval_grid.png").string());
  persist_run_info(out_dir, cfg, "retrieve-nn");
  std::cout << "top1 " << report.top1_accuracy << " top3 "
            << report.top3_accuracy << " chance " << report.chance_rate
            << "\n";
  return 0;
}

int cmd_plot(const std::string& run, const std::string& out) {
  const std::string run_dir = resolve_out(run);
  const std::string out_dir = resolve_out(out);
  fs::create_directories(out_dir);
  int rendered = 0;
  if (fs::exists(fs::path(run_dir) / "summary.csv")) {
    evalharness::render_fold_bars(
        (fs::path(run_dir) / "summary.csv").string(),
        (fs::path(out_dir) / "fold_f1.png").string());
    ++rendered;
  }
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.path().filename() == "loss_curve.csv") {
      const std::string tag =
          entry.path().parent_path().filename().string();
      evalharness::render_loss_curve(
          entry.path().string(),
          (fs::path(out_dir) / ("loss_" + tag + ".png")).string());
      ++rendered;
    }
  }
  if (rendered == 0) {
    std::cerr << "error: no plottable artifacts under " << run_dir << "\n";
    return 2;
  }
  std::cout << rendered << " plot(s) written to " << out_dir << "\n";
  return 0;
}

int cmd_export_clips(const CommonOpts& common, const std::string& run,
                     const std::string& dataset_dir, const std::string& out,
                     int top_n) {
  const cli::RunConfig cfg = resolve_config(common);
  const std::string run_dir = resolve_out(run);
  const std::string out_dir = resolve_out(out);
  const synthdata::Dataset dataset = synthdata::load_dataset(dataset_dir);

  int exported_sources = 0;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.path().filename() != "predictions.csv") continue;
    fs::path table_path = entry.path().parent_path() / "segments.idx";
    if (!fs::exists(table_path)) {
      table_path = fs::path(run_dir) / "segments.idx";
    }
    if (!fs::exists(table_path)) continue;
    const auto table = evalharness::load_segment_table(table_path.string());
    evalharness::export_clip_strips(dataset, table, entry.path().string(),
                                    top_n, cli::clip_len_from(cfg), out_dir);
    ++exported_sources;
  }
  if (exported_sources == 0) {
    std::cerr << "error: no predictions.csv with a segment table under "
              << run_dir << "\n";
    return 2;
  }
  std::cout << "clip strips written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Self-supervised multi-view pose disentanglement with weakly "
      "supervised pain classification"};
  app.require_subcommand(1);

  CommonOpts gen_common;
  std::string gen_out;
  bool gen_force = false;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, &gen_common);
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_flag("--force", gen_force, "overwrite an existing dataset");

  CommonOpts mvs_common;
  std::string mvs_dataset, mvs_out;
  int mvs_exclude = -1;
  auto* tmvs = app.add_subcommand("train-mvs", "train the synthesis backbone");
  add_common(tmvs, &mvs_common);
  tmvs->add_option("--dataset", mvs_dataset, "dataset directory")->required();
  tmvs->add_option("--out", mvs_out, "run directory")->required();
  tmvs->add_option("--exclude-subject", mvs_exclude,
                   "subject id left out of training");

  CommonOpts pain_common;
  std::string pain_dataset, pain_backbone, pain_out;
  int pain_test = -1;
  bool pain_scratch = false;
  auto* tpain =
      app.add_subcommand("train-pain", "train the classification head");
  add_common(tpain, &pain_common);
  tpain->add_option("--dataset", pain_dataset, "dataset directory")->required();
  tpain->add_option("--backbone", pain_backbone, "backbone checkpoint");
  tpain->add_option("--out", pain_out, "run directory")->required();
  tpain->add_option("--test-subject", pain_test, "held-out subject id");
  tpain->add_flag("--scratch", pain_scratch,
                  "train encoder and head jointly from scratch");

  CommonOpts eval_common;
  std::string eval_dataset, eval_out;
  auto* ev = app.add_subcommand("eval", "leave-one-subject-out evaluation");
  add_common(ev, &eval_common);
  ev->add_option("--dataset", eval_dataset, "dataset directory")->required();
  ev->add_option("--out", eval_out, "run directory")->required();

  CommonOpts nn_common;
  std::string nn_dataset, nn_backbone, nn_out;
  int nn_subject = 0;
  auto* nn = app.add_subcommand("retrieve-nn",
                                "rotated-latent nearest-neighbor probe");
  add_common(nn, &nn_common);
  nn->add_option("--dataset", nn_dataset, "dataset directory")->required();
  nn->add_option("--backbone", nn_backbone, "backbone checkpoint")->required();
  nn->add_option("--out", nn_out, "output directory")->required();
  nn->add_option("--subject", nn_subject, "query subject id");

  std::string plot_run, plot_out;
  auto* plot = app.add_subcommand("plot", "render charts from run artifacts");
  plot->add_option("--run", plot_run, "run directory")->required();
  plot->add_option("--out", plot_out, "output directory")->required();

  CommonOpts clips_common;
  std::string clips_run, clips_dataset, clips_out;
  int clips_top = 8;
  auto* clips = app.add_subcommand(
      "export-clips", "dump top pain clips as image strips");
  add_common(clips, &clips_common);
  clips->add_option("--run", clips_run, "run directory")->required();
  clips->add_option("--dataset", clips_dataset, "dataset directory")
      ->required();
  clips->add_option("--out", clips_out, "output directory")->required();
  clips->add_option("--top", clips_top, "number of segments to export");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_common, gen_out, gen_force);
    if (tmvs->parsed()) {
      return cmd_train_mvs(mvs_common, mvs_dataset, mvs_out, mvs_exclude);
    }
    if (tpain->parsed()) {
      return cmd_train_pain(pain_common, pain_dataset, pain_backbone, pain_out,
                            pain_test, pain_scratch);
    }
    if (ev->parsed()) return cmd_eval(eval_common, eval_dataset, eval_out);
    if (nn->parsed()) {
      return cmd_retrieve_nn(nn_common, nn_dataset, nn_backbone, nn_out,
                             nn_subject);
    }
    if (plot->parsed()) return cmd_plot(plot_run, plot_out);
    if (clips->parsed()) {
      return cmd_export_clips(clips_common, clips_run, clips_dataset,
                              clips_out, clips_top);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeAbort& e) {
    std::cerr << "abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "abort: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
