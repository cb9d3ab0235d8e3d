#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "thermo/dataset.hpp"
#include "thermo/error.hpp"
#include "thermo/explain.hpp"
#include "thermo/metrics.hpp"
#include "thermo/model.hpp"
#include "thermo/optim.hpp"
#include "thermo/radiometry.hpp"
#include "thermo/synth.hpp"

namespace fs = std::filesystem;
using namespace thermo;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitInvalid = 3;
constexpr int kExitIo = 4;

int exit_code(ErrorCode code) { return code == ErrorCode::Io ? kExitIo : kExitInvalid; }

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
}

// key=value lines; blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::Config, path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

struct TrainSetup {
  model::RegressorConfig model;
  optim::TrainHyper hyper;
};

void apply_train_config(TrainSetup& setup, const fs::path& path) {
  for (const auto& [key, value] : read_config_file(path)) {
    if (!setup.model.set(key, value) && !setup.hyper.set(key, value)) {
      fail(ErrorCode::Config, path.string() + ": unknown key '" + key + "'");
    }
  }
}

void apply_synth_config(synth::SynthConfig& config, const fs::path& path) {
  for (const auto& [key, value] : read_config_file(path)) {
    if (!config.set(key, value)) fail(ErrorCode::Config, path.string() + ": unknown key '" + key + "'");
  }
}

void log_line(const std::string& text) { std::cout << text << std::endl; }

dataset::FoldPlan checked_plan(const fs::path& folds, const dataset::SessionManifest& manifest) {
  auto plan = dataset::load_fold_plan(folds);
  for (const auto& s : manifest.subjects) {
    if (!plan.fold_of_subject.count(s.subject_id)) {
      fail(ErrorCode::InvalidInput, "subject " + s.subject_id + " missing from " + folds.string());
    }
  }
  return plan;
}

void require_fold(std::size_t fold, const dataset::FoldPlan& plan) {
  if (fold >= plan.folds) {
    fail(ErrorCode::InvalidInput,
         "fold " + std::to_string(fold) + " outside 0.." + std::to_string(plan.folds - 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many large buffers; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Thermal-image fatigue regression pipeline"};
  app.require_subcommand(1);

  // synth
  synth::SynthConfig synth_cfg;
  fs::path synth_out, synth_config;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic thermal-face dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  auto* synth_subjects = synth_cmd->add_option("--subjects", synth_cfg.n_subjects, "Number of subjects")
                             ->capture_default_str();
  auto* synth_frames = synth_cmd->add_option("--frames", synth_cfg.frames_per_session, "Frames per session")
                           ->capture_default_str();
  auto* synth_gamma = synth_cmd->add_option("--gamma", synth_cfg.gamma, "Planted signal strength")
                          ->capture_default_str();
  auto* synth_seed = synth_cmd->add_option("--seed", synth_cfg.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--config", synth_config, "key=value config file");

  // ingest
  fs::path ingest_manifest, ingest_out, ingest_raw;
  auto* ingest_cmd = app.add_subcommand("ingest", "Compress 16-bit frames to normalized 8-bit frames");
  ingest_cmd->add_option("--manifest", ingest_manifest, "Session manifest")->required();
  ingest_cmd->add_option("--raw", ingest_raw, "Directory relative frame paths resolve against (default: manifest dir)");
  ingest_cmd->add_option("--out", ingest_out, "Output directory")->required();

  // split
  fs::path split_manifest, split_out;
  std::uint64_t split_seed = 0;
  std::size_t split_folds = 5;
  auto* split_cmd = app.add_subcommand("split", "Subject-disjoint stratified fold plan");
  split_cmd->add_option("--manifest", split_manifest, "Session manifest")->required();
  split_cmd->add_option("--seed", split_seed, "Random seed")->capture_default_str();
  split_cmd->add_option("--k", split_folds, "Number of folds")->capture_default_str();
  split_cmd->add_option("--out", split_out, "Output folds.csv")->required();

  // train
  TrainSetup train_setup;
  fs::path train_manifest, train_folds, train_config, train_out;
  std::size_t train_fold = 0, train_jobs = 1;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train one fold or all folds");
  train_cmd->add_option("--manifest", train_manifest, "Session manifest")->required();
  train_cmd->add_option("--folds", train_folds, "Fold plan CSV")->required();
  auto* train_fold_opt = train_cmd->add_option("--fold", train_fold, "Fold to train");
  auto* train_all = train_cmd->add_flag("--all", "Train every fold");
  train_fold_opt->excludes(train_all);
  train_cmd->add_option("--config", train_config, "key=value model/training config file");
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Seed for initialization, shuffling and augmentation")
                             ->capture_default_str();
  auto* train_epochs = train_cmd->add_option("--epochs", train_setup.hyper.epochs, "Epochs")->capture_default_str();
  auto* train_lr = train_cmd->add_option("--lr", train_setup.hyper.lr0, "Initial learning rate")->capture_default_str();
  auto* train_batch = train_cmd->add_option("--batch-size", train_setup.hyper.batch_size, "Mini-batch size")
                          ->capture_default_str();
  train_cmd->add_option("--jobs", train_jobs, "Folds trained concurrently with --all")->capture_default_str();

  // eval
  fs::path eval_checkpoint, eval_manifest, eval_folds, eval_out;
  std::size_t eval_fold = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Predict a fold's test subjects and report errors");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Session manifest")->required();
  eval_cmd->add_option("--folds", eval_folds, "Fold plan CSV")->required();
  eval_cmd->add_option("--fold", eval_fold, "Fold to evaluate")->required();
  eval_cmd->add_option("--out", eval_out, "Output directory")->required();

  // gradcam
  fs::path cam_checkpoint, cam_frame, cam_out, cam_csv;
  std::size_t cam_layer = 0;
  auto* cam_cmd = app.add_subcommand("gradcam", "Grad-CAM overlay for one frame");
  cam_cmd->add_option("--checkpoint", cam_checkpoint, "Model checkpoint")->required();
  cam_cmd->add_option("--frame", cam_frame, "8- or 16-bit PGM frame")->required();
  cam_cmd->add_option("--out", cam_out, "Output PPM overlay")->required();
  auto* cam_layer_opt = cam_cmd->add_option("--layer", cam_layer, "Layer id: 0 stem, s stage s (default: last stage)");
  cam_cmd->add_option("--csv", cam_csv, "Also write CAM values as CSV");

  // report
  fs::path report_predictions, report_out;
  auto* report_cmd = app.add_subcommand("report", "Stratified tables, decay series and charts");
  report_cmd->add_option("--predictions", report_predictions, "Directory searched for predictions.csv")->required();
  report_cmd->add_option("--out", report_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const bool bad_value = dynamic_cast<const CLI::ConversionError*>(&e) != nullptr ||
                           dynamic_cast<const CLI::ValidationError*>(&e) != nullptr;
    std::cerr << "error: " << (bad_value ? "invalid-input" : "usage") << ": " << e.what() << '\n';
    return bad_value ? kExitInvalid : kExitUsage;
  }

  try {
    if (*synth_cmd) {
      synth::SynthConfig cfg;
      if (!synth_config.empty()) apply_synth_config(cfg, synth_config);
      if (synth_subjects->count()) cfg.n_subjects = synth_cfg.n_subjects;
      if (synth_frames->count()) cfg.frames_per_session = synth_cfg.frames_per_session;
      if (synth_gamma->count()) cfg.gamma = synth_cfg.gamma;
      if (synth_seed->count()) cfg.seed = synth_cfg.seed;
      cfg.validate();
      const auto ds = synth::generate_dataset(cfg, synth_out);
      log_line("wrote " + std::to_string(ds.manifest.entries.size()) + " sessions, " +
               std::to_string(ds.manifest.total_frames()) + " frames to " + synth_out.string());
    } else if (*ingest_cmd) {
      auto manifest = dataset::load_manifest(ingest_manifest);
      if (!ingest_raw.empty()) manifest.base_dir = ingest_raw;
      make_dirs(ingest_out);
      dataset::SessionManifest out_manifest;
      out_manifest.subjects = manifest.subjects;
      out_manifest.base_dir = ingest_out;
      for (const auto& entry : manifest.entries) {
        const fs::path rel = fs::path("frames") / entry.subject_id / std::string(labeling::to_string(entry.condition));
        make_dirs(ingest_out / rel);
        for (std::size_t i = 0; i < entry.frame_count; ++i) {
          const auto raw = radiometry::read_pgm16(manifest.frame_path(entry, i));
          const fs::path name = dataset::expand_frame_template("{idx}.pgm", i);
          radiometry::write_pgm8(radiometry::compress_dynamic_range(raw), ingest_out / rel / name);
        }
        auto copy = entry;
        copy.frame_path_template = (rel / "{idx}.pgm").generic_string();
        out_manifest.entries.push_back(copy);
      }
      dataset::save_manifest(out_manifest, ingest_out / "manifest.csv");
      log_line("ingested " + std::to_string(out_manifest.total_frames()) + " frames into " + ingest_out.string());
    } else if (*split_cmd) {
      const auto manifest = dataset::load_manifest(split_manifest);
      const auto plan = dataset::make_fold_plan(manifest, split_folds, split_seed);
      dataset::save_fold_plan(plan, split_out);
      for (std::size_t k = 0; k < plan.folds; ++k) {
        log_line("fold " + std::to_string(k) + ": " + std::to_string(plan.fold_size(k)) + " subjects");
      }
    } else if (*train_cmd) {
      TrainSetup setup;
      if (!train_config.empty()) apply_train_config(setup, train_config);
      if (train_seed_opt->count()) {
        setup.model.seed = train_seed;
        setup.hyper.seed = train_seed;
      }
      if (train_epochs->count()) setup.hyper.epochs = train_setup.hyper.epochs;
      if (train_lr->count()) setup.hyper.lr0 = train_setup.hyper.lr0;
      if (train_batch->count()) setup.hyper.batch_size = train_setup.hyper.batch_size;
      setup.model.validate();
      setup.hyper.validate();
      const bool all = train_all->count() > 0;
      if (!all && !train_fold_opt->count()) fail(ErrorCode::InvalidInput, "train needs --fold K or --all");

      const auto manifest = dataset::load_manifest(train_manifest);
      const auto plan = checked_plan(train_folds, manifest);
      if (!all) require_fold(train_fold, plan);
      make_dirs(train_out);
      {
        std::ofstream cfg(train_out / "config.txt", std::ios::trunc);
        cfg << setup.model.to_key_values() << setup.hyper.to_key_values();
        if (!cfg) fail(ErrorCode::Io, "cannot write " + (train_out / "config.txt").string());
      }
      if (all) {
        const auto cv = optim::cross_validate(manifest, plan, setup.model, setup.hyper, train_out, train_jobs);
        for (std::size_t k = 0; k < cv.runs.size(); ++k) {
          log_line("fold " + std::to_string(k) + ": best epoch " + std::to_string(cv.runs[k].best_epoch) +
                   ", test mae " + std::to_string(cv.fold_mae[k]));
        }
        log_line("pooled mae " + std::to_string(metrics::mae(cv.predictions)) + ", rmse " +
                 std::to_string(metrics::rmse(cv.predictions)) + " over " +
                 std::to_string(cv.predictions.size()) + " frames");
      } else {
        auto pre = setup.hyper.preprocess;
        pre.input_size = setup.model.input_size;
        const auto samples = optim::load_samples(manifest, pre);
        const fs::path dir = train_out / ("fold" + std::to_string(train_fold));
        const auto run = optim::train_fold(manifest, plan, train_fold, setup.model, setup.hyper, dir, &samples);
        auto best = model::load_checkpoint(run.best_checkpoint);
        const auto preds = optim::evaluate_fold(best, manifest, plan, train_fold, samples);
        metrics::write_predictions(preds, manifest.subjects, dir / "predictions.csv");
        log_line("fold " + std::to_string(train_fold) + ": best epoch " + std::to_string(run.best_epoch) +
                 ", test mae " + std::to_string(metrics::mae(preds)));
      }
    } else if (*eval_cmd) {
      auto net = model::load_checkpoint(eval_checkpoint);
      const auto manifest = dataset::load_manifest(eval_manifest);
      const auto plan = checked_plan(eval_folds, manifest);
      require_fold(eval_fold, plan);
      dataset::PreprocessConfig pre;
      pre.input_size = net.config().input_size;
      const auto samples = optim::load_samples(manifest, pre);
      const auto preds = optim::evaluate_fold(net, manifest, plan, eval_fold, samples);
      make_dirs(eval_out);
      metrics::write_predictions(preds, manifest.subjects, eval_out / "predictions.csv");
      const auto report = metrics::build_report(preds, manifest.subjects);
      metrics::export_report(report, eval_out / "report");
      log_line("fold " + std::to_string(eval_fold) + ": mae " + std::to_string(report.pooled_mae) + ", rmse " +
               std::to_string(report.pooled_rmse) + " over " + std::to_string(report.frames) + " frames");
    } else if (*cam_cmd) {
      const auto net = model::load_checkpoint(cam_checkpoint);
      dataset::PreprocessConfig pre;
      pre.input_size = net.config().input_size;
      const auto frame = dataset::preprocess(radiometry::read_display_frame(cam_frame), pre);
      std::optional<std::size_t> layer;
      if (cam_layer_opt->count()) layer = cam_layer;
      const auto cam = explain::grad_cam(net, frame, layer);
      if (cam_out.has_parent_path()) make_dirs(cam_out.parent_path());
      explain::render_cam_overlay(frame, cam, cam_out);
      if (!cam_csv.empty()) explain::write_cam_csv(cam, cam_csv);
      log_line("wrote " + cam_out.string() + " (layer " + std::to_string(cam.layer) + ")");
    } else if (*report_cmd) {
      const auto set = metrics::read_prediction_dir(report_predictions);
      const auto report = metrics::build_report(set.records, set.subjects);
      metrics::export_report(report, report_out);
      log_line("report over " + std::to_string(report.frames) + " frames: mae " + std::to_string(report.pooled_mae) +
               ", rmse " + std::to_string(report.pooled_rmse));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
