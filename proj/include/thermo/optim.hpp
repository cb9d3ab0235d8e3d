#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "thermo/autodiff.hpp"
#include "thermo/dataset.hpp"
#include "thermo/metrics.hpp"
#include "thermo/model.hpp"
#include "thermo/radiometry.hpp"

namespace thermo::optim {

struct RAdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 3e-4;

  // Zero moments shaped like `params`.
  static RAdamState init(std::span<ad::Tensor* const> params, double lr);
};

struct RAdamStepInfo {
  double rho_t = 0.0;
  bool adapted = false;  // false: un-adapted (momentum-only) branch
};

// One rectified-Adam update from the gradients stored on `params`. Throws
// InvalidInput, leaving parameters and state untouched, if any gradient is NaN.
RAdamStepInfo radam_step(std::span<ad::Tensor* const> params, RAdamState& state);

struct LookaheadState {
  std::vector<std::vector<double>> slow;
  std::size_t k = 5;
  double alpha = 0.5;
  std::size_t counter = 0;
  std::size_t syncs = 0;

  static LookaheadState init(std::span<ad::Tensor* const> params, std::size_t k = 5, double alpha = 0.5);
};

// Call after every inner step; returns true when this call synchronized.
bool lookahead_sync(std::span<ad::Tensor* const> params, LookaheadState& state);

struct PlateauState {
  double lr = 3e-4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t patience = 3;
  double factor = 0.5;
  double min_lr = 1e-6;
  double threshold = 1e-4;
  std::size_t stagnant = 0;
};

// Returns the learning rate for the next epoch. NaN metric throws InvalidInput.
double plateau_update(PlateauState& state, double val_mae);

struct TrainHyper {
  double lr0 = 3e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  bool augment = true;
  // Use every n-th frame of each training session per epoch, with a
  // per-epoch random phase so all frames are visited over training.
  std::size_t train_stride = 1;
  // Evaluate every n-th test frame during training; final predictions use all.
  std::size_t val_stride = 1;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  std::size_t plateau_patience = 3;
  double plateau_factor = 0.5;
  double min_lr = 1e-6;
  dataset::PreprocessConfig preprocess;

  void validate() const;
  std::string to_key_values() const;
  bool set(const std::string& key, const std::string& value);
};

// One preprocessed frame with its identity and label.
struct Sample {
  std::string subject_id;
  labeling::Condition condition = labeling::Condition::Resting;
  std::size_t frame_index = 0;
  double label = 0.0;
  radiometry::ThermalFrame frame;
};

// Loads (compressing 16-bit frames) and preprocesses every frame of the manifest, in manifest order.
std::vector<Sample> load_samples(const dataset::SessionManifest& manifest, const dataset::PreprocessConfig& config);

// [N, 1, S, S] tensor with levels scaled to [0, 1].
ad::Tensor make_batch(std::span<const radiometry::ThermalFrame* const> frames);

// Eval-mode predictions, processed in chunks of `batch_size`.
std::vector<double> predict(model::ResidualRegressor& model, std::span<const radiometry::ThermalFrame* const> frames,
                            std::size_t batch_size = 32);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_l1 = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double lr = 0.0;  // learning rate in effect during the epoch

  bool operator==(const EpochLog&) const = default;
};

struct TrainRun {
  std::size_t fold = 0;
  std::vector<EpochLog> epochs;
  std::filesystem::path best_checkpoint;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;  // 0 means the initial weights
  double best_val_mae = std::numeric_limits<double>::infinity();
};

inline constexpr const char* kEpochLogHeader = "fold,epoch,train_l1,val_mae,val_rmse,lr";

// Trains on the fold's train subjects and writes best.ckpt and epochs.csv to
// `out_dir`. `samples`, when given, must come from load_samples on the same
// manifest; otherwise frames are loaded from disk.
TrainRun train_fold(const dataset::SessionManifest& manifest, const dataset::FoldPlan& plan, std::size_t fold,
                    const model::RegressorConfig& config, const TrainHyper& hyper,
                    const std::filesystem::path& out_dir, const std::vector<Sample>* samples = nullptr);

// Best-checkpoint predictions for every frame of the fold's test subjects.
std::vector<metrics::PredictionRecord> evaluate_fold(model::ResidualRegressor& model,
                                                     const dataset::SessionManifest& manifest,
                                                     const dataset::FoldPlan& plan, std::size_t fold,
                                                     const std::vector<Sample>& samples);

struct CrossValidation {
  std::vector<TrainRun> runs;
  std::vector<metrics::PredictionRecord> predictions;  // pooled test predictions
  std::vector<double> fold_mae;
};

// Runs every fold of `plan`, writing fold<k>/ under out_dir, each with
// best.ckpt, epochs.csv and predictions.csv. `jobs` > 1 trains folds on
// separate threads; results do not depend on it.
CrossValidation cross_validate(const dataset::SessionManifest& manifest, const dataset::FoldPlan& plan,
                               const model::RegressorConfig& config, const TrainHyper& hyper,
                               const std::filesystem::path& out_dir, std::size_t jobs = 1);

}  // namespace thermo::optim
