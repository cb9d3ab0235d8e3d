#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thermo/dataset.hpp"
#include "thermo/labeling.hpp"

namespace thermo::metrics {

using labeling::Condition;

struct PredictionRecord {
  std::string subject_id;
  Condition condition = Condition::Resting;
  std::size_t frame_index = 0;
  double label = 0.0;
  double prediction = 0.0;

  double error() const { return prediction - label; }
  bool operator==(const PredictionRecord&) const = default;
};

double mae(std::span<const PredictionRecord> records);
double rmse(std::span<const PredictionRecord> records);

// Mean and population standard deviation of per-subject values.
struct SubjectSpread {
  double mean = 0.0;
  double std = 0.0;
  std::size_t subjects = 0;
};

// Per-subject MAE first, then unweighted mean +/- std across subjects.
SubjectSpread per_subject_stats(std::span<const PredictionRecord> records);
// Same with per-subject RMSE.
SubjectSpread per_subject_rmse_stats(std::span<const PredictionRecord> records);

struct Cell {
  std::size_t frames = 0;
  std::optional<double> mae;  // absent when the cell has no frames
  std::optional<double> rmse;
};

struct StratifiedRow {
  std::string group;
  Cell combined;
  Cell fatigue;
  Cell resting;
};

// Rows for {all, men, women} x {all, no glasses, glasses}; rows whose stratum
// has no frames are omitted. Fatigue/Resting split by session condition.
std::vector<StratifiedRow> stratified_report(std::span<const PredictionRecord> records,
                                             std::span<const dataset::SubjectRecord> subjects);

struct SeriesPoint {
  std::size_t frame_index = 0;
  double label = 0.0;
  double prediction = 0.0;
};

struct DecaySeries {
  std::string subject_id;
  std::vector<SeriesPoint> points;  // temporal order
  double slope = 0.0;               // least-squares prediction per frame
  double correlation = 0.0;         // Pearson(prediction, label)
  bool correlation_defined = false; // false when either series is constant
};

DecaySeries decay_series(std::span<const PredictionRecord> records, const std::string& subject_id);

struct UserError {
  std::string subject_id;
  std::optional<double> resting_mae;
  std::optional<double> fatigue_mae;
};

struct SortedUserErrors {
  std::vector<UserError> rows;  // ascending resting MAE, ties by subject_id
  double correlation = 0.0;
  bool correlation_defined = false;
};

SortedUserErrors sorted_user_errors(std::span<const PredictionRecord> records);

// Pearson correlation; nullopt when fewer than two points or zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct EvalReport {
  double pooled_mae = 0.0;
  double pooled_rmse = 0.0;
  std::size_t frames = 0;
  SubjectSpread subject_mae;
  SubjectSpread subject_rmse;
  std::vector<StratifiedRow> table;
  SortedUserErrors user_errors;
  std::vector<DecaySeries> series;  // subjects with a fatigued session, by id
  std::vector<dataset::SubjectRecord> subjects;
};

EvalReport build_report(std::span<const PredictionRecord> records,
                        std::span<const dataset::SubjectRecord> subjects);

// report.csv, summary.csv, per_subject.csv, series/<subject>.csv,
// series/<subject>.svg and sorted_errors.svg.
void export_report(const EvalReport& report, const std::filesystem::path& dir);

inline constexpr const char* kReportHeader =
    "group,combined_mae,combined_rmse,combined_frames,fatigue_mae,fatigue_rmse,fatigue_frames,"
    "resting_mae,resting_rmse,resting_frames";

// Prediction files carry the subject attributes so reports need no manifest.
inline constexpr const char* kPredictionsHeader =
    "subject_id,gender,glasses,condition,frame_index,label,prediction";

void write_predictions(std::span<const PredictionRecord> records,
                       std::span<const dataset::SubjectRecord> subjects,
                       const std::filesystem::path& path);

struct PredictionSet {
  std::vector<PredictionRecord> records;
  std::vector<dataset::SubjectRecord> subjects;
};

PredictionSet read_predictions(const std::filesystem::path& path);
// Concatenates every predictions.csv below `dir`, in sorted path order.
PredictionSet read_prediction_dir(const std::filesystem::path& dir);

}  // namespace thermo::metrics
