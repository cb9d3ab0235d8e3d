#pragma once

// Parametric thermal-face sessions with a planted fatigue signal in the
// nose/mouth region. Stands in for the human recordings.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "thermo/dataset.hpp"
#include "thermo/radiometry.hpp"

namespace thermo::synth {

// Raw code span between the cold background and the hottest skin; the
// planted signal is expressed as a fraction of it.
inline constexpr double kBackgroundCode = 20000.0;
inline constexpr double kDynamicRangeCodes = 10000.0;
inline constexpr double kFaceCode = 25000.0;
inline constexpr double kLensCode = 21500.0;  // glasses are opaque and cold

struct SynthConfig {
  std::size_t n_subjects = 20;
  std::size_t frames_per_session = 120;
  std::size_t width = 96;
  std::size_t height = 96;
  double fps = 8.7;
  double male_fraction = 51.0 / 80.0;
  double glasses_fraction = 0.4;
  double gamma = 0.3;               // signal at label 100, fraction of kDynamicRangeCodes
  double noise_sigma = 100.0;       // per-pixel Gaussian noise, raw codes
  double face_offset_range = 800.0; // per-subject skin baseline, +/- raw codes
  double offset_range = 250.0;      // per-subject nose/mouth baseline, +/- raw codes
  std::uint64_t seed = 0;

  void validate() const;
  bool set(const std::string& key, const std::string& value);
};

struct SubjectParams {
  dataset::SubjectRecord record;
  double face_offset = 0.0;
  double region_offset = 0.0;
};

// Binary mask over the frame, 1 inside the nose/mouth region.
struct RegionMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> inside;

  double area_fraction() const;
  // Nearest-neighbour resample to another frame size.
  RegionMask resized(std::size_t out_w, std::size_t out_h) const;
};

RegionMask nose_mouth_mask(std::size_t width, std::size_t height);

struct SessionTruth {
  std::string subject_id;
  labeling::Condition condition = labeling::Condition::Resting;
  std::vector<double> labels;
};

struct GroundTruth {
  std::vector<SubjectParams> subjects;
  std::vector<SessionTruth> sessions;
  RegionMask mask;
};

struct SynthDataset {
  dataset::SessionManifest manifest;
  GroundTruth truth;
};

// Per-subject attributes and offsets, deterministic in (seed, subject index).
std::vector<SubjectParams> make_subjects(const SynthConfig& config);

// One raw frame. With add_noise = false the frame is the noise-free render.
radiometry::RadiometricFrame render_frame(const SynthConfig& config, const SubjectParams& subject,
                                          double label, Rng& rng, bool add_noise = true);

// Writes raw/<subject>/<condition>/<idx>.pgm (16-bit), manifest.csv,
// ground_truth.jsonl and nose_mouth_mask.pgm under `out_dir`.
SynthDataset generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

RegionMask read_mask(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Linear-probe oracle: label ~ a + b * (mean 8-bit level inside the mask).

double masked_mean(const radiometry::ThermalFrame& frame, const RegionMask& mask);

struct OracleFit {
  double intercept = 0.0;
  double slope = 0.0;

  double predict(double feature) const { return intercept + slope * feature; }
};

// Ordinary least squares. Throws InvalidInput when the feature is constant.
OracleFit fit_oracle(std::span<const double> features, std::span<const double> labels);

// Fits on the training frames and predicts the test frames.
std::vector<double> oracle_regressor(std::span<const radiometry::ThermalFrame> train_frames,
                                     std::span<const double> train_labels,
                                     std::span<const radiometry::ThermalFrame> test_frames,
                                     const RegionMask& mask);

}  // namespace thermo::synth
