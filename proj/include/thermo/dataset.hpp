#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "thermo/labeling.hpp"
#include "thermo/radiometry.hpp"
#include "thermo/rng.hpp"

namespace thermo::dataset {

using labeling::Condition;
using radiometry::ThermalFrame;

enum class Gender { Male, Female };

std::string_view to_string(Gender gender) noexcept;
Gender parse_gender(std::string_view token);

struct SubjectRecord {
  std::string subject_id;
  Gender gender = Gender::Male;
  bool glasses = false;
  std::optional<double> age;  // informational only

  bool operator==(const SubjectRecord&) const = default;
};

struct SessionEntry {
  std::string subject_id;
  Condition condition = Condition::Resting;
  std::size_t frame_count = 0;
  double fps = 0.0;
  // "{idx}" expands to the zero-padded frame index; relative paths resolve
  // against the manifest's directory.
  std::string frame_path_template;

  bool operator==(const SessionEntry&) const = default;
};

struct SessionManifest {
  std::vector<SubjectRecord> subjects;
  std::vector<SessionEntry> entries;
  std::filesystem::path base_dir;

  // Every entry references a known subject, subjects are unique, each subject
  // has at most one session per condition, fps > 0, frame_count >= 1.
  void validate() const;

  const SubjectRecord& subject(const std::string& subject_id) const;
  std::filesystem::path frame_path(const SessionEntry& entry, std::size_t frame_index) const;
  std::size_t total_frames() const;
};

inline constexpr const char* kManifestHeader =
    "subject_id,gender,glasses,age,condition,frame_count,fps,frame_path_template";

SessionManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const SessionManifest& manifest, const std::filesystem::path& path);

std::string expand_frame_template(const std::string& templ, std::size_t frame_index);

// ---------------------------------------------------------------------------
// Frame preprocessing

ThermalFrame central_crop(const ThermalFrame& frame, std::size_t crop_w, std::size_t crop_h);
// Bilinear, half-pixel centres, borders clamped, rounded half away from zero.
ThermalFrame resize_bilinear(const ThermalFrame& frame, std::size_t out_w, std::size_t out_h);
ThermalFrame horizontal_flip(const ThermalFrame& frame);
// Flips with probability 1/2, consuming one draw from `rng`.
ThermalFrame maybe_flip(const ThermalFrame& frame, Rng& rng);

struct PreprocessConfig {
  std::size_t crop_w = 224;
  std::size_t crop_h = 224;
  std::size_t input_size = 96;
};

// Central crop (skipped when the frame is not larger than the crop in both
// dimensions) followed by a resize to input_size x input_size.
ThermalFrame preprocess(const ThermalFrame& frame, const PreprocessConfig& config);

// ---------------------------------------------------------------------------
// Cross-validation folds

struct FoldPlan {
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::map<std::string, std::size_t> fold_of_subject;

  std::size_t fold_size(std::size_t fold) const;
};

// Subject-disjoint plan stratified on gender x glasses.
FoldPlan make_fold_plan(const SessionManifest& manifest, std::size_t folds, std::uint64_t seed);

struct FoldSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

FoldSplit fold_views(const SessionManifest& manifest, const FoldPlan& plan, std::size_t fold);

// CSV "subject_id,fold".
void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path);
FoldPlan load_fold_plan(const std::filesystem::path& path);

}  // namespace thermo::dataset
