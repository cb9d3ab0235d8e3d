#include "thermo/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "text_util.hpp"
#include "thermo/error.hpp"

namespace thermo::dataset {

namespace {

[[noreturn]] void line_error(const std::filesystem::path& path, std::size_t line,
                             const std::string& what) {
  fail(ErrorCode::Format, path.string() + ":" + std::to_string(line) + ": " + what);
}

bool permitted_token(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' ||
           c == '.' || c == '/' || c == '{' || c == '}' || c == '-';
  });
}

std::size_t stratum_of(const SubjectRecord& s) {
  return (s.gender == Gender::Male ? 0 : 2) + (s.glasses ? 1 : 0);
}

}  // namespace

std::string_view to_string(Gender gender) noexcept {
  return gender == Gender::Male ? "male" : "female";
}

Gender parse_gender(std::string_view token) {
  if (token == "male") return Gender::Male;
  if (token == "female") return Gender::Female;
  fail(ErrorCode::InvalidInput, "unknown gender '" + std::string(token) + "'");
}

// ---------------------------------------------------------------------------
// Manifest

void SessionManifest::validate() const {
  std::set<std::string> ids;
  for (const SubjectRecord& s : subjects) {
    require(!s.subject_id.empty(), "manifest: empty subject_id");
    require(ids.insert(s.subject_id).second, "manifest: duplicate subject_id " + s.subject_id);
  }
  std::set<std::pair<std::string, Condition>> sessions;
  for (const SessionEntry& e : entries) {
    require(ids.count(e.subject_id) == 1, "manifest: entry references unknown subject " + e.subject_id);
    require(sessions.insert({e.subject_id, e.condition}).second,
            "manifest: duplicate " + std::string(labeling::to_string(e.condition)) +
                " session for subject " + e.subject_id);
    require(e.frame_count >= 1, "manifest: frame_count must be >= 1 for " + e.subject_id);
    require(e.fps > 0.0 && std::isfinite(e.fps), "manifest: fps must be positive for " + e.subject_id);
  }
}

const SubjectRecord& SessionManifest::subject(const std::string& subject_id) const {
  for (const SubjectRecord& s : subjects) {
    if (s.subject_id == subject_id) return s;
  }
  fail(ErrorCode::InvalidInput, "unknown subject " + subject_id);
}

std::filesystem::path SessionManifest::frame_path(const SessionEntry& entry,
                                                  std::size_t frame_index) const {
  std::filesystem::path p = expand_frame_template(entry.frame_path_template, frame_index);
  return p.is_absolute() ? p : base_dir / p;
}

std::size_t SessionManifest::total_frames() const {
  std::size_t n = 0;
  for (const SessionEntry& e : entries) n += e.frame_count;
  return n;
}

std::string expand_frame_template(const std::string& templ, std::size_t frame_index) {
  char idx[32];
  std::snprintf(idx, sizeof idx, "%05zu", frame_index);
  std::string out = templ;
  const std::string key = "{idx}";
  for (std::size_t at = out.find(key); at != std::string::npos; at = out.find(key, at)) {
    out.replace(at, key.size(), idx);
    at += std::char_traits<char>::length(idx);
  }
  return out;
}

SessionManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open manifest " + path.string());
  SessionManifest m;
  m.base_dir = path.parent_path();
  std::string raw;
  std::size_t line_no = 0;
  if (!std::getline(in, raw)) line_error(path, 1, "empty manifest");
  ++line_no;
  if (detail::trim_cr(raw) != kManifestHeader) line_error(path, 1, "unexpected header");
  std::map<std::string, std::size_t> subject_index;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = detail::trim_cr(raw);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 8) line_error(path, line_no, "expected 8 fields, found " + std::to_string(f.size()));
    for (const auto& field : f) {
      if (!permitted_token(field)) line_error(path, line_no, "field '" + field + "' has characters outside [A-Za-z0-9_./{}-]");
    }
    SubjectRecord s;
    s.subject_id = f[0];
    if (s.subject_id.empty()) line_error(path, line_no, "empty subject_id");
    if (f[1] == "male") s.gender = Gender::Male;
    else if (f[1] == "female") s.gender = Gender::Female;
    else line_error(path, line_no, "unknown gender token '" + f[1] + "'");
    if (f[2] == "true") s.glasses = true;
    else if (f[2] == "false") s.glasses = false;
    else line_error(path, line_no, "glasses must be true or false, found '" + f[2] + "'");
    if (!f[3].empty()) {
      double age = 0;
      if (!detail::parse_double(f[3], age) || age < 0) line_error(path, line_no, "bad age '" + f[3] + "'");
      s.age = age;
    }
    SessionEntry e;
    e.subject_id = s.subject_id;
    if (f[4] == "resting") e.condition = Condition::Resting;
    else if (f[4] == "fatigued") e.condition = Condition::Fatigued;
    else line_error(path, line_no, "unknown condition token '" + f[4] + "'");
    long long count = 0;
    if (!detail::parse_int(f[5], count) || count <= 0) {
      line_error(path, line_no, "frame_count must be a positive integer, found '" + f[5] + "'");
    }
    e.frame_count = static_cast<std::size_t>(count);
    if (!detail::parse_double(f[6], e.fps) || !(e.fps > 0.0)) {
      line_error(path, line_no, "fps must be positive, found '" + f[6] + "'");
    }
    e.frame_path_template = f[7];
    if (e.frame_path_template.empty()) line_error(path, line_no, "empty frame_path_template");

    auto it = subject_index.find(s.subject_id);
    if (it == subject_index.end()) {
      subject_index[s.subject_id] = m.subjects.size();
      m.subjects.push_back(s);
    } else if (!(m.subjects[it->second] == s)) {
      line_error(path, line_no, "subject " + s.subject_id + " repeats with conflicting attributes");
    }
    for (const SessionEntry& prev : m.entries) {
      if (prev.subject_id == e.subject_id && prev.condition == e.condition) {
        line_error(path, line_no, "duplicate " + std::string(labeling::to_string(e.condition)) +
                                      " session for subject " + e.subject_id);
      }
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void save_manifest(const SessionManifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  for (const SubjectRecord& s : manifest.subjects) {
    const bool has_entry = std::any_of(manifest.entries.begin(), manifest.entries.end(),
                                       [&](const SessionEntry& e) { return e.subject_id == s.subject_id; });
    require(has_entry, "manifest: subject " + s.subject_id + " has no sessions and cannot be saved");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out << kManifestHeader << '\n';
  for (const SessionEntry& e : manifest.entries) {
    const SubjectRecord& s = manifest.subject(e.subject_id);
    out << s.subject_id << ',' << to_string(s.gender) << ',' << (s.glasses ? "true" : "false") << ','
        << (s.age ? detail::format_double(*s.age) : std::string()) << ','
        << labeling::to_string(e.condition) << ',' << e.frame_count << ','
        << detail::format_double(e.fps) << ',' << e.frame_path_template << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Preprocessing

ThermalFrame central_crop(const ThermalFrame& frame, std::size_t crop_w, std::size_t crop_h) {
  radiometry::validate(frame);
  require(crop_w >= 1 && crop_h >= 1, "crop size must be positive");
  require(crop_w <= frame.width && crop_h <= frame.height,
          "crop " + std::to_string(crop_w) + "x" + std::to_string(crop_h) + " exceeds frame " +
              std::to_string(frame.width) + "x" + std::to_string(frame.height));
  const std::size_t x0 = (frame.width - crop_w) / 2, y0 = (frame.height - crop_h) / 2;
  ThermalFrame out{crop_w, crop_h, std::vector<std::uint8_t>(crop_w * crop_h)};
  for (std::size_t y = 0; y < crop_h; ++y) {
    const auto src = frame.data.begin() + static_cast<std::ptrdiff_t>((y0 + y) * frame.width + x0);
    std::copy(src, src + static_cast<std::ptrdiff_t>(crop_w), out.data.begin() + static_cast<std::ptrdiff_t>(y * crop_w));
  }
  return out;
}

ThermalFrame resize_bilinear(const ThermalFrame& frame, std::size_t out_w, std::size_t out_h) {
  radiometry::validate(frame);
  require(out_w >= 1 && out_h >= 1, "resize target must be at least 1x1");
  if (out_w == frame.width && out_h == frame.height) return frame;
  struct Tap {
    std::size_t i0, i1;
    double t;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> result(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      result[i] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
    }
    return result;
  };
  const auto xs = taps(frame.width, out_w);
  const auto ys = taps(frame.height, out_h);
  ThermalFrame out{out_w, out_h, std::vector<std::uint8_t>(out_w * out_h)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap& tx = xs[x];
      const double top = (1.0 - tx.t) * frame.at(tx.i0, ty.i0) + tx.t * frame.at(tx.i1, ty.i0);
      const double bottom = (1.0 - tx.t) * frame.at(tx.i0, ty.i1) + tx.t * frame.at(tx.i1, ty.i1);
      const double v = (1.0 - ty.t) * top + ty.t * bottom;
      out.data[y * out_w + x] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
  }
  return out;
}

ThermalFrame horizontal_flip(const ThermalFrame& frame) {
  radiometry::validate(frame);
  ThermalFrame out = frame;
  for (std::size_t y = 0; y < frame.height; ++y) {
    auto row = out.data.begin() + static_cast<std::ptrdiff_t>(y * frame.width);
    std::reverse(row, row + static_cast<std::ptrdiff_t>(frame.width));
  }
  return out;
}

ThermalFrame maybe_flip(const ThermalFrame& frame, Rng& rng) {
  return rng.coin() ? horizontal_flip(frame) : frame;
}

ThermalFrame preprocess(const ThermalFrame& frame, const PreprocessConfig& config) {
  ThermalFrame f = frame;
  if (f.width > config.crop_w && f.height > config.crop_h) f = central_crop(f, config.crop_w, config.crop_h);
  return resize_bilinear(f, config.input_size, config.input_size);
}

// ---------------------------------------------------------------------------
// Folds

std::size_t FoldPlan::fold_size(std::size_t fold) const {
  return static_cast<std::size_t>(std::count_if(fold_of_subject.begin(), fold_of_subject.end(),
                                                [fold](const auto& kv) { return kv.second == fold; }));
}

FoldPlan make_fold_plan(const SessionManifest& manifest, std::size_t folds, std::uint64_t seed) {
  require(folds >= 1, "fold count must be >= 1");
  require(manifest.subjects.size() >= folds,
          "need at least " + std::to_string(folds) + " subjects for " + std::to_string(folds) +
              " folds, manifest has " + std::to_string(manifest.subjects.size()));
  std::array<std::vector<std::string>, 4> strata;
  for (const SubjectRecord& s : manifest.subjects) strata[stratum_of(s)].push_back(s.subject_id);
  Rng rng(seed);
  for (auto& members : strata) rng.shuffle(std::span<std::string>(members));

  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return strata[a].size() > strata[b].size(); });

  FoldPlan plan;
  plan.folds = folds;
  plan.seed = seed;
  std::vector<std::size_t> counts(folds, 0);
  for (std::size_t s : order) {
    const std::size_t start = static_cast<std::size_t>(
        std::min_element(counts.begin(), counts.end()) - counts.begin());
    for (std::size_t i = 0; i < strata[s].size(); ++i) {
      const std::size_t fold = (start + i) % folds;
      plan.fold_of_subject[strata[s][i]] = fold;
      ++counts[fold];
    }
  }
  return plan;
}

FoldSplit fold_views(const SessionManifest& manifest, const FoldPlan& plan, std::size_t fold) {
  require(fold < plan.folds, "fold " + std::to_string(fold) + " out of range for a " +
                                 std::to_string(plan.folds) + "-fold plan");
  FoldSplit split;
  for (const SubjectRecord& s : manifest.subjects) {
    auto it = plan.fold_of_subject.find(s.subject_id);
    require(it != plan.fold_of_subject.end(), "subject " + s.subject_id + " is missing from the fold plan");
    (it->second == fold ? split.test : split.train).push_back(s.subject_id);
  }
  return split;
}

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out << "subject_id,fold\n";
  for (const auto& [id, fold] : plan.fold_of_subject) out << id << ',' << fold << '\n';
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

FoldPlan load_fold_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open fold plan " + path.string());
  std::string raw;
  std::size_t line_no = 1;
  if (!std::getline(in, raw) || detail::trim_cr(raw) != "subject_id,fold") {
    line_error(path, 1, "expected header 'subject_id,fold'");
  }
  FoldPlan plan;
  plan.folds = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = detail::trim_cr(raw);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    std::size_t fold = 0;
    if (f.size() != 2 || f[0].empty() || !detail::parse_int(f[1], fold)) line_error(path, line_no, "bad row");
    if (!plan.fold_of_subject.emplace(f[0], fold).second) {
      line_error(path, line_no, "subject " + f[0] + " listed twice");
    }
    plan.folds = std::max(plan.folds, fold + 1);
  }
  if (plan.fold_of_subject.empty()) line_error(path, line_no, "fold plan has no rows");
  return plan;
}

}  // namespace thermo::dataset
