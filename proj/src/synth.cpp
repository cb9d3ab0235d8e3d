#include "thermo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "text_util.hpp"
#include "thermo/error.hpp"
#include "thermo/labeling.hpp"

namespace thermo::synth {

namespace {

struct Ellipse {
  double cx, cy, rx, ry;  // fractions of width/height

  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

struct Box {
  double x0, y0, x1, y1;

  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

// Face layout in normalized coordinates (pixel centres at (i + 0.5) / size).
constexpr Ellipse kFace{0.50, 0.48, 0.31, 0.40};
constexpr Ellipse kNose{0.50, 0.52, 0.11, 0.15};
constexpr Ellipse kMouth{0.50, 0.74, 0.20, 0.10};
constexpr Box kEyeBand{0.22, 0.26, 0.78, 0.36};
constexpr Box kNeck{0.40, 0.90, 0.60, 1.00};

enum class Zone { Background, Face, Region, Lens, Neck };

Zone zone_at(std::size_t px, std::size_t py, std::size_t w, std::size_t h, bool glasses) {
  const double x = (static_cast<double>(px) + 0.5) / static_cast<double>(w);
  const double y = (static_cast<double>(py) + 0.5) / static_cast<double>(h);
  if (kNeck.contains(x, y)) return Zone::Neck;
  if (!kFace.contains(x, y)) return Zone::Background;
  if (glasses && kEyeBand.contains(x, y)) return Zone::Lens;
  if (kNose.contains(x, y) || kMouth.contains(x, y)) return Zone::Region;
  return Zone::Face;
}

std::uint16_t to_code(double v) {
  return static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 65535.0));
}

nlohmann::json session_json(const SessionTruth& s, const SubjectParams& p, double area) {
  nlohmann::json j;
  j["subject_id"] = s.subject_id;
  j["condition"] = std::string(labeling::to_string(s.condition));
  j["gender"] = std::string(dataset::to_string(p.record.gender));
  j["glasses"] = p.record.glasses;
  j["face_offset"] = p.face_offset;
  j["region_offset"] = p.region_offset;
  j["mask_area_fraction"] = area;
  j["frame_count"] = s.labels.size();
  j["labels"] = s.labels;
  return j;
}

}  // namespace

void SynthConfig::validate() const {
  require(n_subjects >= 1, "synth: n_subjects must be >= 1");
  require(frames_per_session >= 2, "synth: frames_per_session must be >= 2");
  require(width >= 8 && height >= 8, "synth: frame size must be at least 8x8");
  require(fps > 0.0, "synth: fps must be positive");
  require(male_fraction >= 0.0 && male_fraction <= 1.0, "synth: male_fraction must lie in [0,1]");
  require(glasses_fraction >= 0.0 && glasses_fraction <= 1.0, "synth: glasses_fraction must lie in [0,1]");
  require(gamma >= 0.0, "synth: gamma must be >= 0");
  require(noise_sigma >= 0.0 && face_offset_range >= 0.0 && offset_range >= 0.0,
          "synth: noise and offset ranges must be >= 0");
}

bool SynthConfig::set(const std::string& key, const std::string& value) {
  auto as_double = [&](double& field) {
    if (!detail::parse_double(value, field)) fail(ErrorCode::Config, "bad number for " + key + ": '" + value + "'");
  };
  auto as_size = [&](std::size_t& field) {
    if (!detail::parse_int(value, field)) fail(ErrorCode::Config, "bad integer for " + key + ": '" + value + "'");
  };
  if (key == "n_subjects") as_size(n_subjects);
  else if (key == "frames_per_session") as_size(frames_per_session);
  else if (key == "width") as_size(width);
  else if (key == "height") as_size(height);
  else if (key == "fps") as_double(fps);
  else if (key == "male_fraction") as_double(male_fraction);
  else if (key == "glasses_fraction") as_double(glasses_fraction);
  else if (key == "gamma") as_double(gamma);
  else if (key == "noise_sigma") as_double(noise_sigma);
  else if (key == "face_offset_range") as_double(face_offset_range);
  else if (key == "offset_range") as_double(offset_range);
  else if (key == "seed") {
    if (!detail::parse_int(value, seed)) fail(ErrorCode::Config, "bad integer for seed: '" + value + "'");
  } else {
    return false;
  }
  return true;
}

double RegionMask::area_fraction() const {
  const auto n = std::count(inside.begin(), inside.end(), std::uint8_t{1});
  return static_cast<double>(n) / static_cast<double>(inside.size());
}

RegionMask RegionMask::resized(std::size_t out_w, std::size_t out_h) const {
  RegionMask out{out_w, out_h, std::vector<std::uint8_t>(out_w * out_h)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(height - 1, y * height / out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(width - 1, x * width / out_w);
      out.inside[y * out_w + x] = inside[sy * width + sx];
    }
  }
  return out;
}

RegionMask nose_mouth_mask(std::size_t width, std::size_t height) {
  RegionMask mask{width, height, std::vector<std::uint8_t>(width * height)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      mask.inside[y * width + x] = zone_at(x, y, width, height, false) == Zone::Region ? 1 : 0;
  return mask;
}

std::vector<SubjectParams> make_subjects(const SynthConfig& config) {
  config.validate();
  const std::size_t n = config.n_subjects;
  const auto males = static_cast<std::size_t>(std::round(config.male_fraction * static_cast<double>(n)));
  const auto wearers = static_cast<std::size_t>(std::round(config.glasses_fraction * static_cast<double>(n)));
  std::vector<std::size_t> gender_order(n), glasses_order(n);
  std::iota(gender_order.begin(), gender_order.end(), 0);
  std::iota(glasses_order.begin(), glasses_order.end(), 0);
  Rng assign(config.seed);
  assign.shuffle(std::span<std::size_t>(gender_order));
  assign.shuffle(std::span<std::size_t>(glasses_order));

  std::vector<SubjectParams> subjects(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "s%03zu", i + 1);
    subjects[i].record.subject_id = id;
  }
  for (std::size_t i = 0; i < n; ++i) {
    subjects[gender_order[i]].record.gender = i < males ? dataset::Gender::Male : dataset::Gender::Female;
    subjects[glasses_order[i]].record.glasses = i < wearers;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(config.seed, i);
    subjects[i].record.age = static_cast<double>(18 + rng.below(51));
    subjects[i].face_offset = rng.uniform(-config.face_offset_range, config.face_offset_range);
    subjects[i].region_offset = rng.uniform(-config.offset_range, config.offset_range);
  }
  return subjects;
}

radiometry::RadiometricFrame render_frame(const SynthConfig& config, const SubjectParams& subject,
                                          double label, Rng& rng, bool add_noise) {
  radiometry::RadiometricFrame frame;
  frame.width = config.width;
  frame.height = config.height;
  frame.data.resize(config.width * config.height);
  const double face = kFaceCode + subject.face_offset;
  const double region =
      kFaceCode + subject.region_offset + config.gamma * (label / 100.0) * kDynamicRangeCodes;
  const double neck = kBackgroundCode + kDynamicRangeCodes;
  for (std::size_t y = 0; y < config.height; ++y) {
    for (std::size_t x = 0; x < config.width; ++x) {
      double code = kBackgroundCode;
      switch (zone_at(x, y, config.width, config.height, subject.record.glasses)) {
        case Zone::Background: code = kBackgroundCode; break;
        case Zone::Face: code = face; break;
        case Zone::Region: code = region; break;
        case Zone::Lens: code = kLensCode; break;
        case Zone::Neck: code = neck; break;
      }
      if (add_noise) code += config.noise_sigma * rng.normal();
      frame.data[y * config.width + x] = to_code(code);
    }
  }
  return frame;
}

SynthDataset generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  SynthDataset ds;
  ds.truth.subjects = make_subjects(config);
  ds.truth.mask = nose_mouth_mask(config.width, config.height);
  ds.manifest.base_dir = out_dir;
  const double area = ds.truth.mask.area_fraction();

  std::ofstream truth_out(out_dir / "ground_truth.jsonl", std::ios::trunc);
  if (!truth_out) fail(ErrorCode::Io, "cannot write ground_truth.jsonl in " + out_dir.string());

  for (std::size_t i = 0; i < ds.truth.subjects.size(); ++i) {
    const SubjectParams& subject = ds.truth.subjects[i];
    ds.manifest.subjects.push_back(subject.record);
    // noise stream per subject, independent of the attribute stream
    Rng noise = Rng::derive(config.seed ^ 0x5eed5eedULL, i);
    for (labeling::Condition cond : {labeling::Condition::Resting, labeling::Condition::Fatigued}) {
      const std::string cond_name(labeling::to_string(cond));
      const std::filesystem::path rel_dir = std::filesystem::path("raw") / subject.record.subject_id / cond_name;
      std::filesystem::create_directories(out_dir / rel_dir, ec);
      if (ec) fail(ErrorCode::Io, "cannot create " + (out_dir / rel_dir).string());

      dataset::SessionEntry entry;
      entry.subject_id = subject.record.subject_id;
      entry.condition = cond;
      entry.frame_count = config.frames_per_session;
      entry.fps = config.fps;
      entry.frame_path_template = (rel_dir / "{idx}.pgm").generic_string();

      SessionTruth truth{subject.record.subject_id, cond, {}};
      for (const auto& label : labeling::label_session(cond, config.frames_per_session)) {
        truth.labels.push_back(label.value);
      }
      for (std::size_t k = 0; k < config.frames_per_session; ++k) {
        radiometry::RadiometricFrame frame = render_frame(config, subject, truth.labels[k], noise);
        frame.frame_index = k;
        frame.timestamp_s = static_cast<double>(k) / config.fps;
        radiometry::write_pgm16(frame, ds.manifest.frame_path(entry, k));
      }
      truth_out << session_json(truth, subject, area).dump() << '\n';
      ds.manifest.entries.push_back(std::move(entry));
      ds.truth.sessions.push_back(std::move(truth));
    }
  }
  if (!truth_out) fail(ErrorCode::Io, "write failed for ground_truth.jsonl");

  radiometry::ThermalFrame mask_img{config.width, config.height, {}};
  for (std::uint8_t v : ds.truth.mask.inside) mask_img.data.push_back(v ? 255 : 0);
  radiometry::write_pgm8(mask_img, out_dir / "nose_mouth_mask.pgm");
  dataset::save_manifest(ds.manifest, out_dir / "manifest.csv");
  return ds;
}

RegionMask read_mask(const std::filesystem::path& path) {
  const radiometry::ThermalFrame img = radiometry::read_pgm8(path);
  RegionMask mask{img.width, img.height, {}};
  for (std::uint8_t v : img.data) mask.inside.push_back(v >= 128 ? 1 : 0);
  return mask;
}

double masked_mean(const radiometry::ThermalFrame& frame, const RegionMask& mask) {
  require(frame.width == mask.width && frame.height == mask.height, "mask and frame sizes differ");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < frame.data.size(); ++i) {
    if (mask.inside[i]) {
      total += frame.data[i];
      ++n;
    }
  }
  require(n > 0, "mask is empty");
  return total / static_cast<double>(n);
}

OracleFit fit_oracle(std::span<const double> features, std::span<const double> labels) {
  require(features.size() == labels.size() && !features.empty(), "oracle: need matching non-empty inputs");
  const double n = static_cast<double>(features.size());
  const double mx = std::accumulate(features.begin(), features.end(), 0.0) / n;
  const double my = std::accumulate(labels.begin(), labels.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    sxx += (features[i] - mx) * (features[i] - mx);
    sxy += (features[i] - mx) * (labels[i] - my);
  }
  if (!(sxx > 1e-12 * n)) fail(ErrorCode::InvalidInput, "oracle: regressor input is constant");
  OracleFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

std::vector<double> oracle_regressor(std::span<const radiometry::ThermalFrame> train_frames,
                                     std::span<const double> train_labels,
                                     std::span<const radiometry::ThermalFrame> test_frames,
                                     const RegionMask& mask) {
  std::vector<double> features;
  features.reserve(train_frames.size());
  for (const auto& f : train_frames) features.push_back(masked_mean(f, mask));
  const OracleFit fit = fit_oracle(features, train_labels);
  std::vector<double> out;
  out.reserve(test_frames.size());
  for (const auto& f : test_frames) out.push_back(fit.predict(masked_mean(f, mask)));
  return out;
}

}  // namespace thermo::synth
