#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace thermo::radiometry {

// Reference camera geometry: 384x288 at 8.7 Hz.
inline constexpr std::size_t kSensorWidth = 384;
inline constexpr std::size_t kSensorHeight = 288;
inline constexpr double kSensorFps = 8.7;

// Raw per-pixel temperature codes, linear in scene temperature.
struct RadiometricFrame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> data;  // row-major
  std::size_t frame_index = 0;
  double timestamp_s = 0.0;

  bool operator==(const RadiometricFrame&) const = default;
};

// 256-level display frame; the unit of model input.
struct ThermalFrame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // row-major

  std::uint8_t at(std::size_t x, std::size_t y) const { return data[y * width + x]; }

  bool operator==(const ThermalFrame&) const = default;
};

// Validates the width*height == data.size() invariant and non-emptiness.
void validate(const RadiometricFrame& frame);
void validate(const ThermalFrame& frame);

// Piecewise-linear map from raw codes to levels: the frame mean goes to 128,
// the 10% point of [min, max] to 0 and the 90% point to 255, clamped outside.
// A segment whose span is empty (mean at or beyond its outer anchor)
// collapses onto 128.
struct DynamicRangeMap {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double lo = 0.0;  // min + 0.1 (max - min)
  double hi = 0.0;  // min + 0.9 (max - min)
  // mean <= lo and mean >= hi, decided in integer arithmetic by fit()
  bool low_collapsed = false;
  bool high_collapsed = false;

  static DynamicRangeMap fit(const RadiometricFrame& raw);

  // Level before quantization, in [0, 255].
  double level(double code) const;
  // Level rounded half away from zero.
  std::uint8_t quantize(double code) const;
};

ThermalFrame compress_dynamic_range(const RadiometricFrame& raw);

// Binary PGM (P5). 16-bit samples are big-endian with maxval 65535; 8-bit
// samples use maxval 255.
RadiometricFrame read_pgm16(const std::filesystem::path& path);
void write_pgm16(const RadiometricFrame& frame, const std::filesystem::path& path);
ThermalFrame read_pgm8(const std::filesystem::path& path);
void write_pgm8(const ThermalFrame& frame, const std::filesystem::path& path);

// Reads either flavour; 16-bit input is passed through compress_dynamic_range.
ThermalFrame read_display_frame(const std::filesystem::path& path);

}  // namespace thermo::radiometry
