#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "thermo/model.hpp"
#include "thermo/radiometry.hpp"

namespace thermo::explain {

struct CamMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  std::size_t layer = 0;       // ForwardTrace index the map was taken from

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

// Raw (unnormalized, pre-upsampling) map ReLU(sum_c alpha_c A_c) of shape [h, w].
struct RawCam {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;
};

RawCam grad_cam_raw(const model::ResidualRegressor& model, const radiometry::ThermalFrame& frame, std::size_t layer);

// Grad-CAM of the scalar prediction with respect to the output of `layer`
// (default: last stage). The frame must be input_size pixels square. The
// model is not modified; Eval-mode statistics are used.
CamMap grad_cam(const model::ResidualRegressor& model, const radiometry::ThermalFrame& frame,
                std::optional<std::size_t> layer = std::nullopt);

// Bilinear upsampling with half-pixel centres and edge clamping.
std::vector<double> upsample_bilinear(std::span<const double> values, std::size_t w, std::size_t h,
                                      std::size_t out_w, std::size_t out_h);

// Fraction of the map's total mass on pixels where `mask` is non-zero; 0 for an all-zero map.
double mass_inside(const CamMap& cam, std::span<const std::uint8_t> mask);

// Binary PPM (P6): r = level + cam (255 - level), g = b = level (1 - cam).
void render_cam_overlay(const radiometry::ThermalFrame& frame, const CamMap& cam, const std::filesystem::path& path);

// One CSV row per image row.
void write_cam_csv(const CamMap& cam, const std::filesystem::path& path);

}  // namespace thermo::explain
