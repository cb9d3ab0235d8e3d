#include "thermo/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "text_util.hpp"
#include "thermo/error.hpp"

namespace thermo::explain {

RawCam grad_cam_raw(const model::ResidualRegressor& model, const radiometry::ThermalFrame& frame, std::size_t layer) {
  radiometry::validate(frame);
  const std::size_t s = model.config().input_size;
  require(frame.width == s && frame.height == s, "grad_cam: frame is " + std::to_string(frame.width) + "x" +
                                                     std::to_string(frame.height) + ", model expects " +
                                                     std::to_string(s) + "x" + std::to_string(s));
  require(layer < model.layer_count(), "grad_cam: layer " + std::to_string(layer) + " outside 0.." +
                                           std::to_string(model.layer_count() - 1));
  model::ResidualRegressor net = model.clone();
  for (ad::Tensor* p : net.parameters()) p->set_requires_grad(false);

  std::vector<double> levels(frame.data.size());
  std::transform(frame.data.begin(), frame.data.end(), levels.begin(), [](std::uint8_t v) { return v / 255.0; });
  const ad::Tensor input = ad::Tensor::from({1, 1, s, s}, std::move(levels));

  model::ForwardTrace trace;
  net.forward(input, ad::Mode::Eval, &trace);
  ad::Tensor activation = trace.layer_outputs.at(layer).clone();
  if (!activation.all_finite()) fail(ErrorCode::InvalidInput, "grad_cam: non-finite activations");
  activation.set_requires_grad(true);
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    const ad::Tensor y = net.forward_from(layer, activation, ad::Mode::Eval);
    tape.backward(y);
  }

  const std::size_t c = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  const auto a = std::as_const(activation).data();
  const auto g = activation.grad();
  RawCam raw{w, h, std::vector<double>(h * w, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) alpha += g[ch * h * w + i];
    alpha /= static_cast<double>(h * w);
    for (std::size_t i = 0; i < h * w; ++i) raw.values[i] += alpha * a[ch * h * w + i];
  }
  for (double& v : raw.values) v = std::max(v, 0.0);
  return raw;
}

std::vector<double> upsample_bilinear(std::span<const double> values, std::size_t w, std::size_t h,
                                      std::size_t out_w, std::size_t out_h) {
  require(values.size() == w * h && w > 0 && h > 0, "upsample_bilinear: bad source shape");
  std::vector<double> out(out_w * out_h);
  auto source = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& f) {
    double pos = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(pos);
    i1 = std::min(i0 + 1, in - 1);
    f = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, h, out_h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, w, out_w, x0, x1, fx);
      const double top = values[y0 * w + x0] * (1 - fx) + values[y0 * w + x1] * fx;
      const double bottom = values[y1 * w + x0] * (1 - fx) + values[y1 * w + x1] * fx;
      out[y * out_w + x] = top * (1 - fy) + bottom * fy;
    }
  }
  return out;
}

CamMap grad_cam(const model::ResidualRegressor& model, const radiometry::ThermalFrame& frame,
                std::optional<std::size_t> layer) {
  const std::size_t target = layer.value_or(model.layer_count() - 1);
  const RawCam raw = grad_cam_raw(model, frame, target);
  CamMap cam;
  cam.width = frame.width;
  cam.height = frame.height;
  cam.layer = target;
  cam.values = upsample_bilinear(raw.values, raw.width, raw.height, cam.width, cam.height);
  const double peak = *std::max_element(cam.values.begin(), cam.values.end());
  if (peak > 0.0) {
    for (double& v : cam.values) v = std::clamp(v / peak, 0.0, 1.0);
  } else {
    std::fill(cam.values.begin(), cam.values.end(), 0.0);
  }
  return cam;
}

double mass_inside(const CamMap& cam, std::span<const std::uint8_t> mask) {
  require(mask.size() == cam.values.size(), "mass_inside: mask size differs from the map");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    total += cam.values[i];
    if (mask[i]) inside += cam.values[i];
  }
  return total > 0.0 ? inside / total : 0.0;
}

void render_cam_overlay(const radiometry::ThermalFrame& frame, const CamMap& cam, const std::filesystem::path& path) {
  radiometry::validate(frame);
  require(cam.width == frame.width && cam.height == frame.height, "render_cam_overlay: CAM and frame sizes differ");
  std::string pixels;
  pixels.reserve(frame.data.size() * 3);
  for (std::size_t i = 0; i < frame.data.size(); ++i) {
    const double level = frame.data[i];
    const double c = std::clamp(cam.values[i], 0.0, 1.0);
    const auto r = static_cast<char>(static_cast<std::uint8_t>(std::round(level + c * (255.0 - level))));
    const auto gb = static_cast<char>(static_cast<std::uint8_t>(std::round(level * (1.0 - c))));
    pixels += r;
    pixels += gb;
    pixels += gb;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out << "P6\n" << frame.width << ' ' << frame.height << "\n255\n" << pixels;
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

void write_cam_csv(const CamMap& cam, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  for (std::size_t y = 0; y < cam.height; ++y) {
    for (std::size_t x = 0; x < cam.width; ++x) out << (x ? "," : "") << detail::format_double(cam.at(x, y));
    out << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

}  // namespace thermo::explain
