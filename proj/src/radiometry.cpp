#include "thermo/radiometry.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "thermo/error.hpp"

namespace thermo::radiometry {

namespace {

struct PgmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t payload_offset = 0;
};

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::string& header,
                 const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

[[noreturn]] void format_error(const std::filesystem::path& path, std::size_t offset,
                               const std::string& what) {
  fail(ErrorCode::Format, path.string() + ": " + what + " at byte offset " + std::to_string(offset));
}

// Header grammar: "P5" ws width ws height ws maxval, one whitespace byte,
// then samples. '#' comments run to end of line inside the header.
PgmHeader parse_header(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') format_error(path, 0, "missing P5 magic");
  std::size_t pos = 2;
  auto skip_space = [&]() {
    bool any = false;
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
        any = true;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        any = true;
      } else {
        break;
      }
    }
    return any;
  };
  auto read_number = [&](const char* name) {
    if (!skip_space()) format_error(path, pos, std::string("expected whitespace before ") + name);
    const std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > 1'000'000'000) format_error(path, start, std::string(name) + " too large");
      ++pos;
    }
    if (pos == start) format_error(path, start, std::string("expected ") + name);
    return value;
  };
  PgmHeader h;
  h.width = read_number("width");
  h.height = read_number("height");
  h.maxval = read_number("maxval");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    format_error(path, pos, "expected single whitespace after maxval");
  }
  h.payload_offset = pos + 1;
  if (h.width == 0 || h.height == 0) format_error(path, 0, "empty image dimensions");
  return h;
}

void check_payload(const PgmHeader& h, std::size_t bytes_per_sample, std::size_t file_size,
                   const std::filesystem::path& path) {
  const std::size_t expected = h.width * h.height * bytes_per_sample;
  const std::size_t available = file_size - h.payload_offset;
  if (available < expected) {
    format_error(path, file_size, "truncated payload (expected " + std::to_string(expected) +
                                      " bytes, found " + std::to_string(available) + ")");
  }
  if (available > expected) format_error(path, h.payload_offset + expected, "trailing bytes after payload");
}

std::string header_text(std::size_t w, std::size_t h, std::size_t maxval) {
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
}

}  // namespace

void validate(const RadiometricFrame& frame) {
  require(frame.width > 0 && frame.height > 0, "radiometric frame is empty");
  require(frame.data.size() == frame.width * frame.height,
          "radiometric frame data length does not match width*height");
}

void validate(const ThermalFrame& frame) {
  require(frame.width > 0 && frame.height > 0, "thermal frame is empty");
  require(frame.data.size() == frame.width * frame.height,
          "thermal frame data length does not match width*height");
}

DynamicRangeMap DynamicRangeMap::fit(const RadiometricFrame& raw) {
  validate(raw);
  const auto [mn, mx] = std::minmax_element(raw.data.begin(), raw.data.end());
  std::uint64_t total = 0;
  for (std::uint16_t c : raw.data) total += c;
  DynamicRangeMap m;
  m.min = *mn;
  m.max = *mx;
  m.mean = static_cast<double>(total) / static_cast<double>(raw.data.size());
  m.lo = m.min + 0.1 * (m.max - m.min);
  m.hi = m.min + 0.9 * (m.max - m.min);
  // mean <= min + (max - min) / 10  <=>  10 total <= n (9 min + max), and likewise for hi
  const std::uint64_t n = raw.data.size();
  m.low_collapsed = 10 * total <= n * (9 * std::uint64_t{*mn} + *mx);
  m.high_collapsed = 10 * total >= n * (std::uint64_t{*mn} + 9 * std::uint64_t{*mx});
  return m;
}

double DynamicRangeMap::level(double code) const {
  if (max == min) return 128.0;
  if (code <= mean) {
    if (low_collapsed) return 128.0;
    if (code <= lo) return 0.0;
    return 128.0 * (code - lo) / (mean - lo);
  }
  if (high_collapsed) return 128.0;
  if (code >= hi) return 255.0;
  return 128.0 + 127.0 * (code - mean) / (hi - mean);
}

std::uint8_t DynamicRangeMap::quantize(double code) const {
  return static_cast<std::uint8_t>(std::round(level(code)));
}

ThermalFrame compress_dynamic_range(const RadiometricFrame& raw) {
  const DynamicRangeMap map = DynamicRangeMap::fit(raw);
  ThermalFrame out{raw.width, raw.height, std::vector<std::uint8_t>(raw.data.size())};
  // 16-bit codes: a lookup over the occupied code range
  const auto lo_code = static_cast<std::size_t>(map.min);
  const auto hi_code = static_cast<std::size_t>(map.max);
  std::vector<std::uint8_t> table(hi_code - lo_code + 1);
  for (std::size_t c = lo_code; c <= hi_code; ++c) table[c - lo_code] = map.quantize(static_cast<double>(c));
  for (std::size_t i = 0; i < raw.data.size(); ++i) out.data[i] = table[raw.data[i] - lo_code];
  return out;
}

RadiometricFrame read_pgm16(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const PgmHeader h = parse_header(bytes, path);
  if (h.maxval != 65535) format_error(path, 0, "maxval " + std::to_string(h.maxval) + " is not 65535");
  check_payload(h, 2, bytes.size(), path);
  RadiometricFrame f;
  f.width = h.width;
  f.height = h.height;
  f.data.resize(h.width * h.height);
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const std::size_t at = h.payload_offset + 2 * i;
    f.data[i] = static_cast<std::uint16_t>((bytes[at] << 8) | bytes[at + 1]);
  }
  return f;
}

void write_pgm16(const RadiometricFrame& frame, const std::filesystem::path& path) {
  validate(frame);
  std::vector<unsigned char> payload(frame.data.size() * 2);
  for (std::size_t i = 0; i < frame.data.size(); ++i) {
    payload[2 * i] = static_cast<unsigned char>(frame.data[i] >> 8);
    payload[2 * i + 1] = static_cast<unsigned char>(frame.data[i] & 0xffu);
  }
  write_bytes(path, header_text(frame.width, frame.height, 65535), payload);
}

ThermalFrame read_pgm8(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const PgmHeader h = parse_header(bytes, path);
  if (h.maxval != 255) format_error(path, 0, "maxval " + std::to_string(h.maxval) + " is not 255");
  check_payload(h, 1, bytes.size(), path);
  ThermalFrame f;
  f.width = h.width;
  f.height = h.height;
  f.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), bytes.end());
  return f;
}

void write_pgm8(const ThermalFrame& frame, const std::filesystem::path& path) {
  validate(frame);
  write_bytes(path, header_text(frame.width, frame.height, 255),
              std::vector<unsigned char>(frame.data.begin(), frame.data.end()));
}

ThermalFrame read_display_frame(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const PgmHeader h = parse_header(bytes, path);
  if (h.maxval == 65535) return compress_dynamic_range(read_pgm16(path));
  if (h.maxval == 255) return read_pgm8(path);
  format_error(path, 0, "unsupported maxval " + std::to_string(h.maxval));
}

}  // namespace thermo::radiometry
