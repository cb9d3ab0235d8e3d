#include "thermo/labeling.hpp"

#include <string>

#include "thermo/error.hpp"

namespace thermo::labeling {

std::string_view to_string(Condition condition) noexcept {
  return condition == Condition::Resting ? "resting" : "fatigued";
}

Condition parse_condition(std::string_view token) {
  if (token == "resting") return Condition::Resting;
  if (token == "fatigued") return Condition::Fatigued;
  fail(ErrorCode::InvalidInput, "unknown condition '" + std::string(token) + "'");
}

FatigueLabel label_frame(Condition condition, std::size_t frame_index, std::size_t frame_count) {
  require(frame_count >= 1, "frame_count must be >= 1");
  require(frame_index < frame_count, "frame_index " + std::to_string(frame_index) +
                                         " out of range for " + std::to_string(frame_count) + " frames");
  if (condition == Condition::Resting) return {0.0};
  if (frame_count == 1) return {100.0};
  // The numerator is an exact integer, so the quotient is the correctly
  // rounded value of the rational label.
  const double remaining = static_cast<double>(frame_count - 1 - frame_index);
  return {100.0 * remaining / static_cast<double>(frame_count - 1)};
}

std::vector<FatigueLabel> label_session(Condition condition, std::size_t frame_count) {
  require(frame_count >= 1, "frame_count must be >= 1");
  std::vector<FatigueLabel> labels;
  labels.reserve(frame_count);
  for (std::size_t k = 0; k < frame_count; ++k) labels.push_back(label_frame(condition, k, frame_count));
  return labels;
}

}  // namespace thermo::labeling
