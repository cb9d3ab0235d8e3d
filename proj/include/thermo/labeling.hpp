#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace thermo::labeling {

enum class Condition { Resting, Fatigued };

std::string_view to_string(Condition condition) noexcept;
// Accepts "resting" / "fatigued"; throws InvalidInput otherwise.
Condition parse_condition(std::string_view token);

// Fatigue level in [0, 100]: 0 is rested, 100 is the start of recovery.
struct FatigueLabel {
  double value = 0.0;

  bool operator==(const FatigueLabel&) const = default;
};

// Resting frames are 0. Fatigued frames fall linearly from 100 at the first
// frame to 0 at the last: 100 * (frame_count - 1 - frame_index) / (frame_count - 1),
// evaluated with a single rounding. A one-frame fatigued session is 100.
FatigueLabel label_frame(Condition condition, std::size_t frame_index, std::size_t frame_count);

std::vector<FatigueLabel> label_session(Condition condition, std::size_t frame_count);

}  // namespace thermo::labeling
