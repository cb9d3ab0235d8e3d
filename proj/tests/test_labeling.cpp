#include <doctest.h>

#include "thermo/error.hpp"
#include "thermo/labeling.hpp"

using namespace thermo;
using labeling::Condition;

TEST_CASE("fatigued endpoints and midpoint") {
  CHECK(labeling::label_frame(Condition::Fatigued, 0, 2611).value == 100.0);
  CHECK(labeling::label_frame(Condition::Fatigued, 2610, 2611).value == 0.0);
  CHECK(labeling::label_frame(Condition::Fatigued, 1305, 2611).value == 50.0);
}

TEST_CASE("resting frames are zero") {
  for (std::size_t k = 0; k < 7; ++k) CHECK(labeling::label_frame(Condition::Resting, k, 7).value == 0.0);
  const auto r = labeling::label_session(Condition::Resting, 3);
  CHECK(r == std::vector<labeling::FatigueLabel>{{0.0}, {0.0}, {0.0}});
}

TEST_CASE("short sessions") {
  const auto five = labeling::label_session(Condition::Fatigued, 5);
  CHECK(five == std::vector<labeling::FatigueLabel>{{100.0}, {75.0}, {50.0}, {25.0}, {0.0}});
  CHECK(labeling::label_session(Condition::Fatigued, 1) == std::vector<labeling::FatigueLabel>{{100.0}});
}

TEST_CASE("monotone and within range") {
  const auto labels = labeling::label_session(Condition::Fatigued, 120);
  for (std::size_t k = 1; k < labels.size(); ++k) CHECK(labels[k].value <= labels[k - 1].value);
  for (const auto& l : labels) CHECK((l.value >= 0.0 && l.value <= 100.0));
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(labeling::label_frame(Condition::Fatigued, 5, 5), Error);
  CHECK_THROWS_AS(labeling::label_session(Condition::Fatigued, 0), Error);
  CHECK_THROWS_AS(labeling::parse_condition("tired"), Error);
  CHECK(labeling::parse_condition(labeling::to_string(Condition::Fatigued)) == Condition::Fatigued);
}
