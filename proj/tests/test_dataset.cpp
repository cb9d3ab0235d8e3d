#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "support.hpp"
#include "thermo/dataset.hpp"
#include "thermo/error.hpp"

using namespace thermo;
using dataset::Gender;
using dataset::SessionManifest;
using radiometry::ThermalFrame;

namespace {

// n subjects with the given number of males and glasses wearers, one fatigued session each.
SessionManifest population(std::size_t n, std::size_t males, std::size_t glasses, std::uint64_t seed) {
  SessionManifest m;
  Rng rng(seed);
  std::vector<std::size_t> g_order(n), w_order(n);
  for (std::size_t i = 0; i < n; ++i) g_order[i] = w_order[i] = i;
  rng.shuffle(std::span<std::size_t>(g_order));
  rng.shuffle(std::span<std::size_t>(w_order));
  m.subjects.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.subjects[i].subject_id = "p" + std::to_string(100 + i);
  }
  for (std::size_t i = 0; i < males; ++i) m.subjects[g_order[i]].gender = Gender::Male;
  for (std::size_t i = males; i < n; ++i) m.subjects[g_order[i]].gender = Gender::Female;
  for (std::size_t i = 0; i < glasses; ++i) m.subjects[w_order[i]].glasses = true;
  for (const auto& s : m.subjects) {
    m.entries.push_back({s.subject_id, labeling::Condition::Fatigued, 10, 8.7, "f/" + s.subject_id + "/{idx}.pgm"});
  }
  return m;
}

int stratum(const dataset::SubjectRecord& s) { return (s.gender == Gender::Female ? 2 : 0) + (s.glasses ? 1 : 0); }

ThermalFrame ramp(std::size_t w, std::size_t h) {
  ThermalFrame f{w, h, std::vector<std::uint8_t>(w * h)};
  for (std::size_t i = 0; i < w * h; ++i) f.data[i] = static_cast<std::uint8_t>(i);
  return f;
}

}  // namespace

TEST_CASE("manifest row parsing and round trip") {
  const auto dir = testing::scratch_dir("manifest");
  std::ofstream(dir / "m.csv") << dataset::kManifestHeader << '\n'
                               << "s001,male,true,34,fatigued,2611,8.7,frames/s001/fat/{idx}.pgm\n"
                               << "s001,male,true,34,resting,5,8.7,frames/s001/rest/{idx}.pgm\n"
                               << "s002,female,false,,resting,3,8.7,frames/s002/rest/{idx}.pgm\n"
                               << "s003,female,true,51,fatigued,4,9,/abs/{idx}.pgm\n";
  const auto m = dataset::load_manifest(dir / "m.csv");
  REQUIRE(m.entries.size() == 4);
  CHECK(m.entries[0].condition == labeling::Condition::Fatigued);
  CHECK(m.entries[0].frame_count == 2611);
  CHECK(m.entries[0].fps == 8.7);
  CHECK(m.subject("s001").glasses);
  CHECK_FALSE(m.subject("s002").age.has_value());
  CHECK(m.frame_path(m.entries[0], 7) == dir / "frames/s001/fat/00007.pgm");
  CHECK(m.frame_path(m.entries[3], 2) == std::filesystem::path("/abs/00002.pgm"));
  CHECK(m.total_frames() == 2623);

  dataset::save_manifest(m, dir / "copy.csv");
  const auto again = dataset::load_manifest(dir / "copy.csv");
  CHECK(again.subjects == m.subjects);
  CHECK(again.entries == m.entries);
}

TEST_CASE("manifest errors name the line") {
  const auto dir = testing::scratch_dir("manifest_err");
  auto load_with = [&](const std::string& rows) {
    std::ofstream(dir / "m.csv") << dataset::kManifestHeader << '\n' << rows;
    try {
      dataset::load_manifest(dir / "m.csv");
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string row = "s001,male,true,34,fatigued,10,8.7,a/{idx}.pgm\n";
  CHECK(load_with(row + row).find(":3") != std::string::npos);
  CHECK(load_with("s001,robot,true,34,fatigued,10,8.7,a/{idx}.pgm\n").find(":2") != std::string::npos);
  CHECK(load_with("s001,male,true,34,sleepy,10,8.7,a/{idx}.pgm\n").find(":2") != std::string::npos);
  CHECK_FALSE(load_with("s001,male,true,34,fatigued,0,8.7,a/{idx}.pgm\n").empty());
  CHECK_FALSE(load_with("s001,male,true,34,fatigued,10,-1,a/{idx}.pgm\n").empty());
  CHECK_FALSE(load_with(row + "s001,female,true,34,resting,10,8.7,b/{idx}.pgm\n").empty());
  CHECK_THROWS_AS(dataset::load_manifest(dir / "nope.csv"), Error);
}

TEST_CASE("central crop") {
  ThermalFrame big{384, 288, std::vector<std::uint8_t>(384 * 288)};
  for (std::size_t y = 0; y < 288; ++y)
    for (std::size_t x = 0; x < 384; ++x) big.data[y * 384 + x] = static_cast<std::uint8_t>((x * 7 + y * 13) % 251);
  const auto c = dataset::central_crop(big, 224, 224);
  CHECK(c.width == 224);
  CHECK(c.at(0, 0) == big.at(80, 32));
  CHECK(c.at(223, 223) == big.at(303, 255));

  const auto f = ramp(4, 4);
  CHECK(dataset::central_crop(f, 4, 4) == f);
  const auto mid = dataset::central_crop(f, 2, 2);
  CHECK(mid.data == std::vector<std::uint8_t>{5, 6, 9, 10});
  CHECK_THROWS_AS(dataset::central_crop(f, 5, 2), Error);
}

TEST_CASE("bilinear resize") {
  const ThermalFrame two{2, 1, {0, 255}};
  CHECK(dataset::resize_bilinear(two, 4, 1).data == std::vector<std::uint8_t>{0, 64, 191, 255});
  const auto f = ramp(5, 3);
  CHECK(dataset::resize_bilinear(f, 5, 3) == f);
  const ThermalFrame flat{3, 3, std::vector<std::uint8_t>(9, 77)};
  const auto up = dataset::resize_bilinear(flat, 7, 5);
  CHECK(up.data == std::vector<std::uint8_t>(35, 77));
}

TEST_CASE("preprocess crops only frames larger than the crop") {
  dataset::PreprocessConfig cfg;
  cfg.input_size = 8;
  const auto small = ramp(16, 16);
  CHECK(dataset::preprocess(small, cfg) == dataset::resize_bilinear(small, 8, 8));
  ThermalFrame big{384, 288, std::vector<std::uint8_t>(384 * 288, 9)};
  const auto out = dataset::preprocess(big, cfg);
  CHECK(out.width == 8);
  CHECK(out.data == std::vector<std::uint8_t>(64, 9));
}

TEST_CASE("flips") {
  const ThermalFrame ab{2, 1, {10, 20}};
  CHECK(dataset::horizontal_flip(ab).data == std::vector<std::uint8_t>{20, 10});
  const auto f = ramp(5, 3);
  CHECK(dataset::horizontal_flip(dataset::horizontal_flip(f)) == f);
  Rng rng(123);
  std::size_t flips = 0;
  for (int i = 0; i < 10000; ++i) flips += dataset::maybe_flip(ab, rng) == ab ? 0 : 1;
  CHECK(flips >= 4700);
  CHECK(flips <= 5300);
}

TEST_CASE("fold plan on the 80-subject population") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = population(80, 51, 30, seed);
    const auto plan = dataset::make_fold_plan(m, 5, seed);
    std::map<std::size_t, std::size_t> size, males;
    for (const auto& s : m.subjects) {
      const std::size_t k = plan.fold_of_subject.at(s.subject_id);
      ++size[k];
      if (s.gender == Gender::Male) ++males[k];
    }
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(size[k] == 16);
      CHECK((males[k] == 10 || males[k] == 11));
    }
  }
}

TEST_CASE("fold plan stratum balance over irregular populations") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t folds = 2 + rng.below(5);
    const std::size_t n = folds + rng.below(40);
    const auto m = population(n, rng.below(n + 1), rng.below(n + 1), trial);
    const auto plan = dataset::make_fold_plan(m, folds, trial);
    std::vector<std::size_t> total(folds, 0);
    std::vector<std::vector<std::size_t>> per(4, std::vector<std::size_t>(folds, 0));
    for (const auto& s : m.subjects) {
      const std::size_t k = plan.fold_of_subject.at(s.subject_id);
      ++total[k];
      ++per[stratum(s)][k];
    }
    CHECK(*std::max_element(total.begin(), total.end()) - *std::min_element(total.begin(), total.end()) <= 1);
    for (const auto& counts : per) {
      CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
    }
  }
}

TEST_CASE("fold plan determinism, small populations and errors") {
  const auto m = population(5, 2, 1, 1);
  const auto plan = dataset::make_fold_plan(m, 5, 3);
  for (std::size_t k = 0; k < 5; ++k) CHECK(plan.fold_size(k) == 1);
  CHECK(dataset::make_fold_plan(m, 5, 3).fold_of_subject == plan.fold_of_subject);
  CHECK_THROWS_AS(dataset::make_fold_plan(population(4, 2, 1, 1), 5, 0), Error);
}

TEST_CASE("fold views are disjoint and complete") {
  const auto m = population(23, 12, 9, 4);
  const auto plan = dataset::make_fold_plan(m, 5, 4);
  std::multiset<std::string> tested;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto split = dataset::fold_views(m, plan, k);
    const std::set<std::string> train(split.train.begin(), split.train.end());
    for (const auto& s : split.test) CHECK(train.count(s) == 0);
    CHECK(split.train.size() + split.test.size() == 23);
    CHECK(split.test.size() == plan.fold_size(k));
    tested.insert(split.test.begin(), split.test.end());
  }
  CHECK(tested.size() == 23);
  CHECK(std::set<std::string>(tested.begin(), tested.end()).size() == 23);
  CHECK_THROWS_AS(dataset::fold_views(m, plan, 5), Error);
}

TEST_CASE("fold plan CSV round trip") {
  const auto dir = testing::scratch_dir("folds");
  const auto m = population(12, 6, 4, 2);
  const auto plan = dataset::make_fold_plan(m, 4, 9);
  dataset::save_fold_plan(plan, dir / "folds.csv");
  const auto back = dataset::load_fold_plan(dir / "folds.csv");
  CHECK(back.folds == 4);
  CHECK(back.fold_of_subject == plan.fold_of_subject);
}
