#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "thermo/error.hpp"
#include "thermo/model.hpp"

using namespace thermo;
using ad::Tensor;
using model::RegressorConfig;
using model::ResidualRegressor;

namespace {

// Parameter count written out layer by layer: conv weights plus BN gamma/beta,
// projections where the block changes shape, then the two FC layers.
std::size_t expected_params(const RegressorConfig& c) {
  std::size_t total = 9 * c.in_channels * c.stem_channels + 2 * c.stem_channels;
  std::size_t cin = c.stem_channels;
  for (std::size_t s = 0; s < c.stage_blocks.size(); ++s) {
    const std::size_t cout = c.stage_channels[s];
    for (std::size_t b = 0; b < c.stage_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      total += 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
      if (stride != 1 || cin != cout) total += cin * cout + 2 * cout;
      cin = cout;
    }
  }
  return total + cin * c.head_hidden + c.head_hidden + c.head_hidden + 1;
}

RegressorConfig tiny() {
  RegressorConfig c;
  c.input_size = 16;
  c.stem_channels = 4;
  c.stage_blocks = {1};
  c.stage_channels = {4};
  c.head_hidden = 8;
  return c;
}

Tensor random_batch(std::size_t n, std::size_t s, Rng& rng) {
  std::vector<double> v(n * s * s);
  for (double& x : v) x = rng.uniform();
  return Tensor::from({n, 1, s, s}, std::move(v));
}

}  // namespace

TEST_CASE("parameter count is a function of the config") {
  const RegressorConfig def;
  CHECK(expected_params(def) == 182769);
  CHECK(ResidualRegressor::build(def).parameter_count() == expected_params(def));
  RegressorConfig wide = def;
  wide.stage_blocks = {1, 1, 1, 1};
  wide.stage_channels = {8, 16, 32, 64};
  wide.stem_channels = 8;
  CHECK(ResidualRegressor::build(wide).parameter_count() == expected_params(wide));
  CHECK(ResidualRegressor::build(tiny()).parameter_count() == expected_params(tiny()));
}

TEST_CASE("config validation and key=value round trip") {
  RegressorConfig bad;
  bad.stage_blocks = {2, 2};
  CHECK_THROWS_AS(bad.validate(), Error);
  RegressorConfig zero;
  zero.input_size = 0;
  CHECK_THROWS_AS(zero.validate(), Error);

  RegressorConfig c = tiny();
  c.seed = 42;
  RegressorConfig r;
  std::istringstream in(c.to_key_values());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    CHECK(r.set(line.substr(0, eq), line.substr(eq + 1)));
  }
  CHECK(r == c);
  CHECK_FALSE(r.set("no_such_key", "1"));
}

TEST_CASE("fresh model predicts near the midpoint") {
  auto net = ResidualRegressor::build(RegressorConfig{});
  Rng rng(1);
  const Tensor y = net.forward(random_batch(4, 96, rng), ad::Mode::Eval);
  CHECK(y.shape() == ad::Shape{4});
  for (double v : y.data()) {
    CHECK(std::isfinite(v));
    CHECK(std::abs(v - 50.0) < 25.0);
  }
}

TEST_CASE("build is deterministic in the seed") {
  RegressorConfig a = tiny(), b = tiny();
  b.seed = 1;
  auto m1 = ResidualRegressor::build(a), m2 = ResidualRegressor::build(a), m3 = ResidualRegressor::build(b);
  const auto s1 = m1.state(), s2 = m2.state(), s3 = m3.state();
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    all_equal = all_equal && std::equal(s1[i]->data().begin(), s1[i]->data().end(), s2[i]->data().begin());
    any_diff = any_diff || !std::equal(s1[i]->data().begin(), s1[i]->data().end(), s3[i]->data().begin());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("eval mode is batch-size invariant and mutates nothing") {
  auto net = ResidualRegressor::build(tiny());
  Rng rng(2);
  // give the running statistics non-trivial values
  for (int i = 0; i < 3; ++i) net.forward(random_batch(4, 16, rng), ad::Mode::Train);
  const Tensor batch = random_batch(5, 16, rng);
  const Tensor all = net.forward(batch, ad::Mode::Eval);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> row(batch.data().begin() + i * 256, batch.data().begin() + (i + 1) * 256);
    const Tensor one = net.forward(Tensor::from({1, 1, 16, 16}, row), ad::Mode::Eval);
    CHECK(one.item() == all.data()[i]);
  }
  const Tensor again = net.forward(batch, ad::Mode::Eval);
  CHECK(std::equal(again.data().begin(), again.data().end(), all.data().begin()));
}

TEST_CASE("input validation") {
  auto net = ResidualRegressor::build(tiny());
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 1, 8, 8}), ad::Mode::Eval), Error);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 2, 16, 16}), ad::Mode::Eval), Error);
  Tensor nan = Tensor::zeros({1, 1, 16, 16});
  nan.data()[3] = std::nan("");
  CHECK_THROWS_AS(net.forward(nan, ad::Mode::Eval), Error);
  CHECK_THROWS_AS(net.forward_from(2, Tensor::zeros({1, 4, 16, 16}), ad::Mode::Eval), Error);
}

TEST_CASE("forward_from reproduces forward from every layer") {
  RegressorConfig c = tiny();
  c.stage_blocks = {1, 1};
  c.stage_channels = {4, 6};
  auto net = ResidualRegressor::build(c);
  Rng rng(4);
  const Tensor batch = random_batch(2, 16, rng);
  model::ForwardTrace trace;
  const Tensor y = net.forward(batch, ad::Mode::Eval, &trace);
  REQUIRE(trace.layer_outputs.size() == net.layer_count());
  CHECK(trace.layer_outputs[1].shape() == ad::Shape{2, 4, 16, 16});
  CHECK(trace.layer_outputs[2].shape() == ad::Shape{2, 6, 8, 8});
  for (std::size_t layer = 0; layer < net.layer_count(); ++layer) {
    const Tensor z = net.forward_from(layer, trace.layer_outputs[layer], ad::Mode::Eval);
    CHECK(std::equal(z.data().begin(), z.data().end(), y.data().begin()));
  }
}

TEST_CASE("end-to-end gradient check on the tiny model") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RegressorConfig c = tiny();
    c.seed = seed;
    auto net = ResidualRegressor::build(c);
    Rng rng(700 + seed);
    const Tensor batch = random_batch(2, 16, rng);
    const Tensor target = Tensor::from({2}, {10.0, 90.0});
    std::vector<Tensor> params;
    for (Tensor* p : net.parameters()) params.push_back(*p);
    const double err = testing::gradient_check(
        [&] { return ad::l1_loss(net.forward(batch, ad::Mode::Train), target); }, params);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("checkpoint round trip and config mismatch") {
  const auto dir = testing::scratch_dir("model_ckpt");
  auto net = ResidualRegressor::build(tiny());
  Rng rng(5);
  net.forward(random_batch(3, 16, rng), ad::Mode::Train);
  model::save_checkpoint(net, dir / "a.ckpt");
  auto loaded = model::load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.config() == net.config());
  const auto s1 = net.state(), s2 = loaded.state();
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(std::equal(s1[i]->data().begin(), s1[i]->data().end(), s2[i]->data().begin()));
  }
  model::save_checkpoint(loaded, dir / "b.ckpt");
  std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

  RegressorConfig other = tiny();
  other.head_hidden = 6;
  auto mismatched = ResidualRegressor::build(other);
  CHECK_THROWS_AS(model::load_checkpoint_into(mismatched, dir / "a.ckpt"), Error);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint\n";
  CHECK_THROWS_AS(model::load_checkpoint(dir / "junk.ckpt"), Error);
  CHECK_THROWS_AS(model::load_checkpoint(dir / "missing.ckpt"), Error);
}

TEST_CASE("clone shares no storage") {
  auto net = ResidualRegressor::build(tiny());
  auto copy = net.clone();
  copy.fc2_bias().data()[0] = -7.0;
  CHECK(net.fc2_bias().data()[0] == 50.0);
}
