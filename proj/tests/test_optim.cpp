#include <doctest.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "thermo/error.hpp"
#include "thermo/optim.hpp"
#include "thermo/synth.hpp"

using namespace thermo;
using ad::Tensor;

namespace {

// Rectified Adam for one scalar, written directly from the update equations.
struct ScalarRAdam {
  double m = 0, v = 0, lr;
  int t = 0;
  bool last_adapted = false;

  double step(double theta, double g) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double rinf = 2 / (1 - b2) - 1;
    const double rt = rinf - 2 * t * std::pow(b2, t) / (1 - std::pow(b2, t));
    last_adapted = rt > 4;
    if (!last_adapted) return theta - lr * mhat;
    const double r = std::sqrt((rt - 4) * (rt - 2) * rinf / ((rinf - 4) * (rinf - 2) * rt));
    return theta - lr * r * mhat / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
};

// Gradient of sum a_i (x_i - c_i)^2 written into the tensor's grad buffer.
void quadratic_grad(Tensor& x, const double* a, const double* c) {
  for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] = 2 * a[i] * (x.data()[i] - c[i]);
}

}  // namespace

TEST_CASE("radam matches the scalar reference on a quadratic") {
  const double a[] = {1.0, 3.0, 0.5}, c[] = {2.0, -1.0, 0.25};
  Tensor x = Tensor::from({3}, {0.0, 0.0, 0.0}, true);
  std::vector<Tensor*> params{&x};
  auto state = optim::RAdamState::init(params, 0.05);
  std::vector<ScalarRAdam> ref(3, ScalarRAdam{0, 0, 0.05});
  double theta[] = {0.0, 0.0, 0.0};
  std::size_t unadapted = 0;
  for (int step = 0; step < 100; ++step) {
    quadratic_grad(x, a, c);
    const auto info = optim::radam_step(params, state);
    for (std::size_t i = 0; i < 3; ++i) {
      theta[i] = ref[i].step(theta[i], 2 * a[i] * (theta[i] - c[i]));
      CHECK(std::abs(x.data()[i] - theta[i]) < 1e-10);
    }
    CHECK(info.adapted == ref[0].last_adapted);
    if (!info.adapted) ++unadapted;
  }
  // rho_t <= 4 for the first steps with beta2 = 0.999
  CHECK(unadapted >= 4);
  CHECK(unadapted < 100);
}

TEST_CASE("radam early steps use the un-adapted branch") {
  Tensor x = Tensor::from({1}, {0.0}, true);
  std::vector<Tensor*> params{&x};
  auto state = optim::RAdamState::init(params, 0.1);
  for (int t = 1; t <= 4; ++t) {
    x.grad()[0] = 1.0;
    const auto info = optim::radam_step(params, state);
    CHECK_FALSE(info.adapted);
    CHECK(info.rho_t <= 4.0);
  }
}

TEST_CASE("radam first step with constant gradient") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  std::vector<Tensor*> params{&x};
  auto state = optim::RAdamState::init(params, 0.1);
  x.grad()[0] = 1.0;
  optim::radam_step(params, state);
  CHECK(x.data()[0] == doctest::Approx(2.9).epsilon(1e-15));
  CHECK(state.t == 1);
}

TEST_CASE("radam zero gradient leaves parameters unchanged") {
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  std::vector<Tensor*> params{&x};
  auto state = optim::RAdamState::init(params, 0.1);
  for (int i = 0; i < 20; ++i) {
    x.zero_grad();
    optim::radam_step(params, state);
  }
  CHECK(x.data()[0] == 1.5);
  CHECK(x.data()[1] == -2.0);
}

TEST_CASE("radam rejects NaN gradients without side effects") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  std::vector<Tensor*> params{&x};
  auto state = optim::RAdamState::init(params, 0.1);
  x.grad()[0] = 0.5;
  x.grad()[1] = std::nan("");
  CHECK_THROWS_AS(optim::radam_step(params, state), Error);
  CHECK(state.t == 0);
  CHECK(x.data()[0] == 1.0);
}

TEST_CASE("lookahead sync examples") {
  Tensor x = Tensor::from({1}, {0.0}, true);
  std::vector<Tensor*> params{&x};
  auto la = optim::LookaheadState::init(params, 5, 0.5);
  for (int i = 0; i < 4; ++i) CHECK_FALSE(optim::lookahead_sync(params, la));
  x.data()[0] = 2.0;
  CHECK(optim::lookahead_sync(params, la));
  CHECK(x.data()[0] == 1.0);
  CHECK(la.slow[0][0] == 1.0);
  for (int i = 0; i < 5; ++i) optim::lookahead_sync(params, la);
  CHECK(la.syncs == 2);

  auto jump = optim::LookaheadState::init(params, 1, 1.0);
  x.data()[0] = 7.25;
  optim::lookahead_sync(params, jump);
  CHECK(jump.slow[0][0] == 7.25);
  CHECK(x.data()[0] == 7.25);
  CHECK_THROWS_AS(optim::LookaheadState::init(params, 0, 0.5), Error);
  CHECK_THROWS_AS(optim::LookaheadState::init(params, 5, 1.5), Error);
}

TEST_CASE("lookahead with alpha 1 and k 1 is bit-identical to bare radam") {
  const double a[] = {1.0, 3.0, 0.5}, c[] = {2.0, -1.0, 0.25};
  Tensor x = Tensor::from({3}, {0.1, 0.2, 0.3}, true), y = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
  std::vector<Tensor*> px{&x}, py{&y};
  auto sx = optim::RAdamState::init(px, 0.05), sy = optim::RAdamState::init(py, 0.05);
  auto la = optim::LookaheadState::init(py, 1, 1.0);
  for (int step = 0; step < 100; ++step) {
    quadratic_grad(x, a, c);
    quadratic_grad(y, a, c);
    optim::radam_step(px, sx);
    optim::radam_step(py, sy);
    optim::lookahead_sync(py, la);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.data()[i] == y.data()[i]);
  }
}

TEST_CASE("plateau schedule") {
  optim::PlateauState s;
  s.lr = 1e-3;
  for (double mae : {20.0, 19.0, 18.0}) CHECK(optim::plateau_update(s, mae) == 1e-3);

  optim::PlateauState flat;
  flat.lr = 1e-3;
  CHECK(optim::plateau_update(flat, 20.0) == 1e-3);
  CHECK(optim::plateau_update(flat, 20.0) == 1e-3);
  CHECK(optim::plateau_update(flat, 20.0) == 1e-3);
  CHECK(optim::plateau_update(flat, 20.0) == 5e-4);

  // improvements smaller than the threshold do not count
  optim::PlateauState tiny;
  tiny.lr = 1e-3;
  for (double mae : {10.0, 9.99995, 9.99993, 9.99991}) optim::plateau_update(tiny, mae);
  CHECK(tiny.lr == 5e-4);

  optim::PlateauState floor;
  floor.lr = 1e-6;
  for (int i = 0; i < 20; ++i) {
    const double before = floor.lr;
    const double lr = optim::plateau_update(floor, 5.0);
    CHECK(lr <= before);
    CHECK(lr >= 1e-6);
  }
  CHECK(floor.lr == 1e-6);
  CHECK_THROWS_AS(optim::plateau_update(floor, std::nan("")), Error);
}

TEST_CASE("two-sample memorization with the tiny model") {
  model::RegressorConfig cfg;
  cfg.input_size = 16;
  cfg.stem_channels = 4;
  cfg.stage_blocks = {1};
  cfg.stage_channels = {4};
  cfg.head_hidden = 8;
  auto net = model::ResidualRegressor::build(cfg);
  Rng rng(21);
  const Tensor batch = testing::random_tensor({2, 1, 16, 16}, rng, false);
  const Tensor target = Tensor::from({2}, {20.0, 80.0});
  const auto params = net.parameters();
  auto radam = optim::RAdamState::init(params, 0.05);
  auto la = optim::LookaheadState::init(params);
  double loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    net.zero_grad();
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    const Tensor l = ad::l1_loss(net.forward(batch, ad::Mode::Train), target);
    tape.backward(l);
    optim::radam_step(params, radam);
    optim::lookahead_sync(params, la);
    loss = l.item();
  }
  CHECK(loss < 1.0);
}

TEST_CASE("hyperparameter key=value round trip") {
  optim::TrainHyper h;
  h.lr0 = 0.002;
  h.batch_size = 8;
  h.augment = false;
  h.train_stride = 3;
  optim::TrainHyper r;
  std::istringstream in(h.to_key_values());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    CHECK(r.set(line.substr(0, eq), line.substr(eq + 1)));
  }
  CHECK(r.to_key_values() == h.to_key_values());
  CHECK_FALSE(r.set("momentum", "0.9"));
  CHECK_THROWS_AS(r.set("batch_size", "eight"), Error);
  r.batch_size = 0;
  CHECK_THROWS_AS(r.validate(), Error);
}

TEST_CASE("train_fold: zero epochs, determinism and non-increasing lr") {
  const auto dir = testing::scratch_dir("train");
  synth::SynthConfig sc;
  sc.n_subjects = 5;
  sc.frames_per_session = 6;
  sc.width = sc.height = 24;
  sc.seed = 3;
  const auto ds = synth::generate_dataset(sc, dir / "data");
  const auto plan = dataset::make_fold_plan(ds.manifest, 5, 0);
  model::RegressorConfig cfg;
  cfg.input_size = 16;
  cfg.stem_channels = 4;
  cfg.stage_blocks = {1, 1};
  cfg.stage_channels = {4, 8};
  cfg.head_hidden = 8;
  optim::TrainHyper h;
  h.batch_size = 4;
  h.lr0 = 0.01;
  h.plateau_patience = 1;

  h.epochs = 0;
  const auto none = optim::train_fold(ds.manifest, plan, 1, cfg, h, dir / "zero");
  CHECK(none.epochs.empty());
  CHECK(none.best_epoch == 0);
  const auto initial = model::load_checkpoint(none.best_checkpoint);
  auto fresh = model::ResidualRegressor::build(cfg);
  CHECK(initial.config() == fresh.config());

  h.epochs = 4;
  const auto r1 = optim::train_fold(ds.manifest, plan, 1, cfg, h, dir / "a");
  const auto r2 = optim::train_fold(ds.manifest, plan, 1, cfg, h, dir / "b");
  REQUIRE(r1.epochs.size() == 4);
  CHECK(r1.epochs == r2.epochs);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "a" / "best.ckpt") == slurp(dir / "b" / "best.ckpt"));
  CHECK(slurp(dir / "a" / "epochs.csv") == slurp(dir / "b" / "epochs.csv"));
  CHECK(slurp(dir / "a" / "epochs.csv").rfind(optim::kEpochLogHeader, 0) == 0);
  for (std::size_t e = 1; e < r1.epochs.size(); ++e) CHECK(r1.epochs[e].lr <= r1.epochs[e - 1].lr);

  CHECK_THROWS_AS(optim::train_fold(ds.manifest, plan, 5, cfg, h, dir / "bad"), Error);
}

TEST_CASE("cross_validate covers every subject once") {
  const auto dir = testing::scratch_dir("cv");
  synth::SynthConfig sc;
  sc.n_subjects = 5;
  sc.frames_per_session = 4;
  sc.width = sc.height = 16;
  const auto ds = synth::generate_dataset(sc, dir / "data");
  const auto plan = dataset::make_fold_plan(ds.manifest, 5, 1);
  model::RegressorConfig cfg;
  cfg.input_size = 16;
  cfg.stem_channels = 2;
  cfg.stage_blocks = {1};
  cfg.stage_channels = {2};
  cfg.head_hidden = 4;
  optim::TrainHyper h;
  h.epochs = 1;
  h.batch_size = 8;
  const auto serial = optim::cross_validate(ds.manifest, plan, cfg, h, dir / "serial", 1);
  CHECK(serial.runs.size() == 5);
  CHECK(serial.predictions.size() == ds.manifest.total_frames());
  std::set<std::string> seen;
  for (const auto& p : serial.predictions) seen.insert(p.subject_id);
  CHECK(seen.size() == 5);
  const auto parallel = optim::cross_validate(ds.manifest, plan, cfg, h, dir / "parallel", 3);
  CHECK(parallel.predictions == serial.predictions);
}
