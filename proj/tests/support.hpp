#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "thermo/autodiff.hpp"
#include "thermo/rng.hpp"

namespace testing {

using thermo::ad::Tensor;

// Random values in [-1, 1] kept at least `margin` away from zero.
inline std::vector<double> random_values(std::size_t n, thermo::Rng& rng, double margin = 1e-3) {
  std::vector<double> v(n);
  for (double& x : v) {
    do {
      x = rng.uniform(-1.0, 1.0);
    } while (std::abs(x) < margin);
  }
  return v;
}

inline Tensor random_tensor(thermo::ad::Shape shape, thermo::Rng& rng, bool requires_grad = true) {
  const std::size_t n = thermo::ad::shape_numel(shape);
  return Tensor::from(std::move(shape), random_values(n, rng), requires_grad);
}

// |a - n| / max(|a|, |n|, floor): relative error with a floor so that
// gradients which are zero up to round-off do not divide by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares reverse-mode gradients of the scalar f() with central differences
// for every element of every tensor in `wrt`. Returns the max relative error.
// The floor is 1e-11 * |loss| / step, since central differences of a loss of
// size L carry round-off of order eps * L / step. An element that misses at
// step h is retried at h/10 and h/100: a ReLU kink within one step of the
// point biases the difference, and only steps shorter than the distance to
// the kink see the local slope.
inline double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt, double h = 1e-5) {
  for (Tensor t : wrt) t.zero_grad();
  double scale = 1.0;
  {
    thermo::ad::Tape tape;
    thermo::ad::Tape::Scope scope(tape);
    const Tensor loss = f();
    scale = std::max(1.0, std::abs(loss.item()));
    tape.backward(loss);
  }
  double worst = 0.0;
  for (Tensor t : wrt) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double err = INFINITY;
      double step = h;
      for (int tries = 0; tries < 3 && err > 1e-6; ++tries, step /= 10) {
        data[i] = saved + step;
        const double up = f().item();
        data[i] = saved - step;
        const double down = f().item();
        data[i] = saved;
        err = std::min(err, relative_error(analytic[i], (up - down) / (2 * step), 1e-11 * scale / step));
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("thermofatigue_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
