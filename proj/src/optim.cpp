#include "thermo/optim.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "text_util.hpp"
#include "thermo/error.hpp"
#include "thermo/rng.hpp"

namespace thermo::optim {

// ---------------------------------------------------------------------------
// RAdam

RAdamState RAdamState::init(std::span<ad::Tensor* const> params, double lr) {
  RAdamState s;
  s.lr = lr;
  for (const ad::Tensor* p : params) {
    s.m.emplace_back(p->numel(), 0.0);
    s.v.emplace_back(p->numel(), 0.0);
  }
  return s;
}

RAdamStepInfo radam_step(std::span<ad::Tensor* const> params, RAdamState& state) {
  require(params.size() == state.m.size() && params.size() == state.v.size(),
          "radam_step: state has " + std::to_string(state.m.size()) + " slots for " +
              std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i]->numel() == state.m[i].size(), "radam_step: shape mismatch at parameter " + std::to_string(i));
    if (!params[i]->has_grad()) continue;
    for (double g : std::as_const(*params[i]).grad()) {
      if (std::isnan(g)) fail(ErrorCode::InvalidInput, "radam_step: NaN gradient in parameter " + std::to_string(i));
    }
  }

  const std::size_t t = ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double b1t = std::pow(b1, static_cast<double>(t));
  const double b2t = std::pow(b2, static_cast<double>(t));
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
  RAdamStepInfo info{rho_t, rho_t > 4.0};
  const double rect =
      info.adapted ? std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                   : 0.0;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->data();
    std::span<const double> g = std::as_const(*params[i]).grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double m_hat = m[j] / (1.0 - b1t);
      if (info.adapted) {
        const double v_hat = std::sqrt(v[j] / (1.0 - b2t)) + state.eps;
        theta[j] -= state.lr * rect * m_hat / v_hat;
      } else {
        theta[j] -= state.lr * m_hat;
      }
    }
  }
  return info;
}

// ---------------------------------------------------------------------------
// Lookahead

LookaheadState LookaheadState::init(std::span<ad::Tensor* const> params, std::size_t k, double alpha) {
  require(k >= 1, "lookahead k must be at least 1");
  require(alpha > 0.0 && alpha <= 1.0, "lookahead alpha must lie in (0, 1]");
  LookaheadState s;
  s.k = k;
  s.alpha = alpha;
  for (const ad::Tensor* p : params) s.slow.emplace_back(p->data().begin(), p->data().end());
  return s;
}

bool lookahead_sync(std::span<ad::Tensor* const> params, LookaheadState& state) {
  require(params.size() == state.slow.size(), "lookahead_sync: parameter count mismatch");
  if (++state.counter % state.k != 0) return false;
  ++state.syncs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->data();
    auto& phi = state.slow[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      // (1 - a) phi + a theta is exactly theta when a = 1
      phi[j] = (1.0 - state.alpha) * phi[j] + state.alpha * theta[j];
      theta[j] = phi[j];
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Plateau schedule

double plateau_update(PlateauState& state, double val_mae) {
  if (std::isnan(val_mae)) fail(ErrorCode::InvalidInput, "plateau_update: validation MAE is NaN");
  if (val_mae < state.best - state.threshold) {
    state.best = val_mae;
    state.stagnant = 0;
  } else if (++state.stagnant >= state.patience) {
    state.lr = std::max(state.lr * state.factor, state.min_lr);
    state.stagnant = 0;
  }
  return state.lr;
}

// ---------------------------------------------------------------------------
// Hyperparameters

void TrainHyper::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::Config, what);
  };
  check(lr0 > 0.0 && std::isfinite(lr0), "lr0 must be positive");
  check(batch_size >= 1, "batch_size must be at least 1");
  check(train_stride >= 1, "train_stride must be at least 1");
  check(val_stride >= 1, "val_stride must be at least 1");
  check(lookahead_k >= 1, "lookahead_k must be at least 1");
  check(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0, "lookahead_alpha must lie in (0, 1]");
  check(plateau_patience >= 1, "plateau_patience must be at least 1");
  check(plateau_factor > 0.0 && plateau_factor < 1.0, "plateau_factor must lie in (0, 1)");
  check(min_lr >= 0.0 && min_lr <= lr0, "min_lr must lie in [0, lr0]");
  check(preprocess.input_size >= 1, "input_size must be positive");
}

std::string TrainHyper::to_key_values() const {
  using detail::format_double;
  std::ostringstream os;
  os << "lr0=" << format_double(lr0) << '\n'
     << "batch_size=" << batch_size << '\n'
     << "epochs=" << epochs << '\n'
     << "train_seed=" << seed << '\n'
     << "augment=" << (augment ? "true" : "false") << '\n'
     << "train_stride=" << train_stride << '\n'
     << "val_stride=" << val_stride << '\n'
     << "lookahead_k=" << lookahead_k << '\n'
     << "lookahead_alpha=" << format_double(lookahead_alpha) << '\n'
     << "plateau_patience=" << plateau_patience << '\n'
     << "plateau_factor=" << format_double(plateau_factor) << '\n'
     << "min_lr=" << format_double(min_lr) << '\n'
     << "crop_w=" << preprocess.crop_w << '\n'
     << "crop_h=" << preprocess.crop_h << '\n';
  return os.str();
}

bool TrainHyper::set(const std::string& key, const std::string& value) {
  auto as_double = [&](double& field) {
    if (!detail::parse_double(value, field)) fail(ErrorCode::Config, "bad number for " + key + ": '" + value + "'");
  };
  auto as_size = [&](std::size_t& field) {
    if (!detail::parse_int(value, field)) fail(ErrorCode::Config, "bad integer for " + key + ": '" + value + "'");
  };
  if (key == "lr0") as_double(lr0);
  else if (key == "batch_size") as_size(batch_size);
  else if (key == "epochs") as_size(epochs);
  else if (key == "train_seed") {
    if (!detail::parse_int(value, seed)) fail(ErrorCode::Config, "bad integer for train_seed: '" + value + "'");
  } else if (key == "augment") {
    if (value != "true" && value != "false") fail(ErrorCode::Config, "augment must be true or false");
    augment = value == "true";
  } else if (key == "train_stride") as_size(train_stride);
  else if (key == "val_stride") as_size(val_stride);
  else if (key == "lookahead_k") as_size(lookahead_k);
  else if (key == "lookahead_alpha") as_double(lookahead_alpha);
  else if (key == "plateau_patience") as_size(plateau_patience);
  else if (key == "plateau_factor") as_double(plateau_factor);
  else if (key == "min_lr") as_double(min_lr);
  else if (key == "crop_w") as_size(preprocess.crop_w);
  else if (key == "crop_h") as_size(preprocess.crop_h);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Data

std::vector<Sample> load_samples(const dataset::SessionManifest& manifest, const dataset::PreprocessConfig& config) {
  manifest.validate();
  std::vector<Sample> samples;
  samples.reserve(manifest.total_frames());
  for (const auto& entry : manifest.entries) {
    const auto labels = labeling::label_session(entry.condition, entry.frame_count);
    for (std::size_t i = 0; i < entry.frame_count; ++i) {
      const auto frame = radiometry::read_display_frame(manifest.frame_path(entry, i));
      samples.push_back({entry.subject_id, entry.condition, i, labels[i].value, dataset::preprocess(frame, config)});
    }
  }
  return samples;
}

ad::Tensor make_batch(std::span<const radiometry::ThermalFrame* const> frames) {
  require(!frames.empty(), "make_batch: no frames");
  const std::size_t w = frames[0]->width, h = frames[0]->height;
  std::vector<double> values;
  values.reserve(frames.size() * w * h);
  for (const auto* f : frames) {
    require(f->width == w && f->height == h, "make_batch: frames differ in size");
    for (std::uint8_t level : f->data) values.push_back(level / 255.0);
  }
  return ad::Tensor::from({frames.size(), 1, h, w}, std::move(values));
}

std::vector<double> predict(model::ResidualRegressor& model, std::span<const radiometry::ThermalFrame* const> frames,
                            std::size_t batch_size) {
  require(batch_size >= 1, "predict: batch size must be positive");
  std::vector<double> out;
  out.reserve(frames.size());
  for (std::size_t start = 0; start < frames.size(); start += batch_size) {
    const auto chunk = frames.subspan(start, std::min(batch_size, frames.size() - start));
    const ad::Tensor y = model.forward(make_batch(chunk), ad::Mode::Eval);
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  return out;
}

namespace {

std::vector<std::size_t> indices_of(const std::vector<Sample>& samples, const std::vector<std::string>& subjects) {
  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (wanted.count(samples[i].subject_id)) out.push_back(i);
  }
  return out;
}

struct Errors {
  double mae = 0.0;
  double rmse = 0.0;
};

Errors evaluate(model::ResidualRegressor& model, const std::vector<Sample>& samples,
                const std::vector<std::size_t>& idx, std::size_t batch_size) {
  std::vector<const radiometry::ThermalFrame*> frames;
  for (std::size_t i : idx) frames.push_back(&samples[i].frame);
  const auto pred = predict(model, frames, batch_size);
  Errors e;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double d = pred[i] - samples[idx[i]].label;
    e.mae += std::abs(d);
    e.rmse += d * d;
  }
  e.mae /= static_cast<double>(idx.size());
  e.rmse = std::sqrt(e.rmse / static_cast<double>(idx.size()));
  return e;
}

void check_samples(const std::vector<Sample>& samples, const dataset::SessionManifest& manifest,
                   const model::RegressorConfig& config) {
  require(samples.size() == manifest.total_frames(), "sample cache does not match the manifest");
  for (const auto& s : samples) {
    require(s.frame.width == config.input_size && s.frame.height == config.input_size,
            "sample frames are not " + std::to_string(config.input_size) + " pixels square");
  }
}

}  // namespace

TrainRun train_fold(const dataset::SessionManifest& manifest, const dataset::FoldPlan& plan, std::size_t fold,
                    const model::RegressorConfig& config, const TrainHyper& hyper,
                    const std::filesystem::path& out_dir, const std::vector<Sample>* samples) {
  hyper.validate();
  config.validate();
  require(fold < plan.folds, "fold " + std::to_string(fold) + " outside plan of " + std::to_string(plan.folds));
  const auto split = dataset::fold_views(manifest, plan, fold);
  require(!split.train.empty(), "fold " + std::to_string(fold) + " has no training subjects");
  require(!split.test.empty(), "fold " + std::to_string(fold) + " has no test subjects");

  std::vector<Sample> owned;
  if (!samples) {
    auto pre = hyper.preprocess;
    pre.input_size = config.input_size;
    owned = load_samples(manifest, pre);
    samples = &owned;
  }
  check_samples(*samples, manifest, config);

  const auto train_idx = indices_of(*samples, split.train);
  const auto test_idx = indices_of(*samples, split.test);
  std::vector<std::size_t> val_idx;
  for (std::size_t i = 0; i < test_idx.size(); i += hyper.val_stride) val_idx.push_back(test_idx[i]);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  TrainRun run;
  run.fold = fold;
  run.seed = hyper.seed;
  run.best_checkpoint = out_dir / "best.ckpt";

  auto model = model::ResidualRegressor::build(config);
  const auto params = model.parameters();
  auto radam = RAdamState::init(params, hyper.lr0);
  auto lookahead = LookaheadState::init(params, hyper.lookahead_k, hyper.lookahead_alpha);
  PlateauState plateau;
  plateau.lr = hyper.lr0;
  plateau.patience = hyper.plateau_patience;
  plateau.factor = hyper.plateau_factor;
  plateau.min_lr = hyper.min_lr;
  Rng rng = Rng::derive(hyper.seed, fold);

  model::save_checkpoint(model, run.best_checkpoint);
  std::ofstream log(out_dir / "epochs.csv", std::ios::trunc);
  if (!log) fail(ErrorCode::Io, "cannot write " + (out_dir / "epochs.csv").string());
  log << kEpochLogHeader << '\n';

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const std::size_t phase = hyper.train_stride > 1 ? rng.below(hyper.train_stride) : 0;
    std::vector<std::size_t> order;
    for (std::size_t i : train_idx) {
      if ((*samples)[i].frame_index % hyper.train_stride == phase) order.push_back(i);
    }
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    const double lr = radam.lr;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t n = std::min(hyper.batch_size, order.size() - start);
      std::vector<radiometry::ThermalFrame> flipped;
      flipped.reserve(n);
      std::vector<const radiometry::ThermalFrame*> frames;
      std::vector<double> labels;
      for (std::size_t b = 0; b < n; ++b) {
        const Sample& s = (*samples)[order[start + b]];
        if (hyper.augment && rng.coin()) {
          flipped.push_back(dataset::horizontal_flip(s.frame));
          frames.push_back(&flipped.back());
        } else {
          frames.push_back(&s.frame);
        }
        labels.push_back(s.label);
      }
      model.zero_grad();
      ad::Tape tape;
      ad::Tape::Scope scope(tape);
      const ad::Tensor pred = model.forward(make_batch(frames), ad::Mode::Train);
      const ad::Tensor loss = ad::l1_loss(pred, ad::Tensor::from({n}, std::move(labels)));
      tape.backward(loss);
      radam_step(params, radam);
      lookahead_sync(params, lookahead);
      loss_sum += loss.item() * static_cast<double>(n);
    }

    const Errors val = evaluate(model, *samples, val_idx, hyper.batch_size);
    EpochLog entry{epoch, order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size()), val.mae, val.rmse, lr};
    run.epochs.push_back(entry);
    log << fold << ',' << epoch << ',' << detail::format_double(entry.train_l1) << ','
        << detail::format_double(entry.val_mae) << ',' << detail::format_double(entry.val_rmse) << ','
        << detail::format_double(entry.lr) << '\n'
        << std::flush;
    if (val.mae < run.best_val_mae) {
      run.best_val_mae = val.mae;
      run.best_epoch = epoch;
      model::save_checkpoint(model, run.best_checkpoint);
    }
    radam.lr = plateau_update(plateau, val.mae);
  }
  if (!log) fail(ErrorCode::Io, "write failed for " + (out_dir / "epochs.csv").string());
  return run;
}

std::vector<metrics::PredictionRecord> evaluate_fold(model::ResidualRegressor& model,
                                                     const dataset::SessionManifest& manifest,
                                                     const dataset::FoldPlan& plan, std::size_t fold,
                                                     const std::vector<Sample>& samples) {
  check_samples(samples, manifest, model.config());
  const auto split = dataset::fold_views(manifest, plan, fold);
  const auto idx = indices_of(samples, split.test);
  std::vector<const radiometry::ThermalFrame*> frames;
  for (std::size_t i : idx) frames.push_back(&samples[i].frame);
  const auto pred = predict(model, frames);
  std::vector<metrics::PredictionRecord> out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = samples[idx[i]];
    out.push_back({s.subject_id, s.condition, s.frame_index, s.label, pred[i]});
  }
  return out;
}

CrossValidation cross_validate(const dataset::SessionManifest& manifest, const dataset::FoldPlan& plan,
                               const model::RegressorConfig& config, const TrainHyper& hyper,
                               const std::filesystem::path& out_dir, std::size_t jobs) {
  hyper.validate();
  config.validate();
  auto pre = hyper.preprocess;
  pre.input_size = config.input_size;
  const auto samples = load_samples(manifest, pre);

  const std::size_t k = plan.folds;
  std::vector<TrainRun> runs(k);
  std::vector<std::vector<metrics::PredictionRecord>> preds(k);
  std::vector<std::exception_ptr> errors(k);
  auto work = [&](std::size_t fold) {
    try {
      const auto dir = out_dir / ("fold" + std::to_string(fold));
      runs[fold] = train_fold(manifest, plan, fold, config, hyper, dir, &samples);
      auto best = model::load_checkpoint(runs[fold].best_checkpoint);
      preds[fold] = evaluate_fold(best, manifest, plan, fold, samples);
      metrics::write_predictions(preds[fold], manifest.subjects, dir / "predictions.csv");
    } catch (...) {
      errors[fold] = std::current_exception();
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, k);
  for (std::size_t first = 0; first < k; first += jobs) {
    std::vector<std::thread> pool;
    for (std::size_t fold = first; fold < std::min(k, first + jobs); ++fold) {
      if (jobs == 1) work(fold);
      else pool.emplace_back(work, fold);
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  CrossValidation cv;
  cv.runs = std::move(runs);
  for (auto& p : preds) {
    cv.fold_mae.push_back(metrics::mae(p));
    cv.predictions.insert(cv.predictions.end(), p.begin(), p.end());
  }
  return cv;
}

}  // namespace thermo::optim
