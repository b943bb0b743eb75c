#pragma once

// Multi-level training: cycles of cosine-annealed SGD separated by
// interpolations that double every stage's blocks and halve h.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <array>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "odenet/data.hpp"
#include "odenet/optim.hpp"
#include "odenet/resnet.hpp"

namespace odenet {

// ---------------------------------------------------------------------------
// Learning rate

struct LRState {
  std::int64_t t_cur = 0;
  std::int64_t t_total = 0;
  double eta_min = 0.001;
  double eta_max = 0.5;
};

/// eta_min + (eta_max - eta_min) * (1 + cos(pi * T_cur / T)) / 2
inline double cosine_lr(const LRState& s) {
  if (s.t_total <= 0) throw std::invalid_argument("cosine_lr: cycle length T must be positive");
  if (s.t_cur < 0 || s.t_cur > s.t_total) throw std::invalid_argument("cosine_lr: T_cur outside [0, T]");
  if (s.t_cur == 0) return s.eta_max;
  if (s.t_cur == s.t_total) return s.eta_min;
  const double frac = static_cast<double>(s.t_cur) / static_cast<double>(s.t_total);
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// Time accounting

struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

/// Fraction of training time saved by k interpolations with equal cycle
/// lengths, relative to training the last-cycle model for the same steps:
/// 1 - (2^{k+1} - 1) / (2^k (k + 1)), reduced.
inline Fraction theoretical_time_saved(int k) {
  if (k < 0) throw std::invalid_argument("number of interpolations must be >= 0");
  if (k > 56) throw std::overflow_error("theoretical_time_saved: k too large for exact evaluation");
  const std::uint64_t p = std::uint64_t{1} << k;
  const std::uint64_t den = p * static_cast<std::uint64_t>(k + 1);
  const std::uint64_t num = den - (2 * p - 1);
  const std::uint64_t g = std::gcd(num, den);
  return {num / g, den / g};
}

// ---------------------------------------------------------------------------
// Schedules

struct Cycle {
  std::array<int, kStages> blocks{};
  double h = 1.0;
  std::int64_t steps = 0;
  double eta_min = 0.001;
  double eta_max = 0.5;
};

struct CycleSchedule {
  std::vector<Cycle> cycles;

  int interpolations() const { return static_cast<int>(cycles.size()) - 1; }
  std::int64_t total_steps() const {
    std::int64_t s = 0;
    for (const auto& c : cycles) s += c.steps;
    return s;
  }

  void validate() const {
    if (cycles.empty()) throw std::invalid_argument("schedule has no cycles");
    for (std::size_t i = 0; i < cycles.size(); ++i) {
      const Cycle& c = cycles[i];
      if (c.steps <= 0) throw std::invalid_argument("cycle " + std::to_string(i + 1) + " has no training steps");
      if (!(c.eta_max > c.eta_min && c.eta_min > 0))
        throw std::invalid_argument("cycle " + std::to_string(i + 1) + " needs eta_max > eta_min > 0");
      if (i == 0) continue;
      const Cycle& p = cycles[i - 1];
      for (std::size_t s = 0; s < kStages; ++s)
        if (c.blocks[s] != 2 * p.blocks[s])
          throw std::invalid_argument("cycle " + std::to_string(i + 1) + " does not double the blocks of cycle " +
                                      std::to_string(i));
      if (c.h != p.h / 2)
        throw std::invalid_argument("cycle " + std::to_string(i + 1) + " does not halve h");
    }
  }

  /// Step-weighted block cost relative to running the last cycle's model for
  /// every step. Equal splits reproduce 1 - theoretical_time_saved(k).
  double relative_cost() const {
    const double last = cycles.back().blocks[0] + cycles.back().blocks[1] + cycles.back().blocks[2];
    double cost = 0;
    for (const auto& c : cycles) cost += static_cast<double>(c.steps) * (c.blocks[0] + c.blocks[1] + c.blocks[2]);
    return cost / (static_cast<double>(total_steps()) * last);
  }
};

struct EqualSplit {};
struct ExplicitSplit {
  std::vector<std::int64_t> steps;
};
using StepSplit = std::variant<EqualSplit, ExplicitSplit>;

/// k+1 cycles starting at `base_blocks` and `h0`; every later cycle doubles the
/// blocks and halves h. Equal splits give the remainder, one step each, to the
/// last cycles.
inline CycleSchedule plan_schedule(std::array<int, kStages> base_blocks, int k, std::int64_t total_steps,
                                   const StepSplit& split, double eta_min = 0.001, double eta_max = 0.5,
                                   double h0 = 1.0) {
  if (k < 0) throw std::invalid_argument("number of interpolations k must be >= 0");
  const auto cycles = static_cast<std::size_t>(k) + 1;
  std::vector<std::int64_t> steps;
  if (std::holds_alternative<EqualSplit>(split)) {
    if (total_steps < static_cast<std::int64_t>(cycles))
      throw std::invalid_argument("total_steps " + std::to_string(total_steps) + " cannot cover " +
                                  std::to_string(cycles) + " cycles");
    const std::int64_t each = total_steps / static_cast<std::int64_t>(cycles);
    steps.assign(cycles, each);
    const auto rem = static_cast<std::size_t>(total_steps - each * static_cast<std::int64_t>(cycles));
    for (std::size_t i = cycles - rem; i < cycles; ++i) ++steps[i];
  } else {
    steps = std::get<ExplicitSplit>(split).steps;
    if (steps.size() != cycles)
      throw std::invalid_argument("explicit split lists " + std::to_string(steps.size()) + " cycles, expected " +
                                  std::to_string(cycles));
  }
  CycleSchedule s;
  std::array<int, kStages> blocks = base_blocks;
  double h = h0;
  for (std::size_t i = 0; i < cycles; ++i) {
    s.cycles.push_back({blocks, h, steps[i], eta_min, eta_max});
    for (auto& b : blocks) b *= 2;
    h /= 2;
  }
  s.validate();
  return s;
}

/// Converts epoch boundaries (e.g. interpolations at epochs 60 and 110 of 160)
/// into per-cycle step counts.
inline ExplicitSplit split_at_epochs(int total_epochs, const std::vector<int>& boundaries, std::int64_t steps_per_epoch) {
  ExplicitSplit out;
  int prev = 0;
  for (int b : boundaries) {
    if (b <= prev || b >= total_epochs)
      throw std::invalid_argument("epoch boundaries must be increasing and inside (0, total_epochs)");
    out.steps.push_back(static_cast<std::int64_t>(b - prev) * steps_per_epoch);
    prev = b;
  }
  out.steps.push_back(static_cast<std::int64_t>(total_epochs - prev) * steps_per_epoch);
  return out;
}

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {
template <typename T>
BlockParams<T> fresh_copy(const BlockParams<T>& b) {
  BlockParams<T> c = b;
  auto reset = [](Parameter<T>& p) {
    p.reset_momentum();
    p.zero_grad();
  };
  for (BatchNormParams<T>* bn : {&c.bn1, &c.bn2})
    for (Parameter<T>* p : {&bn->gamma, &bn->beta, &bn->running_mean, &bn->running_var}) reset(*p);
  reset(c.conv1);
  reset(c.conv2);
  if (c.shortcut) reset(*c.shortcut);
  return c;
}
}  // namespace detail

/// Doubles each stage and halves h. Old block m lands at position 2m-1 and a
/// copy of it is inserted at 2m. Position 2 copies the stage's old second
/// block instead of its first, whose shapes differ when it downsamples. A
/// single-block downsampling stage has no such donor, so position 2 gets a
/// freshly initialized block and a warning.
template <typename T>
ResNetModel<T> interpolate(const ResNetModel<T>& model, std::uint64_t seed = 0,
                           std::vector<std::string>* warnings = nullptr) {
  if (model.spec.step_size_mode != StepSizeMode::explicit_h)
    throw std::invalid_argument("interpolate requires an explicit step-size model");
  ResNetModel<T> out = model;
  std::mt19937_64 rng(seed);
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    const auto& old = model.stages[s];
    std::vector<BlockParams<T>> blocks;
    blocks.reserve(2 * old.size());
    for (std::size_t m = 0; m < old.size(); ++m) {
      blocks.push_back(old[m]);
      if (m > 0) {
        blocks.push_back(detail::fresh_copy(old[m]));
      } else if (old.size() > 1) {
        blocks.push_back(detail::fresh_copy(old[1]));
      } else if (old[0].kind == BlockKind::residual && !old[0].is_downsampling() && !old[0].shortcut) {
        blocks.push_back(detail::fresh_copy(old[0]));
      } else {
        const std::size_t c = old[0].out_channels;
        blocks.push_back(make_block<T>(c, c, 1, rng));
        if (warnings)
          warnings->push_back("stage " + std::to_string(s + 1) +
                              " has a single downsampling block; inserted block 2 is freshly initialized");
      }
    }
    out.stages[s] = std::move(blocks);
    out.spec.blocks_per_stage[s] = static_cast<int>(out.stages[s].size());
  }
  out.spec.step_size = model.spec.step_size / 2;
  return out;
}

// ---------------------------------------------------------------------------
// Training

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::int64_t step, const std::string& what)
      : NumericError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  int cycle = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
};

struct CycleSummary {
  int cycle = 0;
  std::array<int, kStages> blocks{};
  double h = 1;
  std::int64_t steps = 0;
  double wall_seconds = 0;
  double test_error = 0;
};

struct InterpolationEvent {
  std::int64_t step = 0;
  double wall_seconds = 0;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::vector<CycleSummary> cycles;
  std::vector<InterpolationEvent> interpolations;
  std::vector<std::string> warnings;
  double final_test_error = 0;

  double total_wall_seconds() const {
    double s = 0;
    for (const auto& c : cycles) s += c.wall_seconds;
    return s;
  }
};

template <typename T>
struct TrainResult {
  TrainReport report;
  ResNetModel<T> model;
};

template <typename T>
struct TrainConfig {
  SgdConfig optimizer;
  bool reset_lr = true;
  bool reset_momentum = true;
  std::uint64_t seed = 0;
  std::size_t batch_size = 100;
  std::size_t eval_batch_size = 500;
  data::AugmentConfig augment;
  std::size_t prefetch = 4;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const CycleSummary&, ResNetModel<T>&)> on_cycle_end;
};

/// Test error of `m` on `d` with eval-mode batchnorm.
template <typename T>
double evaluate_error(ResNetModel<T>& m, const data::Dataset& d, const data::AugmentConfig& aug, std::size_t batch_size = 500) {
  if (d.size() == 0) return 0.0;
  std::size_t wrong = 0;
  for (const auto& idx : data::batches(d.size(), batch_size, 0, 0, data::Split::test)) {
    auto b = data::make_batch<T>(d, idx, aug, false, 0, 0, 0);
    Tensor<T> logits = predict(m, b.images);
    wrong += idx.size() - count_correct(logits, b.labels);
  }
  return static_cast<double>(wrong) / static_cast<double>(d.size());
}

namespace detail {

template <typename T>
TrainResult<T> run_cycles(const CycleSchedule& schedule, ResNetModel<T> model, bool interpolate_between,
                          const data::Dataset& train_set, const data::Dataset& test_set, const TrainConfig<T>& cfg) {
  schedule.validate();
  cfg.augment.validate();
  if (train_set.size() < cfg.batch_size)
    throw data::DataError("training set of " + std::to_string(train_set.size()) + " examples is smaller than batch " +
                          std::to_string(cfg.batch_size));
  const auto steps_per_epoch = static_cast<std::int64_t>(train_set.size() / cfg.batch_size);
  const std::int64_t total = schedule.total_steps();
  const std::uint64_t shuffle_seed = data::mix_seed(cfg.seed, 0xDA7A);

  struct Produced {
    data::Batch<T> batch;
    std::int64_t epoch;
  };
  std::int64_t cached_epoch = -1;
  std::vector<std::vector<std::size_t>> epoch_batches;
  data::Prefetcher<Produced> feed(static_cast<std::size_t>(total), cfg.prefetch, [&](std::size_t step) {
    const auto s = static_cast<std::int64_t>(step);
    const std::int64_t epoch = s / steps_per_epoch;
    if (epoch != cached_epoch) {
      epoch_batches = data::batches(train_set.size(), cfg.batch_size, shuffle_seed, static_cast<std::uint64_t>(epoch),
                                    data::Split::train);
      cached_epoch = epoch;
    }
    const auto pos = static_cast<std::size_t>(s % steps_per_epoch);
    return Produced{data::make_batch<T>(train_set, epoch_batches[pos], cfg.augment, true, shuffle_seed,
                                        static_cast<std::uint64_t>(epoch), pos * cfg.batch_size),
                    epoch};
  });

  TrainReport report;
  report.steps.reserve(static_cast<std::size_t>(total));
  std::int64_t step = 0;
  double wall_total = 0;
  for (std::size_t ci = 0; ci < schedule.cycles.size(); ++ci) {
    const Cycle& cycle = schedule.cycles[ci];
    if (ci > 0) {
      if (interpolate_between) {
        model = interpolate(model, data::mix_seed(cfg.seed, ci), &report.warnings);
        report.interpolations.push_back({step, wall_total});
      }
      if (cfg.reset_momentum)
        for (auto& np : named_params(model)) np.param->reset_momentum();
    }
    auto params = trainable_params(model);
    double wall = 0;
    for (std::int64_t t = 0; t < cycle.steps; ++t, ++step) {
      auto item = feed.next();
      LRState lr_state = cfg.reset_lr ? LRState{t, cycle.steps, cycle.eta_min, cycle.eta_max}
                                      : LRState{step, total, schedule.cycles[0].eta_min, schedule.cycles[0].eta_max};
      const double lr = cosine_lr(lr_state);

      const auto t0 = std::chrono::steady_clock::now();
      Tape<T> tape;
      auto fr = forward(tape, model, tape.constant(std::move(item->batch.images)), Mode::train);
      Var loss = softmax_cross_entropy(tape, fr.logits, std::span<const int>(item->batch.labels));
      const double loss_value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(loss_value)) throw DivergenceError(step, "loss is " + std::to_string(loss_value));
      const std::size_t correct = count_correct(tape.value(fr.logits), item->batch.labels);
      for (auto& np : params) np.param->zero_grad();
      tape.backward(loss);
      try {
        sgd_step(std::span<const NamedParam<T>>(params), lr, cfg.optimizer);
      } catch (const NumericError& e) {
        throw DivergenceError(step, e.what());
      }
      wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      StepRecord rec{step, item->epoch, static_cast<int>(ci) + 1, lr, loss_value,
                     static_cast<double>(correct) / static_cast<double>(item->batch.labels.size())};
      report.steps.push_back(rec);
      if (cfg.on_step) cfg.on_step(rec);
    }
    wall_total += wall;
    CycleSummary summary{static_cast<int>(ci) + 1, model.spec.blocks_per_stage, model.spec.step_size, cycle.steps, wall,
                         evaluate_error(model, test_set, cfg.augment, cfg.eval_batch_size)};
    report.cycles.push_back(summary);
    if (cfg.on_cycle_end) cfg.on_cycle_end(summary, model);
  }
  report.final_test_error = report.cycles.back().test_error;
  return {std::move(report), std::move(model)};
}

inline ResNetSpec spec_for_cycle(ResNetSpec base, const Cycle& c) {
  base.blocks_per_stage = c.blocks;
  if (base.step_size_mode == StepSizeMode::explicit_h) base.step_size = c.h;
  return base;
}

}  // namespace detail

/// Multi-level training. `base` supplies geometry, widths and class count;
/// depth and h come from the schedule's first cycle.
template <typename T>
TrainResult<T> train(const CycleSchedule& schedule, const data::Dataset& train_set, const data::Dataset& test_set,
                     const ResNetSpec& base, const TrainConfig<T>& cfg) {
  if (schedule.cycles.size() > 1 && base.step_size_mode != StepSizeMode::explicit_h)
    throw std::invalid_argument("multi-level training needs explicit step-size mode");
  schedule.validate();
  auto model = build_model<T>(detail::spec_for_cycle(base, schedule.cycles.front()), cfg.seed);
  return detail::run_cycles(schedule, std::move(model), true, train_set, test_set, cfg);
}

enum class BaselineMode { first_cycle, last_cycle };

inline BaselineMode parse_baseline_mode(const std::string& s) {
  if (s == "first_cycle") return BaselineMode::first_cycle;
  if (s == "last_cycle") return BaselineMode::last_cycle;
  throw std::invalid_argument("baseline mode must be 'first_cycle' or 'last_cycle', got '" + s + "'");
}

inline const char* to_string(BaselineMode m) { return m == BaselineMode::first_cycle ? "first_cycle" : "last_cycle"; }

/// Fixed-depth comparison run: the first or last cycle's architecture trained
/// for the whole step budget with the same learning-rate restarts.
template <typename T>
TrainResult<T> baseline_train(BaselineMode mode, const CycleSchedule& schedule, const data::Dataset& train_set,
                              const data::Dataset& test_set, const ResNetSpec& base, const TrainConfig<T>& cfg) {
  schedule.validate();
  const Cycle& arch = mode == BaselineMode::first_cycle ? schedule.cycles.front() : schedule.cycles.back();
  auto model = build_model<T>(detail::spec_for_cycle(base, arch), cfg.seed);
  return detail::run_cycles(schedule, std::move(model), false, train_set, test_set, cfg);
}

}  // namespace odenet
