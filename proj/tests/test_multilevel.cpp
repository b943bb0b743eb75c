#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "odenet/odenet.hpp"
#include "oracles.hpp"

using namespace odenet;

namespace {

ResNetSpec tiny_spec(std::array<int, 3> blocks = {2, 2, 2}) {
  ResNetSpec s;
  s.blocks_per_stage = blocks;
  s.base_filters = {4, 8, 8};
  s.input_hw = 8;
  return s;
}

Tensor<double> random_batch(std::size_t n, const ResNetSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Tensor<double> x(Shape{n, static_cast<std::size_t>(s.input_channels), static_cast<std::size_t>(s.input_hw),
                         static_cast<std::size_t>(s.input_hw)});
  for (auto& v : x.values()) v = nd(rng);
  return x;
}

/// Distinct momentum buffers so resets are observable.
template <typename T>
void fill_momentum(ResNetModel<T>& m) {
  for (auto& np : named_params(m)) {
    np.param->reset_momentum();
    np.param->momentum.fill(T(0.5));
    np.param->grad = np.param->value;
  }
}

double rel_l2(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

struct TinyData {
  data::Dataset train = data::make_synthetic(40, 3, 8, 10, 11);
  data::Dataset test = data::make_synthetic(20, 3, 8, 10, 12, data::Split::test);
};

TrainConfig<float> tiny_cfg() {
  TrainConfig<float> cfg;
  cfg.batch_size = 10;
  cfg.eval_batch_size = 10;
  cfg.augment.pad = 1;
  cfg.seed = 5;
  cfg.prefetch = 2;
  return cfg;
}

}  // namespace

TEST(CosineLR, EndpointsAreExact) {
  EXPECT_EQ(cosine_lr({0, 1000, 0.001, 0.5}), 0.5);
  EXPECT_EQ(cosine_lr({1000, 1000, 0.001, 0.5}), 0.001);
  EXPECT_EQ(cosine_lr({0, 1, 0.001, 0.5}), 0.5);
  EXPECT_EQ(cosine_lr({1, 1, 0.001, 0.5}), 0.001);
}

TEST(CosineLR, MidpointIsMeanOfBounds) {
  EXPECT_NEAR(cosine_lr({500, 1000, 0.001, 0.5}), 0.2505, 1e-12);
  EXPECT_NEAR(cosine_lr({3, 6, 0.1, 0.3}), 0.2, 1e-12);
}

TEST(CosineLR, MonotoneWithinRange) {
  double prev = cosine_lr({0, 1000, 0.001, 0.5});
  for (std::int64_t t = 1; t <= 1000; ++t) {
    const double lr = cosine_lr({t, 1000, 0.001, 0.5});
    EXPECT_LE(lr, prev) << t;
    EXPECT_GE(lr, 0.001);
    EXPECT_LE(lr, 0.5);
    prev = lr;
  }
}

TEST(CosineLR, InvalidStatesThrow) {
  EXPECT_THROW(cosine_lr({0, 0, 0.001, 0.5}), std::invalid_argument);
  EXPECT_THROW(cosine_lr({5, 4, 0.001, 0.5}), std::invalid_argument);
  EXPECT_THROW(cosine_lr({-1, 4, 0.001, 0.5}), std::invalid_argument);
}

TEST(TimeSaved, PublishedPercentages) {
  const int expected[] = {25, 42, 53, 61, 67};
  for (int k = 1; k <= 5; ++k) EXPECT_EQ(std::lround(100 * theoretical_time_saved(k).value()), expected[k - 1]) << k;
}

TEST(TimeSaved, ExactFractions) {
  EXPECT_EQ(theoretical_time_saved(0).num, 0u);
  auto f1 = theoretical_time_saved(1);
  EXPECT_EQ(f1.num, 1u);
  EXPECT_EQ(f1.den, 4u);
  auto f2 = theoretical_time_saved(2);
  EXPECT_EQ(f2.num, 5u);
  EXPECT_EQ(f2.den, 12u);
  auto f5 = theoretical_time_saved(5);
  EXPECT_EQ(f5.num * 192, f5.den * 129);
  for (int k = 0; k <= 20; ++k)
    EXPECT_NEAR(theoretical_time_saved(k).value(), static_cast<double>(oracle::time_saved(k)), 1e-15) << k;
  EXPECT_THROW(theoretical_time_saved(-1), std::invalid_argument);
}

TEST(TimeSaved, IncreasingWithDiminishingReturns) {
  for (int k = 0; k < 10; ++k) {
    const double a = theoretical_time_saved(k).value(), b = theoretical_time_saved(k + 1).value();
    const double c = theoretical_time_saved(k + 2).value();
    EXPECT_LT(a, b);
    EXPECT_LT(c - b, b - a) << k;
  }
}

TEST(PlanSchedule, PublishedThreeCycleLayout) {
  auto s = plan_schedule({2, 2, 2}, 2, 300, EqualSplit{});
  ASSERT_EQ(s.cycles.size(), 3u);
  EXPECT_EQ(s.cycles[0].blocks, (std::array<int, 3>{2, 2, 2}));
  EXPECT_EQ(s.cycles[1].blocks, (std::array<int, 3>{4, 4, 4}));
  EXPECT_EQ(s.cycles[2].blocks, (std::array<int, 3>{8, 8, 8}));
  EXPECT_EQ(s.cycles[0].h, 1.0);
  EXPECT_EQ(s.cycles[1].h, 0.5);
  EXPECT_EQ(s.cycles[2].h, 0.25);
  EXPECT_EQ(s.interpolations(), 2);
  EXPECT_NEAR(1 - s.relative_cost(), theoretical_time_saved(2).value(), 1e-12);
}

TEST(PlanSchedule, EqualSplitArithmetic) {
  auto s = plan_schedule({1, 1, 1}, 1, 10, EqualSplit{});
  EXPECT_EQ(s.cycles[0].steps, 5);
  EXPECT_EQ(s.cycles[1].steps, 5);
  for (std::int64_t total : {3, 7, 100, 1001}) {
    auto p = plan_schedule({1, 1, 1}, 2, total, EqualSplit{});
    EXPECT_EQ(p.total_steps(), total);
    for (const auto& c : p.cycles) EXPECT_LE(std::abs(static_cast<double>(c.steps) - total / 3.0), 1.0 + 1e-9);
    EXPECT_GE(p.cycles.back().steps, p.cycles.front().steps);
  }
}

TEST(PlanSchedule, SingleCycleAndErrors) {
  auto s = plan_schedule({2, 2, 2}, 0, 50, EqualSplit{});
  ASSERT_EQ(s.cycles.size(), 1u);
  EXPECT_EQ(s.cycles[0].steps, 50);
  EXPECT_EQ(s.relative_cost(), 1.0);
  EXPECT_THROW(plan_schedule({2, 2, 2}, -1, 50, EqualSplit{}), std::invalid_argument);
  EXPECT_THROW(plan_schedule({2, 2, 2}, 2, 2, EqualSplit{}), std::invalid_argument);
  EXPECT_THROW(plan_schedule({2, 2, 2}, 1, 10, ExplicitSplit{{10}}), std::invalid_argument);
  EXPECT_THROW(plan_schedule({2, 2, 2}, 1, 10, ExplicitSplit{{10, 0}}), std::invalid_argument);
}

TEST(PlanSchedule, EpochBoundaries) {
  auto split = split_at_epochs(160, {60, 110}, 500);
  EXPECT_EQ(split.steps, (std::vector<std::int64_t>{30000, 25000, 25000}));
  auto s = plan_schedule({2, 2, 2}, 2, 0, split, 0.001, 0.5, 1.0);
  EXPECT_EQ(s.total_steps(), 80000);
  EXPECT_THROW(split_at_epochs(160, {110, 60}, 500), std::invalid_argument);
  EXPECT_THROW(split_at_epochs(160, {160}, 500), std::invalid_argument);
}

TEST(Interpolate, StageLayoutAndCopies) {
  auto m = build_model<double>(tiny_spec({3, 3, 3}), 1);
  fill_momentum(m);
  auto out = interpolate(m);
  EXPECT_EQ(out.spec.blocks_per_stage, (std::array<int, 3>{6, 6, 6}));
  EXPECT_EQ(out.spec.step_size, 0.5);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& o = m.stages[s];
    const auto& n = out.stages[s];
    ASSERT_EQ(n.size(), 6u);
    // old block m at 2m-1 (1-based)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_TRUE(same_block_params(n[2 * j], o[j])) << s << "," << j;
    EXPECT_TRUE(same_block_params(n[3], n[2]));
    EXPECT_TRUE(same_block_params(n[5], n[4]));
    EXPECT_TRUE(same_block_params(n[1], n[2]));
    EXPECT_FALSE(n[1].is_downsampling());
    for (std::size_t j : {1u, 3u, 5u}) {
      EXPECT_EQ(l2_norm(n[j].conv1.momentum), 0.0);
      EXPECT_EQ(l2_norm(n[j].conv2.grad), 0.0);
    }
  }
}

TEST(Interpolate, DoubleInterpolationQuadruplesBlocks) {
  auto m = build_model<double>(tiny_spec({2, 1, 3}), 2);
  auto twice = interpolate(interpolate(m));
  EXPECT_EQ(twice.spec.blocks_per_stage, (std::array<int, 3>{8, 4, 12}));
  EXPECT_EQ(twice.total_blocks(), 24);
  EXPECT_EQ(twice.spec.step_size, 0.25);
  EXPECT_EQ(twice.stages.size(), 3u);
  EXPECT_NO_THROW(predict(twice, random_batch(2, twice.spec, 1)));
}

TEST(Interpolate, SingleBlockDownsamplingStageWarns) {
  auto m = build_model<double>(tiny_spec({1, 1, 1}), 3);
  std::vector<std::string> warnings;
  auto out = interpolate(m, 9, &warnings);
  EXPECT_EQ(warnings.size(), 2u);
  EXPECT_TRUE(same_block_params(out.stages[0][1], out.stages[0][0]));
  EXPECT_FALSE(out.stages[1][1].is_downsampling());
  EXPECT_EQ(out.stages[1][1].in_channels, 8u);
  EXPECT_NO_THROW(predict(out, random_batch(2, out.spec, 1)));
}

TEST(Interpolate, RejectsImplicitModels) {
  auto s = tiny_spec();
  s.step_size_mode = StepSizeMode::implicit_h;
  auto m = build_model<double>(s, 0);
  EXPECT_THROW(interpolate(m), std::invalid_argument);
}

TEST(Interpolate, ZeroResidualLogitsAreIdentical) {
  auto m = build_model<double>(tiny_spec(), 4);
  zero_residual_kernels(m);
  auto x = random_batch(3, m.spec, 2);
  auto out = interpolate(m);
  EXPECT_EQ(predict(out, x), predict(m, x));
}

TEST(Interpolate, SmallResidualsChangeLogitsAtSecondOrder) {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    auto m = build_model<double>(tiny_spec(), seed);
    scale_residual_kernels(m, 1e-3);
    auto x = random_batch(4, m.spec, seed);
    auto fine = interpolate(m);
    const double err = rel_l2(predict(fine, x), predict(m, x));
    EXPECT_LT(err, 1e-4) << seed;
  }
}

TEST(Train, OneStepRunsOneUpdate) {
  TinyData d;
  auto cfg = tiny_cfg();
  auto schedule = plan_schedule({1, 1, 1}, 0, 1, EqualSplit{});
  auto before = build_model<float>(detail::spec_for_cycle(tiny_spec(), schedule.cycles[0]), cfg.seed);
  auto r = train<float>(schedule, d.train, d.test, tiny_spec(), cfg);
  ASSERT_EQ(r.report.steps.size(), 1u);
  EXPECT_EQ(r.report.steps[0].lr, 0.5);
  EXPECT_EQ(r.report.cycles.size(), 1u);
  EXPECT_GT(r.report.cycles[0].wall_seconds, 0.0);
  EXPECT_FALSE(before.initial_conv.same_value(r.model.initial_conv));
}

TEST(Train, ReportShapeAndInterpolations) {
  TinyData d;
  auto cfg = tiny_cfg();
  std::vector<int> seen_cycles;
  cfg.on_cycle_end = [&](const CycleSummary& c, ResNetModel<float>& m) {
    seen_cycles.push_back(c.cycle);
    EXPECT_EQ(m.spec.blocks_per_stage, c.blocks);
  };
  auto schedule = plan_schedule({1, 1, 1}, 2, 9, EqualSplit{});
  auto r = train<float>(schedule, d.train, d.test, tiny_spec(), cfg);
  EXPECT_EQ(r.report.steps.size(), 9u);
  EXPECT_EQ(r.report.interpolations.size(), 2u);
  EXPECT_EQ(r.report.interpolations[0].step, 3);
  EXPECT_EQ(seen_cycles, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(r.model.spec.blocks_per_stage, (std::array<int, 3>{4, 4, 4}));
  EXPECT_EQ(r.model.spec.step_size, 0.25);
  for (const auto& c : r.report.cycles) EXPECT_GT(c.wall_seconds, 0.0);
  // learning rate restarts each cycle; epochs advance every 4 steps
  EXPECT_EQ(r.report.steps[3].lr, 0.5);
  EXPECT_EQ(r.report.steps[6].lr, 0.5);
  EXPECT_EQ(r.report.steps[4].epoch, 1);
  EXPECT_EQ(r.report.warnings.size(), 2u);
}

TEST(Train, WithoutRestartsOneCosineSpansAllSteps) {
  TinyData d;
  auto cfg = tiny_cfg();
  cfg.reset_lr = false;
  auto schedule = plan_schedule({1, 1, 1}, 1, 6, EqualSplit{});
  auto r = train<float>(schedule, d.train, d.test, tiny_spec(), cfg);
  for (std::int64_t t = 0; t < 6; ++t) EXPECT_EQ(r.report.steps[t].lr, cosine_lr({t, 6, 0.001, 0.5}));
}

TEST(Train, SameSeedGivesIdenticalLosses) {
  TinyData d;
  auto schedule = plan_schedule({1, 1, 1}, 1, 6, EqualSplit{});
  auto a = train<float>(schedule, d.train, d.test, tiny_spec(), tiny_cfg());
  auto b = train<float>(schedule, d.train, d.test, tiny_spec(), tiny_cfg());
  ASSERT_EQ(a.report.steps.size(), b.report.steps.size());
  for (std::size_t i = 0; i < a.report.steps.size(); ++i) {
    EXPECT_EQ(a.report.steps[i].train_loss, b.report.steps[i].train_loss);
    EXPECT_EQ(a.report.steps[i].train_acc, b.report.steps[i].train_acc);
  }
  EXPECT_EQ(a.report.final_test_error, b.report.final_test_error);
}

TEST(Train, DivergenceNamesTheStep) {
  TinyData d;
  auto cfg = tiny_cfg();
  auto schedule = plan_schedule({1, 1, 1}, 0, 8, EqualSplit{}, 1e5, 1e9);
  try {
    train<float>(schedule, d.train, d.test, tiny_spec(), cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos);
  }
}

TEST(Train, SmallTrainingSetIsAnError) {
  TinyData d;
  auto cfg = tiny_cfg();
  cfg.batch_size = 100;
  EXPECT_THROW(train<float>(plan_schedule({1, 1, 1}, 0, 1, EqualSplit{}), d.train, d.test, tiny_spec(), cfg),
               data::DataError);
}

TEST(Baseline, ModeStrings) {
  EXPECT_EQ(parse_baseline_mode("first_cycle"), BaselineMode::first_cycle);
  EXPECT_EQ(parse_baseline_mode("last_cycle"), BaselineMode::last_cycle);
  EXPECT_STREQ(to_string(BaselineMode::last_cycle), "last_cycle");
  EXPECT_THROW(parse_baseline_mode("middle"), std::invalid_argument);
}

TEST(Baseline, FixedArchitectureWithRestarts) {
  TinyData d;
  auto schedule = plan_schedule({1, 1, 1}, 2, 6, EqualSplit{});
  auto last = baseline_train<float>(BaselineMode::last_cycle, schedule, d.train, d.test, tiny_spec(), tiny_cfg());
  EXPECT_EQ(last.model.spec.blocks_per_stage, (std::array<int, 3>{4, 4, 4}));
  EXPECT_EQ(last.model.spec.step_size, 0.25);
  EXPECT_TRUE(last.report.interpolations.empty());
  EXPECT_EQ(last.report.steps[2].lr, 0.5);
  auto first = baseline_train<float>(BaselineMode::first_cycle, schedule, d.train, d.test, tiny_spec(), tiny_cfg());
  EXPECT_EQ(first.model.spec.blocks_per_stage, (std::array<int, 3>{1, 1, 1}));
  EXPECT_EQ(first.model.spec.step_size, 1.0);
  for (const auto& c : first.report.cycles) EXPECT_EQ(c.blocks, (std::array<int, 3>{1, 1, 1}));
}
