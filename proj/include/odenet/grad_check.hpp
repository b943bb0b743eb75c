#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "odenet/optim.hpp"
#include "odenet/resnet.hpp"

namespace odenet {

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t elements_checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares backprop gradients of every trainable parameter element against
/// central finite differences. `loss_fn` must build a fresh computation on the
/// given tape and return the scalar loss; it is called 2*elements+1 times.
template <typename LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, const std::vector<NamedParam<double>>& params, double step = 1e-5) {
  for (const auto& np : params) np.param->zero_grad();
  {
    Tape<double> tape;
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape<double> tape;
    Var loss = loss_fn(tape);
    return tape.value(loss)[0];
  };

  GradCheckReport report;
  for (const auto& np : params) {
    Parameter<double>& p = *np.param;
    if (!p.trainable) continue;
    const Tensor<double> analytic = p.grad;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double up = eval();
      p.value[i] = orig - step;
      const double down = eval();
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double err = relative_error(analytic[i], numeric);
      ++report.elements_checked;
      if (err > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) {
          report.worst_param = np.name;
          report.worst_index = i;
          report.worst_analytic = analytic[i];
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

/// Spec used by the model-level gradient check: 1-1-1 blocks, 4-8-16 filters,
/// 4x4 inputs.
inline ResNetSpec micro_spec() {
  ResNetSpec s;
  s.blocks_per_stage = {1, 1, 1};
  s.base_filters = {4, 8, 16};
  s.input_channels = 2;
  s.input_hw = 4;
  s.num_classes = 3;
  return s;
}

/// Full-model check: train-mode forward on a random batch, mean cross-entropy.
/// On the micro spec the last stage is 1x1, so its batch norms see only
/// `batch` values per channel.
inline GradCheckReport model_grad_check(const ResNetSpec& spec, std::uint64_t seed, std::size_t batch = 4,
                                        double step = 1e-5) {
  auto model = build_model<double>(spec, seed);
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto c = static_cast<std::size_t>(spec.input_channels), hw = static_cast<std::size_t>(spec.input_hw);
  Tensor<double> x(Shape{batch, c, hw, hw});
  for (auto& v : x.values()) v = nd(rng);
  for (auto& np : named_params(model))
    if (np.param->trainable && np.name.find("bn") != std::string::npos)
      for (auto& v : np.param->value.values()) v += 0.1 * nd(rng);
  std::vector<int> labels(batch);
  for (std::size_t n = 0; n < batch; ++n) labels[n] = static_cast<int>(n % static_cast<std::size_t>(spec.num_classes));
  auto loss_fn = [&](Tape<double>& tape) {
    auto r = forward(tape, model, tape.constant(x), Mode::train);
    return softmax_cross_entropy(tape, r.logits, std::span<const int>(labels));
  };
  return grad_check(loss_fn, trainable_params(model), step);
}

}  // namespace odenet
