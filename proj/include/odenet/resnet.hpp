#pragma once

// Pre-activation ResNet with an explicit Euler step size on every residual
// branch: Y_{j+1} = shortcut(Y_j) + h * F(Y_j).

#include <array>
#include <cmath>
#include <cstdint>
#include <algorithm>
#include <optional>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "odenet/autodiff.hpp"
#include "odenet/optim.hpp"

namespace odenet {

inline constexpr std::size_t kStages = 3;

enum class StepSizeMode { implicit_h, explicit_h };

inline const char* to_string(StepSizeMode m) { return m == StepSizeMode::implicit_h ? "implicit" : "explicit"; }

inline StepSizeMode parse_step_size_mode(const std::string& s) {
  if (s == "implicit") return StepSizeMode::implicit_h;
  if (s == "explicit") return StepSizeMode::explicit_h;
  throw std::invalid_argument("step_size_mode must be 'implicit' or 'explicit', got '" + s + "'");
}

struct ResNetSpec {
  std::array<int, kStages> blocks_per_stage{2, 2, 2};
  std::array<int, kStages> base_filters{16, 32, 64};
  int width_multiplier = 1;
  double step_size = 1.0;
  StepSizeMode step_size_mode = StepSizeMode::explicit_h;
  int input_channels = 3;
  int input_hw = 32;
  int num_classes = 10;

  std::size_t width(std::size_t stage) const {
    return static_cast<std::size_t>(base_filters[stage] * width_multiplier);
  }
  int total_blocks() const { return blocks_per_stage[0] + blocks_per_stage[1] + blocks_per_stage[2]; }
  /// The multiplier actually applied to residual branches (1 in implicit mode).
  double effective_h() const { return step_size_mode == StepSizeMode::explicit_h ? step_size : 1.0; }

  void validate() const {
    for (std::size_t s = 0; s < kStages; ++s) {
      if (blocks_per_stage[s] < 1)
        throw std::invalid_argument("blocks_per_stage[" + std::to_string(s) + "] must be >= 1");
      if (base_filters[s] < 1) throw std::invalid_argument("base_filters entries must be >= 1");
    }
    if (width_multiplier < 1) throw std::invalid_argument("width_multiplier must be >= 1");
    if (!(step_size > 0)) throw std::invalid_argument("step_size must be positive");
    if (step_size_mode == StepSizeMode::implicit_h && step_size != 1.0)
      throw std::invalid_argument("implicit step-size mode requires step_size = 1");
    if (input_channels < 1 || num_classes < 1) throw std::invalid_argument("input_channels and num_classes must be >= 1");
    if (input_hw < 4 || input_hw % 4 != 0)
      throw std::invalid_argument("input_hw must be a positive multiple of 4 (two downsamplings), got " +
                                  std::to_string(input_hw));
  }

  bool operator==(const ResNetSpec&) const = default;
};

template <typename T>
struct BatchNormParams {
  Parameter<T> gamma, beta, running_mean, running_var;

  BatchNormParams() = default;
  explicit BatchNormParams(std::size_t c)
      : gamma(Tensor<T>(Shape{c}, T(1))),
        beta(Tensor<T>(Shape{c}, T(0))),
        running_mean(Tensor<T>(Shape{c}, T(0)), false),
        running_var(Tensor<T>(Shape{c}, T(1)), false) {}
};

enum class BlockKind {
  residual,
  /// Parameter-free stand-in for a removed downsampling block.
  pool_pad,
};

template <typename T>
struct BlockParams {
  BlockKind kind = BlockKind::residual;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  BatchNormParams<T> bn1, bn2;
  Parameter<T> conv1, conv2;
  std::optional<Parameter<T>> shortcut;

  bool is_downsampling() const { return stride == 2; }
};

template <typename T>
struct ResNetModel {
  ResNetSpec spec;
  BatchNormConfig bn_config;
  Parameter<T> initial_conv;
  std::vector<std::vector<BlockParams<T>>> stages;
  BatchNormParams<T> final_bn;
  Parameter<T> classifier_weight;
  Parameter<T> classifier_bias;

  int total_blocks() const {
    int d = 0;
    for (const auto& s : stages) d += static_cast<int>(s.size());
    return d;
  }
};

namespace detail {

template <typename T>
Parameter<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return Parameter<T>(std::move(t));
}

}  // namespace detail

template <typename T>
BlockParams<T> make_block(std::size_t in_c, std::size_t out_c, std::size_t stride, std::mt19937_64& rng) {
  BlockParams<T> b;
  b.in_channels = in_c;
  b.out_channels = out_c;
  b.stride = stride;
  b.bn1 = BatchNormParams<T>(in_c);
  b.conv1 = detail::he_normal<T>(Shape{out_c, in_c, 3, 3}, in_c * 9, rng);
  b.bn2 = BatchNormParams<T>(out_c);
  b.conv2 = detail::he_normal<T>(Shape{out_c, out_c, 3, 3}, out_c * 9, rng);
  if (stride != 1 || in_c != out_c) b.shortcut = detail::he_normal<T>(Shape{out_c, in_c, 1, 1}, in_c, rng);
  return b;
}

/// Deterministic in `seed`. Stage 1's first block keeps the initial conv's
/// width; the first blocks of stages 2 and 3 halve H,W and change width.
template <typename T>
ResNetModel<T> build_model(const ResNetSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ResNetModel<T> m;
  m.spec = spec;
  const auto cin = static_cast<std::size_t>(spec.input_channels);
  m.initial_conv = detail::he_normal<T>(Shape{spec.width(0), cin, 3, 3}, cin * 9, rng);
  m.stages.resize(kStages);
  std::size_t prev = spec.width(0);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t w = spec.width(s);
    for (int j = 0; j < spec.blocks_per_stage[s]; ++j) {
      const bool first = j == 0;
      const std::size_t stride = (first && s > 0) ? 2 : 1;
      m.stages[s].push_back(make_block<T>(first ? prev : w, w, stride, rng));
    }
    prev = w;
  }
  m.final_bn = BatchNormParams<T>(prev);
  const auto classes = static_cast<std::size_t>(spec.num_classes);
  m.classifier_weight = detail::he_normal<T>(Shape{classes, prev}, prev, rng, 1.0);
  m.classifier_bias = Parameter<T>(Tensor<T>(Shape{classes}));
  return m;
}

/// Trainable parameter count from shapes alone: convolutions, batchnorm
/// gamma/beta, projection shortcuts and the classifier.
inline std::size_t count_params(const ResNetSpec& spec) {
  spec.validate();
  const auto cin = static_cast<std::size_t>(spec.input_channels);
  std::size_t total = spec.width(0) * cin * 9;
  std::size_t prev = spec.width(0);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t w = spec.width(s);
    for (int j = 0; j < spec.blocks_per_stage[s]; ++j) {
      const std::size_t in = j == 0 ? prev : w;
      const bool projected = j == 0 && (s > 0 || in != w);
      total += 2 * in + in * w * 9 + 2 * w + w * w * 9;
      if (projected) total += in * w;
    }
    prev = w;
  }
  total += 2 * prev;
  total += static_cast<std::size_t>(spec.num_classes) * (prev + 1);
  return total;
}

/// Every parameter with a hierarchical name, including non-trainable
/// batchnorm running statistics.
template <typename T>
std::vector<NamedParam<T>> named_params(ResNetModel<T>& m) {
  std::vector<NamedParam<T>> out;
  auto bn = [&out](const std::string& p, BatchNormParams<T>& b) {
    out.push_back({p + ".gamma", &b.gamma});
    out.push_back({p + ".beta", &b.beta});
    out.push_back({p + ".running_mean", &b.running_mean});
    out.push_back({p + ".running_var", &b.running_var});
  };
  out.push_back({"initial_conv", &m.initial_conv});
  for (std::size_t s = 0; s < m.stages.size(); ++s)
    for (std::size_t j = 0; j < m.stages[s].size(); ++j) {
      auto& b = m.stages[s][j];
      if (b.kind != BlockKind::residual) continue;
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(j + 1);
      bn(p + ".bn1", b.bn1);
      out.push_back({p + ".conv1", &b.conv1});
      bn(p + ".bn2", b.bn2);
      out.push_back({p + ".conv2", &b.conv2});
      if (b.shortcut) out.push_back({p + ".shortcut", &*b.shortcut});
    }
  bn("final_bn", m.final_bn);
  out.push_back({"classifier.weight", &m.classifier_weight});
  out.push_back({"classifier.bias", &m.classifier_bias});
  return out;
}

template <typename T>
std::vector<NamedParam<T>> trainable_params(ResNetModel<T>& m) {
  std::vector<NamedParam<T>> out;
  for (auto& np : named_params(m))
    if (np.param->trainable) out.push_back(np);
  return out;
}

template <typename T>
std::size_t trainable_count(ResNetModel<T>& m) {
  std::size_t n = 0;
  for (auto& np : trainable_params(m)) n += np.param->value.size();
  return n;
}

struct BlockOutput {
  Var output;
  /// G(Y) = h F(Y); absent for pool_pad blocks.
  std::optional<Var> residual;
  std::optional<Var> f;
  std::optional<Var> shortcut;
};

/// One residual block. `h` is nullopt in implicit mode (no multiplication).
template <typename T>
BlockOutput block_forward(Tape<T>& tape, Var y, BlockParams<T>& b, std::optional<double> h, Mode mode,
                          const BatchNormConfig& bn = {}) {
  const Tensor<T>& yv = tape.value(y);
  if (yv.rank() != 4 || yv.dim(1) != b.in_channels)
    throw ShapeError("block input " + yv.shape().str() + " does not match block input channels " +
                     std::to_string(b.in_channels));
  if (b.kind == BlockKind::pool_pad) return {pool_pad(tape, y, b.out_channels), std::nullopt, std::nullopt, std::nullopt};
  const double hv = h.value_or(1.0);

  Var a = relu(tape, batchnorm(tape, y, tape.param(b.bn1.gamma), tape.param(b.bn1.beta), b.bn1.running_mean.value,
                               b.bn1.running_var.value, mode, bn));
  Var c1 = conv2d(tape, a, tape.param(b.conv1), b.stride, 1);
  Var a2 = relu(tape, batchnorm(tape, c1, tape.param(b.bn2.gamma), tape.param(b.bn2.beta), b.bn2.running_mean.value,
                                b.bn2.running_var.value, mode, bn));
  Var f = conv2d(tape, a2, tape.param(b.conv2), 1, 1);
  Var g = h ? scale(tape, f, static_cast<T>(hv)) : f;
  Var sc = b.shortcut ? conv2d(tape, y, tape.param(*b.shortcut), b.stride, 0) : y;
  return {add(tape, sc, g), g, f, sc};
}

struct BlockRecord {
  std::size_t stage = 0;
  std::size_t index = 0;
  bool downsampling = false;
  double norm_y = 0;
  double norm_g = 0;
  double norm_f = 0;
};

struct BlockTrace {
  std::size_t stage = 0;
  std::size_t index = 0;
  Var input;
  BlockOutput out;
};

struct ForwardResult {
  Var logits;
  std::vector<BlockRecord> records;
  std::vector<BlockTrace> trace;
  std::array<Var, kStages> stage_outputs{};
};

/// Full network: initial conv -> residual stages -> BN -> ReLU -> global pool
/// -> linear. Records batch-mean L2 norms of Y_j, G(Y_j) and F(Y_j).
template <typename T>
ForwardResult forward(Tape<T>& tape, ResNetModel<T>& m, Var input, Mode mode) {
  const Tensor<T>& x = tape.value(input);
  const auto& spec = m.spec;
  if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(spec.input_channels) ||
      x.dim(2) != static_cast<std::size_t>(spec.input_hw) || x.dim(3) != static_cast<std::size_t>(spec.input_hw))
    throw ShapeError("input batch " + x.shape().str() + " does not match model geometry (N," +
                     std::to_string(spec.input_channels) + "," + std::to_string(spec.input_hw) + "," +
                     std::to_string(spec.input_hw) + ")");
  const bool scaled = spec.step_size_mode == StepSizeMode::explicit_h;

  ForwardResult r;
  Var y = conv2d(tape, input, tape.param(m.initial_conv), 1, 1);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    for (std::size_t j = 0; j < m.stages[s].size(); ++j) {
      BlockOutput out;
      try {
        out = scaled ? block_forward(tape, y, m.stages[s][j], spec.step_size, mode, m.bn_config)
                     : block_forward(tape, y, m.stages[s][j], std::nullopt, mode, m.bn_config);
      } catch (const ShapeError& e) {
        throw ShapeError("stage " + std::to_string(s + 1) + " block " + std::to_string(j + 1) + ": " + e.what());
      }
      BlockRecord rec{s, j, m.stages[s][j].is_downsampling(), batch_mean_l2(tape.value(y)), 0, 0};
      if (out.residual) {
        rec.norm_g = batch_mean_l2(tape.value(*out.residual));
        rec.norm_f = batch_mean_l2(tape.value(*out.f));
      }
      r.records.push_back(rec);
      r.trace.push_back({s, j, y, out});
      y = out.output;
    }
    r.stage_outputs[s] = y;
  }
  Var z = relu(tape, batchnorm(tape, y, tape.param(m.final_bn.gamma), tape.param(m.final_bn.beta),
                               m.final_bn.running_mean.value, m.final_bn.running_var.value, mode, m.bn_config));
  r.logits = linear(tape, global_avg_pool(tape, z), tape.param(m.classifier_weight), tape.param(m.classifier_bias));
  return r;
}

/// Eval-mode logits for a batch; does not touch running statistics.
template <typename T>
Tensor<T> predict(ResNetModel<T>& m, const Tensor<T>& batch) {
  Tape<T> tape;
  auto r = forward(tape, m, tape.constant(batch), Mode::eval);
  return tape.value(r.logits);
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  std::size_t ok = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data() + n * C;
    const auto best = static_cast<int>(std::max_element(row, row + C) - row);
    if (best == labels[n]) ++ok;
  }
  return ok;
}

/// Zeroes conv1/conv2 of every residual block, making each block's residual
/// branch identically zero.
template <typename T>
void zero_residual_kernels(ResNetModel<T>& m) {
  for (auto& st : m.stages)
    for (auto& b : st) {
      if (b.kind != BlockKind::residual) continue;
      b.conv1.value.fill(T(0));
      b.conv2.value.fill(T(0));
    }
}

template <typename T>
void scale_residual_kernels(ResNetModel<T>& m, T eps) {
  for (auto& st : m.stages)
    for (auto& b : st) {
      if (b.kind != BlockKind::residual) continue;
      for (auto& v : b.conv1.value.values()) v *= eps;
      for (auto& v : b.conv2.value.values()) v *= eps;
    }
}

template <typename T>
bool same_block_params(const BlockParams<T>& a, const BlockParams<T>& b) {
  auto bn_eq = [](const BatchNormParams<T>& x, const BatchNormParams<T>& y) {
    return x.gamma.same_value(y.gamma) && x.beta.same_value(y.beta) && x.running_mean.same_value(y.running_mean) &&
           x.running_var.same_value(y.running_var);
  };
  if (a.kind != b.kind || a.in_channels != b.in_channels || a.out_channels != b.out_channels || a.stride != b.stride)
    return false;
  if (a.kind == BlockKind::pool_pad) return true;
  if (a.shortcut.has_value() != b.shortcut.has_value()) return false;
  if (a.shortcut && !a.shortcut->same_value(*b.shortcut)) return false;
  return bn_eq(a.bn1, b.bn1) && bn_eq(a.bn2, b.bn2) && a.conv1.same_value(b.conv1) && a.conv2.same_value(b.conv2);
}

}  // namespace odenet
