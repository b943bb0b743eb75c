#pragma once

// Norm profiles, block removal and shuffling, and cross-depth F-norm curves.
// Every operation works on copies; the input model is never modified.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "odenet/multilevel.hpp"
#include "odenet/resnet.hpp"

namespace odenet {

// ---------------------------------------------------------------------------
// Norm profile

struct NormEntry {
  std::size_t stage = 0;
  std::size_t index = 0;
  bool downsampling = false;
  double norm_y = 0;
  double norm_g = 0;
  double norm_f = 0;

  double ratio() const { return norm_y > 0 ? norm_g / norm_y : 0.0; }
};

struct NormProfile {
  std::vector<NormEntry> entries;
  /// Mean of norm_g over all residual blocks.
  double gamma = 0;
  int d = 0;
  double h = 1;
};

/// Example-weighted averages of the batch-mean norms recorded by an eval-mode
/// forward pass over each batch.
template <typename T>
NormProfile profile_norms(const ResNetModel<T>& model, const std::vector<Tensor<T>>& batches) {
  if (batches.empty()) throw std::invalid_argument("profile_norms needs at least one batch");
  ResNetModel<T> m = model;
  NormProfile p;
  p.h = m.spec.effective_h();
  std::size_t seen = 0;
  for (const auto& b : batches) {
    Tape<T> tape;
    auto r = forward(tape, m, tape.constant(b), Mode::eval);
    const double w = static_cast<double>(b.dim(0));
    if (p.entries.empty())
      for (const auto& rec : r.records) p.entries.push_back({rec.stage, rec.index, rec.downsampling, 0, 0, 0});
    for (std::size_t i = 0; i < r.records.size(); ++i) {
      p.entries[i].norm_y += w * r.records[i].norm_y;
      p.entries[i].norm_g += w * r.records[i].norm_g;
      p.entries[i].norm_f += w * r.records[i].norm_f;
    }
    seen += b.dim(0);
  }
  double sum_g = 0;
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    auto& e = p.entries[i];
    e.norm_y /= static_cast<double>(seen);
    e.norm_g /= static_cast<double>(seen);
    e.norm_f /= static_cast<double>(seen);
    const auto& blk = m.stages[e.stage][e.index];
    if (blk.kind != BlockKind::residual) continue;
    sum_g += e.norm_g;
    ++p.d;
  }
  p.gamma = p.d > 0 ? sum_g / p.d : 0.0;
  return p;
}

/// Least-squares fit gamma = a / d + b with its coefficient of determination.
struct ReciprocalFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

inline ReciprocalFit reciprocal_fit(const std::vector<int>& depths, const std::vector<double>& gammas) {
  if (depths.size() != gammas.size() || depths.size() < 2)
    throw std::invalid_argument("reciprocal_fit needs at least two (d, gamma) pairs");
  const auto n = static_cast<double>(depths.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    mx += 1.0 / depths[i];
    my += gammas[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    const double dx = 1.0 / depths[i] - mx, dy = gammas[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0) throw std::invalid_argument("reciprocal_fit needs at least two distinct depths");
  ReciprocalFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    const double e = gammas[i] - (f.slope / depths[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

// ---------------------------------------------------------------------------
// Structural lesions

class LesionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
template <typename T>
void check_stage(const ResNetModel<T>& m, std::size_t stage) {
  if (stage >= m.stages.size())
    throw LesionError("stage " + std::to_string(stage) + " out of range [0, " + std::to_string(m.stages.size()) + ")");
}
}  // namespace detail

/// Deletes block `index` (0-based) of `stage`, keeping h. The first block of a
/// stage is refused unless `force`; a forced removal of a downsampling block
/// leaves a parameter-free average-pool + zero-pad block in its place.
template <typename T>
ResNetModel<T> remove_block(const ResNetModel<T>& model, std::size_t stage, std::size_t index, bool force = false) {
  detail::check_stage(model, stage);
  const auto& blocks = model.stages[stage];
  if (index >= blocks.size())
    throw LesionError("block " + std::to_string(index) + " out of range for stage " + std::to_string(stage) + " with " +
                      std::to_string(blocks.size()) + " blocks");
  if (index == 0 && !force)
    throw LesionError("refusing to remove the first block of stage " + std::to_string(stage) + " without force");
  ResNetModel<T> m = model;
  auto& st = m.stages[stage];
  const auto& victim = st[index];
  if (victim.kind == BlockKind::residual && (victim.is_downsampling() || victim.in_channels != victim.out_channels)) {
    BlockParams<T> pp;
    pp.kind = BlockKind::pool_pad;
    pp.in_channels = victim.in_channels;
    pp.out_channels = victim.out_channels;
    pp.stride = victim.stride;
    st[index] = std::move(pp);
  } else {
    if (st.size() == 1) throw LesionError("removing the only block of stage " + std::to_string(stage));
    st.erase(st.begin() + static_cast<std::ptrdiff_t>(index));
  }
  m.spec.blocks_per_stage[stage] = static_cast<int>(st.size());
  return m;
}

/// Reorders the blocks of `stage` so new position i holds old block perm[i].
template <typename T>
ResNetModel<T> shuffle_blocks(const ResNetModel<T>& model, std::size_t stage, const std::vector<std::size_t>& perm,
                              bool force = false) {
  detail::check_stage(model, stage);
  const auto& blocks = model.stages[stage];
  if (perm.size() != blocks.size())
    throw LesionError("permutation has " + std::to_string(perm.size()) + " entries, stage " + std::to_string(stage) +
                      " has " + std::to_string(blocks.size()) + " blocks");
  std::vector<bool> used(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || used[p]) throw LesionError("not a permutation of 0.." + std::to_string(perm.size() - 1));
    used[p] = true;
  }
  if (!perm.empty() && perm[0] != 0 && !force)
    throw LesionError("permutation moves the first block of stage " + std::to_string(stage) + " without force");
  ResNetModel<T> m = model;
  for (std::size_t i = 0; i < perm.size(); ++i) m.stages[stage][i] = blocks[perm[i]];
  return m;
}

/// Uniform permutation of n positions keeping position 0 fixed.
inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed, bool keep_first = true) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  const std::size_t from = keep_first && n > 0 ? 1 : 0;
  for (std::size_t i = n; i > from + 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(from, i - 1);
    std::swap(p[i - 1], p[pick(rng)]);
  }
  return p;
}

inline std::string permutation_string(const std::vector<std::size_t>& p) {
  std::string s;
  for (std::size_t i = 0; i < p.size(); ++i) s += (i ? " " : "") + std::to_string(p[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Lesion reports

struct LesionRecord {
  std::string intervention;
  double error = 0;
  double delta = 0;
};

struct LesionReport {
  double baseline_error = 0;
  std::vector<LesionRecord> records;

  void add(std::string intervention, double error) {
    records.push_back({std::move(intervention), error, error - baseline_error});
  }
};

inline std::string remove_label(std::size_t stage, std::size_t index) {
  return "remove(stage=" + std::to_string(stage) + ",block=" + std::to_string(index) + ")";
}

inline std::string shuffle_label(std::size_t stage, std::uint64_t seed, const std::vector<std::size_t>& perm) {
  return "shuffle(stage=" + std::to_string(stage) + ",seed=" + std::to_string(seed) + ",perm=" +
         permutation_string(perm) + ")";
}

/// Removes every non-first block one at a time.
template <typename T>
LesionReport removal_sweep(const ResNetModel<T>& model, const data::Dataset& test, const data::AugmentConfig& aug,
                           std::size_t batch_size = 500) {
  LesionReport r;
  ResNetModel<T> base = model;
  r.baseline_error = evaluate_error(base, test, aug, batch_size);
  for (std::size_t s = 0; s < model.stages.size(); ++s)
    for (std::size_t j = 1; j < model.stages[s].size(); ++j) {
      auto m = remove_block(model, s, j);
      r.add(remove_label(s, j), evaluate_error(m, test, aug, batch_size));
    }
  return r;
}

// ---------------------------------------------------------------------------
// F-norm curves over conceptual time

struct FNormPoint {
  std::size_t stage = 0;
  double t = 0;
  double norm_f = 0;
};

struct FNormCurve {
  std::size_t model_id = 0;
  double h = 1;
  std::vector<FNormPoint> points;
};

/// Block j of a stage with n blocks sits at t_j = j h / (n h) = j / n, so
/// curves from models of different depth share the interval [0, 1).
template <typename T>
std::vector<FNormCurve> f_norm_comparison(const std::vector<ResNetModel<T>>& models,
                                          const std::vector<Tensor<T>>& batches) {
  std::vector<FNormCurve> out;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].stages.size() != models.front().stages.size())
      throw std::invalid_argument("f_norm_comparison: model " + std::to_string(i) + " has a different stage count");
    const NormProfile p = profile_norms(models[i], batches);
    FNormCurve c{i, p.h, {}};
    for (const auto& e : p.entries) {
      const double n = static_cast<double>(models[i].stages[e.stage].size());
      c.points.push_back({e.stage, static_cast<double>(e.index) / n, e.norm_f});
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// Value of a curve's stage segment at time t by linear interpolation; nullopt
/// outside the sampled range.
inline std::optional<double> curve_at(const FNormCurve& c, std::size_t stage, double t) {
  const FNormPoint* prev = nullptr;
  for (const auto& p : c.points) {
    if (p.stage != stage) continue;
    if (p.t == t) return p.norm_f;
    if (p.t > t) {
      if (!prev) return std::nullopt;
      const double w = (t - prev->t) / (p.t - prev->t);
      return prev->norm_f + w * (p.norm_f - prev->norm_f);
    }
    prev = &p;
  }
  return std::nullopt;
}

/// Pearson correlation between curve a and curve b sampled at a's points.
inline double curve_correlation(const FNormCurve& a, const FNormCurve& b) {
  std::vector<double> x, y;
  for (const auto& p : a.points)
    if (auto v = curve_at(b, p.stage, p.t)) {
      x.push_back(p.norm_f);
      y.push_back(*v);
    }
  if (x.size() < 2) throw std::invalid_argument("curves share fewer than two time points");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

}  // namespace odenet
