// odenet command-line driver: train, schedule, lesion, profile, fnorm,
// sweep-lr, grad-check.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "odenet/odenet.hpp"

namespace fs = std::filesystem;
using namespace odenet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

std::string blocks_string(const std::array<int, kStages>& b) {
  return std::to_string(b[0]) + "-" + std::to_string(b[1]) + "-" + std::to_string(b[2]);
}

std::array<int, kStages> parse_blocks(const std::string& s) {
  std::array<int, kStages> b{};
  if (std::sscanf(s.c_str(), "%d-%d-%d", &b[0], &b[1], &b[2]) != 3 || b[0] < 1 || b[1] < 1 || b[2] < 1)
    throw ConfigError("blocks must look like 2-2-2, got '" + s + "'");
  return b;
}

void apply_threads(const RunConfig& c) {
  if (c.run.deterministic) set_max_threads(1);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

// ---------------------------------------------------------------------------
// train / sweep-lr

template <typename T>
TrainResult<T> run_training(const RunConfig& cfg, const LoadedData& d, std::optional<BaselineMode> baseline,
                            const fs::path& out_dir, bool write_artifacts) {
  const ResNetSpec spec = spec_for_data(cfg, d.train);
  const CycleSchedule schedule = schedule_for(cfg, d.train.size());
  const std::string hash = config_hash(cfg);

  TrainConfig<T> tc = train_config<T>(cfg, d);

  std::optional<CsvWriter> log, summary;
  if (write_artifacts) {
    fs::create_directories(out_dir);
    write_text(out_dir / "resolved_config.toml", to_text(cfg));
    log.emplace((out_dir / "train_log.csv").string(),
                std::vector<std::string>{"step", "epoch", "cycle", "lr", "train_loss", "train_acc"}, hash);
    summary.emplace((out_dir / "summary.csv").string(),
                    std::vector<std::string>{"cycle", "blocks", "h", "wall_seconds", "test_error"}, hash);
  }
  const std::int64_t total = schedule.total_steps();
  tc.on_step = [&](const StepRecord& r) {
    if (log)
      log->row({std::to_string(r.step), std::to_string(r.epoch), std::to_string(r.cycle), CsvWriter::num(r.lr),
                CsvWriter::num(r.train_loss), CsvWriter::num(r.train_acc)});
    if ((r.step + 1) % 50 == 0 || r.step + 1 == total)
      std::cerr << "step " << r.step + 1 << "/" << total << " cycle " << r.cycle << " lr " << r.lr << " loss "
                << r.train_loss << "\n";
  };
  tc.on_cycle_end = [&](const CycleSummary& s, ResNetModel<T>& m) {
    std::cerr << "cycle " << s.cycle << " (" << blocks_string(s.blocks) << ", h=" << s.h << ") " << s.wall_seconds
              << " s, test error " << s.test_error << "\n";
    if (!summary) return;
    summary->row({std::to_string(s.cycle), blocks_string(s.blocks), CsvWriter::num(s.h), CsvWriter::num(s.wall_seconds),
                  CsvWriter::num(s.test_error)});
    summary->flush();
    if (cfg.run.checkpoints) save_checkpoint(m, out_dir / ("ckpt_cycle" + std::to_string(s.cycle)));
  };

  if (baseline) return baseline_train<T>(*baseline, schedule, d.train, d.test, spec, tc);
  return train<T>(schedule, d.train, d.test, spec, tc);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& baseline_mode) {
  RunConfig cfg = load_config(config_path, overrides);
  apply_threads(cfg);
  std::optional<BaselineMode> baseline;
  if (!baseline_mode.empty()) {
    try {
      baseline = parse_baseline_mode(baseline_mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  const LoadedData d = load_data(cfg.data, cfg.run.seed);
  const fs::path out = cfg.run.output_dir;
  TrainReport report = cfg.run.precision == "f64" ? run_training<double>(cfg, d, baseline, out, true).report
                                                  : run_training<float>(cfg, d, baseline, out, true).report;
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "final_test_error " << report.final_test_error << "\n"
            << "optimizer_wall_seconds " << report.total_wall_seconds() << "\n";
  return kExitOk;
}

int cmd_sweep_lr(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::vector<double>& eta_mins, const std::vector<double>& eta_maxs, const std::string& out_csv) {
  RunConfig base = load_config(config_path, overrides);
  apply_threads(base);
  const LoadedData d = load_data(base.data, base.run.seed);
  CsvWriter csv(out_csv, {"eta_min", "eta_max", "test_error", "test_accuracy"}, config_hash(base));
  for (double lo : eta_mins)
    for (double hi : eta_maxs) {
      RunConfig c = base;
      c.schedule.eta_min = lo;
      c.schedule.eta_max = hi;
      validate(c);
      const double err = c.run.precision == "f64"
                             ? run_training<double>(c, d, std::nullopt, {}, false).report.final_test_error
                             : run_training<float>(c, d, std::nullopt, {}, false).report.final_test_error;
      csv.row({CsvWriter::num(lo), CsvWriter::num(hi), CsvWriter::num(err), CsvWriter::num(1.0 - err)});
      csv.flush();
    }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// schedule

int cmd_schedule(int k, const std::string& base, std::int64_t total_steps, int table_max) {
  if (k < 0) throw ConfigError("k must be >= 0, got " + std::to_string(k));
  const auto sched = plan_schedule(parse_blocks(base), k, total_steps, EqualSplit{});
  std::cout << "cycle,blocks,h,steps,eta_min,eta_max\n";
  for (std::size_t i = 0; i < sched.cycles.size(); ++i) {
    const auto& c = sched.cycles[i];
    std::cout << i + 1 << "," << blocks_string(c.blocks) << "," << CsvWriter::num(c.h) << "," << c.steps << ","
              << CsvWriter::num(c.eta_min) << "," << CsvWriter::num(c.eta_max) << "\n";
  }
  std::cout << "\nk,time_saved,fraction,percent\n";
  for (int j = 0; j <= std::max(table_max, k); ++j) {
    const Fraction f = theoretical_time_saved(j);
    char pct[16];
    std::snprintf(pct, sizeof pct, "%.0f%%", 100.0 * f.value());
    std::cout << j << "," << CsvWriter::num(f.value()) << "," << f.num << "/" << f.den << "," << pct << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// lesion / profile / fnorm

template <typename T>
std::vector<Tensor<T>> cast_batches(const std::vector<Tensor<double>>& b) {
  std::vector<Tensor<T>> out;
  for (const auto& t : b) out.push_back(t.template cast<T>());
  return out;
}

template <typename T>
int lesion_impl(const fs::path& ckpt, const LoadedData& d, const std::string& mode, int stage, int index, bool force,
                std::uint64_t seed, const std::string& out_csv, const std::string& hash) {
  const auto model = load_checkpoint<T>(ckpt);
  LesionReport report;
  if (mode == "sweep") {
    report = removal_sweep(model, d.test, d.augment);
  } else {
    auto base = model;
    report.baseline_error = evaluate_error(base, d.test, d.augment);
    if (stage < 0) throw ConfigError("--stage is required for mode " + mode);
    const auto s = static_cast<std::size_t>(stage);
    if (mode == "remove") {
      if (index < 0) throw ConfigError("--index is required for mode remove");
      auto m = remove_block(model, s, static_cast<std::size_t>(index), force);
      report.add(remove_label(s, static_cast<std::size_t>(index)), evaluate_error(m, d.test, d.augment));
    } else if (mode == "shuffle") {
      if (s >= model.stages.size()) throw LesionError("stage " + std::to_string(s) + " out of range");
      const auto perm = random_permutation(model.stages[s].size(), seed, !force);
      auto m = shuffle_blocks(model, s, perm, force);
      report.add(shuffle_label(s, seed, perm), evaluate_error(m, d.test, d.augment));
    } else {
      throw ConfigError("lesion mode must be remove, shuffle or sweep");
    }
  }
  CsvWriter csv(out_csv, {"intervention", "error", "delta"}, hash);
  csv.row({"baseline", CsvWriter::num(report.baseline_error), CsvWriter::num(0.0)});
  for (const auto& r : report.records) csv.row({r.intervention, CsvWriter::num(r.error), CsvWriter::num(r.delta)});
  return kExitOk;
}

template <typename T>
int profile_impl(const fs::path& ckpt, const std::vector<Tensor<double>>& batches, const std::string& out_csv,
                 const std::string& hash) {
  const auto model = load_checkpoint<T>(ckpt);
  const NormProfile p = profile_norms(model, cast_batches<T>(batches));
  CsvWriter csv(out_csv, {"stage", "block", "norm_Y", "norm_G", "norm_F", "gamma"}, hash);
  for (const auto& e : p.entries)
    csv.row({std::to_string(e.stage), std::to_string(e.index), CsvWriter::num(e.norm_y), CsvWriter::num(e.norm_g),
             CsvWriter::num(e.norm_f), CsvWriter::num(p.gamma)});
  std::cout << "gamma " << p.gamma << " d " << p.d << "\n";
  return kExitOk;
}

template <typename T>
int fnorm_impl(const std::vector<std::string>& ckpts, const std::vector<Tensor<double>>& batches,
               const std::string& out_csv, const std::string& hash) {
  std::vector<ResNetModel<T>> models;
  for (const auto& c : ckpts) models.push_back(load_checkpoint<T>(c));
  const auto curves = f_norm_comparison(models, cast_batches<T>(batches));
  CsvWriter csv(out_csv, {"model_id", "stage", "t", "norm_F"}, hash);
  for (const auto& c : curves)
    for (const auto& p : c.points)
      csv.row({std::to_string(c.model_id), std::to_string(p.stage), CsvWriter::num(p.t), CsvWriter::num(p.norm_f)});
  for (std::size_t i = 1; i < curves.size(); ++i)
    std::cout << "correlation(0," << i << ") " << curve_correlation(curves[0], curves[i]) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// grad-check

int cmd_grad_check(int seeds, double tol) {
  set_max_threads(1);
  double worst = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto r = model_grad_check(micro_spec(), static_cast<std::uint64_t>(s));
    worst = std::max(worst, r.max_rel_error);
    std::cout << "seed " << s << " max_rel_error " << r.max_rel_error << " worst " << r.worst_param << "["
              << r.worst_index << "] elements " << r.elements_checked << "\n";
  }
  std::cout << "overall max_rel_error " << worst << (worst < tol ? " PASS" : " FAIL") << "\n";
  return worst < tol ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"ODE-view ResNets: multi-level training and lesion analysis"};
  app.require_subcommand(1);

  std::string config_path, baseline, out_csv, mode, checkpoint, base_blocks = "2-2-2";
  std::vector<std::string> overrides, checkpoints;
  std::vector<double> eta_mins{0.001}, eta_maxs{0.5};
  int k = 2, table_max = 5, stage = -1, index = -1, seeds = 20, max_batches = 4;
  std::int64_t total_steps = 300;
  std::uint64_t seed = 0;
  bool force = false;
  double tol = 1e-4;

  auto* train = app.add_subcommand("train", "multi-level or baseline training run");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--override", overrides, "section.key=value, applied in order");
  train->add_option("--baseline", baseline, "first_cycle or last_cycle");

  auto* sched = app.add_subcommand("schedule", "print a cycle plan and the time-saved table");
  sched->add_option("--k", k, "number of interpolations");
  sched->add_option("--base", base_blocks, "first-cycle blocks, e.g. 2-2-2");
  sched->add_option("--total-steps", total_steps, "steps split equally across cycles");
  sched->add_option("--table-max", table_max, "largest k in the savings table");

  auto* lesion = app.add_subcommand("lesion", "remove or shuffle blocks of a checkpoint");
  lesion->add_option("--checkpoint", checkpoint)->required();
  lesion->add_option("--config", config_path, "config supplying the test data")->required();
  lesion->add_option("--override", overrides);
  lesion->add_option("--mode", mode, "remove, shuffle or sweep")->required();
  lesion->add_option("--stage", stage, "0-based stage");
  lesion->add_option("--index", index, "0-based block index");
  lesion->add_flag("--force", force, "allow touching a stage's first block");
  lesion->add_option("--seed", seed, "shuffle seed");
  lesion->add_option("--out", out_csv, "output CSV")->required();

  auto* profile = app.add_subcommand("profile", "per-block norm profile of a checkpoint");
  profile->add_option("--checkpoint", checkpoint)->required();
  profile->add_option("--config", config_path)->required();
  profile->add_option("--override", overrides);
  profile->add_option("--batches", max_batches, "test batches to average over (0 = all)");
  profile->add_option("--out", out_csv)->required();

  auto* fnorm = app.add_subcommand("fnorm", "F-norm curves over conceptual time for several checkpoints");
  fnorm->add_option("--checkpoint", checkpoints)->required();
  fnorm->add_option("--config", config_path)->required();
  fnorm->add_option("--override", overrides);
  fnorm->add_option("--batches", max_batches);
  fnorm->add_option("--out", out_csv)->required();

  auto* sweep = app.add_subcommand("sweep-lr", "grid over eta_min x eta_max");
  sweep->add_option("--config", config_path)->required();
  sweep->add_option("--override", overrides);
  sweep->add_option("--eta-min", eta_mins)->delimiter(',');
  sweep->add_option("--eta-max", eta_maxs)->delimiter(',');
  sweep->add_option("--out", out_csv)->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of a 1-1-1 micro ResNet");
  gc->add_option("--seeds", seeds);
  gc->add_option("--tol", tol);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(config_path, overrides, baseline);
    if (*sched) return cmd_schedule(k, base_blocks, total_steps, table_max);
    if (*gc) return cmd_grad_check(seeds, tol);
    if (*sweep) return cmd_sweep_lr(config_path, overrides, eta_mins, eta_maxs, out_csv);

    const RunConfig cfg = load_config(config_path, overrides);
    apply_threads(cfg);
    const LoadedData d = load_data(cfg.data, cfg.run.seed);
    const std::string hash = config_hash(cfg);
    if (*lesion) {
      const fs::path ck = checkpoint;
      return checkpoint_dtype(ck) == "f64" ? lesion_impl<double>(ck, d, mode, stage, index, force, seed, out_csv, hash)
                                           : lesion_impl<float>(ck, d, mode, stage, index, force, seed, out_csv, hash);
    }
    const auto batches = eval_batches<double>(d, static_cast<std::size_t>(cfg.data.batch_size),
                                      static_cast<std::size_t>(std::max(0, max_batches)));
    if (*profile)
      return checkpoint_dtype(checkpoint) == "f64" ? profile_impl<double>(checkpoint, batches, out_csv, hash)
                                                   : profile_impl<float>(checkpoint, batches, out_csv, hash);
    if (*fnorm)
      return checkpoint_dtype(checkpoints.front()) == "f64" ? fnorm_impl<double>(checkpoints, batches, out_csv, hash)
                                                            : fnorm_impl<float>(checkpoints, batches, out_csv, hash);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const data::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const LesionError& e) {
    std::cerr << "lesion error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
