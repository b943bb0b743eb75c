#pragma once

// Run configuration: a TOML subset ([section], key = value, # comments) with
// ints, floats, booleans, quoted strings and flat numeric arrays. Unknown keys
// are rejected; dotted overrides apply on top, last writer wins.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <string>
#include <vector>

#include "odenet/data.hpp"
#include "odenet/multilevel.hpp"
#include "odenet/resnet.hpp"

namespace odenet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  ResNetSpec spec;
};

struct ScheduleConfig {
  int k = 2;
  /// "epochs" (explicit epoch boundaries), "equal" or "explicit" (step list).
  std::string split = "epochs";
  int epochs = 160;
  std::vector<int> boundaries{60, 110};
  std::vector<std::int64_t> steps;
  double eta_min = 0.001;
  double eta_max = 0.5;
  bool reset_lr = true;
  bool reset_momentum = true;
};

struct DataConfig {
  /// mnist, cifar10, stl10 or synthetic.
  std::string name = "cifar10";
  std::string dir = "data/cifar10";
  int batch_size = 100;
  /// Caps on the number of train/test examples; 0 keeps everything.
  int subset_size = 0;
  int test_subset_size = 0;
  int pad = 4;
  bool random_crop = true;
  bool hflip = true;
  std::string standardize = "per_image";
};

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 2e-4;
};

struct RunSection {
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string output_dir = "runs/default";
  std::string precision = "f32";
  bool checkpoints = true;
  int prefetch = 4;
};

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  DataConfig data;
  OptimizerConfig optimizer;
  RunSection run;
};

// ---------------------------------------------------------------------------
// Values

struct ConfigValue {
  enum class Kind { number, boolean, string, array } kind = Kind::number;
  std::string text;
  double number = 0;
  bool integral = false;
  bool boolean = false;
  std::vector<double> array;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

/// Drops a trailing comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline bool parse_number(const std::string& s, double& out, bool& integral) {
  if (s.empty()) return false;
  std::int64_t iv = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), iv);
  if (ec == std::errc() && p == s.data() + s.size()) {
    out = static_cast<double>(iv);
    integral = true;
    return true;
  }
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  integral = false;
  return end == s.c_str() + s.size() && std::isfinite(out);
}

inline ConfigValue parse_value(const std::string& raw) {
  const std::string s = trim(raw);
  ConfigValue v;
  v.text = s;
  if (s.empty()) throw ConfigError("missing value");
  if (s == "true" || s == "false") {
    v.kind = ConfigValue::Kind::boolean;
    v.boolean = s == "true";
    return v;
  }
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError("unterminated string " + s);
    v.kind = ConfigValue::Kind::string;
    v.text = s.substr(1, s.size() - 2);
    if (v.text.find('"') != std::string::npos) throw ConfigError("embedded quote in " + s);
    return v;
  }
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated array " + s);
    v.kind = ConfigValue::Kind::array;
    std::stringstream in(s.substr(1, s.size() - 2));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      double x = 0;
      bool integral = false;
      if (!parse_number(item, x, integral)) throw ConfigError("array element '" + item + "' is not a number");
      v.array.push_back(x);
    }
    return v;
  }
  if (!parse_number(s, v.number, v.integral)) throw ConfigError("cannot parse value '" + s + "'");
  return v;
}

inline std::string format_double(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

struct Field {
  std::string section, key;
  std::function<void(const ConfigValue&)> set;
  std::function<std::string()> get;
};

inline std::int64_t want_int(const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::number || !v.integral) throw ConfigError("expected an integer, got '" + v.text + "'");
  return static_cast<std::int64_t>(v.number);
}
inline double want_double(const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::number) throw ConfigError("expected a number, got '" + v.text + "'");
  return v.number;
}
inline bool want_bool(const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::boolean) throw ConfigError("expected true or false, got '" + v.text + "'");
  return v.boolean;
}
inline std::string want_string(const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::string) throw ConfigError("expected a quoted string, got '" + v.text + "'");
  return v.text;
}
template <typename I>
std::vector<I> want_int_array(const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::array) throw ConfigError("expected an array, got '" + v.text + "'");
  std::vector<I> out;
  for (double x : v.array) {
    if (x != std::floor(x)) throw ConfigError("expected integers in '" + v.text + "'");
    out.push_back(static_cast<I>(x));
  }
  return out;
}

template <typename C>
std::string fmt_array(const C& c) {
  std::string s = "[";
  for (std::size_t i = 0; i < c.size(); ++i) s += (i ? ", " : "") + std::to_string(c[i]);
  return s + "]";
}

inline std::string quote(const std::string& s) { return '"' + s + '"'; }

inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  auto i32 = [&f](const char* sec, const char* key, int& ref) {
    f.push_back({sec, key, [&ref](const ConfigValue& v) { ref = static_cast<int>(want_int(v)); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto u64 = [&f](const char* sec, const char* key, std::uint64_t& ref) {
    f.push_back({sec, key,
                 [&ref](const ConfigValue& v) {
                   const auto x = want_int(v);
                   if (x < 0) throw ConfigError("expected a non-negative integer");
                   ref = static_cast<std::uint64_t>(x);
                 },
                 [&ref] { return std::to_string(ref); }});
  };
  auto dbl = [&f](const char* sec, const char* key, double& ref) {
    f.push_back({sec, key, [&ref](const ConfigValue& v) { ref = want_double(v); }, [&ref] { return format_double(ref); }});
  };
  auto boolean = [&f](const char* sec, const char* key, bool& ref) {
    f.push_back({sec, key, [&ref](const ConfigValue& v) { ref = want_bool(v); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto str = [&f](const char* sec, const char* key, std::string& ref) {
    f.push_back({sec, key, [&ref](const ConfigValue& v) { ref = want_string(v); }, [&ref] { return quote(ref); }});
  };
  auto triple = [&f](const char* sec, const char* key, std::array<int, kStages>& ref) {
    f.push_back({sec, key,
                 [&ref](const ConfigValue& v) {
                   auto a = want_int_array<int>(v);
                   if (a.size() != kStages) throw ConfigError("expected 3 entries, got " + std::to_string(a.size()));
                   std::copy(a.begin(), a.end(), ref.begin());
                 },
                 [&ref] { return fmt_array(ref); }});
  };

  auto& spec = c.model.spec;
  triple("model", "blocks_per_stage", spec.blocks_per_stage);
  triple("model", "base_filters", spec.base_filters);
  i32("model", "width_multiplier", spec.width_multiplier);
  dbl("model", "step_size", spec.step_size);
  f.push_back({"model", "step_size_mode",
               [&spec](const ConfigValue& v) {
                 try {
                   spec.step_size_mode = parse_step_size_mode(want_string(v));
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(e.what());
                 }
               },
               [&spec] { return quote(to_string(spec.step_size_mode)); }});
  i32("model", "num_classes", spec.num_classes);

  auto& sc = c.schedule;
  i32("schedule", "k", sc.k);
  str("schedule", "split", sc.split);
  i32("schedule", "epochs", sc.epochs);
  f.push_back({"schedule", "boundaries", [&sc](const ConfigValue& v) { sc.boundaries = want_int_array<int>(v); },
               [&sc] { return fmt_array(sc.boundaries); }});
  f.push_back({"schedule", "steps",
               [&sc](const ConfigValue& v) { sc.steps = want_int_array<std::int64_t>(v); },
               [&sc] { return fmt_array(sc.steps); }});
  dbl("schedule", "eta_min", sc.eta_min);
  dbl("schedule", "eta_max", sc.eta_max);
  boolean("schedule", "reset_lr", sc.reset_lr);
  boolean("schedule", "reset_momentum", sc.reset_momentum);

  auto& d = c.data;
  str("data", "name", d.name);
  str("data", "dir", d.dir);
  i32("data", "batch_size", d.batch_size);
  i32("data", "subset_size", d.subset_size);
  i32("data", "test_subset_size", d.test_subset_size);
  i32("data", "pad", d.pad);
  boolean("data", "random_crop", d.random_crop);
  boolean("data", "hflip", d.hflip);
  str("data", "standardize", d.standardize);

  dbl("optimizer", "momentum", c.optimizer.momentum);
  dbl("optimizer", "weight_decay", c.optimizer.weight_decay);

  u64("run", "seed", c.run.seed);
  boolean("run", "deterministic", c.run.deterministic);
  str("run", "output_dir", c.run.output_dir);
  str("run", "precision", c.run.precision);
  boolean("run", "checkpoints", c.run.checkpoints);
  i32("run", "prefetch", c.run.prefetch);
  return f;
}

inline Field& find_field(std::vector<Field>& fs, const std::string& section, const std::string& key,
                         const std::string& where) {
  for (auto& f : fs)
    if (f.section == section && f.key == key) return f;
  for (auto& f : fs)
    if (f.section == section) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
  throw ConfigError(where + ": unknown section [" + section + "]");
}

}  // namespace detail

/// Cross-field checks after parsing and overrides.
inline void validate(const RunConfig& c) {
  try {
    c.model.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[model] ") + e.what());
  }
  const auto& s = c.schedule;
  if (s.k < 0) throw ConfigError("[schedule] k must be >= 0");
  if (s.split != "epochs" && s.split != "equal" && s.split != "explicit")
    throw ConfigError("[schedule] split must be \"epochs\", \"equal\" or \"explicit\"");
  if (s.epochs < 1) throw ConfigError("[schedule] epochs must be >= 1");
  if (s.split == "epochs" && s.boundaries.size() != static_cast<std::size_t>(s.k))
    throw ConfigError("[schedule] boundaries lists " + std::to_string(s.boundaries.size()) + " epochs for k = " +
                      std::to_string(s.k));
  if (s.split == "explicit" && s.steps.size() != static_cast<std::size_t>(s.k) + 1)
    throw ConfigError("[schedule] steps must list k + 1 cycle lengths");
  if (!(s.eta_max > s.eta_min && s.eta_min > 0)) throw ConfigError("[schedule] needs eta_max > eta_min > 0");
  if (s.k > 0 && c.model.spec.step_size_mode != StepSizeMode::explicit_h)
    throw ConfigError("[schedule] k > 0 requires [model] step_size_mode = \"explicit\"");
  const auto& d = c.data;
  if (d.name != "mnist" && d.name != "cifar10" && d.name != "stl10" && d.name != "synthetic")
    throw ConfigError("[data] name must be mnist, cifar10, stl10 or synthetic");
  if (d.batch_size < 1) throw ConfigError("[data] batch_size must be >= 1");
  if (d.subset_size < 0 || d.test_subset_size < 0) throw ConfigError("[data] subset sizes must be >= 0");
  if (d.pad < 0) throw ConfigError("[data] pad must be >= 0");
  try {
    data::parse_standardize(d.standardize);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[data] ") + e.what());
  }
  if (c.optimizer.momentum < 0 || c.optimizer.weight_decay < 0)
    throw ConfigError("[optimizer] momentum and weight_decay must be >= 0");
  if (c.run.precision != "f32" && c.run.precision != "f64") throw ConfigError("[run] precision must be f32 or f64");
  if (c.run.prefetch < 1) throw ConfigError("[run] prefetch must be >= 1");
}

/// Parses config text on top of the defaults. `origin` prefixes error
/// locations, e.g. "desk.toml:12: ...".
inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig c;
  auto fs = detail::fields(c);
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0, assignments = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string s = detail::trim(detail::strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const auto& f : fs) known |= f.section == section;
      if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = detail::trim(s.substr(0, eq));
    auto& f = detail::find_field(fs, section, key, where);
    try {
      f.set(detail::parse_value(s.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + section + "." + key + ": " + e.what());
    }
    ++assignments;
  }
  if (assignments == 0) throw ConfigError(origin + ": config is empty");
  return c;
}

/// Applies "section.key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const std::string where = "override '" + assignment + "'";
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected section.key=value");
  const std::string lhs = detail::trim(assignment.substr(0, eq));
  const auto dot = lhs.find('.');
  if (dot == std::string::npos) throw ConfigError(where + ": key must be section.key");
  auto fs = detail::fields(c);
  auto& f = detail::find_field(fs, lhs.substr(0, dot), lhs.substr(dot + 1), where);
  try {
    f.set(detail::parse_value(assignment.substr(eq + 1)));
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig c = parse_config(ss.str(), path);
  for (const auto& o : overrides) apply_override(c, o);
  validate(c);
  return c;
}

/// Every key with its resolved value; parse_config(to_text(c)) == c.
inline std::string to_text(const RunConfig& config) {
  RunConfig c = config;
  auto fs = detail::fields(c);
  std::string out, section;
  for (const auto& f : fs) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

/// FNV-1a of the resolved snapshot, as 16 hex digits. The output directory is
/// left out: where a run writes does not change what it computes.
inline std::string config_hash(const RunConfig& c) {
  RunConfig k = c;
  k.run.output_dir.clear();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text(k)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return to_text(a) == to_text(b); }

// ---------------------------------------------------------------------------
// CSV

/// Header row preceded by a "# config_hash=..." comment line.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header, const std::string& hash)
      : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path);
    out_ << "# config_hash=" << hash << '\n';
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << escape(cells[i]);
    out_ << '\n';
  }
  void flush() { out_.flush(); }

  static std::string num(double x) { return detail::format_double(x); }
  static std::string escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + '"';
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Config -> module settings

inline data::AugmentConfig augment_config(const DataConfig& d) {
  data::AugmentConfig a;
  a.pad = d.pad;
  a.random_crop = d.random_crop;
  a.hflip = d.hflip;
  a.standardize = data::parse_standardize(d.standardize);
  return a;
}

inline SgdConfig sgd_config(const OptimizerConfig& o) { return {o.momentum, o.weight_decay}; }

/// Cycle plan for a training set of `train_size` examples.
inline CycleSchedule schedule_for(const RunConfig& c, std::size_t train_size) {
  const auto bs = static_cast<std::size_t>(c.data.batch_size);
  if (train_size < bs)
    throw data::DataError("training set of " + std::to_string(train_size) + " examples is smaller than one batch");
  const auto spe = static_cast<std::int64_t>(train_size / bs);
  const auto& s = c.schedule;
  const auto& spec = c.model.spec;
  StepSplit split = EqualSplit{};
  if (s.split == "epochs")
    split = split_at_epochs(s.epochs, s.boundaries, spe);
  else if (s.split == "explicit")
    split = ExplicitSplit{s.steps};
  try {
    return plan_schedule(spec.blocks_per_stage, s.k, s.epochs * spe, split, s.eta_min, s.eta_max, spec.step_size);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[schedule] ") + e.what());
  }
}

struct LoadedData {
  data::Dataset train, test;
  data::AugmentConfig augment;
};

/// Loads the configured dataset, applies subset caps and fits global
/// standardization statistics on the training split when requested.
inline LoadedData load_data(const DataConfig& d, std::uint64_t seed = 0) {
  LoadedData out;
  if (d.name == "mnist") {
    std::tie(out.train, out.test) = data::load_mnist(d.dir);
  } else if (d.name == "cifar10") {
    std::tie(out.train, out.test) = data::load_cifar10(d.dir);
  } else if (d.name == "stl10") {
    std::tie(out.train, out.test) = data::load_stl10(d.dir);
  } else {
    const auto n = static_cast<std::size_t>(d.subset_size > 0 ? d.subset_size : 1000);
    const auto nt = static_cast<std::size_t>(d.test_subset_size > 0 ? d.test_subset_size : 200);
    out.train = data::make_synthetic(n, 3, 32, 10, seed, data::Split::train);
    out.test = data::make_synthetic(nt, 3, 32, 10, data::mix_seed(seed, 1), data::Split::test);
  }
  out.train = out.train.balanced_subset(static_cast<std::size_t>(d.subset_size));
  out.test = out.test.balanced_subset(static_cast<std::size_t>(d.test_subset_size));
  out.augment = augment_config(d);
  if (out.augment.standardize == data::Standardize::global) data::fit_global_stats(out.train, out.augment);
  return out;
}

/// Unaugmented test-set batches in file order; max_batches 0 keeps all.
template <typename T>
std::vector<Tensor<T>> eval_batches(const LoadedData& d, std::size_t batch_size, std::size_t max_batches = 0) {
  std::vector<Tensor<T>> out;
  for (const auto& idx : data::batches(d.test.size(), batch_size, 0, 0, data::Split::test)) {
    if (max_batches && out.size() == max_batches) break;
    out.push_back(data::make_batch<T>(d.test, idx, d.augment, false, 0, 0, 0).images);
  }
  return out;
}

/// Training-loop settings for a resolved config and its loaded data.
template <typename T>
TrainConfig<T> train_config(const RunConfig& c, const LoadedData& d) {
  TrainConfig<T> tc;
  tc.optimizer = sgd_config(c.optimizer);
  tc.reset_lr = c.schedule.reset_lr;
  tc.reset_momentum = c.schedule.reset_momentum;
  tc.seed = c.run.seed;
  tc.batch_size = static_cast<std::size_t>(c.data.batch_size);
  tc.augment = d.augment;
  tc.prefetch = static_cast<std::size_t>(c.run.prefetch);
  return tc;
}

/// Model spec with input geometry taken from the dataset.
inline ResNetSpec spec_for_data(const RunConfig& c, const data::Dataset& d) {
  ResNetSpec s = c.model.spec;
  if (s.num_classes != d.num_classes)
    throw ConfigError("[model] num_classes = " + std::to_string(s.num_classes) + " but dataset " + d.name + " has " +
                      std::to_string(d.num_classes) + " classes");
  s.input_channels = static_cast<int>(d.channels);
  s.input_hw = static_cast<int>(d.hw);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[model] ") + e.what());
  }
  return s;
}

}  // namespace odenet
