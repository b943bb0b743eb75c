#pragma once

// Checkpoint directory: manifest.json (spec, block layout, and every
// parameter's name, dtype, shape and blob file) plus one raw little-endian
// blob per parameter.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "odenet/resnet.hpp"

namespace odenet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

inline nlohmann::json spec_to_json(const ResNetSpec& s) {
  return {{"blocks_per_stage", s.blocks_per_stage},
          {"base_filters", s.base_filters},
          {"width_multiplier", s.width_multiplier},
          {"step_size", s.step_size},
          {"step_size_mode", to_string(s.step_size_mode)},
          {"input_channels", s.input_channels},
          {"input_hw", s.input_hw},
          {"num_classes", s.num_classes}};
}

inline ResNetSpec spec_from_json(const nlohmann::json& j) {
  ResNetSpec s;
  s.blocks_per_stage = j.at("blocks_per_stage").get<std::array<int, kStages>>();
  s.base_filters = j.at("base_filters").get<std::array<int, kStages>>();
  s.width_multiplier = j.at("width_multiplier").get<int>();
  s.step_size = j.at("step_size").get<double>();
  s.step_size_mode = parse_step_size_mode(j.at("step_size_mode").get<std::string>());
  s.input_channels = j.at("input_channels").get<int>();
  s.input_hw = j.at("input_hw").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  return s;
}

namespace detail {

inline std::string blob_name(const std::string& param) { return param + ".bin"; }

template <typename T>
void write_blob(const std::filesystem::path& p, const Tensor<T>& t) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + p.string());
  if constexpr (std::endian::native == std::endian::little) {
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (T v : t.values()) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      f.write(bytes.data(), sizeof(T));
    }
  }
  if (!f) throw CheckpointError("short write to " + p.string());
}

template <typename T>
Tensor<T> read_blob(const std::filesystem::path& p, const Shape& shape) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw CheckpointError("missing blob " + p.string());
  Tensor<T> t(shape);
  const auto want = static_cast<std::streamsize>(t.size() * sizeof(T));
  f.read(reinterpret_cast<char*>(t.data()), want);
  if (f.gcount() != want || f.peek() != std::char_traits<char>::eof())
    throw CheckpointError(p.string() + ": expected " + std::to_string(want) + " bytes for shape " + shape.str());
  if constexpr (std::endian::native != std::endian::little)
    for (T& v : t.values()) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  return t;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw CheckpointError("no manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ResNetModel<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto& m = const_cast<ResNetModel<T>&>(model);
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& st : m.stages) {
    nlohmann::json stage = nlohmann::json::array();
    for (const auto& b : st)
      stage.push_back({{"kind", b.kind == BlockKind::residual ? "residual" : "pool_pad"},
                       {"in_channels", b.in_channels},
                       {"out_channels", b.out_channels},
                       {"stride", b.stride},
                       {"shortcut", b.shortcut.has_value()}});
    layout.push_back(stage);
  }
  nlohmann::json params = nlohmann::json::array();
  for (const auto& np : named_params(m)) {
    const auto& v = np.param->value;
    params.push_back({{"name", np.name},
                      {"dtype", dtype_name<T>()},
                      {"shape", v.shape().dims()},
                      {"trainable", np.param->trainable},
                      {"file", detail::blob_name(np.name)}});
    detail::write_blob(dir / detail::blob_name(np.name), v);
  }
  nlohmann::json manifest{{"format", "odenet-checkpoint"},
                          {"version", 1},
                          {"dtype", dtype_name<T>()},
                          {"spec", spec_to_json(m.spec)},
                          {"batchnorm", {{"epsilon", m.bn_config.epsilon}, {"momentum", m.bn_config.momentum}}},
                          {"blocks", layout},
                          {"params", params}};
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << '\n';
  if (!f) throw CheckpointError("cannot write manifest in " + dir.string());
}

/// "f32" or "f64" as recorded in the manifest.
inline std::string checkpoint_dtype(const std::filesystem::path& dir) {
  return detail::read_manifest(dir).at("dtype").get<std::string>();
}

template <typename T>
ResNetModel<T> load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json man = detail::read_manifest(dir);
  try {
    if (man.at("format") != "odenet-checkpoint") throw CheckpointError(dir.string() + " is not an odenet checkpoint");
    if (man.at("dtype") != dtype_name<T>())
      throw CheckpointError("checkpoint dtype " + man.at("dtype").get<std::string>() + " does not match requested " +
                            dtype_name<T>());
    ResNetModel<T> m;
    m.spec = spec_from_json(man.at("spec"));
    m.bn_config.epsilon = man.at("batchnorm").at("epsilon").get<double>();
    m.bn_config.momentum = man.at("batchnorm").at("momentum").get<double>();
    const auto& layout = man.at("blocks");
    if (layout.size() != kStages) throw CheckpointError("manifest lists " + std::to_string(layout.size()) + " stages");
    m.stages.resize(kStages);
    for (std::size_t s = 0; s < kStages; ++s)
      for (const auto& jb : layout[s]) {
        BlockParams<T> b;
        b.kind = jb.at("kind") == "residual" ? BlockKind::residual : BlockKind::pool_pad;
        b.in_channels = jb.at("in_channels").get<std::size_t>();
        b.out_channels = jb.at("out_channels").get<std::size_t>();
        b.stride = jb.at("stride").get<std::size_t>();
        if (jb.at("shortcut").get<bool>()) b.shortcut.emplace();
        m.stages[s].push_back(std::move(b));
      }
    auto slots = named_params(m);
    const auto& params = man.at("params");
    if (params.size() != slots.size())
      throw CheckpointError("manifest lists " + std::to_string(params.size()) + " parameters, layout needs " +
                            std::to_string(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& jp = params[i];
      if (jp.at("name") != slots[i].name)
        throw CheckpointError("parameter " + std::to_string(i) + " is " + jp.at("name").get<std::string>() +
                              ", expected " + slots[i].name);
      Shape shape{jp.at("shape").get<std::vector<std::size_t>>()};
      *slots[i].param = Parameter<T>(detail::read_blob<T>(dir / jp.at("file").get<std::string>(), shape),
                                     jp.at("trainable").get<bool>());
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace odenet
