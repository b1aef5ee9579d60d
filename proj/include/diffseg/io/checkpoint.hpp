#pragma once

#include "diffseg/io/archive.hpp"
#include "diffseg/network/unet.hpp"
#include "diffseg/schedule.hpp"

#include <json.hpp>

#include <fstream>

namespace diffseg::io {

struct CheckpointMeta {
  NetworkConfig config;
  ScheduleKind schedule_kind = ScheduleKind::cosine;
  int schedule_T = 1000;
  std::string variant = "collaborative";
  int iteration = 0;
  double mean_dice = 0.0;
};

inline nlohmann::ordered_json network_config_to_json(const NetworkConfig& c) {
  nlohmann::ordered_json j;
  j["classes"] = c.classes;
  j["base_channels"] = c.base_channels;
  j["depth"] = c.depth;
  j["time_dim"] = c.time_dim;
  j["taca_kernel_sizes"] = c.taca.kernel_sizes;
  j["taca_kernels_per_conv"] = c.taca.kernels_per_conv;
  j["use_taca"] = c.use_taca;
  j["taca_levels"] = c.taca_levels;
  return j;
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.classes = j.at("classes").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.taca.kernel_sizes = j.at("taca_kernel_sizes").get<std::vector<int>>();
  c.taca.kernels_per_conv = j.at("taca_kernels_per_conv").get<int>();
  c.use_taca = j.at("use_taca").get<bool>();
  c.taca_levels = j.at("taca_levels").get<std::vector<int>>();
  return c;
}

/// One archive of named weight arrays plus a JSON sidecar holding the
/// network configuration and run metadata.
template <typename T>
void save_checkpoint(const std::string& path, const DenoiseUNet<T>& net, const ArrayX<T>& theta,
                     const CheckpointMeta& meta) {
  Archive a;
  std::vector<float> scratch;
  for (const auto& e : net.params().entries) {
    std::vector<int64_t> dims(e.dims.begin(), e.dims.end());
    scratch.resize(e.size);
    for (std::size_t i = 0; i < e.size; ++i) scratch[i] = float(theta[Eigen::Index(e.offset + i)]);
    a.add_f32(e.name, dims, scratch.data());
  }
  a.write(path);

  nlohmann::ordered_json j;
  j["network"] = network_config_to_json(meta.config);
  j["schedule_kind"] = to_string(meta.schedule_kind);
  j["schedule_T"] = meta.schedule_T;
  j["variant"] = meta.variant;
  j["iteration"] = meta.iteration;
  j["mean_dice"] = meta.mean_dice;
  std::ofstream os(path + ".json", std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path + ".json");
  os << j.dump(2) << "\n";
}

template <typename T>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  ArrayX<T> theta;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path + ".json", std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: missing sidecar " + path + ".json");
  auto j = nlohmann::json::parse(std::string(std::istreambuf_iterator<char>(is),
                                             std::istreambuf_iterator<char>()));
  LoadedCheckpoint<T> out;
  out.meta.config = network_config_from_json(j.at("network"));
  out.meta.schedule_kind = schedule_kind_from_string(j.at("schedule_kind").get<std::string>());
  out.meta.schedule_T = j.at("schedule_T").get<int>();
  out.meta.variant = j.at("variant").get<std::string>();
  out.meta.iteration = j.at("iteration").get<int>();
  out.meta.mean_dice = j.at("mean_dice").get<double>();

  DenoiseUNet<T> net(out.meta.config);
  out.theta = ArrayX<T>::Zero(Eigen::Index(net.param_count()));
  Archive a = Archive::read(path);
  for (const auto& e : net.params().entries) {
    const auto& entry = a.at(e.name);
    require(std::size_t(entry.count()) == e.size, "checkpoint: size mismatch for " + e.name);
    const float* src = a.f32(e.name);
    for (std::size_t i = 0; i < e.size; ++i) out.theta[Eigen::Index(e.offset + i)] = T(src[i]);
  }
  return out;
}

}  // namespace diffseg::io
