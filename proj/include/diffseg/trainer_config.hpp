#pragma once

#include "diffseg/losses.hpp"
#include "diffseg/network/unet.hpp"
#include "diffseg/schedule.hpp"

#include <json.hpp>

#include <string>

namespace diffseg {

/// Training/conditioning regimes. All variants share one architecture (the
/// field input channels are always present, zero-filled where unused) so
/// parameter counts are identical and ablations compare like with like.
enum class Variant { plain, dual_condition, collaborative };

inline Variant variant_from_string(const std::string& s) {
  if (s == "plain") return Variant::plain;
  if (s == "dual_condition") return Variant::dual_condition;
  if (s == "collaborative") return Variant::collaborative;
  throw std::invalid_argument("unknown variant: " + s);
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::dual_condition: return "dual_condition";
    case Variant::collaborative: return "collaborative";
  }
  return "?";
}

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 4;  // patches per step; pairs when the consistency loss is on
  double lr = 1e-4;
  double weight_decay = 1e-2;
  Variant variant = Variant::collaborative;
  bool use_sac = true;
  bool use_taca = true;
  bool detach_sim_m = false;
  int sac_warmup = 0;  // iterations before the consistency loss kicks in
  uint64_t seed = 1;
  int eval_every = 250;
  int patch_size = 32;
  int sampler_steps = 5;
  double infer_overlap = 0.5;
  double grad_clip = 1.0;
  int threads = 1;
  int schedule_T = 1000;
  ScheduleKind schedule_kind = ScheduleKind::cosine;
  int base_channels = 16;
  int depth = 3;
  int time_dim = 64;
  TacaConfig taca;
  std::vector<int> taca_levels;
  LossWeights weights;
  DiceOptions dice;
  ClampPolicy clamp;

  void validate() const {
    require(iterations >= 0, "train config: negative iterations");
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    if (use_sac) require(batch_size % 2 == 0, "train config: sac needs an even batch size");
    require(lr > 0.0, "train config: lr must be positive");
    require(patch_size % (1 << depth) == 0,
            "train config: patch size not divisible by 2^depth");
    require(sampler_steps >= 1 && sampler_steps <= schedule_T,
            "train config: sampler steps outside [1, T]");
    require(eval_every >= 1, "train config: eval_every must be >= 1");
    require(infer_overlap >= 0.0 && infer_overlap <= 0.9,
            "train config: overlap outside [0, 0.9]");
  }
};

inline NetworkConfig make_network_config(const TrainConfig& cfg, int classes) {
  NetworkConfig nc;
  nc.classes = classes;
  nc.base_channels = cfg.base_channels;
  nc.depth = cfg.depth;
  nc.time_dim = cfg.time_dim;
  nc.taca = cfg.taca;
  nc.use_taca = cfg.use_taca;
  nc.taca_levels = cfg.taca_levels;
  return nc;
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["variant"] = to_string(c.variant);
  j["use_sac"] = c.use_sac;
  j["use_taca"] = c.use_taca;
  j["detach_sim_m"] = c.detach_sim_m;
  j["sac_warmup"] = c.sac_warmup;
  j["seed"] = std::to_string(c.seed);
  j["eval_every"] = c.eval_every;
  j["patch_size"] = c.patch_size;
  j["sampler_steps"] = c.sampler_steps;
  j["infer_overlap"] = c.infer_overlap;
  j["grad_clip"] = c.grad_clip;
  j["threads"] = c.threads;
  j["schedule_T"] = c.schedule_T;
  j["schedule_kind"] = to_string(c.schedule_kind);
  j["base_channels"] = c.base_channels;
  j["depth"] = c.depth;
  j["time_dim"] = c.time_dim;
  j["taca_kernel_sizes"] = c.taca.kernel_sizes;
  j["taca_kernels_per_conv"] = c.taca.kernels_per_conv;
  j["taca_levels"] = c.taca_levels;
  j["loss_weights"] = {{"mse", c.weights.mse},
                       {"dice", c.weights.dice},
                       {"ce", c.weights.ce},
                       {"sac", c.weights.sac}};
  j["dice_smooth"] = c.dice.smooth;
  j["dice_include_background"] = c.dice.include_background;
  j["clamp_eps"] = c.clamp.eps;
  return j;
}

}  // namespace diffseg
