#pragma once

#include "diffseg/core/rng.hpp"
#include "diffseg/losses.hpp"
#include "diffseg/schedule.hpp"

#include <cmath>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace diffseg {

/// Denoiser interface: predicts (clean field, label logits) from the field
/// condition, the current label state, the image, and the label timestep.
/// Implementations decide how the field condition and its timestep are fed
/// to the underlying model (the trainer's adapter applies the variant
/// semantics; oracle models in tests are plain lambdas).
template <typename T>
using DenoiseFn = std::function<void(const Grid<T>& D_cond, const Grid<T>& M_state,
                                     const Grid<T>& image, int t_m, Grid<T>& D_hat,
                                     Grid<T>& logits)>;

struct SamplerConfig {
  int steps = 5;
  double eta = 0.0;  // only the deterministic sampler is implemented
  uint64_t noise_seed = 0;
};

template <typename T>
struct SampleTrajectory {
  std::vector<int> timesteps;
  std::vector<Grid<T>> x0_predictions;  // encoded label-space predictions
};

/// Descending timestep grid: round(T * j / steps) for j = steps..0.
inline std::vector<int> sampler_timesteps(int T, int steps) {
  require(steps >= 1, "sampler: steps must be >= 1");
  require(steps <= T, "sampler: steps must not exceed T");
  std::vector<int> ts(std::size_t(steps) + 1);
  for (int j = 0; j <= steps; ++j)
    ts[std::size_t(j)] = int(std::llround(double(T) * double(j) / double(steps)));
  return ts;
}

/// Reverse process from a given initial noise state; returns per-class
/// probabilities (softmax of the final prediction).
template <typename T>
Grid<T> sample_labels_from_noise(const DenoiseFn<T>& model, const Grid<T>& image,
                                 const Grid<T>& D0, const Grid<T>& init_noise,
                                 const NoiseSchedule& sched, const SamplerConfig& cfg,
                                 SampleTrajectory<T>* traj = nullptr) {
  require(cfg.eta == 0.0, "sampler: only eta = 0 is supported");
  const auto ts = sampler_timesteps(sched.T, cfg.steps);
  const int classes = init_noise.channels();

  Grid<T> m = init_noise;
  Grid<T> d_hat, logits, probs;
  for (int j = cfg.steps; j >= 1; --j) {
    const int t = ts[std::size_t(j)];
    const int t_prev = ts[std::size_t(j - 1)];
    model(D0, m, image, t, d_hat, logits);
    probs = softmax_channels(logits);
    Grid<T> x0(classes, probs.shape());
    x0.array() = T(2) * probs.array() - T(1);
    if (traj) {
      traj->timesteps.push_back(t);
      traj->x0_predictions.push_back(x0);
    }
    const double a_t = sched.alpha_at(t);
    const double a_prev = sched.alpha_at(t_prev);
    // Deterministic x0-form update toward t_prev.
    const T dir = T(std::sqrt(1.0 - a_prev) / std::sqrt(1.0 - a_t));
    const T sig = T(std::sqrt(a_prev));
    const T sat = T(std::sqrt(a_t));
    m.array() = sig * x0.array() + dir * (m.array() - sat * x0.array());
  }
  return probs;
}

template <typename T>
Grid<T> sample_labels(const DenoiseFn<T>& model, const Grid<T>& image, const Grid<T>& D0,
                      int classes, const NoiseSchedule& sched, const SamplerConfig& cfg, Rng& rng,
                      SampleTrajectory<T>* traj = nullptr) {
  require(image.channels() == 1, "sampler: image must be single-channel");
  require(D0.shape() == image.shape(), "sampler: field/image shape mismatch");
  Grid<T> noise(classes, image.shape());
  fill_normal(noise, rng);
  return sample_labels_from_noise(model, image, D0, noise, sched, cfg, traj);
}

/// Cosine-taper blending window with a positive floor so renormalization is
/// always well-defined.
template <typename T>
Grid<T> taper_window(int P) {
  Grid<T> w(1, P, P, P);
  auto axis = [P](int i) {
    return 0.5 - 0.5 * std::cos(2.0 * M_PI * (double(i) + 0.5) / double(P));
  };
  for (int z = 0; z < P; ++z)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        w(0, x, y, z) = T(0.05 + 0.95 * axis(x) * axis(y) * axis(z));
  return w;
}

inline std::vector<int> tile_origins(int extent, int P, double overlap) {
  const int stride = std::max(1, int(std::floor(double(P) * (1.0 - overlap))));
  std::vector<int> origins;
  for (int o = 0;; o += stride) {
    if (o + P >= extent) {
      origins.push_back(extent - P);
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

/// Patch-based inference over a full volume: tiles with stride P*(1-overlap),
/// samples each tile, blends with the taper window and renormalizes the
/// class probabilities.
template <typename T>
Grid<T> sliding_window_infer(const DenoiseFn<T>& model, const Grid<T>& image, const Grid<T>& D0,
                             int classes, const NoiseSchedule& sched, const SamplerConfig& cfg,
                             int P, double overlap, Rng& rng, int threads = 1) {
  require(image.channels() == 1 && D0.channels() == 3, "sliding_window: bad channel counts");
  require(D0.shape() == image.shape(), "sliding_window: shape mismatch");
  require(overlap >= 0.0 && overlap <= 0.9, "sliding_window: overlap outside [0, 0.9]");
  const auto& s = image.shape();
  require(s.nx >= P && s.ny >= P && s.nz >= P, "sliding_window: volume smaller than patch");

  const auto ox = tile_origins(s.nx, P, overlap);
  const auto oy = tile_origins(s.ny, P, overlap);
  const auto oz = tile_origins(s.nz, P, overlap);
  struct Tile { int x, y, z; };
  std::vector<Tile> tiles;
  for (int z : oz)
    for (int y : oy)
      for (int x : ox) tiles.push_back({x, y, z});

  // Initial noise is drawn per tile in tile order so the result does not
  // depend on the thread count.
  std::vector<Grid<T>> noises(tiles.size());
  for (auto& n : noises) {
    n = Grid<T>(classes, P, P, P);
    fill_normal(n, rng);
  }

  std::vector<Grid<T>> tile_probs(tiles.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, threads))
#endif
  for (std::int64_t i = 0; i < std::int64_t(tiles.size()); ++i) {
    const auto& t = tiles[std::size_t(i)];
    Grid<T> img(1, P, P, P), fld(3, P, P, P);
    for (int z = 0; z < P; ++z)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          img(0, x, y, z) = image(0, t.x + x, t.y + y, t.z + z);
          for (int c = 0; c < 3; ++c) fld(c, x, y, z) = D0(c, t.x + x, t.y + y, t.z + z);
        }
    tile_probs[std::size_t(i)] =
        sample_labels_from_noise(model, img, fld, noises[std::size_t(i)], sched, cfg);
  }

  Grid<T> w = taper_window<T>(P);
  Grid<T> acc(classes, s);
  Grid<T> wacc(1, s);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto& t = tiles[i];
    const auto& p = tile_probs[i];
    for (int z = 0; z < P; ++z)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          const T wv = w(0, x, y, z);
          wacc(0, t.x + x, t.y + y, t.z + z) += wv;
          for (int c = 0; c < classes; ++c)
            acc(c, t.x + x, t.y + y, t.z + z) += wv * p(c, x, y, z);
        }
  }
  for (int c = 0; c < classes; ++c) acc.channel(c) /= wacc.channel(0);
  // Renormalize the per-voxel class sums.
  ArrayX<T> sums = acc.as_matrix().rowwise().sum().array();
  for (int c = 0; c < classes; ++c) acc.channel(c) /= sums;
  return acc;
}

}  // namespace diffseg
