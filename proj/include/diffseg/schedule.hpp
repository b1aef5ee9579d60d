#pragma once

#include "diffseg/core/grid.hpp"
#include "diffseg/core/rng.hpp"

#include <cmath>
#include <string>

namespace diffseg {

enum class ScheduleKind { linear, cosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

/// Cumulative signal coefficients alpha_t for t = 0..T, as they appear in
/// x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps. alpha[0] == 1 (clean
/// signal), alpha[T] <= 1e-4 (near-pure noise), non-increasing throughout.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  int T = 0;
  Eigen::ArrayXd alpha;  // size T+1

  double alpha_at(int t) const {
    if (t < 0 || t > T) throw std::invalid_argument("schedule: t outside [0,T]");
    return alpha[t];
  }
};

NoiseSchedule make_schedule(ScheduleKind kind, int T);

/// Timesteps for the two diffusion states (distance field, label map),
/// drawn uniformly and independently from {0,...,T}.
struct TimestepPair {
  int t_d = 0;
  int t_m = 0;
};

inline TimestepPair sample_timestep_pair(int T, Rng& rng) {
  if (T < 1) throw std::invalid_argument("sample_timestep_pair: T must be >= 1");
  TimestepPair p;
  p.t_d = rng.uniform_int(0, T);
  p.t_m = rng.uniform_int(0, T);
  return p;
}

/// x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) noise, elementwise. Applies
/// to encoded label maps and distance fields alike.
template <typename T>
Grid<T> forward_noise(const Grid<T>& x0, int t, const NoiseSchedule& s, const Grid<T>& noise) {
  require_same_layout(x0, noise, "forward_noise");
  const double a = s.alpha_at(t);
  const T sa = T(std::sqrt(a));
  const T sn = T(std::sqrt(1.0 - a));
  Grid<T> out = Grid<T>::uninit(x0.channels(), x0.shape());
  out.array() = sa * x0.array() + sn * noise.array();
  return out;
}

}  // namespace diffseg
