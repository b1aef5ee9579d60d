#include "diffseg/schedule.hpp"

namespace diffseg {

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "cosine";
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.alpha.resize(T + 1);
  if (kind == ScheduleKind::linear) {
    for (int t = 0; t <= T; ++t) s.alpha[t] = 1.0 - double(t) / double(T);
  } else {
    // Squared-cosine cumulative profile, clipped to [1e-5, 1].
    const double off = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / T + off) / (1.0 + off) * M_PI / 2.0);
      return v * v;
    };
    const double f0 = f(0.0);
    for (int t = 0; t <= T; ++t)
      s.alpha[t] = std::clamp(f(double(t)) / f0, 1e-5, 1.0);
    s.alpha[0] = 1.0;
  }
  return s;
}

}  // namespace diffseg
