#pragma once

#include "diffseg/core/grid.hpp"
#include "diffseg/core/rng.hpp"

#include <numeric>
#include <string>
#include <vector>

namespace diffseg {

/// Registry of named parameter tensors living in one flat array. Modules
/// remember their offsets at construction; forward/backward receive the flat
/// parameter (and gradient) base pointers, so several evaluations can share
/// weights while writing gradients to private buffers.
struct ParamTable {
  struct Entry {
    std::string name;
    std::vector<int> dims;
    std::size_t offset = 0;
    std::size_t size = 0;
    double init_scale = 0.0;  // stddev of the normal init; 0 = no noise
    double init_const = 0.0;  // constant added on top
    std::size_t fan_in = 0;   // when nonzero, init_scale = sqrt(2/fan_in)
  };

  std::vector<Entry> entries;
  std::size_t total = 0;

  std::size_t add(std::string name, std::vector<int> dims, double init_scale = 0.0,
                  std::size_t fan_in = 0, double init_const = 0.0) {
    Entry e;
    e.name = std::move(name);
    e.dims = std::move(dims);
    e.size = std::accumulate(e.dims.begin(), e.dims.end(), std::size_t(1),
                             std::multiplies<>());
    e.offset = total;
    e.init_scale = init_scale;
    e.init_const = init_const;
    e.fan_in = fan_in;
    total += e.size;
    entries.push_back(std::move(e));
    return entries.back().offset;
  }
};

/// He-style initialization in table order; deterministic for a given seed.
template <typename T>
ArrayX<T> init_params(const ParamTable& table, Rng rng) {
  ArrayX<T> theta = ArrayX<T>::Zero(Eigen::Index(table.total));
  for (const auto& e : table.entries) {
    double scale = e.init_scale;
    if (e.fan_in > 0) scale = std::sqrt(2.0 / double(e.fan_in));
    if (scale == 0.0 && e.init_const == 0.0) continue;
    for (std::size_t i = 0; i < e.size; ++i)
      theta[Eigen::Index(e.offset + i)] =
          T(e.init_const + (scale != 0.0 ? scale * rng.normal() : 0.0));
  }
  return theta;
}

}  // namespace diffseg
