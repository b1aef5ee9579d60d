#pragma once

#include "diffseg/losses.hpp"

namespace diffseg {

/// Map a one-hot label map into the diffusion state space: 2*onehot - 1,
/// values in {-1, +1}. Rejects inputs that are not channelwise one-hot.
template <typename T>
Grid<T> encode_label(const Grid<T>& onehot) {
  const T tol = T(1e-6);
  auto v = onehot.array();
  if (((v - T(0)).abs() > tol && (v - T(1)).abs() > tol).any())
    throw std::invalid_argument("encode_label: entries must be 0 or 1");
  ArrayX<T> sums = onehot.as_matrix().rowwise().sum().array();
  if (((sums - T(1)).abs() > tol).any())
    throw std::invalid_argument("encode_label: channel sums must be 1");
  Grid<T> out = Grid<T>::uninit(onehot.channels(), onehot.shape());
  out.array() = T(2) * onehot.array() - T(1);
  return out;
}

/// Decode logits to per-class probabilities (channelwise softmax).
template <typename T>
Grid<T> decode_label(const Grid<T>& logits) {
  return softmax_channels(logits);
}

}  // namespace diffseg
