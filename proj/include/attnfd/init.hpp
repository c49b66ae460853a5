#pragma once

#include <cmath>

#include "attnfd/rng.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

inline Tensor normal_init(Rng& rng, const std::vector<int>& shape, real stddev) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = real(rng.normal()) * stddev;
  return t;
}

/// He initialization for layers followed by ReLU.
inline Tensor he_init(Rng& rng, const std::vector<int>& shape, int64_t fan_in) {
  return normal_init(rng, shape, std::sqrt(real(2) / real(fan_in)));
}

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Tensor uniform_fanin_init(Rng& rng, const std::vector<int>& shape, int64_t fan_in) {
  const real bound = real(1) / std::sqrt(real(fan_in));
  Tensor t(shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = real(rng.uniform(-double(bound), double(bound)));
  return t;
}

}  // namespace attnfd
