#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "susan/autodiff.hpp"

namespace susan {

struct AdamConfig {
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments for an ordered list of parameters.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor4<T>> m;
  std::vector<Tensor4<T>> v;
};

/// One bias-corrected Adam update of a single tensor at step t (t >= 1).
template <typename T>
void adam_update(Tensor4<T>& param, const Tensor4<T>& grad, Tensor4<T>& m, Tensor4<T>& v, std::uint64_t t,
                 const AdamConfig& config);

/// Apply one Adam step to every parameter using its accumulated grad. Moments are created on
/// the first call. Throws on shape mismatch or a non-finite gradient before touching anything.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state);

}  // namespace susan
