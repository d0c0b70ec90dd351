#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "susan/autodiff.hpp"
#include "susan/rng.hpp"

namespace susan {

enum class LayerKind {
  convolution,
  transposed_convolution,
  batch_norm,
  relu,
  leaky_relu,
  sigmoid,
  tanh,
  softmax_channels,
};

std::string to_string(LayerKind kind);

/// One layer of a network together with the parameters it owns.
///
/// Convolution weights are (out, in, k, k); transposed-convolution weights are (in, out, k, k)
/// and biases are (1, out, 1, 1). Batch normalization stores its scale/shift in weight/bias and
/// its running statistics in `running`.
template <typename T>
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  T alpha = T(0.2);
  Parameter<T> weight;
  Parameter<T> bias;
  RunningStats<T> running;
  double momentum = 0.99;
  double eps = 1e-5;
  /// Convolutions feeding batch normalization carry no bias (the shift absorbs it).
  bool has_bias = true;

  static LayerSpec convolution(std::string name, std::size_t in, std::size_t out, int kernel, int stride, int pad,
                               bool bias = true);
  static LayerSpec transposed_convolution(std::string name, std::size_t in, std::size_t out, int kernel, int stride,
                                          int pad, bool bias = true);
  static LayerSpec batch_norm(std::string name, std::size_t channels);
  static LayerSpec activation(std::string name, LayerKind kind, T alpha = T(0.2));

  [[nodiscard]] bool has_parameters() const;
  /// Trainable parameters (weight/bias or scale/shift).
  std::vector<Parameter<T>*> parameters();
  /// He-initialize weights from a seed derived from the layer name; biases and shifts zero,
  /// scales one, running statistics (0, 1).
  void initialize(std::uint64_t seed);

  /// Output shape for an input shape; throws ShapeError naming the layer and both shapes.
  [[nodiscard]] Shape output_shape(const Shape& in) const;
};

/// Record `spec` applied to x on the tape.
template <typename T>
Var apply_layer(Tape<T>& tape, LayerSpec<T>& spec, Var x, Mode mode);

/// Gradient-free convenience form.
template <typename T>
Tensor4<T> apply_layer(LayerSpec<T>& spec, const Tensor4<T>& x, Mode mode);

/// Zero-mean Gaussian samples with variance 2 / fan_in; deterministic given seed.
template <typename T>
Tensor4<T> he_initialize(const Shape& shape, double fan_in, std::uint64_t seed);

}  // namespace susan
