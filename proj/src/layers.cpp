#include "susan/layers.hpp"

#include <stdexcept>

namespace susan {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::convolution: return "convolution";
    case LayerKind::transposed_convolution: return "transposed-convolution";
    case LayerKind::batch_norm: return "batch-normalization";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky-relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::tanh: return "tanh";
    case LayerKind::softmax_channels: return "softmax-over-channels";
  }
  return "unknown";
}

template <typename T>
LayerSpec<T> LayerSpec<T>::convolution(std::string name, std::size_t in, std::size_t out, int kernel, int stride,
                                       int pad, bool bias) {
  if (kernel < 1 || stride < 1 || pad < 0 || in == 0 || out == 0) {
    throw std::invalid_argument("layer " + name + ": invalid convolution geometry");
  }
  LayerSpec s;
  s.kind = LayerKind::convolution;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  const auto k = static_cast<std::size_t>(kernel);
  s.weight = Parameter<T>(name + ".weight", Tensor4<T>(Shape{out, in, k, k}));
  s.has_bias = bias;
  if (bias) s.bias = Parameter<T>(name + ".bias", Tensor4<T>(Shape{1, out, 1, 1}));
  s.name = std::move(name);
  return s;
}

template <typename T>
LayerSpec<T> LayerSpec<T>::transposed_convolution(std::string name, std::size_t in, std::size_t out, int kernel,
                                                  int stride, int pad, bool bias) {
  if (kernel < 1 || stride < 1 || pad < 0 || in == 0 || out == 0) {
    throw std::invalid_argument("layer " + name + ": invalid transposed-convolution geometry");
  }
  LayerSpec s;
  s.kind = LayerKind::transposed_convolution;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  const auto k = static_cast<std::size_t>(kernel);
  s.weight = Parameter<T>(name + ".weight", Tensor4<T>(Shape{in, out, k, k}));
  s.has_bias = bias;
  if (bias) s.bias = Parameter<T>(name + ".bias", Tensor4<T>(Shape{1, out, 1, 1}));
  s.name = std::move(name);
  return s;
}

template <typename T>
LayerSpec<T> LayerSpec<T>::batch_norm(std::string name, std::size_t channels) {
  LayerSpec s;
  s.kind = LayerKind::batch_norm;
  const Shape ps{1, channels, 1, 1};
  s.weight = Parameter<T>(name + ".scale", Tensor4<T>(ps, T(1)));
  s.bias = Parameter<T>(name + ".shift", Tensor4<T>(ps, T(0)));
  s.running.mean = Tensor4<T>(ps, T(0));
  s.running.var = Tensor4<T>(ps, T(1));
  s.name = std::move(name);
  return s;
}

template <typename T>
LayerSpec<T> LayerSpec<T>::activation(std::string name, LayerKind kind, T alpha) {
  if (kind == LayerKind::convolution || kind == LayerKind::transposed_convolution || kind == LayerKind::batch_norm) {
    throw std::invalid_argument("layer " + name + ": " + to_string(kind) + " is not an activation");
  }
  if (kind == LayerKind::leaky_relu && !(alpha > T(0) && alpha < T(1))) {
    throw std::invalid_argument("layer " + name + ": leaky-relu alpha must lie in (0,1)");
  }
  LayerSpec s;
  s.kind = kind;
  s.alpha = alpha;
  s.name = std::move(name);
  return s;
}

template <typename T>
bool LayerSpec<T>::has_parameters() const {
  return kind == LayerKind::convolution || kind == LayerKind::transposed_convolution ||
         kind == LayerKind::batch_norm;
}

template <typename T>
std::vector<Parameter<T>*> LayerSpec<T>::parameters() {
  if (!has_parameters()) return {};
  if (!has_bias) return {&weight};
  return {&weight, &bias};
}

template <typename T>
void LayerSpec<T>::initialize(std::uint64_t seed) {
  switch (kind) {
    case LayerKind::convolution: {
      const Shape s = weight.value.shape();
      weight.value = he_initialize<T>(s, static_cast<double>(s.c * s.h * s.w), derive_seed(seed, weight.name));
      bias.value.fill(T(0));
      break;
    }
    case LayerKind::transposed_convolution: {
      // Each output pixel receives in * (k / stride)^2 contributions.
      const Shape s = weight.value.shape();
      const double fan_in = static_cast<double>(s.n * s.h * s.w) / static_cast<double>(stride * stride);
      weight.value = he_initialize<T>(s, fan_in, derive_seed(seed, weight.name));
      bias.value.fill(T(0));
      break;
    }
    case LayerKind::batch_norm:
      weight.value.fill(T(1));
      bias.value.fill(T(0));
      running.mean.fill(T(0));
      running.var.fill(T(1));
      break;
    default:
      break;
  }
  weight.zero_grad();
  bias.zero_grad();
}

template <typename T>
Shape LayerSpec<T>::output_shape(const Shape& in) const {
  auto fail = [&](const Shape& expected_like) {
    throw ShapeError("layer " + name + " (" + to_string(kind) + "): input shape " + in.str() +
                     " incompatible with parameter shape " + expected_like.str());
  };
  switch (kind) {
    case LayerKind::convolution: {
      const Shape ws = weight.value.shape();
      if (in.c != ws.c) fail(ws);
      const std::size_t ph = in.h + 2 * static_cast<std::size_t>(pad);
      const std::size_t pw = in.w + 2 * static_cast<std::size_t>(pad);
      const auto k = static_cast<std::size_t>(kernel);
      if (ph < k || pw < k) fail(ws);
      return Shape{in.n, ws.n, (ph - k) / stride + 1, (pw - k) / stride + 1};
    }
    case LayerKind::transposed_convolution: {
      const Shape ws = weight.value.shape();
      if (in.c != ws.n || in.h == 0 || in.w == 0) fail(ws);
      const auto oh = static_cast<std::ptrdiff_t>((in.h - 1) * stride + kernel) - 2 * pad;
      const auto ow = static_cast<std::ptrdiff_t>((in.w - 1) * stride + kernel) - 2 * pad;
      if (oh <= 0 || ow <= 0) fail(ws);
      return Shape{in.n, ws.c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
    }
    case LayerKind::batch_norm:
      if (in.c != weight.value.shape().c) fail(weight.value.shape());
      return in;
    default:
      return in;
  }
}

template <typename T>
Var apply_layer(Tape<T>& tape, LayerSpec<T>& spec, Var x, Mode mode) {
  const Shape in = tape.shape(x);
  (void)spec.output_shape(in);  // validates
  if (!tape.value(x).all_finite()) {
    throw NumericError("layer " + spec.name + " (" + to_string(spec.kind) + "): non-finite input");
  }
  switch (spec.kind) {
    case LayerKind::convolution:
      return ops::conv2d(tape, x, tape.parameter(spec.weight), spec.has_bias ? tape.parameter(spec.bias) : Var{},
                         spec.stride, spec.pad);
    case LayerKind::transposed_convolution:
      return ops::conv_transpose2d(tape, x, tape.parameter(spec.weight),
                                   spec.has_bias ? tape.parameter(spec.bias) : Var{}, spec.stride, spec.pad);
    case LayerKind::batch_norm:
      return ops::batch_norm(tape, x, tape.parameter(spec.weight), tape.parameter(spec.bias), spec.running, mode,
                             spec.momentum, spec.eps);
    case LayerKind::relu: return ops::relu(tape, x);
    case LayerKind::leaky_relu: return ops::leaky_relu(tape, x, spec.alpha);
    case LayerKind::sigmoid: return ops::sigmoid(tape, x);
    case LayerKind::tanh: return ops::tanh(tape, x);
    case LayerKind::softmax_channels: return ops::softmax_channels(tape, x);
  }
  throw std::logic_error("apply_layer: unknown layer kind");
}

template <typename T>
Tensor4<T> apply_layer(LayerSpec<T>& spec, const Tensor4<T>& x, Mode mode) {
  Tape<T> tape;
  const Var v = apply_layer(tape, spec, tape.constant(x), mode);
  return tape.value(v);
}

template <typename T>
Tensor4<T> he_initialize(const Shape& shape, double fan_in, std::uint64_t seed) {
  if (!(fan_in > 0.0)) throw std::invalid_argument("he_initialize: fan_in must be positive");
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / fan_in);
  Tensor4<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return out;
}

template struct LayerSpec<float>;
template struct LayerSpec<double>;
template Var apply_layer<float>(Tape<float>&, LayerSpec<float>&, Var, Mode);
template Var apply_layer<double>(Tape<double>&, LayerSpec<double>&, Var, Mode);
template Tensor4<float> apply_layer<float>(LayerSpec<float>&, const Tensor4<float>&, Mode);
template Tensor4<double> apply_layer<double>(LayerSpec<double>&, const Tensor4<double>&, Mode);
template Tensor4<float> he_initialize<float>(const Shape&, double, std::uint64_t);
template Tensor4<double> he_initialize<double>(const Shape&, double, std::uint64_t);

}  // namespace susan
