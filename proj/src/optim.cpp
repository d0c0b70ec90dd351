#include "susan/optim.hpp"

#include <cmath>
#include <string>

namespace susan {

template <typename T>
void adam_update(Tensor4<T>& param, const Tensor4<T>& grad, Tensor4<T>& m, Tensor4<T>& v, std::uint64_t t,
                 const AdamConfig& config) {
  if (grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape()) {
    throw ShapeError("adam_update: shape mismatch param " + param.shape().str() + " grad " + grad.shape().str());
  }
  if (t == 0) throw std::invalid_argument("adam_update: step counter must start at 1");
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = b1 * m[i] + (1.0 - b1) * g;
    const double vi = b2 * v[i] + (1.0 - b2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    param[i] = static_cast<T>(param[i] - config.learning_rate * mhat / (std::sqrt(vhat) + config.eps));
  }
}

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state) {
  if (state.m.empty() && state.v.empty() && state.step == 0) {
    for (const Parameter<T>* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer holds " + std::to_string(state.m.size()) + " moments for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = *params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() ||
        state.v[i].shape() != p.value.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + p.name);
    }
    if (!p.grad.all_finite()) throw NumericError("adam_step: non-finite gradient for " + p.name);
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i]->value, params[i]->grad, state.m[i], state.v[i], state.step, state.config);
  }
}

template void adam_update<float>(Tensor4<float>&, const Tensor4<float>&, Tensor4<float>&, Tensor4<float>&,
                                 std::uint64_t, const AdamConfig&);
template void adam_update<double>(Tensor4<double>&, const Tensor4<double>&, Tensor4<double>&, Tensor4<double>&,
                                  std::uint64_t, const AdamConfig&);
template void adam_step<float>(std::span<Parameter<float>* const>, AdamState<float>&);
template void adam_step<double>(std::span<Parameter<double>* const>, AdamState<double>&);

}  // namespace susan
