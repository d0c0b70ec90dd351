#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "susan/tensor.hpp"

namespace susan {

/// Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12), where the
/// numeric derivative is the fourth-order central difference built from steps h and 2h.
/// f returns double so a float network can be probed without rounding the loss itself.
/// `floor` bounds the denominator from below (raise it to ignore elements that are zero up to
/// roundoff of f).
template <typename T>
double gradient_check(const std::function<double(const Tensor4<T>&)>& f, const Tensor4<T>& analytic, const Tensor4<T>& x,
                      T step, double floor = 1e-12) {
  if (!(step > T(0))) throw std::invalid_argument("gradient_check: step must be positive");
  if (analytic.shape() != x.shape()) {
    throw ShapeError("gradient_check: analytic gradient " + analytic.shape().str() + " vs input " + x.shape().str());
  }
  Tensor4<T> probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    // The realized offsets may differ from multiples of `step` after rounding to T.
    auto eval = [&](int k, double& offset) {
      probe[i] = static_cast<T>(orig + T(k) * step);
      offset = static_cast<double>(probe[i]) - static_cast<double>(orig);
      const double v = f(probe);
      if (!std::isfinite(v)) throw NumericError("gradient_check: function not finite at element " + std::to_string(i));
      return v;
    };
    double h1p, h1m, h2p, h2m;
    const double f1p = eval(1, h1p);
    const double f1m = eval(-1, h1m);
    const double f2p = eval(2, h2p);
    const double f2m = eval(-2, h2m);
    probe[i] = orig;
    // Richardson combination of the two central differences cancels the h^2 error term.
    const double d1 = (f1p - f1m) / (h1p - h1m);
    const double d2 = (f2p - f2m) / (h2p - h2m);
    const double numeric = (4.0 * d1 - d2) / 3.0;
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

/// Convenience overload: `fg` returns the value and fills the analytic gradient.
template <typename T>
double gradient_check(const std::function<double(const Tensor4<T>&, Tensor4<T>*)>& fg, const Tensor4<T>& x, T step) {
  Tensor4<T> analytic(x.shape());
  fg(x, &analytic);
  return gradient_check<T>([&](const Tensor4<T>& p) { return fg(p, nullptr); }, analytic, x, step);
}

}  // namespace susan
