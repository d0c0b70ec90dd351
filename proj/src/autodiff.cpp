#include "susan/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace susan {

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable id");
  return nodes_[v.id];
}

template <typename T>
Var Tape<T>::constant(Tensor4<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::input(Tensor4<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& param) {
  Node n;
  n.external = &param.value;
  if (!frozen_) {
    n.requires_grad = true;
    n.param = &param;
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor4<T> value, bool requires_grad, BackwardFn fn) {
  if (consumed_) throw std::logic_error("tape: cannot record on a consumed tape");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const Tensor4<T>& Tape<T>::value(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable id");
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.owned;
}

template <typename T>
Tensor4<T>& Tape<T>::grad(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor4<T>(value(v).shape());
  return n.grad;
}

template <typename T>
const Tensor4<T>& Tape<T>::grad(Var v) const {
  return const_cast<Tape*>(this)->grad(v);
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  const Tensor4<T>& lv = value(loss);
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + lv.shape().str());
  }
  if (!std::isfinite(lv[0])) throw NumericError("backward: loss is not finite");
  consumed_ = true;
  if (!node(loss).requires_grad) return;
  grad(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      Parameter<T>& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor4<T>(p.value.shape());
      const std::size_t count = p.grad.size();
      for (std::size_t k = 0; k < count; ++k) p.grad[k] += nodes_[i].grad[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ops {
namespace {

template <typename T>
void require_finite(const Tensor4<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

template <typename T>
Var scalar_result(Tape<T>& tape, double value, bool requires_grad, typename Tape<T>::BackwardFn fn) {
  Tensor4<T> out(Shape{1, 1, 1, 1});
  out[0] = static_cast<T>(value);
  return tape.record(std::move(out), requires_grad, std::move(fn));
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Var unary(Tape<T>& tape, Var x, const char* name, Fwd fwd, Deriv deriv) {
  const Tensor4<T>& xv = tape.value(x);
  require_finite(xv, name);
  Tensor4<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return tape.record(std::move(out), tape.requires_grad(x), [x, deriv](Tape<T>& t, std::size_t self) {
    const Var sv{self};
    const Tensor4<T>& g = t.grad(sv);
    const Tensor4<T>& xs = t.value(x);
    const Tensor4<T>& ys = t.value(sv);
    Tensor4<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i], ys[i]);
  });
}

}  // namespace

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var scale, Var shift, RunningStats<T>& stats, Mode mode,
               double momentum, double eps) {
  const Tensor4<T>& xv = tape.value(x);
  require_finite(xv, "batch_norm");
  const Shape s = xv.shape();
  const Shape ps{1, s.c, 1, 1};
  if (tape.shape(scale) != ps || tape.shape(shift) != ps || stats.mean.shape() != ps ||
      stats.var.shape() != ps) {
    throw ShapeError("batch_norm: parameter shape " + tape.shape(scale).str() +
                     " incompatible with input " + s.str());
  }
  const std::size_t count = s.n * s.plane();
  const Tensor4<T>& gamma = tape.value(scale);
  const Tensor4<T>& beta = tape.value(shift);

  Tensor4<T> xhat(s);
  std::vector<double> invstd(s.c);
  const bool batch_stats = mode != Mode::eval;
  for (std::size_t c = 0; c < s.c; ++c) {
    double mu = 0.0;
    double var = 0.0;
    if (batch_stats) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = xv.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) mu += p[i];
      }
      mu /= static_cast<double>(count);
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = xv.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
      if (mode == Mode::train) {
        const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        stats.mean[c] = static_cast<T>(momentum * stats.mean[c] + (1.0 - momentum) * mu);
        stats.var[c] = static_cast<T>(momentum * stats.var[c] + (1.0 - momentum) * unbiased);
      }
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    invstd[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      T* q = xhat.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) q[i] = static_cast<T>((p[i] - mu) * invstd[c]);
    }
  }
  Tensor4<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* q = xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] = gamma[c] * q[i] + beta[c];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(scale) || tape.requires_grad(shift);
  return tape.record(std::move(out), rg,
                     [x, scale, shift, batch_stats, count, xhat = std::move(xhat),
                      invstd = std::move(invstd)](Tape<T>& t, std::size_t self) {
                       const Tensor4<T>& g = t.grad(Var{self});
                       const Shape s = g.shape();
                       const Tensor4<T>& gamma = t.value(scale);
                       for (std::size_t c = 0; c < s.c; ++c) {
                         double sum_g = 0.0;
                         double sum_gx = 0.0;
                         for (std::size_t n = 0; n < s.n; ++n) {
                           const T* gp = g.plane(n, c);
                           const T* q = xhat.plane(n, c);
                           for (std::size_t i = 0; i < s.plane(); ++i) {
                             sum_g += gp[i];
                             sum_gx += static_cast<double>(gp[i]) * q[i];
                           }
                         }
                         if (t.requires_grad(scale)) t.grad(scale)[c] += static_cast<T>(sum_gx);
                         if (t.requires_grad(shift)) t.grad(shift)[c] += static_cast<T>(sum_g);
                         if (!t.requires_grad(x)) continue;
                         Tensor4<T>& gx = t.grad(x);
                         const double k = gamma[c] * invstd[c];
                         const double m = static_cast<double>(count);
                         for (std::size_t n = 0; n < s.n; ++n) {
                           const T* gp = g.plane(n, c);
                           const T* q = xhat.plane(n, c);
                           T* dx = gx.plane(n, c);
                           for (std::size_t i = 0; i < s.plane(); ++i) {
                             if (batch_stats) {
                               dx[i] += static_cast<T>(k / m * (m * gp[i] - sum_g - q[i] * sum_gx));
                             } else {
                               dx[i] += static_cast<T>(k * gp[i]);
                             }
                           }
                         }
                       }
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  return unary(
      tape, x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T alpha) {
  if (!(alpha > T(0) && alpha < T(1))) throw std::invalid_argument("leaky_relu: alpha must lie in (0,1)");
  return unary(
      tape, x, "leaky_relu", [alpha](T v) { return v > T(0) ? v : alpha * v; },
      [alpha](T v, T) { return v > T(0) ? T(1) : alpha; });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  return unary(
      tape, x, "sigmoid",
      [](T v) {
        // Stable for large |v|.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var tanh(Tape<T>& tape, Var x) {
  return unary(
      tape, x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var softmax_channels(Tape<T>& tape, Var x) {
  const Tensor4<T>& xv = tape.value(x);
  require_finite(xv, "softmax_channels");
  const Shape s = xv.shape();
  Tensor4<T> out(s);
  const std::size_t hw = s.plane();
  std::vector<double> e(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(xv.plane(n, c)[i]));
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        e[c] = std::exp(xv.plane(n, c)[i] - mx);
        z += e[c];
      }
      for (std::size_t c = 0; c < s.c; ++c) out.plane(n, c)[i] = static_cast<T>(e[c] / z);
    }
  }
  return tape.record(std::move(out), tape.requires_grad(x), [x](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& g = t.grad(Var{self});
    const Tensor4<T>& y = t.value(Var{self});
    Tensor4<T>& gx = t.grad(x);
    const Shape s = y.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < s.plane(); ++i) {
        double dot = 0.0;
        for (std::size_t c = 0; c < s.c; ++c) dot += static_cast<double>(g.plane(n, c)[i]) * y.plane(n, c)[i];
        for (std::size_t c = 0; c < s.c; ++c) {
          gx.plane(n, c)[i] += static_cast<T>(y.plane(n, c)[i] * (g.plane(n, c)[i] - dot));
        }
      }
    }
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Tensor4<T>& av = tape.value(a);
  const Tensor4<T>& bv = tape.value(b);
  const Shape sa = av.shape();
  const Shape sb = bv.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: shape mismatch " + sa.str() + " vs " + sb.str());
  }
  Tensor4<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t hw = sa.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(av.plane(n, 0), sa.c * hw, out.plane(n, 0));
    std::copy_n(bv.plane(n, 0), sb.c * hw, out.plane(n, sa.c));
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b, sa, sb](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& g = t.grad(Var{self});
    const std::size_t hw = sa.plane();
    for (std::size_t n = 0; n < sa.n; ++n) {
      if (t.requires_grad(a)) {
        T* ga = t.grad(a).plane(n, 0);
        const T* src = g.plane(n, 0);
        for (std::size_t i = 0; i < sa.c * hw; ++i) ga[i] += src[i];
      }
      if (t.requires_grad(b)) {
        T* gb = t.grad(b).plane(n, 0);
        const T* src = g.plane(n, sa.c);
        for (std::size_t i = 0; i < sb.c * hw; ++i) gb[i] += src[i];
      }
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor4<T>& av = tape.value(a);
  const Tensor4<T>& bv = tape.value(b);
  require_same_shape(av, bv, "add");
  Tensor4<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& g = t.grad(Var{self});
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor4<T>& gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const Tensor4<T>& av = tape.value(a);
  Tensor4<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return tape.record(std::move(out), tape.requires_grad(a), [a, factor](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& g = t.grad(Var{self});
    Tensor4<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor4<T>& xv = tape.value(x);
  double total = 0.0;
  for (T v : xv.values()) total += v;
  return scalar_result<T>(tape, total, tape.requires_grad(x), [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad(Var{self})[0];
    Tensor4<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var mean(Tape<T>& tape, Var x) {
  const Tensor4<T>& xv = tape.value(x);
  if (xv.empty()) throw ShapeError("mean: empty tensor");
  double total = 0.0;
  for (T v : xv.values()) total += v;
  const double count = static_cast<double>(xv.size());
  return scalar_result<T>(tape, total / count, tape.requires_grad(x), [x, count](Tape<T>& t, std::size_t self) {
    const T g = static_cast<T>(t.grad(Var{self})[0] / count);
    Tensor4<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var mean_abs_diff(Tape<T>& tape, Var a, Var b) {
  const Tensor4<T>& av = tape.value(a);
  const Tensor4<T>& bv = tape.value(b);
  require_same_shape(av, bv, "mean_abs_diff");
  if (av.empty()) throw ShapeError("mean_abs_diff: empty tensor");
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += std::abs(static_cast<double>(av[i]) - bv[i]);
  const double count = static_cast<double>(av.size());
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return scalar_result<T>(tape, total / count, rg, [a, b, count](Tape<T>& t, std::size_t self) {
    const double g = t.grad(Var{self})[0] / count;
    const Tensor4<T>& av = t.value(a);
    const Tensor4<T>& bv = t.value(b);
    const bool ga_on = t.requires_grad(a);
    const bool gb_on = t.requires_grad(b);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = static_cast<double>(av[i]) - bv[i];
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (ga_on) t.grad(a)[i] += static_cast<T>(g * sgn);
      if (gb_on) t.grad(b)[i] -= static_cast<T>(g * sgn);
    }
  });
}

template <typename T>
Var mean_sq_to(Tape<T>& tape, Var a, T target) {
  const Tensor4<T>& av = tape.value(a);
  if (av.empty()) throw ShapeError("mean_sq_to: empty tensor");
  double total = 0.0;
  for (T v : av.values()) total += (static_cast<double>(v) - target) * (static_cast<double>(v) - target);
  const double count = static_cast<double>(av.size());
  return scalar_result<T>(tape, total / count, tape.requires_grad(a), [a, target, count](Tape<T>& t, std::size_t self) {
    const double g = t.grad(Var{self})[0] / count;
    const Tensor4<T>& av = t.value(a);
    Tensor4<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += static_cast<T>(2.0 * g * (static_cast<double>(av[i]) - target));
  });
}

namespace {

template <typename T>
Var mean_log_impl(Tape<T>& tape, Var p, double eps, bool complement, const char* name) {
  const Tensor4<T>& pv = tape.value(p);
  require_finite(pv, name);
  if (pv.empty()) throw ShapeError(std::string(name) + ": empty tensor");
  double total = 0.0;
  for (T v : pv.values()) {
    const double c = std::clamp(static_cast<double>(v), eps, 1.0 - eps);
    total += complement ? std::log(1.0 - c) : std::log(c);
  }
  const double count = static_cast<double>(pv.size());
  const double value = total / count;
  if (!std::isfinite(value)) throw NumericError(std::string(name) + ": non-finite after clamp");
  return scalar_result<T>(tape, value, tape.requires_grad(p), [p, eps, complement, count](Tape<T>& t, std::size_t self) {
    const double g = t.grad(Var{self})[0] / count;
    const Tensor4<T>& pv = t.value(p);
    Tensor4<T>& gp = t.grad(p);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double v = pv[i];
      if (v <= eps || v >= 1.0 - eps) continue;
      gp[i] += static_cast<T>(complement ? -g / (1.0 - v) : g / v);
    }
  });
}

}  // namespace

template <typename T>
Var mean_log(Tape<T>& tape, Var p, double eps) {
  return mean_log_impl(tape, p, eps, false, "mean_log");
}

template <typename T>
Var mean_log1m(Tape<T>& tape, Var p, double eps) {
  return mean_log_impl(tape, p, eps, true, "mean_log1m");
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var probs, const std::vector<unsigned char>& labels, double eps) {
  const Tensor4<T>& pv = tape.value(probs);
  require_finite(pv, "cross_entropy");
  const Shape s = pv.shape();
  const std::size_t pixels = s.n * s.plane();
  if (labels.size() != pixels) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for probability shape " +
                     s.str());
  }
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const unsigned char lab = labels[n * s.plane() + i];
      if (lab >= s.c) {
        throw std::out_of_range("cross_entropy: label " + std::to_string(lab) + " outside [0," +
                                std::to_string(s.c) + ")");
      }
      total -= std::log(std::max(static_cast<double>(pv.plane(n, lab)[i]), eps));
    }
  }
  const double count = static_cast<double>(pixels);
  return scalar_result<T>(tape, total / count, tape.requires_grad(probs),
                          [probs, labels, eps, count](Tape<T>& t, std::size_t self) {
                            const double g = t.grad(Var{self})[0] / count;
                            const Tensor4<T>& pv = t.value(probs);
                            Tensor4<T>& gp = t.grad(probs);
                            const Shape s = pv.shape();
                            for (std::size_t n = 0; n < s.n; ++n) {
                              for (std::size_t i = 0; i < s.plane(); ++i) {
                                const unsigned char lab = labels[n * s.plane() + i];
                                const double p = pv.plane(n, lab)[i];
                                if (p <= eps) continue;
                                gp.plane(n, lab)[i] += static_cast<T>(-g / p);
                              }
                            }
                          });
}

#define SUSAN_INSTANTIATE_OPS(T)                                                                       \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, RunningStats<T>&, Mode, double, double);      \
  template Var relu<T>(Tape<T>&, Var);                                                              \
  template Var leaky_relu<T>(Tape<T>&, Var, T);                                                     \
  template Var sigmoid<T>(Tape<T>&, Var);                                                           \
  template Var tanh<T>(Tape<T>&, Var);                                                              \
  template Var softmax_channels<T>(Tape<T>&, Var);                                                  \
  template Var concat_channels<T>(Tape<T>&, Var, Var);                                              \
  template Var add<T>(Tape<T>&, Var, Var);                                                          \
  template Var scale<T>(Tape<T>&, Var, T);                                                          \
  template Var sum<T>(Tape<T>&, Var);                                                               \
  template Var mean<T>(Tape<T>&, Var);                                                              \
  template Var mean_abs_diff<T>(Tape<T>&, Var, Var);                                                \
  template Var mean_sq_to<T>(Tape<T>&, Var, T);                                                     \
  template Var mean_log<T>(Tape<T>&, Var, double);                                                  \
  template Var mean_log1m<T>(Tape<T>&, Var, double);                                                \
  template Var cross_entropy<T>(Tape<T>&, Var, const std::vector<unsigned char>&, double);

SUSAN_INSTANTIATE_OPS(float)
SUSAN_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace susan
