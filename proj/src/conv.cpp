// Convolution and transposed convolution via im2col + GEMM (Eigen).

#include <Eigen/Core>

#include "susan/autodiff.hpp"

namespace susan::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct Geometry {
  std::size_t channels, height, width;  // image side
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;  // column side
  [[nodiscard]] std::size_t rows() const { return channels * kernel * kernel; }
  [[nodiscard]] std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* image, const Geometry& g, T* col) {
  const auto ih_max = static_cast<std::ptrdiff_t>(g.height);
  const auto iw_max = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= ih_max) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = plane + ih * iw_max;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= iw_max) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

// Scatter-add of columns back onto the image; the adjoint of im2col.
template <typename T>
void col2im(const T* col, const Geometry& g, T* image) {
  const auto ih_max = static_cast<std::ptrdiff_t>(g.height);
  const auto iw_max = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= ih_max) continue;
          const T* src = row + oh * g.out_w;
          T* dst = plane + ih * iw_max;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < iw_max) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_inputs(const Tape<T>& tape, Var x, Var weight, Var bias, std::size_t in_channels_axis_value,
                       std::size_t out_channels, const char* name) {
  const Tensor4<T>& xv = tape.value(x);
  const Tensor4<T>& wv = tape.value(weight);
  if (wv.shape().h != wv.shape().w || wv.shape().h == 0) {
    throw ShapeError(std::string(name) + ": kernel must be square and non-empty, got weight " + wv.shape().str());
  }
  if (xv.shape().c != in_channels_axis_value) {
    throw ShapeError(std::string(name) + ": input " + xv.shape().str() + " incompatible with weight " +
                     wv.shape().str());
  }
  if (bias.valid() && tape.shape(bias) != Shape{1, out_channels, 1, 1}) {
    throw ShapeError(std::string(name) + ": bias shape " + tape.shape(bias).str() + " expected (1," +
                     std::to_string(out_channels) + ",1,1)");
  }
  if (!xv.all_finite()) throw NumericError(std::string(name) + ": non-finite input");
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int pad) {
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: invalid stride/padding");
  const Shape ws = tape.shape(weight);  // (Cout, Cin, k, k)
  check_conv_inputs(tape, x, weight, bias, ws.c, ws.n, "conv2d");
  const Shape xs = tape.shape(x);
  const std::size_t k = ws.h;
  const std::size_t padded_h = xs.h + 2 * static_cast<std::size_t>(pad);
  const std::size_t padded_w = xs.w + 2 * static_cast<std::size_t>(pad);
  if (padded_h < k || padded_w < k) {
    throw ShapeError("conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());
  }
  Geometry g{xs.c, xs.h, xs.w, k, static_cast<std::size_t>(stride), static_cast<std::size_t>(pad),
             (padded_h - k) / stride + 1, (padded_w - k) / stride + 1};
  const Shape os{xs.n, ws.n, g.out_h, g.out_w};
  Tensor4<T> out(os);
  AlignedVector<T> col(g.rows() * g.cols());
  const Tensor4<T>& xv = tape.value(x);
  ConstMatMap<T> w(tape.value(weight).data(), ws.n, g.rows());
  ConstMatMap<T> colm(col.data(), g.rows(), g.cols());
  for (std::size_t n = 0; n < xs.n; ++n) {
    im2col(xv.plane(n, 0), g, col.data());
    MatMap<T> o(out.plane(n, 0), ws.n, g.cols());
    o.noalias() = w * colm;
    if (bias.valid()) {
      const Tensor4<T>& bv = tape.value(bias);
      for (std::size_t c = 0; c < ws.n; ++c) o.row(c).array() += bv[c];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || (bias.valid() && tape.requires_grad(bias));
  return tape.record(std::move(out), rg, [x, weight, bias, g](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& gout = t.grad(Var{self});
    const Shape os = gout.shape();
    const Tensor4<T>& xv = t.value(x);
    const Shape ws = t.shape(weight);
    const bool need_w = t.requires_grad(weight);
    const bool need_b = bias.valid() && t.requires_grad(bias);
    const bool need_x = t.requires_grad(x);
    AlignedVector<T> col(g.rows() * g.cols());
    ConstMatMap<T> w(t.value(weight).data(), ws.n, g.rows());
    RowMat<T> dw;
    if (need_w) dw = RowMat<T>::Zero(ws.n, g.rows());
    for (std::size_t n = 0; n < os.n; ++n) {
      ConstMatMap<T> go(gout.plane(n, 0), os.c, g.cols());
      if (need_w) {
        im2col(xv.plane(n, 0), g, col.data());
        dw.noalias() += go * ConstMatMap<T>(col.data(), g.rows(), g.cols()).transpose();
      }
      if (need_b) {
        Tensor4<T>& gb = t.grad(bias);
        for (std::size_t c = 0; c < os.c; ++c) gb[c] += go.row(c).sum();
      }
      if (need_x) {
        MatMap<T> dcol(col.data(), g.rows(), g.cols());
        dcol.noalias() = w.transpose() * go;
        col2im(col.data(), g, t.grad(x).plane(n, 0));
      }
    }
    if (need_w) {
      MatMap<T> gw(t.grad(weight).data(), ws.n, g.rows());
      gw += dw;
    }
  });
}

template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int pad) {
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv_transpose2d: invalid stride/padding");
  const Shape ws = tape.shape(weight);  // (Cin, Cout, k, k)
  check_conv_inputs(tape, x, weight, bias, ws.n, ws.c, "conv_transpose2d");
  const Shape xs = tape.shape(x);
  const std::size_t k = ws.h;
  const auto out_h = static_cast<std::ptrdiff_t>((xs.h - 1) * stride + k) - 2 * pad;
  const auto out_w = static_cast<std::ptrdiff_t>((xs.w - 1) * stride + k) - 2 * pad;
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError("conv_transpose2d: non-positive output size for input " + xs.str() + " and weight " +
                     ws.str());
  }
  // Geometry of the equivalent forward convolution that maps the output back onto the input.
  Geometry g{ws.c, static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w), k,
             static_cast<std::size_t>(stride), static_cast<std::size_t>(pad), xs.h, xs.w};
  const Shape os{xs.n, ws.c, g.height, g.width};
  Tensor4<T> out(os);
  AlignedVector<T> col(g.rows() * g.cols());
  const Tensor4<T>& xv = tape.value(x);
  ConstMatMap<T> w(tape.value(weight).data(), ws.n, g.rows());
  MatMap<T> colm(col.data(), g.rows(), g.cols());
  for (std::size_t n = 0; n < xs.n; ++n) {
    colm.noalias() = w.transpose() * ConstMatMap<T>(xv.plane(n, 0), xs.c, g.cols());
    col2im(col.data(), g, out.plane(n, 0));
    if (bias.valid()) {
      const Tensor4<T>& bv = tape.value(bias);
      MatMap<T> o(out.plane(n, 0), os.c, os.plane());
      for (std::size_t c = 0; c < os.c; ++c) o.row(c).array() += bv[c];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || (bias.valid() && tape.requires_grad(bias));
  return tape.record(std::move(out), rg, [x, weight, bias, g](Tape<T>& t, std::size_t self) {
    const Tensor4<T>& gout = t.grad(Var{self});
    const Shape os = gout.shape();
    const Tensor4<T>& xv = t.value(x);
    const Shape xs = xv.shape();
    const Shape ws = t.shape(weight);
    const bool need_w = t.requires_grad(weight);
    const bool need_b = bias.valid() && t.requires_grad(bias);
    const bool need_x = t.requires_grad(x);
    AlignedVector<T> col(g.rows() * g.cols());
    ConstMatMap<T> w(t.value(weight).data(), ws.n, g.rows());
    ConstMatMap<T> colm(col.data(), g.rows(), g.cols());
    RowMat<T> dw;
    if (need_w) dw = RowMat<T>::Zero(ws.n, g.rows());
    for (std::size_t n = 0; n < os.n; ++n) {
      if (need_b) {
        Tensor4<T>& gb = t.grad(bias);
        ConstMatMap<T> go(gout.plane(n, 0), os.c, os.plane());
        for (std::size_t c = 0; c < os.c; ++c) gb[c] += go.row(c).sum();
      }
      if (!need_w && !need_x) continue;
      im2col(gout.plane(n, 0), g, col.data());
      if (need_w) dw.noalias() += ConstMatMap<T>(xv.plane(n, 0), xs.c, g.cols()) * colm.transpose();
      if (need_x) {
        MatMap<T> dx(t.grad(x).plane(n, 0), xs.c, g.cols());
        dx.noalias() += w * colm;
      }
    }
    if (need_w) {
      MatMap<T> gw(t.grad(weight).data(), ws.n, g.rows());
      gw += dw;
    }
  });
}

template Var conv2d<float>(Tape<float>&, Var, Var, Var, int, int);
template Var conv2d<double>(Tape<double>&, Var, Var, Var, int, int);
template Var conv_transpose2d<float>(Tape<float>&, Var, Var, Var, int, int);
template Var conv_transpose2d<double>(Tape<double>&, Var, Var, Var, int, int);

}  // namespace susan::ops
