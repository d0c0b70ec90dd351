#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "susan/tensor.hpp"

namespace susan {

/// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor4<T> value;
  Tensor4<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor4<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor4<T>(value.shape());
    grad.fill(T(0));
  }
};

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  [[nodiscard]] bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward() walks it in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// Value that never receives a gradient.
  Var constant(Tensor4<T> value);
  /// Leaf that receives a gradient (read it back with grad()).
  Var input(Tensor4<T> value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad. The parameter must
  /// outlive the tape and must not be modified while the tape is alive.
  Var parameter(Parameter<T>& param);

  /// While frozen, parameter() binds values without gradient tracking (used to run a network
  /// whose weights must not be updated by this tape).
  void freeze_parameters(bool frozen) { frozen_ = frozen; }
  [[nodiscard]] bool parameters_frozen() const { return frozen_; }

  /// Append an op result. `fn` reads grad(self) and accumulates into its parents.
  Var record(Tensor4<T> value, bool requires_grad, BackwardFn fn);

  [[nodiscard]] const Tensor4<T>& value(Var v) const;
  [[nodiscard]] const Shape& shape(Var v) const { return value(v).shape(); }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node (zero-filled on first access).
  Tensor4<T>& grad(Var v);
  [[nodiscard]] const Tensor4<T>& grad(Var v) const;

  /// Backpropagate from a scalar (single element) loss. A tape can be consumed once.
  void backward(Var loss);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor4<T> owned;
    const Tensor4<T>* external = nullptr;
    Tensor4<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };
  Node& node(Var v);
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool frozen_ = false;
};

enum class Mode {
  train,               ///< batch statistics, running statistics updated
  train_frozen_stats,  ///< batch statistics, running statistics left untouched
  eval,                ///< running statistics
};

/// Per-channel running statistics of a batch-normalization layer, shape (1, C, 1, 1).
template <typename T>
struct RunningStats {
  Tensor4<T> mean;
  Tensor4<T> var;
};

// Differentiable primitives. Each checks shapes and finiteness of its inputs and throws
// ShapeError / NumericError with the op name in the message.
namespace ops {

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int pad);
template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int pad);

/// Per-channel batch normalization. Running statistics follow
/// running = momentum * running + (1 - momentum) * batch (unbiased batch variance).
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var scale, Var shift, RunningStats<T>& stats, Mode mode,
               double momentum, double eps);

template <typename T>
Var relu(Tape<T>& tape, Var x);
template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T alpha);
template <typename T>
Var sigmoid(Tape<T>& tape, Var x);
template <typename T>
Var tanh(Tape<T>& tape, Var x);
/// Softmax across the channel axis at every (n, h, w).
template <typename T>
Var softmax_channels(Tape<T>& tape, Var x);

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var scale(Tape<T>& tape, Var a, T factor);
template <typename T>
Var sum(Tape<T>& tape, Var x);
template <typename T>
Var mean(Tape<T>& tape, Var x);

/// mean |a - b| over all elements.
template <typename T>
Var mean_abs_diff(Tape<T>& tape, Var a, Var b);
/// mean (a - target)^2 over all elements.
template <typename T>
Var mean_sq_to(Tape<T>& tape, Var a, T target);
/// mean log(clamp(p, eps, 1 - eps)); zero gradient where the clamp is active.
template <typename T>
Var mean_log(Tape<T>& tape, Var p, double eps);
/// mean log(1 - clamp(p, eps, 1 - eps)).
template <typename T>
Var mean_log1m(Tape<T>& tape, Var p, double eps);
/// Pixel-averaged multi-class cross entropy of per-pixel probabilities (N,K,H,W) against
/// labels (N*H*W values in [0, K)).
template <typename T>
Var cross_entropy(Tape<T>& tape, Var probs, const std::vector<unsigned char>& labels, double eps);

}  // namespace ops

}  // namespace susan
