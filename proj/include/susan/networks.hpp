#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "susan/layers.hpp"

namespace susan {

struct RNetConfig {
  std::size_t input_size = 64;
  std::size_t depth = 4;
  std::size_t base_channels = 16;
  std::size_t classes = 5;
  std::size_t in_channels = 1;
  double leaky_alpha = 0.2;
  /// false drops the image-translation head (supervised baseline).
  bool translation_head = true;

  void validate() const;
};

/// Reference to a tensor that belongs to a network's persistent state.
template <typename T>
struct StateEntry {
  std::string name;
  Tensor4<T>* tensor;
};

/// U-Net style generator with a shared encoder/decoder trunk that bifurcates after the last
/// up-sampling stage into a tanh translation head and a softmax segmentation head.
template <typename T>
class RNet {
 public:
  struct Output {
    Var translated;  ///< invalid when the translation head is disabled
    Var probs;
  };

  RNet(const RNetConfig& config, std::string prefix, std::uint64_t seed);

  Output forward(Tape<T>& tape, Var x, Mode mode);
  /// Gradient-free pass; `translated` is empty when the head is disabled.
  void forward(const Tensor4<T>& x, Mode mode, Tensor4<T>* translated, Tensor4<T>* probs);

  [[nodiscard]] const RNetConfig& config() const { return config_; }
  [[nodiscard]] const std::string& prefix() const { return prefix_; }
  std::vector<Parameter<T>*> parameters();
  [[nodiscard]] std::size_t parameter_count() const;
  /// Parameters followed by batch-norm running statistics, in a fixed order.
  std::vector<StateEntry<T>> state();
  std::vector<LayerSpec<T>*> layers();

  /// Trunk output at full resolution (the bifurcation point), for tests.
  Var trunk(Tape<T>& tape, Var x, Mode mode);

 private:
  struct Stage {
    LayerSpec<T> conv;
    LayerSpec<T> bn;
    LayerSpec<T> act;
  };
  void check_input(const Shape& s) const;

  RNetConfig config_;
  std::string prefix_;
  LayerSpec<T> stem_conv_;
  LayerSpec<T> stem_act_;
  std::vector<Stage> encoder_;
  std::vector<Stage> decoder_;
  LayerSpec<T> translation_conv_;
  LayerSpec<T> translation_act_;
  LayerSpec<T> segmentation_conv_;
  LayerSpec<T> segmentation_act_;
};

struct DiscriminatorConfig {
  std::size_t input_size = 64;
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t in_channels = 1;
  double leaky_alpha = 0.2;

  void validate() const;
  [[nodiscard]] std::size_t grid_size() const { return input_size >> depth; }
};

/// Patch discriminator: stride-2 convolution blocks (batch norm on all but the first),
/// then a 3x3 convolution to a one-channel logit grid.
template <typename T>
class PatchDiscriminator {
 public:
  PatchDiscriminator(const DiscriminatorConfig& config, std::string prefix, std::uint64_t seed);

  Var logits(Tape<T>& tape, Var img, Mode mode);
  /// Patch probabilities sigmoid(logits).
  Var forward(Tape<T>& tape, Var img, Mode mode);
  Tensor4<T> forward(const Tensor4<T>& img, Mode mode);

  [[nodiscard]] const DiscriminatorConfig& config() const { return config_; }
  [[nodiscard]] const std::string& prefix() const { return prefix_; }
  std::vector<Parameter<T>*> parameters();
  [[nodiscard]] std::size_t parameter_count() const;
  std::vector<StateEntry<T>> state();
  std::vector<LayerSpec<T>*> layers();
  LayerSpec<T>& output_layer() { return output_conv_; }

 private:
  struct Block {
    LayerSpec<T> conv;
    LayerSpec<T> bn;
    bool has_bn = false;
    LayerSpec<T> act;
  };
  DiscriminatorConfig config_;
  std::string prefix_;
  std::vector<Block> blocks_;
  LayerSpec<T> output_conv_;
  LayerSpec<T> sigmoid_;
};

/// Per-pixel argmax over class probabilities; ties go to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor4<T>& probs);

}  // namespace susan
