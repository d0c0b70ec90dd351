#include "susan/networks.hpp"

#include <stdexcept>

namespace susan {
namespace {

template <typename T>
void append_state(LayerSpec<T>& layer, std::vector<StateEntry<T>>& out) {
  if (!layer.has_parameters()) return;
  for (Parameter<T>* p : layer.parameters()) out.push_back({p->name, &p->value});
}

template <typename T>
void append_running(LayerSpec<T>& layer, std::vector<StateEntry<T>>& out) {
  if (layer.kind != LayerKind::batch_norm) return;
  out.push_back({layer.name + ".running_mean", &layer.running.mean});
  out.push_back({layer.name + ".running_var", &layer.running.var});
}

}  // namespace

void RNetConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("R-Net depth must be at least 1");
  if (classes < 2) throw std::invalid_argument("R-Net needs at least 2 classes");
  if (base_channels < 1 || in_channels < 1) throw std::invalid_argument("R-Net channel counts must be positive");
  if (depth >= 16 || input_size == 0 || input_size % (std::size_t{1} << depth) != 0) {
    throw std::invalid_argument("R-Net input size " + std::to_string(input_size) + " is not divisible by 2^" +
                                std::to_string(depth));
  }
  if (!(leaky_alpha > 0.0 && leaky_alpha < 1.0)) throw std::invalid_argument("leaky alpha must lie in (0,1)");
}

template <typename T>
RNet<T>::RNet(const RNetConfig& config, std::string prefix, std::uint64_t seed)
    : config_(config), prefix_(std::move(prefix)) {
  config_.validate();
  const std::size_t c = config_.base_channels;
  const auto alpha = static_cast<T>(config_.leaky_alpha);
  stem_conv_ = LayerSpec<T>::convolution(prefix_ + ".stem.conv", config_.in_channels, c, 3, 1, 1);
  stem_act_ = LayerSpec<T>::activation(prefix_ + ".stem.act", LayerKind::leaky_relu, alpha);
  for (std::size_t i = 1; i <= config_.depth; ++i) {
    const std::string n = prefix_ + ".enc" + std::to_string(i);
    encoder_.push_back({LayerSpec<T>::convolution(n + ".conv", c << (i - 1), c << i, 4, 2, 1, false),
                        LayerSpec<T>::batch_norm(n + ".bn", c << i),
                        LayerSpec<T>::activation(n + ".act", LayerKind::leaky_relu, alpha)});
  }
  for (std::size_t j = 1; j <= config_.depth; ++j) {
    const std::size_t level = config_.depth - j;
    const std::size_t in = j == 1 ? (c << config_.depth) : 2 * (c << (level + 1));
    const std::string n = prefix_ + ".dec" + std::to_string(j);
    decoder_.push_back({LayerSpec<T>::transposed_convolution(n + ".deconv", in, c << level, 4, 2, 1, false),
                        LayerSpec<T>::batch_norm(n + ".bn", c << level),
                        LayerSpec<T>::activation(n + ".act", LayerKind::relu)});
  }
  if (config_.translation_head) {
    translation_conv_ = LayerSpec<T>::convolution(prefix_ + ".translation.conv", 2 * c, config_.in_channels, 3, 1, 1);
    translation_act_ = LayerSpec<T>::activation(prefix_ + ".translation.act", LayerKind::tanh);
  }
  segmentation_conv_ = LayerSpec<T>::convolution(prefix_ + ".segmentation.conv", 2 * c, config_.classes, 3, 1, 1);
  segmentation_act_ = LayerSpec<T>::activation(prefix_ + ".segmentation.act", LayerKind::softmax_channels);
  for (LayerSpec<T>* l : layers()) l->initialize(seed);
}

template <typename T>
std::vector<LayerSpec<T>*> RNet<T>::layers() {
  std::vector<LayerSpec<T>*> out{&stem_conv_, &stem_act_};
  for (auto& s : encoder_) out.insert(out.end(), {&s.conv, &s.bn, &s.act});
  for (auto& s : decoder_) out.insert(out.end(), {&s.conv, &s.bn, &s.act});
  if (config_.translation_head) out.insert(out.end(), {&translation_conv_, &translation_act_});
  out.insert(out.end(), {&segmentation_conv_, &segmentation_act_});
  return out;
}

template <typename T>
std::vector<Parameter<T>*> RNet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (LayerSpec<T>* l : layers()) {
    for (Parameter<T>* p : l->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::size_t RNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (LayerSpec<T>* l : const_cast<RNet*>(this)->layers()) {
    for (Parameter<T>* p : l->parameters()) n += p->value.size();
  }
  return n;
}

template <typename T>
std::vector<StateEntry<T>> RNet<T>::state() {
  std::vector<StateEntry<T>> out;
  const auto ls = layers();
  for (LayerSpec<T>* l : ls) append_state(*l, out);
  for (LayerSpec<T>* l : ls) append_running(*l, out);
  return out;
}

template <typename T>
void RNet<T>::check_input(const Shape& s) const {
  if (s.n == 0 || s.c != config_.in_channels || s.h != config_.input_size || s.w != config_.input_size) {
    throw ShapeError(prefix_ + ": expected input (N," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) + "), got " +
                     s.str());
  }
}

template <typename T>
Var RNet<T>::trunk(Tape<T>& tape, Var x, Mode mode) {
  check_input(tape.shape(x));
  Var h = apply_layer(tape, stem_act_, apply_layer(tape, stem_conv_, x, mode), mode);
  std::vector<Var> skips{h};
  for (auto& s : encoder_) {
    h = apply_layer(tape, s.act, apply_layer(tape, s.bn, apply_layer(tape, s.conv, h, mode), mode), mode);
    skips.push_back(h);
  }
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    auto& s = decoder_[j];
    const std::size_t level = config_.depth - 1 - j;
    h = apply_layer(tape, s.act, apply_layer(tape, s.bn, apply_layer(tape, s.conv, h, mode), mode), mode);
    h = ops::concat_channels(tape, h, skips[level]);
  }
  return h;
}

template <typename T>
typename RNet<T>::Output RNet<T>::forward(Tape<T>& tape, Var x, Mode mode) {
  const Var h = trunk(tape, x, mode);
  Output out;
  if (config_.translation_head) {
    out.translated = apply_layer(tape, translation_act_, apply_layer(tape, translation_conv_, h, mode), mode);
  }
  out.probs = apply_layer(tape, segmentation_act_, apply_layer(tape, segmentation_conv_, h, mode), mode);
  return out;
}

template <typename T>
void RNet<T>::forward(const Tensor4<T>& x, Mode mode, Tensor4<T>* translated, Tensor4<T>* probs) {
  Tape<T> tape;
  tape.freeze_parameters(true);
  const Output o = forward(tape, tape.constant(x), mode);
  if (translated) *translated = o.translated.valid() ? tape.value(o.translated) : Tensor4<T>();
  if (probs) *probs = tape.value(o.probs);
}

void DiscriminatorConfig::validate() const {
  if (depth < 1 || depth >= 16) throw std::invalid_argument("discriminator depth must be in [1,15]");
  if (base_channels < 1 || in_channels < 1) throw std::invalid_argument("discriminator channel counts must be positive");
  if (input_size == 0 || input_size % (std::size_t{1} << depth) != 0) {
    throw std::invalid_argument("discriminator input size " + std::to_string(input_size) + " is not divisible by 2^" +
                                std::to_string(depth));
  }
  if (!(leaky_alpha > 0.0 && leaky_alpha < 1.0)) throw std::invalid_argument("leaky alpha must lie in (0,1)");
}

template <typename T>
PatchDiscriminator<T>::PatchDiscriminator(const DiscriminatorConfig& config, std::string prefix, std::uint64_t seed)
    : config_(config), prefix_(std::move(prefix)) {
  config_.validate();
  const std::size_t c = config_.base_channels;
  const auto alpha = static_cast<T>(config_.leaky_alpha);
  std::size_t in = config_.in_channels;
  for (std::size_t i = 1; i <= config_.depth; ++i) {
    const std::string n = prefix_ + ".block" + std::to_string(i);
    const std::size_t out = c << (i - 1);
    Block b;
    b.has_bn = i > 1;
    b.conv = LayerSpec<T>::convolution(n + ".conv", in, out, 4, 2, 1, !b.has_bn);
    if (b.has_bn) b.bn = LayerSpec<T>::batch_norm(n + ".bn", out);
    b.act = LayerSpec<T>::activation(n + ".act", LayerKind::leaky_relu, alpha);
    blocks_.push_back(std::move(b));
    in = out;
  }
  output_conv_ = LayerSpec<T>::convolution(prefix_ + ".output.conv", in, 1, 3, 1, 1);
  sigmoid_ = LayerSpec<T>::activation(prefix_ + ".output.act", LayerKind::sigmoid);
  for (LayerSpec<T>* l : layers()) l->initialize(seed);
}

template <typename T>
std::vector<LayerSpec<T>*> PatchDiscriminator<T>::layers() {
  std::vector<LayerSpec<T>*> out;
  for (auto& b : blocks_) {
    out.push_back(&b.conv);
    if (b.has_bn) out.push_back(&b.bn);
    out.push_back(&b.act);
  }
  out.insert(out.end(), {&output_conv_, &sigmoid_});
  return out;
}

template <typename T>
std::vector<Parameter<T>*> PatchDiscriminator<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (LayerSpec<T>* l : layers()) {
    for (Parameter<T>* p : l->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::size_t PatchDiscriminator<T>::parameter_count() const {
  std::size_t n = 0;
  for (LayerSpec<T>* l : const_cast<PatchDiscriminator*>(this)->layers()) {
    for (Parameter<T>* p : l->parameters()) n += p->value.size();
  }
  return n;
}

template <typename T>
std::vector<StateEntry<T>> PatchDiscriminator<T>::state() {
  std::vector<StateEntry<T>> out;
  const auto ls = layers();
  for (LayerSpec<T>* l : ls) append_state(*l, out);
  for (LayerSpec<T>* l : ls) append_running(*l, out);
  return out;
}

template <typename T>
Var PatchDiscriminator<T>::logits(Tape<T>& tape, Var img, Mode mode) {
  const Shape s = tape.shape(img);
  if (s.n == 0 || s.c != config_.in_channels || s.h != config_.input_size || s.w != config_.input_size) {
    throw ShapeError(prefix_ + ": expected input (N," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) + "), got " +
                     s.str());
  }
  Var h = img;
  for (auto& b : blocks_) {
    h = apply_layer(tape, b.conv, h, mode);
    if (b.has_bn) h = apply_layer(tape, b.bn, h, mode);
    h = apply_layer(tape, b.act, h, mode);
  }
  return apply_layer(tape, output_conv_, h, mode);
}

template <typename T>
Var PatchDiscriminator<T>::forward(Tape<T>& tape, Var img, Mode mode) {
  return apply_layer(tape, sigmoid_, logits(tape, img, mode), mode);
}

template <typename T>
Tensor4<T> PatchDiscriminator<T>::forward(const Tensor4<T>& img, Mode mode) {
  Tape<T> tape;
  tape.freeze_parameters(true);
  return tape.value(forward(tape, tape.constant(img), mode));
}

template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor4<T>& probs) {
  const Shape s = probs.shape();
  if (s.c == 0 || s.c > 255) throw ShapeError("argmax_labels: bad class count in " + s.str());
  std::vector<std::uint8_t> out(s.n * s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      std::size_t best = 0;
      T best_v = probs.plane(n, 0)[i];
      for (std::size_t c = 1; c < s.c; ++c) {
        const T v = probs.plane(n, c)[i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[n * s.plane() + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template class RNet<float>;
template class RNet<double>;
template class PatchDiscriminator<float>;
template class PatchDiscriminator<double>;
template std::vector<std::uint8_t> argmax_labels<float>(const Tensor4<float>&);
template std::vector<std::uint8_t> argmax_labels<double>(const Tensor4<double>&);

}  // namespace susan
