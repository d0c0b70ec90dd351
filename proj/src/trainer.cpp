#include "susan/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "susan/rng.hpp"

namespace susan {

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError("cannot parse " + what + " '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("cannot parse " + what + " '" + s + "'");
  }
  return std::stoull(s);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

void check_finite(const LossReport& r, const char* where) {
  if (std::isfinite(r.cycle) && std::isfinite(r.seg) && std::isfinite(r.gan_forward) &&
      std::isfinite(r.gan_backward) && std::isfinite(r.total)) {
    return;
  }
  throw NumericError(std::string(where) + ": non-finite loss (cycle=" + exact(r.cycle) + ", seg=" + exact(r.seg) +
                     ", gan_f=" + exact(r.gan_forward) + ", gan_b=" + exact(r.gan_backward) +
                     ", total=" + exact(r.total) + ")");
}

template <typename T>
double scalar(const Tape<T>& tape, Var v) {
  return static_cast<double>(tape.value(v)[0]);
}

template <typename Net>
void append_state(Net& net, std::vector<NamedTensor>& out) {
  for (auto& e : net.state()) out.push_back({e.name, e.tensor->template cast<float>()});
}

template <typename T>
void append_adam(const std::string& tag, const std::vector<Parameter<T>*>& params, const AdamState<T>& opt,
                 std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam." + tag + ".m." + params[i]->name, opt.m[i].template cast<float>()});
    out.push_back({"adam." + tag + ".v." + params[i]->name, opt.v[i].template cast<float>()});
  }
}

using TensorMap = std::map<std::string, const Tensor4<float>*>;

TensorMap index_tensors(const std::vector<NamedTensor>& tensors) {
  TensorMap m;
  for (const auto& t : tensors) {
    if (!m.emplace(t.name, &t.tensor).second) throw FormatError("duplicate tensor " + t.name);
  }
  return m;
}

template <typename T>
void assign(Tensor4<T>& dst, const TensorMap& m, const std::string& name, std::size_t& used) {
  auto it = m.find(name);
  if (it == m.end()) throw FormatError("checkpoint lacks tensor " + name);
  if (it->second->shape() != dst.shape()) {
    throw FormatError("tensor " + name + " has shape " + it->second->shape().str() + ", expected " +
                      dst.shape().str());
  }
  dst = it->second->template cast<T>();
  ++used;
}

template <typename Net>
void load_state_entries(Net& net, const TensorMap& m, std::size_t& used) {
  for (auto& e : net.state()) assign(*e.tensor, m, e.name, used);
}

template <typename T>
void load_adam(const std::string& tag, const std::vector<Parameter<T>*>& params, AdamState<T>& opt,
               const TensorMap& m, std::size_t& used) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    assign(opt.m[i], m, "adam." + tag + ".m." + params[i]->name, used);
    assign(opt.v[i], m, "adam." + tag + ".v." + params[i]->name, used);
  }
}

template <typename T>
void init_adam(AdamState<T>& opt, const AdamConfig& cfg, const std::vector<Parameter<T>*>& params) {
  opt.config = cfg;
  opt.step = 0;
  opt.m.clear();
  opt.v.clear();
  for (const auto* p : params) {
    opt.m.emplace_back(p->value.shape());
    opt.v.emplace_back(p->value.shape());
  }
}

RNetConfig generator_config(const TrainConfig& c, bool translation) {
  RNetConfig g = c.generator;
  g.translation_head = translation;
  return g;
}

void require_set(const SliceSet& s, const std::string& what, std::size_t size, bool masks) {
  if (s.size() == 0) throw std::invalid_argument(what + " is empty");
  s.validate(what, size);
  if (masks && !s.has_masks()) throw std::invalid_argument(what + " needs masks");
}

template <typename T>
void check_batch_input(const RNetConfig& cfg, const Tensor4<T>& images, const char* where) {
  const Shape s = images.shape();
  if (s.c != 1 || s.h != cfg.input_size || s.w != cfg.input_size || s.n == 0) {
    throw ShapeError(std::string(where) + ": expected (N,1," + std::to_string(cfg.input_size) + "," +
                     std::to_string(cfg.input_size) + ") preprocessed images, got " + s.str());
  }
}

constexpr std::size_t kEvalChunk = 16;

}  // namespace

std::string to_string(TrainMode m) { return m == TrainMode::susan ? "susan" : "supervised-baseline"; }

TrainMode parse_train_mode(const std::string& s) {
  if (s == "susan") return TrainMode::susan;
  if (s == "supervised-baseline" || s == "supervised") return TrainMode::supervised;
  throw std::invalid_argument("unknown method '" + s + "' (expected susan or supervised-baseline)");
}

std::string to_string(SelectionLoss s) {
  return s == SelectionLoss::generator_total ? "generator_total" : "with_discriminator";
}

SelectionLoss parse_selection_loss(const std::string& s) {
  if (s == "generator_total") return SelectionLoss::generator_total;
  if (s == "with_discriminator") return SelectionLoss::with_discriminator;
  throw std::invalid_argument("unknown selection loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (validate_every_epochs < 1) throw std::invalid_argument("validation cadence must be >= 1 epoch");
  if (!(adam.learning_rate > 0.0) || !std::isfinite(adam.learning_rate)) {
    throw std::invalid_argument("learning rate must be positive");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
  if (!(divergence_factor > 1.0)) throw std::invalid_argument("divergence factor must exceed 1");
  if (divergence_patience < 1) throw std::invalid_argument("divergence patience must be >= 1");
  weights.validate();
  generator.validate();
  discriminator.validate();
  if (mode == TrainMode::susan && discriminator.input_size != generator.input_size) {
    throw std::invalid_argument("generator and discriminator input sizes differ");
  }
}

std::string TrainConfig::canonical() const {
  std::map<std::string, std::string> kv{
      {"adam.beta1", exact(adam.beta1)},
      {"adam.beta2", exact(adam.beta2)},
      {"adam.eps", exact(adam.eps)},
      {"adam.learning_rate", exact(adam.learning_rate)},
      {"batch_size", std::to_string(batch_size)},
      {"discriminator.base_channels", std::to_string(discriminator.base_channels)},
      {"discriminator.depth", std::to_string(discriminator.depth)},
      {"discriminator.input_size", std::to_string(discriminator.input_size)},
      {"discriminator.leaky_alpha", exact(discriminator.leaky_alpha)},
      {"divergence_factor", exact(divergence_factor)},
      {"divergence_patience", std::to_string(divergence_patience)},
      {"epochs", std::to_string(epochs)},
      {"gan", to_string(gan)},
      {"generator.base_channels", std::to_string(generator.base_channels)},
      {"generator.classes", std::to_string(generator.classes)},
      {"generator.depth", std::to_string(generator.depth)},
      {"generator.input_size", std::to_string(generator.input_size)},
      {"generator.leaky_alpha", exact(generator.leaky_alpha)},
      {"mode", to_string(mode)},
      {"seed", std::to_string(seed)},
      {"selection", to_string(selection)},
      {"validate_every_epochs", std::to_string(validate_every_epochs)},
      {"weights.cycle", exact(weights.cycle)},
      {"weights.gan", exact(weights.gan)},
      {"weights.seg", exact(weights.seg)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string TrainConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

void SliceSet::validate(const std::string& what, std::size_t image_size) const {
  if (subjects.size() != images.size()) throw std::invalid_argument(what + ": subject list length differs");
  if (has_masks() && masks.size() != images.size()) throw std::invalid_argument(what + ": mask count differs");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != image_size || images[i].width != image_size) {
      throw std::invalid_argument(what + ": slice " + std::to_string(i) + " is not " + std::to_string(image_size) +
                                  "x" + std::to_string(image_size));
    }
    if (has_masks() && (masks[i].height != image_size || masks[i].width != image_size)) {
      throw std::invalid_argument(what + ": mask " + std::to_string(i) + " has the wrong size");
    }
  }
}

SliceSet make_slice_set(const std::vector<Subject>& subjects, std::size_t image_size, bool keep_masks) {
  SliceSet out;
  if (!subjects.empty()) out.domain = subjects.front().style;
  for (const auto& s : subjects) {
    if (s.style != out.domain) throw std::invalid_argument("make_slice_set: subjects from different domains");
    for (std::size_t k = 0; k < s.slices.size(); ++k) {
      const std::string ctx = s.id + " slice " + std::to_string(k);
      out.images.push_back(to_network_range(preprocess(s.slices[k], image_size, kDefaultKeepFraction, ctx)));
      if (keep_masks) out.masks.push_back(preprocess_mask(s.masks.at(k), image_size));
      out.subjects.push_back(s.id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> stack_images(const SliceSet& set, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const std::size_t h = set.images.at(indices.front()).height;
  const std::size_t w = set.images.at(indices.front()).width;
  Tensor4<T> out(Shape{indices.size(), 1, h, w});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Image& img = set.images.at(indices[k]);
    if (img.height != h || img.width != w) throw ShapeError("stack_images: mixed slice sizes");
    T* dst = out.plane(k, 0);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) dst[i] = static_cast<T>(img.pixels[i]);
  }
  return out;
}

MaskBatch stack_masks(const SliceSet& set, const std::vector<std::size_t>& indices) {
  if (!set.has_masks()) throw std::invalid_argument("stack_masks: masks are withheld for this set");
  MaskBatch out;
  out.provenance = set.domain;
  for (std::size_t i : indices) {
    const auto& m = set.masks.at(i).labels;
    out.labels.insert(out.labels.end(), m.begin(), m.end());
  }
  return out;
}

void LeakageAudit::record(const MaskBatch& batch) {
  ++mask_batches;
  if (batch.provenance == DomainId::reference) {
    ++reference_batches;
    return;
  }
  ++target_batches;
  if (enforce) {
    throw LeakageError("a " + to_string(batch.provenance) +
                       " mask batch reached the segmentation loss; only reference masks may train SUSAN");
  }
}

EpochSchedule::EpochSchedule(std::uint64_t seed, std::size_t labeled, std::size_t unlabeled, std::size_t batch_size)
    : seed_(seed), labeled_(labeled), unlabeled_(unlabeled), batch_(batch_size) {
  if (labeled == 0) throw std::invalid_argument("schedule: labeled set is empty");
  if (batch_size == 0) throw std::invalid_argument("schedule: batch size must be >= 1");
}

std::size_t EpochSchedule::iterations_per_epoch() const { return (labeled_ + batch_ - 1) / batch_; }

std::vector<std::size_t> EpochSchedule::labeled_order(std::size_t epoch) const {
  return shuffled_indices(labeled_, derive_seed(seed_, "schedule-labeled", epoch));
}

std::vector<std::size_t> EpochSchedule::unlabeled_order(std::size_t epoch) const {
  return shuffled_indices(unlabeled_, derive_seed(seed_, "schedule-unlabeled", epoch));
}

EpochSchedule::Batch EpochSchedule::batch(std::uint64_t iteration) const {
  const std::size_t per = iterations_per_epoch();
  Batch b;
  b.epoch = static_cast<std::size_t>(iteration / per);
  const std::size_t k = static_cast<std::size_t>(iteration % per);
  const auto order = labeled_order(b.epoch);
  const std::size_t first = k * batch_;
  const std::size_t last = std::min(labeled_, first + batch_);
  b.labeled.assign(order.begin() + static_cast<std::ptrdiff_t>(first), order.begin() + static_cast<std::ptrdiff_t>(last));
  if (unlabeled_ > 0) {
    // Position in the endless unlabeled stream = labeled slices consumed so far.
    const std::uint64_t start = static_cast<std::uint64_t>(b.epoch) * labeled_ + first;
    std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> uorder;
    for (std::size_t j = 0; j < b.labeled.size(); ++j) {
      const std::uint64_t q = start + j;
      const auto e = static_cast<std::size_t>(q / unlabeled_);
      if (e != cached_epoch) {
        uorder = unlabeled_order(e);
        cached_epoch = e;
      }
      b.unlabeled.push_back(uorder[static_cast<std::size_t>(q % unlabeled_)]);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------------------------
// SUSAN

template <typename T>
SusanTrainer<T>::SusanTrainer(const TrainConfig& config, const TrainingData& data)
    : config_(config),
      data_(data),
      schedule_(config.seed, std::max<std::size_t>(data.labeled_train.size(), 1), data.unlabeled_train.size(),
                std::max<std::size_t>(config.batch_size, 1)),
      f_(generator_config(config, true), "F", derive_seed(config.seed, "init-F")),
      b_(generator_config(config, true), "B", derive_seed(config.seed, "init-B")),
      dx_(config.discriminator, "DX", derive_seed(config.seed, "init-DX")),
      dy_(config.discriminator, "DY", derive_seed(config.seed, "init-DY")) {
  config_.validate();
  if (config_.mode != TrainMode::susan) throw std::invalid_argument("SusanTrainer needs mode susan");
  const std::size_t s = config_.generator.input_size;
  require_set(data.labeled_train, "reference training set", s, true);
  require_set(data.labeled_validation, "reference validation set", s, true);
  require_set(data.unlabeled_train, "target training set", s, false);
  require_set(data.unlabeled_validation, "target validation set", s, false);
  if (data.labeled_train.domain != DomainId::reference || data.labeled_validation.domain != DomainId::reference) {
    throw std::invalid_argument("SUSAN trains segmentation on reference-domain masks only");
  }
  if (data.unlabeled_train.domain == DomainId::reference || data.unlabeled_validation.domain == DomainId::reference) {
    throw std::invalid_argument("target sets must come from a target domain");
  }
  if (data.unlabeled_train.has_masks() || data.unlabeled_validation.has_masks()) {
    throw LeakageError("target-domain masks must not be visible to SUSAN training");
  }
  init_adam(gen_opt_, config_.adam, generator_parameters());
  init_adam(disc_opt_, config_.adam, discriminator_parameters());
}

template <typename T>
std::vector<Parameter<T>*> SusanTrainer<T>::generator_parameters() {
  auto p = f_.parameters();
  for (auto* q : b_.parameters()) p.push_back(q);
  return p;
}

template <typename T>
std::vector<Parameter<T>*> SusanTrainer<T>::discriminator_parameters() {
  auto p = dx_.parameters();
  for (auto* q : dy_.parameters()) p.push_back(q);
  return p;
}

template <typename T>
typename SusanTrainer<T>::GeneratorResult SusanTrainer<T>::generator_step(const Tensor4<T>& x, const MaskBatch& masks,
                                                                          const Tensor4<T>& y) {
  auto params = generator_parameters();
  for (auto* p : params) p->zero_grad();
  audit_.record(masks);

  Tape<T> tape;
  Var xv = tape.constant(x);
  Var yv = tape.constant(y);
  auto fx = f_.forward(tape, xv, Mode::train);
  auto by = b_.forward(tape, yv, Mode::train);
  auto bfx = b_.forward(tape, fx.translated, Mode::train);
  auto fby = f_.forward(tape, by.translated, Mode::train);
  Var cyc = loss::cycle(tape, xv, bfx.translated, yv, fby.translated);
  Var seg = loss::segmentation(tape, fx.probs, bfx.probs, masks.labels);
  tape.freeze_parameters(true);
  Var dy_fake = dy_.forward(tape, fx.translated, Mode::train_frozen_stats);
  Var dx_fake = dx_.forward(tape, by.translated, Mode::train_frozen_stats);
  tape.freeze_parameters(false);
  Var gf = loss::generator_adversarial(tape, dy_fake, config_.gan);
  Var gb = loss::generator_adversarial(tape, dx_fake, config_.gan);
  Var total = loss::weighted_total(tape, cyc, seg, gf, gb, config_.weights);

  GeneratorResult out;
  out.loss.cycle = scalar(tape, cyc);
  out.loss.seg = scalar(tape, seg);
  out.loss.gan_forward = scalar(tape, gf);
  out.loss.gan_backward = scalar(tape, gb);
  out.loss.total = config_.weights.cycle * out.loss.cycle + config_.weights.seg * out.loss.seg +
                   config_.weights.gan * (out.loss.gan_forward + out.loss.gan_backward);
  check_finite(out.loss, "generator step");
  out.fx = tape.value(fx.translated);
  out.by = tape.value(by.translated);
  tape.backward(total);
  adam_step<T>(params, gen_opt_);
  return out;
}

template <typename T>
DiscriminatorReport SusanTrainer<T>::discriminator_step(const Tensor4<T>& x, const Tensor4<T>& y,
                                                        const Tensor4<T>& fx, const Tensor4<T>& by) {
  auto params = discriminator_parameters();
  for (auto* p : params) p->zero_grad();
  Tape<T> tape;
  Var xv = tape.constant(x);
  Var yv = tape.constant(y);
  Var fxv = tape.constant(fx);
  Var byv = tape.constant(by);
  Var dy_real = dy_.forward(tape, yv, Mode::train);
  Var dy_fake = dy_.forward(tape, fxv, Mode::train);
  Var dx_real = dx_.forward(tape, xv, Mode::train);
  Var dx_fake = dx_.forward(tape, byv, Mode::train);
  Var oy = loss::discriminator_objective(tape, dy_real, dy_fake, config_.gan);
  Var ox = loss::discriminator_objective(tape, dx_real, dx_fake, config_.gan);
  Var neg = ops::scale(tape, ops::add(tape, ox, oy), T(-1));
  DiscriminatorReport r{scalar(tape, ox), scalar(tape, oy)};
  if (!std::isfinite(r.objective_x) || !std::isfinite(r.objective_y)) {
    throw NumericError("discriminator step: non-finite objective (D_X=" + exact(r.objective_x) +
                       ", D_Y=" + exact(r.objective_y) + ")");
  }
  tape.backward(neg);
  adam_step<T>(params, disc_opt_);
  return r;
}

template <typename T>
LossReport SusanTrainer<T>::step() {
  const auto batch = schedule_.batch(iteration_);
  const Tensor4<T> x = stack_images<T>(data_.labeled_train, batch.labeled);
  const MaskBatch masks = stack_masks(data_.labeled_train, batch.labeled);
  const Tensor4<T> y = stack_images<T>(data_.unlabeled_train, batch.unlabeled);
  auto g = generator_step(x, masks, y);
  discriminator_step(x, y, g.fx, g.by);
  ++iteration_;
  return g.loss;
}

template <typename T>
ValidationRecord SusanTrainer<T>::validate() {
  const SliceSet& xs = data_.labeled_validation;
  const SliceSet& ys = data_.unlabeled_validation;
  double cyc = 0, seg = 0, gf = 0, gb = 0, ox = 0, oy = 0;
  std::size_t chunks = 0;
  for (std::size_t first = 0; first < xs.size(); first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, xs.size() - first);
    std::vector<std::size_t> xi, yi;
    for (std::size_t k = 0; k < count; ++k) {
      xi.push_back(first + k);
      yi.push_back((first + k) % ys.size());
    }
    const MaskBatch masks = stack_masks(xs, xi);
    Tape<T> tape;
    tape.freeze_parameters(true);
    Var xv = tape.constant(stack_images<T>(xs, xi));
    Var yv = tape.constant(stack_images<T>(ys, yi));
    auto fx = f_.forward(tape, xv, Mode::eval);
    auto by = b_.forward(tape, yv, Mode::eval);
    auto bfx = b_.forward(tape, fx.translated, Mode::eval);
    auto fby = f_.forward(tape, by.translated, Mode::eval);
    Var dyf = dy_.forward(tape, fx.translated, Mode::eval);
    Var dxf = dx_.forward(tape, by.translated, Mode::eval);
    const double w = static_cast<double>(count);
    cyc += w * scalar(tape, loss::cycle(tape, xv, bfx.translated, yv, fby.translated));
    seg += w * scalar(tape, loss::segmentation(tape, fx.probs, bfx.probs, masks.labels));
    gf += w * scalar(tape, loss::generator_adversarial(tape, dyf, config_.gan));
    gb += w * scalar(tape, loss::generator_adversarial(tape, dxf, config_.gan));
    oy += w * scalar(tape, loss::discriminator_objective(tape, dy_.forward(tape, yv, Mode::eval), dyf, config_.gan));
    ox += w * scalar(tape, loss::discriminator_objective(tape, dx_.forward(tape, xv, Mode::eval), dxf, config_.gan));
    chunks += count;
  }
  const double n = static_cast<double>(chunks);
  ValidationRecord v;
  v.iteration = iteration_;
  v.loss.cycle = cyc / n;
  v.loss.seg = seg / n;
  v.loss.gan_forward = gf / n;
  v.loss.gan_backward = gb / n;
  v.loss = total_objective(v.loss, config_.weights);
  v.discriminator_x = ox / n;
  v.discriminator_y = oy / n;
  v.selection = config_.selection == SelectionLoss::generator_total
                    ? v.loss.total
                    : v.loss.total - v.discriminator_x - v.discriminator_y;
  return v;
}

template <typename T>
std::vector<NamedTensor> SusanTrainer<T>::state_tensors() {
  std::vector<NamedTensor> out;
  append_state(f_, out);
  append_state(b_, out);
  append_state(dx_, out);
  append_state(dy_, out);
  append_adam("generator", generator_parameters(), gen_opt_, out);
  append_adam("discriminator", discriminator_parameters(), disc_opt_, out);
  return out;
}

template <typename T>
void SusanTrainer<T>::load_state(const std::vector<NamedTensor>& tensors, std::uint64_t iteration,
                                 std::uint64_t gen_steps, std::uint64_t disc_steps) {
  const TensorMap m = index_tensors(tensors);
  std::size_t used = 0;
  load_state_entries(f_, m, used);
  load_state_entries(b_, m, used);
  load_state_entries(dx_, m, used);
  load_state_entries(dy_, m, used);
  load_adam("generator", generator_parameters(), gen_opt_, m, used);
  load_adam("discriminator", discriminator_parameters(), disc_opt_, m, used);
  if (used != m.size()) throw FormatError("checkpoint holds tensors this trainer does not know");
  iteration_ = iteration;
  gen_opt_.step = gen_steps;
  disc_opt_.step = disc_steps;
}

// ---------------------------------------------------------------------------------------------
// Supervised baseline

template <typename T>
SupervisedTrainer<T>::SupervisedTrainer(const TrainConfig& config, const TrainingData& data)
    : config_(config),
      data_(data),
      schedule_(config.seed, std::max<std::size_t>(data.labeled_train.size(), 1), 0,
                std::max<std::size_t>(config.batch_size, 1)),
      net_(generator_config(config, false), "baseline", derive_seed(config.seed, "init-baseline")) {
  config_.validate();
  if (config_.mode != TrainMode::supervised) throw std::invalid_argument("SupervisedTrainer needs mode supervised");
  const std::size_t s = config_.generator.input_size;
  require_set(data.labeled_train, "training set", s, true);
  require_set(data.labeled_validation, "validation set", s, true);
  init_adam(opt_, config_.adam, net_.parameters());
}

template <typename T>
LossReport SupervisedTrainer<T>::train_step(const Tensor4<T>& x, const MaskBatch& masks) {
  auto params = net_.parameters();
  for (auto* p : params) p->zero_grad();
  Tape<T> tape;
  auto out = net_.forward(tape, tape.constant(x), Mode::train);
  Var ce = ops::cross_entropy(tape, out.probs, masks.labels, kLogEps);
  LossReport r;
  r.seg = scalar(tape, ce);
  r.total = r.seg;
  check_finite(r, "supervised step");
  tape.backward(ce);
  adam_step<T>(params, opt_);
  return r;
}

template <typename T>
LossReport SupervisedTrainer<T>::step() {
  const auto batch = schedule_.batch(iteration_);
  auto r = train_step(stack_images<T>(data_.labeled_train, batch.labeled), stack_masks(data_.labeled_train, batch.labeled));
  ++iteration_;
  return r;
}

template <typename T>
ValidationRecord SupervisedTrainer<T>::validate() {
  const SliceSet& xs = data_.labeled_validation;
  double seg = 0;
  for (std::size_t first = 0; first < xs.size(); first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, xs.size() - first);
    std::vector<std::size_t> xi;
    for (std::size_t k = 0; k < count; ++k) xi.push_back(first + k);
    Tape<T> tape;
    tape.freeze_parameters(true);
    auto out = net_.forward(tape, tape.constant(stack_images<T>(xs, xi)), Mode::eval);
    seg += static_cast<double>(count) * scalar(tape, ops::cross_entropy(tape, out.probs, stack_masks(xs, xi).labels, kLogEps));
  }
  ValidationRecord v;
  v.iteration = iteration_;
  v.loss.seg = seg / static_cast<double>(xs.size());
  v.loss.total = v.loss.seg;
  v.selection = v.loss.total;
  return v;
}

template <typename T>
std::vector<NamedTensor> SupervisedTrainer<T>::state_tensors() {
  std::vector<NamedTensor> out;
  append_state(net_, out);
  append_adam("baseline", net_.parameters(), opt_, out);
  return out;
}

template <typename T>
void SupervisedTrainer<T>::load_state(const std::vector<NamedTensor>& tensors, std::uint64_t iteration,
                                      std::uint64_t steps) {
  const TensorMap m = index_tensors(tensors);
  std::size_t used = 0;
  load_state_entries(net_, m, used);
  load_adam("baseline", net_.parameters(), opt_, m, used);
  if (used != m.size()) throw FormatError("checkpoint holds tensors this trainer does not know");
  iteration_ = iteration;
  opt_.step = steps;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints and histories

std::string CheckpointInfo::encode() const {
  std::ostringstream o;
  o << "config_hash=" << config_hash << "\n"
    << "mode=" << mode << "\n"
    << "iteration=" << iteration << "\n"
    << "validation_loss=" << exact(validation_loss) << "\n"
    << "generator_steps=" << generator_steps << "\n"
    << "discriminator_steps=" << discriminator_steps << "\n"
    << "initial_validation=" << exact(initial_validation) << "\n"
    << "best_validation=" << exact(best_validation) << "\n"
    << "best_iteration=" << best_iteration << "\n"
    << "best_epoch=" << best_epoch << "\n"
    << "divergence_streak=" << divergence_streak << "\n";
  return o.str();
}

CheckpointInfo CheckpointInfo::decode(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint sidecar: bad line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint sidecar lacks " + k);
    return it->second;
  };
  CheckpointInfo c;
  c.config_hash = get("config_hash");
  c.mode = get("mode");
  c.iteration = parse_u64(get("iteration"), "iteration");
  c.validation_loss = parse_double(get("validation_loss"), "validation_loss");
  c.generator_steps = parse_u64(get("generator_steps"), "generator_steps");
  c.discriminator_steps = parse_u64(get("discriminator_steps"), "discriminator_steps");
  c.initial_validation = parse_double(get("initial_validation"), "initial_validation");
  c.best_validation = parse_double(get("best_validation"), "best_validation");
  c.best_iteration = parse_u64(get("best_iteration"), "best_iteration");
  c.best_epoch = parse_u64(get("best_epoch"), "best_epoch");
  c.divergence_streak = parse_u64(get("divergence_streak"), "divergence_streak");
  return c;
}

void write_checkpoint(const std::filesystem::path& dir, const std::string& name, const std::vector<NamedTensor>& tensors,
                      const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  write_susn(dir / (name + ".susn"), tensors);
  write_file(dir / (name + ".txt"), info.encode());
}

std::pair<std::vector<NamedTensor>, CheckpointInfo> read_checkpoint(const std::filesystem::path& dir,
                                                                    const std::string& name) {
  return {read_susn(dir / (name + ".susn")), CheckpointInfo::decode(read_file(dir / (name + ".txt")))};
}

void write_history_csv(std::ostream& out, const std::vector<IterationRecord>& history) {
  out << "iteration,cycle,seg,gan_f,gan_b,total,wall_time\n";
  for (const auto& r : history) {
    out << r.iteration << ',' << exact(r.loss.cycle) << ',' << exact(r.loss.seg) << ',' << exact(r.loss.gan_forward)
        << ',' << exact(r.loss.gan_backward) << ',' << exact(r.loss.total) << ',' << exact(r.wall_seconds) << '\n';
  }
}

std::vector<IterationRecord> read_history_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "iteration,cycle,seg,gan_f,gan_b,total,wall_time") {
    throw FormatError("history CSV: unexpected header");
  }
  std::vector<IterationRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 7) throw FormatError("history CSV: bad row '" + line + "'");
    IterationRecord r;
    r.iteration = parse_u64(c[0], "iteration");
    r.loss.cycle = parse_double(c[1], "cycle");
    r.loss.seg = parse_double(c[2], "seg");
    r.loss.gan_forward = parse_double(c[3], "gan_f");
    r.loss.gan_backward = parse_double(c[4], "gan_b");
    r.loss.total = parse_double(c[5], "total");
    r.wall_seconds = parse_double(c[6], "wall_time");
    out.push_back(r);
  }
  return out;
}

void write_validation_csv(std::ostream& out, const std::vector<ValidationRecord>& records) {
  out << "epoch,iteration,cycle,seg,gan_f,gan_b,total,disc_x,disc_y,selection\n";
  for (const auto& r : records) {
    out << r.epoch << ',' << r.iteration << ',' << exact(r.loss.cycle) << ',' << exact(r.loss.seg) << ','
        << exact(r.loss.gan_forward) << ',' << exact(r.loss.gan_backward) << ',' << exact(r.loss.total) << ','
        << exact(r.discriminator_x) << ',' << exact(r.discriminator_y) << ',' << exact(r.selection) << '\n';
  }
}

std::vector<ValidationRecord> read_validation_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "epoch,iteration,cycle,seg,gan_f,gan_b,total,disc_x,disc_y,selection") {
    throw FormatError("validation CSV: unexpected header");
  }
  std::vector<ValidationRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 10) throw FormatError("validation CSV: bad row '" + line + "'");
    ValidationRecord r;
    r.epoch = parse_u64(c[0], "epoch");
    r.iteration = parse_u64(c[1], "iteration");
    r.loss.cycle = parse_double(c[2], "cycle");
    r.loss.seg = parse_double(c[3], "seg");
    r.loss.gan_forward = parse_double(c[4], "gan_f");
    r.loss.gan_backward = parse_double(c[5], "gan_b");
    r.loss.total = parse_double(c[6], "total");
    r.discriminator_x = parse_double(c[7], "disc_x");
    r.discriminator_y = parse_double(c[8], "disc_y");
    r.selection = parse_double(c[9], "selection");
    out.push_back(r);
  }
  return out;
}

namespace {

// Shared loop for both trainers. `load` restores a trainer from tensors and sidecar.
template <typename Trainer, typename Load, typename Steps>
TrainResult run_training(Trainer& tr, const TrainConfig& config, const TrainOptions& options, Load load,
                         Steps steps) {
  using Clock = std::chrono::steady_clock;
  TrainResult res;
  const std::uint64_t per_epoch = tr.schedule().iterations_per_epoch();
  const std::uint64_t total = per_epoch * config.epochs;
  const std::uint64_t cadence = per_epoch * config.validate_every_epochs;
  const auto& dir = options.checkpoint_dir;
  std::size_t streak = 0;
  double wall_offset = 0.0;

  auto sidecar = [&](const ValidationRecord& current) {
    CheckpointInfo info;
    info.config_hash = config.hash();
    info.mode = to_string(config.mode);
    info.iteration = tr.iteration();
    info.validation_loss = current.selection;
    const auto s = steps(tr);
    info.generator_steps = s.first;
    info.discriminator_steps = s.second;
    info.initial_validation = res.initial.selection;
    info.best_validation = res.best.selection;
    info.best_iteration = res.best.iteration;
    info.best_epoch = res.best.epoch;
    info.divergence_streak = streak;
    return info;
  };
  auto save = [&](bool improved, const ValidationRecord& current) {
    if (!dir) return;
    const CheckpointInfo info = sidecar(current);
    if (improved) {
      CheckpointInfo b = info;
      b.iteration = res.best.iteration;
      b.validation_loss = res.best.selection;
      write_checkpoint(*dir, "best", res.best_state, b);
    }
    write_checkpoint(*dir, "last", tr.state_tensors(), info);
    std::ostringstream h, v;
    write_history_csv(h, res.history);
    write_validation_csv(v, res.validations);
    write_file(*dir / "history.csv", h.str());
    write_file(*dir / "validation.csv", v.str());
  };

  const bool resuming = dir && options.resume && std::filesystem::exists(*dir / "last.susn");
  if (resuming) {
    auto [tensors, info] = read_checkpoint(*dir, "last");
    if (info.config_hash != config.hash()) {
      throw std::invalid_argument("resume: checkpoint config hash " + info.config_hash + " does not match " +
                                  config.hash());
    }
    load(tr, tensors, info);
    {
      std::ifstream h(*dir / "history.csv");
      for (const auto& r : read_history_csv(h))
        if (r.iteration <= info.iteration) res.history.push_back(r);
      std::ifstream v(*dir / "validation.csv");
      for (const auto& r : read_validation_csv(v))
        if (r.iteration <= info.iteration) res.validations.push_back(r);
    }
    if (res.validations.empty()) throw FormatError("resume: validation history is empty");
    res.initial = res.validations.front();
    bool found = false;
    for (const auto& r : res.validations) {
      if (r.iteration == info.best_iteration && r.epoch == info.best_epoch) {
        res.best = r;
        found = true;
      }
    }
    if (!found) throw FormatError("resume: best validation point missing from history");
    res.best_state = read_susn(*dir / "best.susn");
    streak = info.divergence_streak;
    if (!res.history.empty()) wall_offset = res.history.back().wall_seconds;
  } else {
    ValidationRecord initial = tr.validate();
    initial.epoch = 0;
    res.initial = initial;
    res.best = initial;
    res.best_state = tr.state_tensors();
    res.validations.push_back(initial);
    if (options.on_validation) options.on_validation(initial);
    save(true, initial);
  }

  const auto start = Clock::now();
  while (tr.iteration() < total) {
    if (options.stop_after > 0 && tr.iteration() >= options.stop_after) {
      save(false, res.validations.back());
      res.iterations = tr.iteration();
      res.completed = false;
      return res;
    }
    IterationRecord rec;
    rec.loss = tr.step();
    rec.iteration = tr.iteration();
    rec.wall_seconds = wall_offset + std::chrono::duration<double>(Clock::now() - start).count();
    res.history.push_back(rec);
    if (options.on_iteration) options.on_iteration(rec);
    if (tr.iteration() % cadence == 0 || tr.iteration() == total) {
      ValidationRecord v = tr.validate();
      v.epoch = static_cast<std::size_t>((tr.iteration() + per_epoch - 1) / per_epoch);
      res.validations.push_back(v);
      if (options.on_validation) options.on_validation(v);
      const bool improved = v.selection < res.best.selection;
      if (improved) {
        res.best = v;
        res.best_state = tr.state_tensors();
      }
      const bool over = res.initial.loss.total > 0.0 && v.loss.total > config.divergence_factor * res.initial.loss.total;
      streak = over ? streak + 1 : 0;
      save(improved, v);
      if (streak >= config.divergence_patience) {
        res.diverged = true;
        break;
      }
    }
  }
  res.iterations = tr.iteration();
  res.completed = !res.diverged;
  return res;
}

}  // namespace

template <typename T>
TrainResult train(const TrainConfig& config, const TrainingData& data, const TrainOptions& options) {
  SusanTrainer<T> tr(config, data);
  auto load = [](SusanTrainer<T>& t, const std::vector<NamedTensor>& tensors, const CheckpointInfo& info) {
    t.load_state(tensors, info.iteration, info.generator_steps, info.discriminator_steps);
  };
  auto steps = [](SusanTrainer<T>& t) {
    return std::pair<std::uint64_t, std::uint64_t>{t.generator_adam_steps(), t.discriminator_adam_steps()};
  };
  TrainResult r = run_training(tr, config, options, load, steps);
  r.audit = tr.audit();
  return r;
}

template <typename T>
TrainResult train_supervised(const TrainConfig& config, const TrainingData& data, const TrainOptions& options) {
  SupervisedTrainer<T> tr(config, data);
  auto load = [](SupervisedTrainer<T>& t, const std::vector<NamedTensor>& tensors, const CheckpointInfo& info) {
    t.load_state(tensors, info.iteration, info.generator_steps);
  };
  auto steps = [](SupervisedTrainer<T>& t) { return std::pair<std::uint64_t, std::uint64_t>{t.adam_steps(), 0}; };
  TrainResult r = run_training(tr, config, options, load, steps);
  r.audit.enforce = false;
  return r;
}

// ---------------------------------------------------------------------------------------------
// Networks from tensors, inference

template <typename T>
void load_network(RNet<T>& net, const std::vector<NamedTensor>& tensors) {
  const TensorMap m = index_tensors(tensors);
  std::size_t used = 0;
  load_state_entries(net, m, used);
}

template <typename T>
void load_network(PatchDiscriminator<T>& net, const std::vector<NamedTensor>& tensors) {
  const TensorMap m = index_tensors(tensors);
  std::size_t used = 0;
  load_state_entries(net, m, used);
}

template <typename T>
std::vector<NamedTensor> network_tensors(RNet<T>& net) {
  std::vector<NamedTensor> out;
  append_state(net, out);
  return out;
}

namespace {

template <typename T>
std::vector<LabelMask> segment(RNet<T>& net, const Tensor4<T>& images, const char* where) {
  check_batch_input(net.config(), images, where);
  const Shape s = images.shape();
  std::vector<LabelMask> out;
  for (std::size_t first = 0; first < s.n; first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, s.n - first);
    Tensor4<T> probs;
    net.forward(images.slice_batch(first, count), Mode::eval, nullptr, &probs);
    const auto labels = argmax_labels(probs);
    for (std::size_t k = 0; k < count; ++k) {
      LabelMask m(s.h, s.w);
      std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(k * s.plane()), s.plane(), m.labels.begin());
      out.push_back(std::move(m));
    }
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<LabelMask> segment_target(RNet<T>& backward_net, const Tensor4<T>& images) {
  return segment(backward_net, images, "segment_target");
}

template <typename T>
std::vector<LabelMask> segment_reference(RNet<T>& forward_net, const Tensor4<T>& images) {
  return segment(forward_net, images, "segment_reference");
}

template <typename T>
Tensor4<T> translate(RNet<T>& net, const Tensor4<T>& images) {
  if (!net.config().translation_head) throw std::invalid_argument("translate: network has no translation head");
  check_batch_input(net.config(), images, "translate");
  const Shape s = images.shape();
  Tensor4<T> out(s);
  for (std::size_t first = 0; first < s.n; first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, s.n - first);
    Tensor4<T> tr;
    net.forward(images.slice_batch(first, count), Mode::eval, &tr, nullptr);
    std::copy(tr.values().begin(), tr.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(first * s.plane()));
  }
  return out;
}

template <typename T>
double cycle_error(RNet<T>& first, RNet<T>& second, const Tensor4<T>& images) {
  const Tensor4<T> back = translate(second, translate(first, images));
  double s = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) s += std::fabs(static_cast<double>(back[i]) - images[i]);
  return s / static_cast<double>(images.size());
}

#define SUSAN_INSTANTIATE_TRAINER(T)                                                                     \
  template class SusanTrainer<T>;                                                                        \
  template class SupervisedTrainer<T>;                                                                   \
  template Tensor4<T> stack_images<T>(const SliceSet&, const std::vector<std::size_t>&);                 \
  template TrainResult train<T>(const TrainConfig&, const TrainingData&, const TrainOptions&);           \
  template TrainResult train_supervised<T>(const TrainConfig&, const TrainingData&, const TrainOptions&); \
  template void load_network<T>(RNet<T>&, const std::vector<NamedTensor>&);                              \
  template void load_network<T>(PatchDiscriminator<T>&, const std::vector<NamedTensor>&);                \
  template std::vector<NamedTensor> network_tensors<T>(RNet<T>&);                                        \
  template std::vector<LabelMask> segment_target<T>(RNet<T>&, const Tensor4<T>&);                        \
  template std::vector<LabelMask> segment_reference<T>(RNet<T>&, const Tensor4<T>&);                     \
  template Tensor4<T> translate<T>(RNet<T>&, const Tensor4<T>&);                                         \
  template double cycle_error<T>(RNet<T>&, RNet<T>&, const Tensor4<T>&);

SUSAN_INSTANTIATE_TRAINER(float)
SUSAN_INSTANTIATE_TRAINER(double)

}  // namespace susan
