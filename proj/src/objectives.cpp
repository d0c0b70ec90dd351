#include "susan/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace susan {

void LossWeights::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and >= 0, got " +
                                  std::to_string(v));
    }
  };
  check(cycle, "cycle");
  check(gan, "gan");
  check(seg, "seg");
}

std::string to_string(GanLoss loss) {
  switch (loss) {
    case GanLoss::non_saturating: return "non_saturating";
    case GanLoss::saturating: return "saturating";
    case GanLoss::least_squares: return "least_squares";
  }
  return "?";
}

GanLoss parse_gan_loss(const std::string& text) {
  if (text == "non_saturating") return GanLoss::non_saturating;
  if (text == "saturating") return GanLoss::saturating;
  if (text == "least_squares") return GanLoss::least_squares;
  throw std::invalid_argument("unknown adversarial loss '" + text +
                              "' (expected non_saturating, saturating or least_squares)");
}

LossReport total_objective(const LossReport& c, const LossWeights& w) {
  w.validate();
  for (double v : {c.cycle, c.gan_forward, c.gan_backward, c.seg}) {
    if (!std::isfinite(v)) throw std::invalid_argument("total_objective: non-finite loss component");
  }
  LossReport out = c;
  out.total = w.cycle * c.cycle + w.seg * c.seg + w.gan * (c.gan_forward + c.gan_backward);
  return out;
}

namespace loss {

template <typename T>
Var cycle(Tape<T>& tape, Var x, Var x_rec, Var y, Var y_rec) {
  return ops::add(tape, ops::mean_abs_diff(tape, x_rec, x), ops::mean_abs_diff(tape, y_rec, y));
}

template <typename T>
Var discriminator_objective(Tape<T>& tape, Var d_real, Var d_fake, GanLoss variant) {
  if (variant == GanLoss::least_squares) {
    Var s = ops::add(tape, ops::mean_sq_to(tape, d_real, T(1)), ops::mean_sq_to(tape, d_fake, T(0)));
    return ops::scale(tape, s, T(-1));
  }
  return ops::add(tape, ops::mean_log(tape, d_real, kLogEps), ops::mean_log1m(tape, d_fake, kLogEps));
}

template <typename T>
Var generator_adversarial(Tape<T>& tape, Var d_fake, GanLoss variant) {
  switch (variant) {
    case GanLoss::non_saturating: return ops::scale(tape, ops::mean_log(tape, d_fake, kLogEps), T(-1));
    case GanLoss::saturating: return ops::mean_log1m(tape, d_fake, kLogEps);
    case GanLoss::least_squares: return ops::mean_sq_to(tape, d_fake, T(1));
  }
  throw std::invalid_argument("generator_adversarial: bad variant");
}

template <typename T>
Var segmentation(Tape<T>& tape, Var probs_source, Var probs_translated, const std::vector<std::uint8_t>& labels) {
  return ops::add(tape, ops::cross_entropy(tape, probs_source, labels, kLogEps),
                  ops::cross_entropy(tape, probs_translated, labels, kLogEps));
}

template <typename T>
Var weighted_total(Tape<T>& tape, Var cyc, Var seg, Var gan_f, Var gan_b, const LossWeights& w) {
  w.validate();
  Var total = ops::add(tape, ops::scale(tape, cyc, static_cast<T>(w.cycle)), ops::scale(tape, seg, static_cast<T>(w.seg)));
  Var gan = ops::add(tape, gan_f, gan_b);
  return ops::add(tape, total, ops::scale(tape, gan, static_cast<T>(w.gan)));
}

}  // namespace loss

template <typename T>
Var cycle_loss(Tape<T>& tape, RNet<T>& f, RNet<T>& b, Var x, Var y, Mode mode) {
  Var fx = f.forward(tape, x, mode).translated;
  Var by = b.forward(tape, y, mode).translated;
  if (!fx.valid() || !by.valid()) throw std::invalid_argument("cycle_loss: networks need a translation head");
  Var x_rec = b.forward(tape, fx, mode).translated;
  Var y_rec = f.forward(tape, by, mode).translated;
  return loss::cycle(tape, x, x_rec, y, y_rec);
}

template <typename T>
AdversarialTerms<T> adversarial_loss(Tape<T>& tape, PatchDiscriminator<T>& disc, Var real, Var fake, Mode mode,
                                     GanLoss variant) {
  Var d_real = disc.forward(tape, real, mode);
  Var d_fake = disc.forward(tape, fake, mode);
  return {loss::discriminator_objective(tape, d_real, d_fake, variant),
          loss::generator_adversarial(tape, d_fake, variant)};
}

template <typename T>
Var segmentation_loss(Tape<T>& tape, RNet<T>& f, RNet<T>& b, Var x, const std::vector<std::uint8_t>& labels,
                      Mode mode) {
  auto out = f.forward(tape, x, mode);
  if (!out.translated.valid()) throw std::invalid_argument("segmentation_loss: forward net needs a translation head");
  Var probs_back = b.forward(tape, out.translated, mode).probs;
  return loss::segmentation(tape, out.probs, probs_back, labels);
}

#define SUSAN_INSTANTIATE_OBJECTIVES(T)                                                                       \
  template Var loss::cycle<T>(Tape<T>&, Var, Var, Var, Var);                                                  \
  template Var loss::discriminator_objective<T>(Tape<T>&, Var, Var, GanLoss);                                 \
  template Var loss::generator_adversarial<T>(Tape<T>&, Var, GanLoss);                                        \
  template Var loss::segmentation<T>(Tape<T>&, Var, Var, const std::vector<std::uint8_t>&);                   \
  template Var loss::weighted_total<T>(Tape<T>&, Var, Var, Var, Var, const LossWeights&);                     \
  template Var cycle_loss<T>(Tape<T>&, RNet<T>&, RNet<T>&, Var, Var, Mode);                                   \
  template AdversarialTerms<T> adversarial_loss<T>(Tape<T>&, PatchDiscriminator<T>&, Var, Var, Mode, GanLoss); \
  template Var segmentation_loss<T>(Tape<T>&, RNet<T>&, RNet<T>&, Var, const std::vector<std::uint8_t>&, Mode);

SUSAN_INSTANTIATE_OBJECTIVES(float)
SUSAN_INSTANTIATE_OBJECTIVES(double)

}  // namespace susan
