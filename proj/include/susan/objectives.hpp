#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "susan/networks.hpp"

namespace susan {

/// Clamp applied to probabilities before any log.
inline constexpr double kLogEps = 1e-7;

struct LossWeights {
  double cycle = 10.0;
  double gan = 1.0;
  double seg = 5.0;

  /// Throws std::invalid_argument on negative or non-finite weights.
  void validate() const;
};

/// Scalar components of one objective evaluation.
struct LossReport {
  double cycle = 0.0;
  double gan_forward = 0.0;
  double gan_backward = 0.0;
  double seg = 0.0;
  double total = 0.0;
};

/// Generator-side adversarial criterion.
enum class GanLoss {
  non_saturating,  ///< minimize -mean log D(fake)
  saturating,      ///< minimize mean log(1 - D(fake))
  least_squares,   ///< minimize mean (D(fake) - 1)^2
};

std::string to_string(GanLoss loss);
GanLoss parse_gan_loss(const std::string& text);

/// total = w.cycle * cycle + w.seg * seg + w.gan * (gan_forward + gan_backward).
/// Returns `components` with `total` filled in. Throws on invalid weights or non-finite input.
LossReport total_objective(const LossReport& components, const LossWeights& weights);

namespace loss {

/// mean |x - B(F(x))| + mean |y - F(B(y))|.
template <typename T>
Var cycle(Tape<T>& tape, Var x, Var x_reconstructed, Var y, Var y_reconstructed);

/// Discriminator objective (to be maximized): mean log D(real) + mean log(1 - D(fake)).
/// For least squares: -(mean (D(real) - 1)^2 + mean D(fake)^2).
template <typename T>
Var discriminator_objective(Tape<T>& tape, Var d_real, Var d_fake, GanLoss variant = GanLoss::non_saturating);

/// Generator adversarial term (to be minimized).
template <typename T>
Var generator_adversarial(Tape<T>& tape, Var d_fake, GanLoss variant = GanLoss::non_saturating);

/// CE(F seg(x), M_x) + CE(B seg(F(x)), M_x).
template <typename T>
Var segmentation(Tape<T>& tape, Var probs_source, Var probs_translated, const std::vector<std::uint8_t>& labels);

/// Differentiable counterpart of total_objective().
template <typename T>
Var weighted_total(Tape<T>& tape, Var cycle, Var seg, Var gan_forward, Var gan_backward, const LossWeights& weights);

}  // namespace loss

/// Network-level conveniences. All forwards use `mode`; the caller owns tape freezing.
template <typename T>
struct AdversarialTerms {
  Var discriminator;  ///< objective to maximize over D
  Var generator;      ///< term to minimize over the generator
};

template <typename T>
Var cycle_loss(Tape<T>& tape, RNet<T>& forward_net, RNet<T>& backward_net, Var x, Var y, Mode mode);

/// Forward direction: D_Y judges real target images y against translations F(x).
/// The backward direction is the same computation with D_X, real x and B(y).
template <typename T>
AdversarialTerms<T> adversarial_loss(Tape<T>& tape, PatchDiscriminator<T>& disc, Var real, Var fake, Mode mode,
                                     GanLoss variant = GanLoss::non_saturating);

template <typename T>
Var segmentation_loss(Tape<T>& tape, RNet<T>& forward_net, RNet<T>& backward_net, Var x,
                      const std::vector<std::uint8_t>& labels, Mode mode);

}  // namespace susan
