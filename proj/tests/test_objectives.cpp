#include <cmath>

#include "doctest.h"
#include "susan/gradcheck.hpp"
#include "susan/objectives.hpp"

using namespace susan;

namespace {

template <typename T>
Tensor4<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor4<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Per-pixel class distributions (strictly positive, summing to one over channels).
Tensor4<double> random_probs(Shape s, std::uint64_t seed) {
  Tensor4<double> t = random_tensor<double>(s, seed, 0.05, 1.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) z += t.plane(n, c)[i];
      for (std::size_t c = 0; c < s.c; ++c) t.plane(n, c)[i] /= z;
    }
  }
  return t;
}

std::vector<std::uint8_t> random_labels(std::size_t count, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> out(count);
  for (auto& l : out) l = static_cast<std::uint8_t>(rng.next() % classes);
  return out;
}

template <typename T>
double scalar(Tape<T>& tape, Var v) {
  return static_cast<double>(tape.value(v)[0]);
}

// Relative error of d(loss)/d(input) at precision T against differences of the double build.
template <typename T, typename Build>
double loss_grad_error(Build build, const Tensor4<double>& x, double step) {
  Tape<T> tape;
  Var in = tape.input(x.cast<T>());
  Var loss = build(tape, in);
  tape.backward(loss);
  const Tensor4<double> analytic = tape.grad(in).template cast<double>();
  auto f = [&](const Tensor4<double>& p) {
    Tape<double> t;
    Var v = t.constant(p);
    return t.value(build(t, v))[0];
  };
  return gradient_check<double>(f, analytic, x, step);
}

// Brute-force references written as plain loops.
double oracle_mean_abs(const Tensor4<double>& a, const Tensor4<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double oracle_ce(const Tensor4<double>& p, const std::vector<std::uint8_t>& labels) {
  const Shape s = p.shape();
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t h = 0; h < s.h; ++h)
      for (std::size_t w = 0; w < s.w; ++w) {
        const std::size_t pix = (n * s.h + h) * s.w + w;
        total += -std::log(std::max(p.at(n, labels[pix], h, w), 1e-7));
      }
  return total / static_cast<double>(s.n * s.h * s.w);
}

double oracle_mean_log(const Tensor4<double>& p, bool complement) {
  double s = 0.0;
  for (double v : p.values()) {
    const double c = std::min(std::max(v, 1e-7), 1.0 - 1e-7);
    s += std::log(complement ? 1.0 - c : c);
  }
  return s / static_cast<double>(p.size());
}

}  // namespace

TEST_CASE("discriminator at 0.5 everywhere gives 2 ln 0.5") {
  Tape<double> tape;
  Var half = tape.constant(Tensor4<double>(Shape{3, 1, 8, 8}, 0.5));
  Var half2 = tape.constant(Tensor4<double>(Shape{3, 1, 8, 8}, 0.5));
  CHECK(std::fabs(scalar(tape, loss::discriminator_objective(tape, half, half2)) - (-1.38629)) < 1e-5);
  CHECK(scalar(tape, loss::generator_adversarial(tape, half2)) == doctest::Approx(std::log(2.0)));

  // Same value through a real discriminator whose output layer is zeroed.
  DiscriminatorConfig cfg;
  PatchDiscriminator<float> d(cfg, "DY", 1);
  d.output_layer().weight.value.fill(0.0f);
  d.output_layer().bias.value.fill(0.0f);
  Tape<float> ft;
  Var real = ft.constant(random_tensor<float>(Shape{2, 1, 64, 64}, 2));
  Var fake = ft.constant(random_tensor<float>(Shape{2, 1, 64, 64}, 3));
  auto terms = adversarial_loss(ft, d, real, fake, Mode::train_frozen_stats);
  CHECK(std::fabs(scalar(ft, terms.discriminator) - 2.0 * std::log(0.5)) < 1e-5);
}

TEST_CASE("uniform segmentation heads give 2 ln 5") {
  const Shape s{2, 5, 8, 8};
  Tape<double> tape;
  Var u1 = tape.constant(Tensor4<double>(s, 0.2));
  Var u2 = tape.constant(Tensor4<double>(s, 0.2));
  const auto labels = random_labels(2 * 64, 5, 4);
  CHECK(scalar(tape, loss::segmentation(tape, u1, u2, labels)) == doctest::Approx(2.0 * std::log(5.0)).epsilon(1e-12));

  // Through networks with zeroed segmentation heads (softmax of zeros).
  RNetConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 2;
  cfg.base_channels = 4;
  RNet<double> f(cfg, "F", 5);
  RNet<double> b(cfg, "B", 6);
  for (RNet<double>* net : {&f, &b}) {
    for (LayerSpec<double>* l : net->layers()) {
      if (l->name.find("segmentation.conv") != std::string::npos) {
        l->weight.value.fill(0.0);
        l->bias.value.fill(0.0);
      }
    }
  }
  Tape<double> t2;
  Var x = t2.constant(random_tensor<double>(Shape{2, 1, 16, 16}, 7));
  const auto lab = random_labels(2 * 256, 5, 8);
  CHECK(scalar(t2, segmentation_loss(t2, f, b, x, lab, Mode::train_frozen_stats)) ==
        doctest::Approx(3.21888).epsilon(1e-5));
}

TEST_CASE("total objective closed form and weight validation") {
  LossReport c;
  c.cycle = 0.1;
  c.seg = 0.2;
  c.gan_forward = -1.0;
  c.gan_backward = -1.0;
  const LossReport r = total_objective(c, LossWeights{});
  CHECK(r.total == 0.0);
  CHECK(r.cycle == 0.1);
  CHECK(r.seg == 0.2);

  // Linear in each weight.
  LossReport a;
  a.cycle = 0.3;
  a.seg = 0.7;
  a.gan_forward = 0.4;
  a.gan_backward = 0.9;
  const LossWeights w0{2.0, 3.0, 5.0};
  const LossWeights w1{2.0 + 1.5, 3.0, 5.0};
  CHECK(total_objective(a, w1).total - total_objective(a, w0).total == doctest::Approx(1.5 * a.cycle));
  const LossWeights w2{2.0, 3.0 + 0.5, 5.0};
  CHECK(total_objective(a, w2).total - total_objective(a, w0).total ==
        doctest::Approx(0.5 * (a.gan_forward + a.gan_backward)));
  CHECK(total_objective(a, LossWeights{0, 0, 0}).total == 0.0);

  CHECK_THROWS_AS(total_objective(a, LossWeights{-1.0, 1.0, 5.0}), std::invalid_argument);
  CHECK_THROWS_AS(total_objective(a, LossWeights{10.0, -0.1, 5.0}), std::invalid_argument);
  CHECK_THROWS_AS(total_objective(a, LossWeights{10.0, 1.0, -5.0}), std::invalid_argument);
  LossReport bad = a;
  bad.seg = std::nan("");
  CHECK_THROWS_AS(total_objective(bad, LossWeights{}), std::invalid_argument);

  // The differentiable version agrees with the scalar one.
  Tape<double> tape;
  auto k = [&](double v) { return tape.constant(Tensor4<double>(Shape{1, 1, 1, 1}, v)); };
  Var t = loss::weighted_total(tape, k(a.cycle), k(a.seg), k(a.gan_forward), k(a.gan_backward), w0);
  CHECK(scalar(tape, t) == doctest::Approx(total_objective(a, w0).total).epsilon(1e-14));
}

TEST_CASE("losses match loop oracles on random inputs") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Shape s{2, 1, 6, 7};
    const auto x = random_tensor<double>(s, seed);
    const auto xr = random_tensor<double>(s, seed + 100);
    const auto y = random_tensor<double>(s, seed + 200);
    const auto yr = random_tensor<double>(s, seed + 300);
    const auto pr = random_tensor<double>(s, seed + 400, 0.0, 1.0);
    const auto pf = random_tensor<double>(s, seed + 500, 0.0, 1.0);
    const Shape ps{2, 5, 6, 7};
    const auto p1 = random_probs(ps, seed + 600);
    const auto p2 = random_probs(ps, seed + 700);
    const auto labels = random_labels(2 * 42, 5, seed + 800);

    Tape<double> t;
    auto c = [&](const Tensor4<double>& v) { return t.constant(v); };
    const double cyc = scalar(t, loss::cycle(t, c(x), c(xr), c(y), c(yr)));
    CHECK(cyc == doctest::Approx(oracle_mean_abs(x, xr) + oracle_mean_abs(y, yr)).epsilon(1e-13));
    const double dobj = scalar(t, loss::discriminator_objective(t, c(pr), c(pf)));
    CHECK(dobj == doctest::Approx(oracle_mean_log(pr, false) + oracle_mean_log(pf, true)).epsilon(1e-13));
    CHECK(dobj <= 0.0);
    const double gns = scalar(t, loss::generator_adversarial(t, c(pf)));
    CHECK(gns == doctest::Approx(-oracle_mean_log(pf, false)).epsilon(1e-13));
    CHECK(gns >= 0.0);
    const double gsat = scalar(t, loss::generator_adversarial(t, c(pf), GanLoss::saturating));
    CHECK(gsat == doctest::Approx(oracle_mean_log(pf, true)).epsilon(1e-13));
    double ls = 0.0;
    for (double v : pf.values()) ls += (v - 1.0) * (v - 1.0);
    CHECK(scalar(t, loss::generator_adversarial(t, c(pf), GanLoss::least_squares)) ==
          doctest::Approx(ls / static_cast<double>(pf.size())).epsilon(1e-13));
    const double seg = scalar(t, loss::segmentation(t, c(p1), c(p2), labels));
    CHECK(seg == doctest::Approx(oracle_ce(p1, labels) + oracle_ce(p2, labels)).epsilon(1e-13));
    CHECK(seg >= 0.0);
  }
}

TEST_CASE("cycle loss: symmetric, zero only at perfect reconstruction") {
  const Shape s{1, 1, 8, 8};
  const auto x = random_tensor<double>(s, 1);
  const auto xr = random_tensor<double>(s, 2);
  const auto y = random_tensor<double>(s, 3);
  const auto yr = random_tensor<double>(s, 4);
  Tape<double> t;
  auto c = [&](const Tensor4<double>& v) { return t.constant(v); };
  const double ab = scalar(t, loss::cycle(t, c(x), c(xr), c(y), c(yr)));
  const double ba = scalar(t, loss::cycle(t, c(y), c(yr), c(x), c(xr)));
  CHECK(ab == ba);
  CHECK(ab > 0.0);
  CHECK(scalar(t, loss::cycle(t, c(x), c(x), c(y), c(y))) == 0.0);
  auto x2 = x;
  x2[5] += 0.25;
  CHECK(scalar(t, loss::cycle(t, c(x), c(x2), c(y), c(y))) == doctest::Approx(0.25 / 64.0));
}

TEST_CASE("segmentation loss is minimized by one-hot predictions of the truth") {
  const Shape s{1, 5, 4, 4};
  const auto labels = random_labels(16, 5, 9);
  Tensor4<double> onehot(s);
  for (std::size_t i = 0; i < 16; ++i) onehot.plane(0, labels[i])[i] = 1.0;
  Tape<double> t;
  CHECK(scalar(t, loss::segmentation(t, t.constant(onehot), t.constant(onehot), labels)) == 0.0);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto p = random_probs(s, seed);
    CHECK(scalar(t, loss::segmentation(t, t.constant(p), t.constant(onehot), labels)) > 0.0);
  }
  // A wrong one-hot answer costs -ln(eps) per pixel.
  Tensor4<double> wrong(s);
  for (std::size_t i = 0; i < 16; ++i) wrong.plane(0, (labels[i] + 1) % 5)[i] = 1.0;
  CHECK(scalar(t, loss::segmentation(t, t.constant(wrong), t.constant(onehot), labels)) ==
        doctest::Approx(-std::log(kLogEps)));
}

TEST_CASE("adversarial loss is the same computation in both directions") {
  DiscriminatorConfig cfg;
  cfg.input_size = 16;
  cfg.depth = 2;
  cfg.base_channels = 4;
  PatchDiscriminator<double> dy(cfg, "D", 11);
  PatchDiscriminator<double> dx(cfg, "D", 11);
  const auto a = random_tensor<double>(Shape{2, 1, 16, 16}, 12);
  const auto b = random_tensor<double>(Shape{2, 1, 16, 16}, 13);
  Tape<double> t;
  auto fwd = adversarial_loss(t, dy, t.constant(a), t.constant(b), Mode::train_frozen_stats);
  auto bwd = adversarial_loss(t, dx, t.constant(a), t.constant(b), Mode::train_frozen_stats);
  CHECK(scalar(t, fwd.discriminator) == scalar(t, bwd.discriminator));
  CHECK(scalar(t, fwd.generator) == scalar(t, bwd.generator));
  // Swapping real and fake changes the objective.
  auto swapped = adversarial_loss(t, dy, t.constant(b), t.constant(a), Mode::train_frozen_stats);
  CHECK(scalar(t, swapped.discriminator) != scalar(t, fwd.discriminator));
}

TEST_CASE("gan variant names round-trip") {
  for (GanLoss g : {GanLoss::non_saturating, GanLoss::saturating, GanLoss::least_squares})
    CHECK(parse_gan_loss(to_string(g)) == g);
  CHECK_THROWS_AS(parse_gan_loss("wasserstein"), std::invalid_argument);
}

TEST_CASE("every loss passes finite-difference gradient checks") {
  const Shape s{2, 1, 5, 5};
  const auto other = random_tensor<double>(s, 21);
  const auto y = random_tensor<double>(s, 22);
  const auto yr = random_tensor<double>(s, 23);
  const auto probs = random_tensor<double>(s, 24, 0.05, 0.95);
  const auto real = random_tensor<double>(s, 25, 0.05, 0.95);
  const Shape ps{2, 5, 5, 5};
  const auto p = random_probs(ps, 26);
  const auto p_other = random_probs(ps, 27);
  const auto labels = random_labels(50, 5, 28);
  const auto x = random_tensor<double>(s, 29);

  auto cycle_b = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::cycle(t, t.constant(other.cast<U>()), in, t.constant(y.cast<U>()), t.constant(yr.cast<U>()));
  };
  auto disc_fake = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::discriminator_objective(t, t.constant(real.cast<U>()), in);
  };
  auto disc_real = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::discriminator_objective(t, in, t.constant(probs.cast<U>()));
  };
  auto disc_ls = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::discriminator_objective(t, t.constant(real.cast<U>()), in, GanLoss::least_squares);
  };
  auto gen_ns = [&]<typename U>(Tape<U>& t, Var in) { return loss::generator_adversarial(t, in); };
  auto gen_sat = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::generator_adversarial(t, in, GanLoss::saturating);
  };
  auto gen_ls = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::generator_adversarial(t, in, GanLoss::least_squares);
  };
  auto seg = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::segmentation(t, in, t.constant(p_other.cast<U>()), labels);
  };
  // Segmentation through the softmax, as the network computes it.
  auto seg_logits = [&]<typename U>(Tape<U>& t, Var in) {
    return loss::segmentation(t, t.constant(p_other.cast<U>()), ops::softmax_channels(t, in), labels);
  };
  const LossWeights w;
  auto total = [&]<typename U>(Tape<U>& t, Var in) {
    Var cyc = loss::cycle(t, t.constant(other.cast<U>()), in, t.constant(y.cast<U>()), t.constant(yr.cast<U>()));
    Var d = ops::sigmoid(t, in);
    Var gf = loss::generator_adversarial(t, d);
    Var gb = loss::generator_adversarial(t, ops::sigmoid(t, ops::scale(t, in, U(-0.5))));
    Var sg = loss::segmentation(t, t.constant(p.cast<U>()), t.constant(p_other.cast<U>()), labels);
    return loss::weighted_total(t, cyc, sg, gf, gb, w);
  };

  const double step = 1e-4;
  CHECK(loss_grad_error<double>(cycle_b, x, step) < 1e-6);
  CHECK(loss_grad_error<float>(cycle_b, x, step) < 1e-3);
  for (const auto* in : {&probs}) {
    CHECK(loss_grad_error<double>(disc_fake, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(disc_fake, *in, step) < 1e-3);
    CHECK(loss_grad_error<double>(disc_real, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(disc_real, *in, step) < 1e-3);
    CHECK(loss_grad_error<double>(disc_ls, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(disc_ls, *in, step) < 1e-3);
    CHECK(loss_grad_error<double>(gen_ns, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(gen_ns, *in, step) < 1e-3);
    CHECK(loss_grad_error<double>(gen_sat, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(gen_sat, *in, step) < 1e-3);
    CHECK(loss_grad_error<double>(gen_ls, *in, step) < 1e-6);
    CHECK(loss_grad_error<float>(gen_ls, *in, step) < 1e-3);
  }
  CHECK(loss_grad_error<double>(seg, p, step) < 1e-6);
  CHECK(loss_grad_error<float>(seg, p, step) < 1e-3);
  const auto logits = random_tensor<double>(ps, 30, -2.0, 2.0);
  CHECK(loss_grad_error<double>(seg_logits, logits, step) < 1e-6);
  CHECK(loss_grad_error<float>(seg_logits, logits, step) < 1e-3);
  CHECK(loss_grad_error<double>(total, x, step) < 1e-6);
  CHECK(loss_grad_error<float>(total, x, step) < 1e-3);
}

namespace {

RNetConfig tiny_generator() {
  RNetConfig c;
  c.input_size = 8;
  c.depth = 1;
  c.base_channels = 2;
  return c;
}

DiscriminatorConfig tiny_discriminator() {
  DiscriminatorConfig c;
  c.input_size = 8;
  c.depth = 2;
  c.base_channels = 2;
  return c;
}

// Full generator objective of a tiny instance with both discriminators frozen.
double generator_total(RNet<double>& f, RNet<double>& b, PatchDiscriminator<double>& dy,
                       PatchDiscriminator<double>& dx, const Tensor4<double>& x, const Tensor4<double>& y,
                       const std::vector<std::uint8_t>& labels, Tape<double>* keep, Var* out) {
  Tape<double> local;
  Tape<double>& t = keep ? *keep : local;
  const Mode m = Mode::train_frozen_stats;
  Var xv = t.constant(x);
  Var yv = t.constant(y);
  auto fx = f.forward(t, xv, m);
  auto by = b.forward(t, yv, m);
  auto bfx = b.forward(t, fx.translated, m);
  auto fby = f.forward(t, by.translated, m);
  Var cyc = loss::cycle(t, xv, bfx.translated, yv, fby.translated);
  Var seg = loss::segmentation(t, fx.probs, bfx.probs, labels);
  t.freeze_parameters(true);
  Var d_fake_y = dy.forward(t, fx.translated, m);
  Var d_fake_x = dx.forward(t, by.translated, m);
  t.freeze_parameters(false);
  Var gf = loss::generator_adversarial(t, d_fake_y);
  Var gb = loss::generator_adversarial(t, d_fake_x);
  Var total = loss::weighted_total(t, cyc, seg, gf, gb, LossWeights{});
  if (out) *out = total;
  return t.value(total)[0];
}

}  // namespace

TEST_CASE("end-to-end: generator gradients of the total objective match finite differences") {
  RNet<double> f(tiny_generator(), "F", 41);
  RNet<double> b(tiny_generator(), "B", 42);
  PatchDiscriminator<double> dy(tiny_discriminator(), "DY", 43);
  PatchDiscriminator<double> dx(tiny_discriminator(), "DX", 44);
  const auto x = random_tensor<double>(Shape{2, 1, 8, 8}, 45);
  const auto y = random_tensor<double>(Shape{2, 1, 8, 8}, 46);
  const auto labels = random_labels(128, 5, 47);

  for (RNet<double>* net : {&f, &b})
    for (auto* p : net->parameters()) p->zero_grad();
  for (PatchDiscriminator<double>* d : {&dy, &dx})
    for (auto* p : d->parameters()) p->zero_grad();
  Tape<double> tape;
  Var total;
  generator_total(f, b, dy, dx, x, y, labels, &tape, &total);
  tape.backward(total);

  double worst = 0.0;
  for (RNet<double>* net : {&f, &b}) {
    for (auto* p : net->parameters()) {
      const Tensor4<double> saved = p->value;
      auto fn = [&](const Tensor4<double>& v) {
        p->value = v;
        const double r = generator_total(f, b, dy, dx, x, y, labels, nullptr, nullptr);
        p->value = saved;
        return r;
      };
      // Elements whose gradient cancels to ~1e-5 of the tensor's largest are compared
      // absolutely: there the loss differences are dominated by roundoff of f.
      double largest = 0.0;
      for (double g : p->grad.values()) largest = std::max(largest, std::fabs(g));
      const double e = gradient_check<double>(fn, p->grad, saved, 1e-5, 1e-4 * largest);
      CAPTURE(p->name);
      CHECK(e < 1e-6);
      worst = std::max(worst, e);
    }
  }
  MESSAGE("worst end-to-end relative error " << worst);
  // Frozen discriminators receive nothing from the generator step.
  for (PatchDiscriminator<double>* d : {&dy, &dx})
    for (auto* p : d->parameters())
      for (double g : p->grad.values()) CHECK(g == 0.0);
}
