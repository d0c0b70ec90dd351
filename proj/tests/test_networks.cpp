#include <cmath>
#include <map>

#include "doctest.h"
#include "susan/gradcheck.hpp"
#include "susan/networks.hpp"

using namespace susan;

namespace {

template <typename T>
Tensor4<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor4<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Architecture trace written out independently of the network builder: each entry is
// (kind, in, out, kernel), kind 'c' conv / 'd' transposed conv / 'b' batch norm; upper-case
// 'C' / 'D' are the bias-free variants that feed batch norm.
struct LayerRow {
  char kind;
  std::size_t in;
  std::size_t out;
  std::size_t k;
};

std::size_t count_params(const std::vector<LayerRow>& rows) {
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.kind == 'b') {
      n += 2 * r.out;
    } else {
      n += r.k * r.k * r.in * r.out + (r.kind == 'c' || r.kind == 'd' ? r.out : 0);
    }
  }
  return n;
}

std::vector<LayerRow> rnet_trace(std::size_t depth, std::size_t c, std::size_t classes, bool translation) {
  std::vector<LayerRow> rows{{'c', 1, c, 3}};
  std::vector<std::size_t> width{c};
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t in = width.back();
    rows.push_back({'C', in, 2 * in, 4});
    rows.push_back({'b', 0, 2 * in, 0});
    width.push_back(2 * in);
  }
  std::size_t cur = width.back();
  for (std::size_t j = 0; j < depth; ++j) {
    const std::size_t skip = width[depth - 1 - j];
    rows.push_back({'D', cur, skip, 4});
    rows.push_back({'b', 0, skip, 0});
    cur = 2 * skip;
  }
  if (translation) rows.push_back({'c', cur, 1, 3});
  rows.push_back({'c', cur, classes, 3});
  return rows;
}

RNetConfig tiny_config() {
  RNetConfig c;
  c.input_size = 8;
  c.depth = 1;
  c.base_channels = 2;
  return c;
}

template <typename T>
LayerSpec<T>* find_layer(RNet<T>& net, const std::string& name) {
  for (LayerSpec<T>* l : net.layers())
    if (l->name == name) return l;
  FAIL("no layer " << name);
  return nullptr;
}

template <typename T>
void copy_state(RNet<T>& from, RNet<double>& to) {
  auto a = from.state();
  auto b = to.state();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].name == b[i].name);
    *b[i].tensor = a[i].tensor->template cast<double>();
  }
}

double weighted(const Tensor4<double>& y, const Tensor4<double>& r, const Tensor4<double>& base) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - base[i]) * r[i];
  return s;
}

// Relative gradient error of one head of a tiny R-Net at precision T, against central
// differences of a double copy. Covers the input and every parameter.
template <typename T>
double head_grad_error(bool translation_head, std::uint64_t seed) {
  const RNetConfig cfg = tiny_config();
  RNet<T> net(cfg, "F", seed);
  // Non-trivial batch-norm affine parameters.
  for (LayerSpec<T>* l : net.layers()) {
    if (l->kind == LayerKind::batch_norm) {
      l->weight.value = random_tensor<T>(l->weight.value.shape(), seed + 7, 0.5, 1.5);
      l->bias.value = random_tensor<T>(l->bias.value.shape(), seed + 8, -0.2, 0.2);
    } else if (l->has_parameters()) {
      l->bias.value = random_tensor<T>(l->bias.value.shape(), seed + 9, -0.1, 0.1);
    }
  }
  RNet<double> twin(cfg, "F", seed);
  copy_state(net, twin);
  const Tensor4<T> x = random_tensor<T>(Shape{2, 1, 8, 8}, seed + 1);
  const Shape out_shape = translation_head ? Shape{2, 1, 8, 8} : Shape{2, 5, 8, 8};
  const Tensor4<double> r = random_tensor<double>(out_shape, seed + 2, 0.5, 1.5);
  const Mode mode = Mode::train_frozen_stats;

  for (auto* p : net.parameters()) p->zero_grad();
  Tape<T> tape;
  Var xv = tape.input(x);
  auto o = net.forward(tape, xv, mode);
  Var head = translation_head ? o.translated : o.probs;
  const Tensor4<T> rt = r.template cast<T>();
  const auto& hv = tape.value(head);
  double total = 0.0;
  for (std::size_t i = 0; i < hv.size(); ++i) total += static_cast<double>(hv[i]) * rt[i];
  Var loss = tape.record(Tensor4<T>(Shape{1, 1, 1, 1}, static_cast<T>(total)), true,
                         [head, rt](Tape<T>& t, std::size_t self) {
                           const T g = t.grad(Var{self})[0];
                           auto& gh = t.grad(head);
                           for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += g * rt[i];
                         });
  tape.backward(loss);

  const Tensor4<double> xd = x.template cast<double>();
  auto eval = [&](const Tensor4<double>& in) {
    Tensor4<double> tr;
    Tensor4<double> pr;
    twin.forward(in, mode, &tr, &pr);
    return translation_head ? tr : pr;
  };
  const Tensor4<double> base = eval(xd);
  auto value = [&](const Tensor4<double>& in) { return weighted(eval(in), r, base); };
  const double step = 1e-5;
  double worst = gradient_check<double>(value, tape.grad(xv).template cast<double>(), xd, step);
  auto analytic = net.parameters();
  auto params = twin.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const bool head_param = params[k]->name.find(translation_head ? ".segmentation." : ".translation.") !=
                            std::string::npos;
    if (head_param) continue;  // the other head does not reach this loss
    const Tensor4<double> saved = params[k]->value;
    auto f = [&](const Tensor4<double>& p) {
      params[k]->value = p;
      const double v = value(xd);
      params[k]->value = saved;
      return v;
    };
    const double e = gradient_check<double>(f, analytic[k]->grad.template cast<double>(), saved, step);
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace

TEST_CASE("R-Net construction is deterministic and name-seeded") {
  RNetConfig cfg;
  cfg.depth = 2;
  RNet<float> a(cfg, "F", 5);
  RNet<float> b(cfg, "F", 5);
  RNet<float> other(cfg, "B", 5);
  auto pa = a.parameters();
  auto pb = b.parameters();
  auto po = other.parameters();
  REQUIRE(pa.size() == pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value == pb[i]->value);
    if (pa[i]->name.find("conv.weight") != std::string::npos) differs = differs || !(pa[i]->value == po[i]->value);
  }
  CHECK(differs);
  CHECK(pa.front()->name == "F.stem.conv.weight");
}

TEST_CASE("R-Net parameter count matches the architecture trace") {
  RNetConfig cfg;
  CHECK(cfg.depth == 4);
  RNet<float> net(cfg, "F", 1);
  CHECK(net.parameter_count() == count_params(rnet_trace(4, 16, 5, true)));
  CHECK(net.parameter_count() == 1568006);
  for (std::size_t depth : {1u, 2u, 3u}) {
    for (bool head : {true, false}) {
      RNetConfig c;
      c.depth = depth;
      c.translation_head = head;
      RNet<float> n(c, "F", 1);
      CHECK(n.parameter_count() == count_params(rnet_trace(depth, 16, 5, head)));
    }
  }
}

TEST_CASE("R-Net config validation") {
  RNetConfig cfg;
  cfg.input_size = 60;
  CHECK_THROWS(RNet<float>(cfg, "F", 1));
  cfg = RNetConfig{};
  cfg.classes = 1;
  CHECK_THROWS(RNet<float>(cfg, "F", 1));
  cfg = RNetConfig{};
  cfg.depth = 0;
  CHECK_THROWS(RNet<float>(cfg, "F", 1));
}

TEST_CASE("R-Net heads: shapes, ranges and probability simplex") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RNetConfig cfg;
    cfg.depth = 2;
    RNet<float> net(cfg, "F", seed);
    const auto x = random_tensor<float>(Shape{2, 1, 64, 64}, seed + 100);
    Tensor4<float> tr;
    Tensor4<float> pr;
    net.forward(x, seed % 2 ? Mode::eval : Mode::train_frozen_stats, &tr, &pr);
    CHECK(tr.shape() == x.shape());
    CHECK(pr.shape() == Shape{2, 5, 64, 64});
    for (float v : tr.values()) CHECK((v > -1.0f && v < 1.0f));
    bool ok = true;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 64 * 64; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
          ok = ok && pr.plane(n, c)[i] >= 0.0f;
          s += pr.plane(n, c)[i];
        }
        ok = ok && std::abs(s - 1.0) <= 1e-5;
      }
    CHECK(ok);
  }
}

TEST_CASE("depth-1 R-Net still emits both heads at full resolution") {
  RNetConfig cfg;
  cfg.depth = 1;
  cfg.input_size = 16;
  RNet<float> net(cfg, "F", 3);
  Tensor4<float> tr;
  Tensor4<float> pr;
  net.forward(random_tensor<float>(Shape{1, 1, 16, 16}, 4), Mode::eval, &tr, &pr);
  CHECK(tr.shape() == Shape{1, 1, 16, 16});
  CHECK(pr.shape() == Shape{1, 5, 16, 16});
}

TEST_CASE("R-Net eval mode is bitwise deterministic; wrong sizes are rejected") {
  RNetConfig cfg;
  cfg.depth = 2;
  RNet<float> net(cfg, "F", 8);
  const auto x = random_tensor<float>(Shape{3, 1, 64, 64}, 9);
  Tensor4<float> t1, p1, t2, p2;
  net.forward(x, Mode::eval, &t1, &p1);
  net.forward(x, Mode::eval, &t2, &p2);
  CHECK(t1 == t2);
  CHECK(p1 == p2);
  CHECK_THROWS_AS(net.forward(random_tensor<float>(Shape{1, 1, 32, 32}, 1), Mode::eval, &t1, &p1), ShapeError);
  CHECK_THROWS_AS(net.forward(random_tensor<float>(Shape{1, 2, 64, 64}, 1), Mode::eval, &t1, &p1), ShapeError);
}

TEST_CASE("supervised variant has no translation head") {
  RNetConfig cfg = tiny_config();
  cfg.translation_head = false;
  RNet<float> net(cfg, "S", 1);
  for (auto* p : net.parameters()) CHECK(p->name.find("translation") == std::string::npos);
  Tensor4<float> tr;
  Tensor4<float> pr;
  net.forward(random_tensor<float>(Shape{1, 1, 8, 8}, 2), Mode::eval, &tr, &pr);
  CHECK(tr.empty());
  CHECK(pr.shape() == Shape{1, 5, 8, 8});
}

TEST_CASE("shared trunk: trunk perturbations move both heads, head perturbations only their own") {
  RNetConfig cfg;
  cfg.depth = 2;
  cfg.input_size = 16;
  RNet<double> net(cfg, "F", 11);
  const auto x = random_tensor<double>(Shape{2, 1, 16, 16}, 12);
  Tensor4<double> t0, p0;
  net.forward(x, Mode::eval, &t0, &p0);
  auto run = [&](const std::string& layer, Tensor4<double>& t, Tensor4<double>& p) {
    LayerSpec<double>* l = find_layer(net, layer);
    const auto saved = l->weight.value;
    for (auto& v : l->weight.value.values()) v += 0.05;
    net.forward(x, Mode::eval, &t, &p);
    l->weight.value = saved;
  };
  Tensor4<double> t, p;
  for (const char* trunk : {"F.stem.conv", "F.enc1.conv", "F.enc2.bn", "F.dec2.deconv"}) {
    CAPTURE(trunk);
    run(trunk, t, p);
    CHECK(!(t == t0));
    CHECK(!(p == p0));
  }
  run("F.translation.conv", t, p);
  CHECK(!(t == t0));
  CHECK(p == p0);
  run("F.segmentation.conv", t, p);
  CHECK(t == t0);
  CHECK(!(p == p0));
}

TEST_CASE("skip connections carry information into the decoder") {
  RNetConfig cfg;
  cfg.depth = 2;
  cfg.input_size = 16;
  const std::size_t c = cfg.base_channels;
  RNet<double> net(cfg, "F", 21);
  const auto x = random_tensor<double>(Shape{1, 1, 16, 16}, 22);
  Tensor4<double> t0, p0;
  net.forward(x, Mode::eval, &t0, &p0);
  // dec2 consumes [upsampled dec1 (2c channels) | enc1 skip (2c channels)]; cutting the weights
  // that read the skip half must change the output.
  LayerSpec<double>* dec2 = find_layer(net, "F.dec2.deconv");
  REQUIRE(dec2->weight.value.shape().n == 4 * c);
  const auto saved = dec2->weight.value;
  const std::size_t per = dec2->weight.value.shape().c * 16;
  for (std::size_t i = 2 * c * per; i < 4 * c * per; ++i) dec2->weight.value[i] = 0.0;
  Tensor4<double> t1, p1;
  net.forward(x, Mode::eval, &t1, &p1);
  CHECK(!(t1 == t0));
  CHECK(!(p1 == p0));
  dec2->weight.value = saved;

  // Full-resolution skip: the heads see [dec2 output | stem features].
  Tape<double> tape;
  tape.freeze_parameters(true);
  const Var h = net.trunk(tape, tape.constant(x), Mode::eval);
  CHECK(tape.shape(h) == Shape{1, 2 * c, 16, 16});
  LayerSpec<double>* stem = find_layer(net, "F.stem.conv");
  LayerSpec<double>* act = find_layer(net, "F.stem.act");
  const auto stem_out = apply_layer(*act, apply_layer(*stem, x, Mode::eval), Mode::eval);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 256; ++i) CHECK(tape.value(h).plane(0, c + ch)[i] == stem_out.plane(0, ch)[i]);
}

TEST_CASE("both heads pass the gradient check") {
  CHECK(head_grad_error<double>(true, 31) < 1e-6);
  CHECK(head_grad_error<double>(false, 32) < 1e-6);
  CHECK(head_grad_error<float>(true, 31) < 1e-3);
  CHECK(head_grad_error<float>(false, 32) < 1e-3);
}

TEST_CASE("patch discriminator: grid size, range and the zero-weight fixed point") {
  DiscriminatorConfig cfg;
  PatchDiscriminator<float> d(cfg, "DY", 3);
  CHECK(cfg.grid_size() == 8);
  const auto y = d.forward(random_tensor<float>(Shape{3, 1, 64, 64}, 4), Mode::train_frozen_stats);
  CHECK(y.shape() == Shape{3, 1, 8, 8});
  for (float v : y.values()) CHECK((v > 0.0f && v < 1.0f));
  d.output_layer().weight.value.fill(0.0f);
  d.output_layer().bias.value.fill(0.0f);
  const auto half = d.forward(random_tensor<float>(Shape{2, 1, 64, 64}, 5), Mode::eval);
  for (float v : half.values()) CHECK(v == 0.5f);
  CHECK_THROWS_AS(d.forward(random_tensor<float>(Shape{1, 1, 32, 32}, 5), Mode::eval), ShapeError);
}

TEST_CASE("patch discriminator layout and names") {
  DiscriminatorConfig cfg;
  PatchDiscriminator<float> d(cfg, "DY", 3);
  std::map<std::string, Shape> shapes;
  for (auto& e : d.state()) shapes[e.name] = e.tensor->shape();
  CHECK(shapes.count("DY.block1.conv.weight") == 1);
  CHECK(shapes.count("DY.block1.bn.scale") == 0);
  CHECK(shapes.at("DY.block2.bn.scale") == Shape{1, 32, 1, 1});
  CHECK(shapes.at("DY.block3.conv.weight") == Shape{64, 32, 4, 4});
  CHECK(shapes.at("DY.output.conv.weight") == Shape{1, 64, 3, 3});
  CHECK(shapes.count("DY.block3.bn.running_var") == 1);
  const std::size_t expected = count_params({{'c', 1, 16, 4}, {'C', 16, 32, 4}, {'b', 0, 32, 0}, {'C', 32, 64, 4},
                                             {'b', 0, 64, 0}, {'c', 64, 1, 3}});
  CHECK(d.parameter_count() == expected);
}

TEST_CASE("argmax labels break ties toward the lowest class") {
  Tensor4<float> p(Shape{1, 3, 1, 2}, std::vector<float>{0.4f, 0.2f, 0.4f, 0.5f, 0.2f, 0.3f});
  const auto l = argmax_labels(p);
  CHECK(l[0] == 0);
  CHECK(l[1] == 1);
}
