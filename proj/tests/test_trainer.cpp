#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "susan/trainer.hpp"

using namespace susan;
namespace fs = std::filesystem;

namespace {

std::vector<Subject> subjects(DomainId domain, std::size_t count, std::uint64_t seed, std::size_t slices = 2) {
  std::vector<Subject> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(generate_subject(subject_id(to_string(domain), i), DomainStyle::preset(domain),
                                   derive_seed(seed, "test-subject", i), slices, 72, 0.5));
  }
  return out;
}

TrainingData tiny_data(std::size_t size, std::uint64_t seed = 3) {
  TrainingData d;
  d.labeled_train = make_slice_set(subjects(DomainId::reference, 3, seed), size, true);
  d.labeled_validation = make_slice_set(subjects(DomainId::reference, 1, seed + 1), size, true);
  d.unlabeled_train = make_slice_set(subjects(DomainId::target_a, 2, seed + 2), size, false);
  d.unlabeled_validation = make_slice_set(subjects(DomainId::target_a, 1, seed + 3), size, false);
  return d;
}

TrainConfig tiny_config(std::size_t size = 16) {
  TrainConfig c;
  c.generator.input_size = size;
  c.generator.depth = 1;
  c.generator.base_channels = 4;
  c.discriminator.input_size = size;
  c.discriminator.depth = 2;
  c.discriminator.base_channels = 4;
  c.epochs = 2;
  c.seed = 11;
  return c;
}

template <typename T>
std::vector<Tensor4<T>> snapshot(const std::vector<Parameter<T>*>& params) {
  std::vector<Tensor4<T>> out;
  for (const auto* p : params) out.push_back(p->value);
  return out;
}

template <typename T>
bool same(const std::vector<Tensor4<T>>& a, const std::vector<Parameter<T>*>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i]->value)) return false;
  }
  return true;
}

bool same_state(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !(a[i].tensor == b[i].tensor)) return false;
  }
  return true;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("susan-test-" + tag)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation, canonical text and hash") {
  TrainConfig a;
  CHECK_NOTHROW(a.validate());
  TrainConfig b = a;
  CHECK(a.canonical() == b.canonical());
  CHECK(a.hash() == b.hash());
  b.adam.learning_rate = 1e-3;
  CHECK(a.hash() != b.hash());

  TrainConfig bad = a;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = a;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = a;
  bad.weights.seg = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  CHECK(parse_train_mode(to_string(TrainMode::supervised)) == TrainMode::supervised);
  CHECK(parse_selection_loss(to_string(SelectionLoss::with_discriminator)) == SelectionLoss::with_discriminator);
  CHECK_THROWS_AS(parse_train_mode("cyclegan"), std::invalid_argument);
}

TEST_CASE("schedule visits every slice of each domain once per own epoch") {
  for (auto [labeled, unlabeled, batch] : {std::array<std::size_t, 3>{10, 7, 3}, {9, 20, 3}, {5, 5, 1}, {4, 13, 4}}) {
    EpochSchedule s(42, labeled, unlabeled, batch);
    const std::size_t per = s.iterations_per_epoch();
    CHECK(per == (labeled + batch - 1) / batch);
    std::vector<std::size_t> stream;
    for (std::size_t e = 0; e < 6; ++e) {
      std::multiset<std::size_t> seen;
      for (std::size_t k = 0; k < per; ++k) {
        const auto b = s.batch(e * per + k);
        CHECK(b.epoch == e);
        CHECK(b.unlabeled.size() == b.labeled.size());
        seen.insert(b.labeled.begin(), b.labeled.end());
        stream.insert(stream.end(), b.unlabeled.begin(), b.unlabeled.end());
      }
      CHECK(seen.size() == labeled);
      CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == labeled);
    }
    // The unlabeled stream is a concatenation of complete permutations.
    for (std::size_t start = 0; start + unlabeled <= stream.size(); start += unlabeled) {
      std::set<std::size_t> block(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                  stream.begin() + static_cast<std::ptrdiff_t>(start + unlabeled));
      CHECK(block.size() == unlabeled);
    }
    // Pure function of (seed, iteration).
    EpochSchedule again(42, labeled, unlabeled, batch);
    CHECK(again.batch(17).labeled == s.batch(17).labeled);
    CHECK(again.batch(17).unlabeled == s.batch(17).unlabeled);
  }
  EpochSchedule s(1, 10, 10, 3);
  CHECK(s.labeled_order(0) != s.labeled_order(1));
  CHECK_THROWS_AS(EpochSchedule(1, 0, 3, 3), std::invalid_argument);
}

TEST_CASE("slice sets withhold target masks") {
  const auto set = make_slice_set(subjects(DomainId::target_a, 2, 5), 16, false);
  CHECK(set.size() == 4);
  CHECK_FALSE(set.has_masks());
  CHECK(set.domain == DomainId::target_a);
  CHECK_THROWS_AS(stack_masks(set, {0}), std::invalid_argument);
  const auto x = stack_images<float>(set, {1, 3});
  CHECK(x.shape() == Shape{2, 1, 16, 16});
  for (float v : x.values()) CHECK((v >= -1.0f && v <= 1.0f));
}

TEST_CASE("leakage: target masks never reach the segmentation loss") {
  const TrainConfig c = tiny_config();
  TrainingData d = tiny_data(16);

  SUBCASE("target masks in the unlabeled sets are rejected") {
    TrainingData leaky = d;
    leaky.unlabeled_train = make_slice_set(subjects(DomainId::target_a, 2, 9), 16, true);
    CHECK_THROWS_AS(SusanTrainer<float>(c, leaky), LeakageError);
  }
  SUBCASE("labeled domain must be the reference") {
    TrainingData swapped = d;
    swapped.labeled_train = make_slice_set(subjects(DomainId::target_a, 2, 9), 16, true);
    CHECK_THROWS_AS(SusanTrainer<float>(c, swapped), std::invalid_argument);
  }
  SUBCASE("a target-provenance batch throws before any update") {
    SusanTrainer<float> t(c, d);
    const auto before = snapshot(t.generator_parameters());
    const auto x = stack_images<float>(d.labeled_train, {0, 1, 2});
    const auto y = stack_images<float>(d.unlabeled_train, {0, 1, 2});
    MaskBatch masks = stack_masks(d.labeled_train, {0, 1, 2});
    masks.provenance = DomainId::target_b;
    CHECK_THROWS_AS(t.generator_step(x, masks, y), LeakageError);
    CHECK(same(before, t.generator_parameters()));
    CHECK(t.audit().target_batches == 1);
  }
  SUBCASE("a clean run only records reference batches") {
    SusanTrainer<float> t(c, d);
    for (int i = 0; i < 3; ++i) t.step();
    CHECK(t.audit().mask_batches == 3);
    CHECK(t.audit().reference_batches == 3);
    CHECK(t.audit().clean());
  }
  SUBCASE("empty validation set is an error") {
    TrainingData empty = d;
    empty.labeled_validation = SliceSet{};
    CHECK_THROWS_AS(SusanTrainer<float>(c, empty), std::invalid_argument);
  }
}

TEST_CASE("generator step with all weights zero leaves parameters unchanged") {
  TrainConfig c = tiny_config();
  c.weights = LossWeights{0.0, 0.0, 0.0};
  const TrainingData d = tiny_data(16);
  SusanTrainer<double> t(c, d);
  const auto before = snapshot(t.generator_parameters());
  const auto x = stack_images<double>(d.labeled_train, {0, 1, 2});
  const auto y = stack_images<double>(d.unlabeled_train, {0, 1, 2});
  const auto r = t.generator_step(x, stack_masks(d.labeled_train, {0, 1, 2}), y);
  CHECK(r.loss.total == 0.0);
  CHECK(r.loss.cycle > 0.0);
  CHECK(same(before, t.generator_parameters()));
}

TEST_CASE("cycle-only training halves the cycle loss within 200 steps at 64x64, depth 2") {
  TrainConfig c;
  c.generator.depth = 2;
  c.weights = LossWeights{10.0, 0.0, 0.0};
  c.seed = 5;
  TrainingData d = tiny_data(64);
  SusanTrainer<float> t(c, d);
  const auto x = stack_images<float>(d.labeled_train, {0});
  const auto y = stack_images<float>(d.unlabeled_train, {0});
  const auto masks = stack_masks(d.labeled_train, {0});
  const double first = t.generator_step(x, masks, y).loss.cycle;
  double last = first;
  for (int i = 1; i < 200; ++i) last = t.generator_step(x, masks, y).loss.cycle;
  MESSAGE("cycle loss " << first << " -> " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("training steps are bitwise deterministic") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  SusanTrainer<float> a(c, d), b(c, d);
  for (int i = 0; i < 10; ++i) {
    const auto la = a.step();
    const auto lb = b.step();
    CHECK(la.total == lb.total);
  }
  CHECK(same_state(a.state_tensors(), b.state_tensors()));

  TrainConfig other = c;
  other.seed = 12;
  SusanTrainer<float> o(other, d);
  o.step();
  CHECK_FALSE(same_state(a.state_tensors(), o.state_tensors()));
}

TEST_CASE("discriminator at the 0.5 fixed point barely moves") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  SusanTrainer<double> t(c, d);
  for (auto* disc : {&t.disc_x(), &t.disc_y()}) {
    auto& out = disc->output_layer();
    out.weight.value.fill(0.0);
    out.bias.value.fill(0.0);
  }
  const auto before = snapshot(t.discriminator_parameters());
  const auto x = stack_images<double>(d.labeled_train, {0, 1, 2});
  const auto y = stack_images<double>(d.unlabeled_train, {0, 1, 2});
  // Fakes identical to the reals of each discriminator.
  const auto r = t.discriminator_step(x, y, y, x);
  CHECK(r.objective_x == doctest::Approx(-2.0 * std::log(2.0)).epsilon(1e-12));
  double change = 0.0;
  const auto params = t.discriminator_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < before[i].size(); ++k) {
      change = std::max(change, std::fabs(params[i]->value[k] - before[i][k]));
    }
  }
  CHECK(change < 1e-3 * c.adam.learning_rate);
}

TEST_CASE("discriminator-only steps raise the objective and never touch the generators") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  SusanTrainer<float> t(c, d);
  const auto x = stack_images<float>(d.labeled_train, {0, 1, 2});
  const auto y = stack_images<float>(d.unlabeled_train, {0, 1, 2});
  const auto fx = translate(t.forward_net(), x);
  const auto by = translate(t.backward_net(), y);
  const auto gen_before = snapshot(t.generator_parameters());
  std::vector<double> objective;
  for (int i = 0; i < 101; ++i) {
    const auto r = t.discriminator_step(x, y, fx, by);
    objective.push_back(r.objective_x + r.objective_y);
  }
  int increases = 0;
  for (std::size_t i = 1; i < objective.size(); ++i) increases += objective[i] > objective[i - 1] ? 1 : 0;
  MESSAGE("objective " << objective.front() << " -> " << objective.back() << ", increases " << increases);
  CHECK(increases >= 90);
  CHECK(same(gen_before, t.generator_parameters()));
}

TEST_CASE("supervised trainer reports only the segmentation term") {
  TrainConfig c = tiny_config();
  c.mode = TrainMode::supervised;
  TrainingData d;
  d.labeled_train = make_slice_set(subjects(DomainId::target_a, 3, 21), 16, true);
  d.labeled_validation = make_slice_set(subjects(DomainId::target_a, 1, 22), 16, true);
  SupervisedTrainer<float> a(c, d), b(c, d);
  CHECK_FALSE(a.net().config().translation_head);
  for (int i = 0; i < 4; ++i) {
    const auto r = a.step();
    CHECK(r.cycle == 0.0);
    CHECK(r.gan_forward == 0.0);
    CHECK(r.gan_backward == 0.0);
    CHECK(r.total == r.seg);
    CHECK(r.seg > 0.0);
    CHECK(b.step().seg == r.seg);
  }
  const auto v = a.validate();
  CHECK(v.loss.total == v.loss.seg);
  CHECK(v.selection == v.loss.seg);
  CHECK_THROWS_AS(translate(a.net(), stack_images<float>(d.labeled_train, {0})), std::invalid_argument);
  CHECK_THROWS_AS(SusanTrainer<float>(c, d), std::invalid_argument);
}

TEST_CASE("training loop: history, validation and selection") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  std::size_t callbacks = 0;
  TrainOptions o;
  o.on_iteration = [&](const IterationRecord&) { ++callbacks; };
  const TrainResult r = train<float>(c, d, o);
  const std::size_t per = (d.labeled_train.size() + 2) / 3;
  CHECK(r.completed);
  CHECK_FALSE(r.diverged);
  CHECK(r.iterations == per * c.epochs);
  REQUIRE(r.history.size() == per * c.epochs);
  CHECK(callbacks == r.history.size());
  for (std::size_t i = 0; i < r.history.size(); ++i) CHECK(r.history[i].iteration == i + 1);
  REQUIRE(r.validations.size() == c.epochs + 1);
  CHECK(r.validations.front().epoch == 0);
  CHECK(r.validations.back().epoch == c.epochs);
  double lowest = r.validations.front().selection;
  for (const auto& v : r.validations) lowest = std::min(lowest, v.selection);
  CHECK(r.best.selection == lowest);
  CHECK(r.best.selection <= r.initial.selection);
  CHECK(r.audit.clean());
  CHECK(r.audit.mask_batches == r.history.size());

  std::stringstream h;
  write_history_csv(h, r.history);
  const auto back = read_history_csv(h);
  REQUIRE(back.size() == r.history.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].loss.total == r.history[i].loss.total);
    CHECK(back[i].wall_seconds == r.history[i].wall_seconds);
  }
  std::stringstream v;
  write_validation_csv(v, r.validations);
  const auto vb = read_validation_csv(v);
  REQUIRE(vb.size() == r.validations.size());
  CHECK(vb.back().selection == r.validations.back().selection);
  CHECK(vb.back().discriminator_y == r.validations.back().discriminator_y);
}

TEST_CASE("selection with discriminator terms subtracts both objectives") {
  TrainConfig c = tiny_config();
  c.selection = SelectionLoss::with_discriminator;
  const TrainingData d = tiny_data(16);
  SusanTrainer<float> t(c, d);
  const auto v = t.validate();
  CHECK(v.selection == doctest::Approx(v.loss.total - v.discriminator_x - v.discriminator_y).epsilon(1e-12));
  CHECK(v.discriminator_x < 0.0);
}

TEST_CASE("resume reproduces the uninterrupted run bitwise") {
  TrainConfig c = tiny_config();
  c.epochs = 3;
  const TrainingData d = tiny_data(16);
  TempDir full("full"), split("split");

  TrainOptions o;
  o.checkpoint_dir = full.path;
  const TrainResult ref = train<float>(c, d, o);

  TrainOptions first;
  first.checkpoint_dir = split.path;
  first.stop_after = 3;  // mid-epoch
  const TrainResult part = train<float>(c, d, first);
  CHECK_FALSE(part.completed);
  CHECK(part.iterations == 3);
  CHECK(fs::exists(split.path / "last.susn"));

  TrainOptions second;
  second.checkpoint_dir = split.path;
  second.resume = true;
  const TrainResult rest = train<float>(c, d, second);
  CHECK(rest.completed);
  REQUIRE(rest.history.size() == ref.history.size());
  for (std::size_t i = 0; i < ref.history.size(); ++i) {
    CHECK(rest.history[i].iteration == ref.history[i].iteration);
    CHECK(rest.history[i].loss.total == ref.history[i].loss.total);
    CHECK(rest.history[i].loss.cycle == ref.history[i].loss.cycle);
  }
  REQUIRE(rest.validations.size() == ref.validations.size());
  CHECK(rest.best.iteration == ref.best.iteration);
  CHECK(same_state(rest.best_state, ref.best_state));

  const auto [tensors, info] = read_checkpoint(full.path, "last");
  CHECK(info.config_hash == c.hash());
  CHECK(info.iteration == ref.iterations);
  CHECK(info.generator_steps == ref.iterations);
  CHECK(info.discriminator_steps == ref.iterations);
  CHECK(CheckpointInfo::decode(info.encode()).encode() == info.encode());

  TrainConfig changed = c;
  changed.weights.seg = 1.0;
  TrainOptions mismatch;
  mismatch.checkpoint_dir = full.path;
  mismatch.resume = true;
  CHECK_THROWS_AS(train<float>(changed, d, mismatch), std::invalid_argument);
}

TEST_CASE("checkpoint round trip gives identical forward outputs") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  TempDir dir("roundtrip");
  SusanTrainer<float> t(c, d);
  for (int i = 0; i < 2; ++i) t.step();
  write_checkpoint(dir.path, "probe", t.state_tensors(), CheckpointInfo{c.hash(), "susan", 2});
  const auto [tensors, info] = read_checkpoint(dir.path, "probe");
  CHECK(info.iteration == 2);

  RNet<float> f(c.generator, "F", 999), b(c.generator, "B", 999);
  PatchDiscriminator<float> dy(c.discriminator, "DY", 999);
  load_network(f, tensors);
  load_network(b, tensors);
  load_network(dy, tensors);
  const auto probe = stack_images<float>(d.labeled_validation, {0, 1});
  Tensor4<float> ta, tb, pa, pb;
  t.forward_net().forward(probe, Mode::eval, &ta, &pa);
  f.forward(probe, Mode::eval, &tb, &pb);
  CHECK(ta == tb);
  CHECK(pa == pb);
  CHECK(t.disc_y().forward(probe, Mode::eval) == dy.forward(probe, Mode::eval));

  SusanTrainer<float> restored(c, d);
  restored.load_state(tensors, 2, t.generator_adam_steps(), t.discriminator_adam_steps());
  CHECK(restored.step().total == t.step().total);

  auto broken = tensors;
  broken.pop_back();
  SusanTrainer<float> fresh(c, d);
  CHECK_THROWS_AS(fresh.load_state(broken, 2, 2, 2), FormatError);
}

TEST_CASE("segmentation inference is the per-pixel argmax and ignores monotone transforms") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  SusanTrainer<float> t(c, d);
  for (int i = 0; i < 3; ++i) t.step();
  const auto y = stack_images<float>(d.unlabeled_validation, iota(d.unlabeled_validation.size()));
  const auto masks = segment_target(t.backward_net(), y);
  REQUIRE(masks.size() == y.shape().n);

  Tensor4<float> probs;
  t.backward_net().forward(y, Mode::eval, nullptr, &probs);
  const auto direct = argmax_labels(probs);
  Tensor4<float> warped = probs;
  for (auto& p : warped.values()) p = std::log(p) * 3.0f + std::pow(p, 3.0f);
  const auto transformed = argmax_labels(warped);
  const std::size_t plane = y.shape().plane();
  for (std::size_t n = 0; n < masks.size(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      CHECK(masks[n].labels[i] < kNumClasses);
      CHECK(masks[n].labels[i] == direct[n * plane + i]);
      CHECK(masks[n].labels[i] == transformed[n * plane + i]);
    }
  }
  const auto x = stack_images<float>(d.labeled_validation, {0});
  const auto ref = segment_reference(t.forward_net(), x);
  Tensor4<float> fp;
  t.forward_net().forward(x, Mode::eval, nullptr, &fp);
  CHECK(ref.front().labels == argmax_labels(fp));

  CHECK_THROWS_AS(segment_target(t.backward_net(), Tensor4<float>(Shape{1, 1, 32, 32})), ShapeError);
  CHECK_THROWS_AS(segment_target(t.backward_net(), Tensor4<float>(Shape{1, 2, 16, 16})), ShapeError);
}

TEST_CASE("cycle error of identical nets is zero only for exact inverses") {
  const TrainConfig c = tiny_config();
  const TrainingData d = tiny_data(16);
  SusanTrainer<float> t(c, d);
  const auto y = stack_images<float>(d.unlabeled_validation, {0, 1});
  const double e = cycle_error(t.backward_net(), t.forward_net(), y);
  CHECK(std::isfinite(e));
  CHECK(e > 0.0);
  CHECK(e == cycle_error(t.backward_net(), t.forward_net(), y));
}
