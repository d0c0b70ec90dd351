#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "susan/phantom.hpp"
#include "susan/rng.hpp"

using namespace susan;

namespace {

std::array<std::size_t, kNumClasses> histogram(const LabelMask& m) {
  std::array<std::size_t, kNumClasses> h{};
  for (auto l : m.labels) ++h.at(l);
  return h;
}

// Exhaustive scan: squared distance from (y,x) to the nearest pixel labelled `label`.
long nearest_sq(const LabelMask& m, std::size_t y, std::size_t x, std::uint8_t label) {
  long best = -1;
  for (std::size_t yy = 0; yy < m.height; ++yy)
    for (std::size_t xx = 0; xx < m.width; ++xx) {
      if (m.at(yy, xx) != label) continue;
      const long dy = static_cast<long>(yy) - static_cast<long>(y);
      const long dx = static_cast<long>(xx) - static_cast<long>(x);
      const long d = dy * dy + dx * dx;
      if (best < 0 || d < best) best = d;
    }
  return best;
}

DomainStyle flat_style(DomainId id) {
  DomainStyle s = DomainStyle::preset(id);
  s.bias_amplitude = 0.0;
  s.noise_sigma = 0.0;
  return s;
}

}  // namespace

TEST_CASE("anatomy generation is deterministic and seed dependent") {
  const auto a = generate_anatomy(7, 72, 0.5);
  CHECK(a.mask == generate_anatomy(7, 72, 0.5).mask);
  CHECK(!(a.mask == generate_anatomy(8, 72, 0.5).mask));
  CHECK(a.spacing == 0.5);
  CHECK(a.seed == 7);
}

TEST_CASE("anatomy rejects frames that are too small") {
  CHECK_THROWS_AS(generate_anatomy(1, 31, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(generate_anatomy(1, 64, 0.0), std::invalid_argument);
  AnatomyGeometry g = sample_geometry(1, 64);
  g.femur_a *= 3.0;
  CHECK_THROWS_AS(rasterize(g, 64), std::invalid_argument);
}

TEST_CASE("label histogram: thin cartilage, background majority, all classes present") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (std::size_t size : {64u, 72u}) {
      const auto h = histogram(generate_anatomy(seed, size, 1.0).mask);
      CAPTURE(seed);
      CHECK(static_cast<double>(h[2] + h[4]) < 0.2 * static_cast<double>(h[1] + h[3]));
      CHECK(2 * h[0] > size * size);
      for (std::size_t c = 1; c < kNumClasses; ++c) CHECK(h[c] > 0);
    }
  }
}

TEST_CASE("cartilage lies within 2 pixels of its bone") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = generate_anatomy(seed, 64, 1.0).mask;
    bool ok = true;
    for (std::size_t y = 0; y < m.height; ++y)
      for (std::size_t x = 0; x < m.width; ++x) {
        const auto l = m.at(y, x);
        CHECK(l < kNumClasses);
        if (l == kFemoralCartilage) ok = ok && nearest_sq(m, y, x, kFemur) <= 4;
        if (l == kTibialCartilage) ok = ok && nearest_sq(m, y, x, kTibia) <= 4;
      }
    CAPTURE(seed);
    CHECK(ok);
  }
}

TEST_CASE("slices of a subject vary smoothly and stay valid") {
  const auto g = sample_geometry(3, 72);
  LabelMask prev = rasterize(g.slice(0, 8), 72);
  for (std::size_t s = 1; s < 8; ++s) {
    const LabelMask cur = rasterize(g.slice(s, 8), 72);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < cur.labels.size(); ++i) changed += cur.labels[i] != prev.labels[i];
    CHECK(changed > 0);
    CHECK(changed < cur.labels.size() / 10);
    prev = cur;
  }
  CHECK_THROWS((void)g.slice(8, 8));
}

TEST_CASE("noise-free rendering is the class mean lookup") {
  const auto m = generate_anatomy(11, 64, 1.0).mask;
  const DomainStyle style = flat_style(DomainId::reference);
  const Image img = render_image(m, style, 99);
  for (std::size_t i = 0; i < m.labels.size(); ++i) CHECK(img.pixels[i] == style.class_means[m.labels[i]]);
}

TEST_CASE("rendering is label-faithful: intensity determines the label without noise") {
  for (DomainId id : {DomainId::reference, DomainId::target_a, DomainId::target_b}) {
    const auto m = generate_anatomy(5, 64, 1.0).mask;
    const Image img = render_image(m, flat_style(id), 1);
    // Mutual information equals the label entropy exactly when the map intensity -> label
    // is a function.
    std::map<double, std::map<int, double>> joint;
    std::map<int, double> pl;
    const double n = static_cast<double>(m.labels.size());
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      joint[img.pixels[i]][m.labels[i]] += 1.0 / n;
      pl[m.labels[i]] += 1.0 / n;
    }
    double h_label = 0.0;
    for (auto [l, p] : pl) h_label -= p * std::log(p);
    double mi = 0.0;
    for (auto& [v, row] : joint) {
      double pv = 0.0;
      for (auto [l, p] : row) pv += p;
      for (auto [l, p] : row) mi += p * std::log(p / (pv * pl[l]));
    }
    CHECK(mi == doctest::Approx(h_label).epsilon(1e-12));
  }
}

TEST_CASE("reference and target styles order the classes differently") {
  const auto m = generate_anatomy(2, 64, 1.0).mask;
  auto class_means = [&](DomainId id) {
    const Image img = render_image(m, DomainStyle::preset(id), 17);
    std::array<double, kNumClasses> sum{};
    std::array<double, kNumClasses> cnt{};
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      sum[m.labels[i]] += img.pixels[i];
      cnt[m.labels[i]] += 1.0;
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) sum[c] /= cnt[c];
    return sum;
  };
  const auto ref = class_means(DomainId::reference);
  const auto tga = class_means(DomainId::target_a);
  CHECK(std::max_element(ref.begin(), ref.end()) - ref.begin() == kFemoralCartilage);
  CHECK(std::min_element(tga.begin(), tga.end()) - tga.begin() == kTibialCartilage);
  CHECK(tga[kFemoralCartilage] < tga[kBackground]);
  CHECK(ref[kFemoralCartilage] > ref[kBackground]);
}

TEST_CASE("Monte Carlo class-conditional means match the style table within 2%") {
  const auto m = generate_anatomy(4, 64, 1.0).mask;
  for (DomainId id : {DomainId::reference, DomainId::target_a, DomainId::target_b}) {
    const DomainStyle style = DomainStyle::preset(id);
    std::array<double, kNumClasses> sum{};
    std::array<double, kNumClasses> cnt{};
    for (std::uint64_t r = 0; r < 1000; ++r) {
      const Image img = render_image(m, style, derive_seed(123, "mc", r));
      for (std::size_t i = 0; i < m.labels.size(); ++i) {
        sum[m.labels[i]] += img.pixels[i];
        cnt[m.labels[i]] += 1.0;
      }
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      CAPTURE(c);
      CHECK(std::abs(sum[c] / cnt[c] - style.class_means[c]) <= 0.02 * style.class_means[c]);
    }
  }
}

TEST_CASE("style validation") {
  DomainStyle s = DomainStyle::preset(DomainId::reference);
  CHECK_NOTHROW(s.validate());
  s.class_means[3] = s.class_means[1];
  CHECK_THROWS(s.validate());
  s = DomainStyle::preset(DomainId::target_b);
  s.noise_sigma = -0.1;
  CHECK_THROWS(s.validate());
  CHECK(parse_domain(to_string(DomainId::target_a)) == DomainId::target_a);
  CHECK_THROWS(parse_domain("target_c"));
}

TEST_CASE("z-normalization gives zero mean and unit deviation") {
  const Subject s = generate_subject("ref-000", DomainStyle::preset(DomainId::reference), 9, 4, 72, 0.5);
  for (const Image& raw : s.slices) {
    const Image p = preprocess(raw, 64);
    CHECK(p.height == 64);
    double mean = 0.0;
    for (double v : p.pixels) mean += v;
    mean /= static_cast<double>(p.pixels.size());
    double var = 0.0;
    for (double v : p.pixels) var += (v - mean) * (v - mean);
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(std::sqrt(var / static_cast<double>(p.pixels.size())) - 1.0) <= 1e-5);
  }
}

TEST_CASE("bilinear resampling of constants and ramps") {
  Image c(20, 20, 3.25);
  for (double v : resample_bilinear(c, 7, 13).pixels) CHECK(v == doctest::Approx(3.25).epsilon(1e-15));

  // f(y, x) = 0.7 x - 0.3 y + 2; an exact 2x downscale averages each 2x2 block, which for a
  // linear ramp is the ramp evaluated at the block centre (2x + 0.5, 2y + 0.5).
  Image ramp(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) ramp.at(y, x) = 0.7 * static_cast<double>(x) - 0.3 * static_cast<double>(y) + 2.0;
  const Image half = resample_bilinear(ramp, 8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const double block = (ramp.at(2 * y, 2 * x) + ramp.at(2 * y, 2 * x + 1) + ramp.at(2 * y + 1, 2 * x) +
                            ramp.at(2 * y + 1, 2 * x + 1)) / 4.0;
      CHECK(std::abs(half.at(y, x) - block) <= 1e-6);
      CHECK(std::abs(half.at(y, x) - (0.7 * (2.0 * x + 0.5) - 0.3 * (2.0 * y + 0.5) + 2.0)) <= 1e-6);
    }
}

TEST_CASE("preprocessing errors and idempotence") {
  const Image flat(72, 72, 0.4);
  try {
    (void)preprocess(flat, 64, kDefaultKeepFraction, "ref-003/slice-5");
    FAIL("expected PreprocessError");
  } catch (const PreprocessError& e) {
    CHECK(std::string(e.what()).find("ref-003/slice-5") != std::string::npos);
  }
  Image bad(72, 72, 0.1);
  bad.at(1, 1) = std::nan("");
  CHECK_THROWS_AS(preprocess(bad, 64), PreprocessError);
  CHECK_THROWS(preprocess(Image(32, 32, 1.0), 64));

  const Subject s = generate_subject("tgt-001", DomainStyle::preset(DomainId::target_a), 21, 3, 72, 0.5);
  for (const Image& raw : s.slices) {
    const Image once = preprocess(raw, 64);
    const Image twice = preprocess(once, 64);
    double worst = 0.0;
    for (std::size_t i = 0; i < once.pixels.size(); ++i) worst = std::max(worst, std::abs(once.pixels[i] - twice.pixels[i]));
    CHECK(worst <= 1e-5);
  }
  CHECK(crop_side(72, 64, kDefaultKeepFraction) == 64);
  CHECK(crop_side(64, 64, kDefaultKeepFraction) == 64);
}

TEST_CASE("mask preprocessing crops the same window as images") {
  const Subject s = generate_subject("ref-002", flat_style(DomainId::reference), 5, 1, 72, 0.5);
  const LabelMask m = preprocess_mask(s.masks[0], 64);
  // With an exact-size crop the resample is the identity, so the preprocessed image is an
  // affine function of the cropped label lookup.
  const Image img = resample_bilinear(center_crop(s.slices[0], 64), 64, 64);
  const DomainStyle style = flat_style(DomainId::reference);
  for (std::size_t i = 0; i < m.labels.size(); ++i) CHECK(img.pixels[i] == style.class_means[m.labels[i]]);
}

TEST_CASE("subjects carry matching slices and masks") {
  const Subject s = generate_subject("ref-010", DomainStyle::preset(DomainId::reference), 77, 8, 72, 0.5);
  CHECK(s.slices.size() == 8);
  CHECK(s.masks.size() == 8);
  CHECK_NOTHROW(s.validate());
  const Subject again = generate_subject("ref-010", DomainStyle::preset(DomainId::reference), 77, 8, 72, 0.5);
  CHECK(again.slices[5].pixels == s.slices[5].pixels);
  Subject broken = s;
  broken.masks.pop_back();
  CHECK_THROWS(broken.validate());
  CHECK_THROWS(generate_subject("x", DomainStyle::preset(DomainId::reference), 1, 0, 72, 0.5));
}

TEST_CASE("split arithmetic: floor each ratio, remainder to training") {
  const auto r12 = reference_split_counts(12);
  CHECK(r12.train == 10);
  CHECK(r12.validation == 2);
  const auto r50 = reference_split_counts(50);
  CHECK(r50.train == 42);
  CHECK(r50.validation == 8);
  const auto t50 = target_split_counts(50);
  CHECK(t50.train == 30);
  CHECK(t50.validation == 4);
  CHECK(t50.test == 16);
  const auto t60 = target_split_counts(60);
  CHECK(t60.train == 35);
  CHECK(t60.validation == 5);
  CHECK(t60.test == 20);
  CHECK_THROWS(reference_split_counts(5));
  CHECK_THROWS(target_split_counts(11));
}

TEST_CASE("splits are disjoint, complete and deterministic") {
  const DatasetSplit a = build_splits(50, 50, 42);
  const DatasetSplit b = build_splits(50, 50, 42);
  const DatasetSplit c = build_splits(50, 50, 43);
  CHECK(a.reference_train == b.reference_train);
  CHECK(a.target_test == b.target_test);
  CHECK(a.target_test != c.target_test);
  std::set<std::string> all;
  std::size_t total = 0;
  for (const auto* list : {&a.reference_train, &a.reference_validation, &a.target_train, &a.target_validation,
                           &a.target_test}) {
    all.insert(list->begin(), list->end());
    total += list->size();
  }
  CHECK(all.size() == total);
  CHECK(total == 100);
  CHECK(a.reference_train.size() == 42);
  CHECK(a.target_test.size() == 16);
  CHECK(subject_id("ref", 7) == "ref-007");
}
