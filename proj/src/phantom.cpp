#include "susan/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "susan/rng.hpp"

namespace susan {
namespace {

struct Frame {
  double cos_a;
  double sin_a;
  double cx;
  double cy;
  // Coordinates in the bone frame: u along the joint line, v along the bone axis (down).
  void local(double x, double y, double& u, double& v) const {
    const double dx = x - cx;
    const double dy = y - cy;
    u = cos_a * dx + sin_a * dy;
    v = -sin_a * dx + cos_a * dy;
  }
};

bool inside_ellipse(double u, double v, double vc, double a, double b) {
  const double du = u / a;
  const double dv = (v - vc) / b;
  return du * du + dv * dv <= 1.0;
}

// Bounding half-extents of an axis-aligned ellipse rotated by the frame angle.
void rotated_extent(double a, double b, double c, double s, double& hx, double& hy) {
  hx = std::sqrt(a * a * c * c + b * b * s * s);
  hy = std::sqrt(a * a * s * s + b * b * c * c);
}

}  // namespace

AnatomyGeometry AnatomyGeometry::slice(std::size_t index, std::size_t count) const {
  if (count == 0 || index >= count) throw std::invalid_argument("slice index out of range");
  const double t = count > 1 ? 2.0 * static_cast<double>(index) / static_cast<double>(count - 1) - 1.0 : 0.0;
  const double w = std::sqrt(1.0 - 0.3 * t * t);
  AnatomyGeometry g = *this;
  g.femur_a *= w;
  g.tibia_a *= w;
  g.femur_b *= 0.92 + 0.08 * w;
  g.tibia_b *= 0.92 + 0.08 * w;
  g.center_x += 0.5 * slice_drift * t;
  return g;
}

AnatomyGeometry sample_geometry(std::uint64_t seed, std::size_t size) {
  if (size < kMinAnatomySize) {
    throw std::invalid_argument("anatomy size " + std::to_string(size) + " is below the minimum " +
                                std::to_string(kMinAnatomySize));
  }
  Rng rng(seed);
  const double s = static_cast<double>(size);
  AnatomyGeometry g;
  g.center_x = (s - 1.0) / 2.0 + rng.uniform(-0.03, 0.03) * s;
  g.center_y = (s - 1.0) / 2.0 + rng.uniform(-0.03, 0.03) * s;
  g.angle = rng.uniform(-0.1, 0.1);
  g.gap = std::max(6.0, rng.uniform(0.09, 0.12) * s);
  g.femur_a = rng.uniform(0.27, 0.31) * s;
  g.femur_b = rng.uniform(0.14, 0.17) * s;
  g.tibia_a = rng.uniform(0.26, 0.30) * s;
  g.tibia_b = rng.uniform(0.13, 0.16) * s;
  g.femoral_thickness = rng.uniform(1.5, 2.0);
  g.tibial_thickness = rng.uniform(1.5, 2.0);
  g.slice_drift = rng.uniform(-0.04, 0.04) * s;
  return g;
}

LabelMask rasterize(const AnatomyGeometry& g, std::size_t size) {
  if (size < kMinAnatomySize) {
    throw std::invalid_argument("anatomy size " + std::to_string(size) + " is below the minimum " +
                                std::to_string(kMinAnatomySize));
  }
  const Frame frame{std::cos(g.angle), std::sin(g.angle), g.center_x, g.center_y};
  const double femur_v = -(g.gap / 2.0 + g.femur_b);
  const double tibia_v = g.gap / 2.0 + g.tibia_b;

  // Both bones plus their cartilage must lie inside the frame.
  const double limit = static_cast<double>(size - 1);
  for (auto [a, b, vc, t] : {std::array{g.femur_a, g.femur_b, femur_v, g.femoral_thickness},
                             std::array{g.tibia_a, g.tibia_b, tibia_v, g.tibial_thickness}}) {
    double hx = 0;
    double hy = 0;
    rotated_extent(a, b, frame.cos_a, frame.sin_a, hx, hy);
    const double ex = g.center_x - frame.sin_a * vc;
    const double ey = g.center_y + frame.cos_a * vc;
    if (ex - hx - t < 0.0 || ey - hy - t < 0.0 || ex + hx + t > limit || ey + hy + t > limit) {
      throw std::invalid_argument("anatomy does not fit a " + std::to_string(size) + "x" + std::to_string(size) +
                                  " frame");
    }
  }
  if (g.gap < 2.0 * std::max(g.femoral_thickness, g.tibial_thickness) + 1.0) {
    throw std::invalid_argument("joint gap too narrow for the cartilage bands");
  }

  LabelMask mask(size, size);
  std::vector<double> us(size * size);
  std::vector<double> vs(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double u = 0;
      double v = 0;
      frame.local(static_cast<double>(x), static_cast<double>(y), u, v);
      us[y * size + x] = u;
      vs[y * size + x] = v;
      if (inside_ellipse(u, v, femur_v, g.femur_a, g.femur_b)) {
        mask.at(y, x) = kFemur;
      } else if (inside_ellipse(u, v, tibia_v, g.tibia_a, g.tibia_b)) {
        mask.at(y, x) = kTibia;
      }
    }
  }

  // Cartilage: non-bone pixels within the band thickness of a bone pixel, on the side of the
  // bone that faces the joint.
  const int reach = 3;
  const auto n = static_cast<int>(size);
  LabelMask out = mask;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (mask.at(y, x) != kBackground) continue;
      double d_femur = 1e9;
      double d_tibia = 1e9;
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= n || xx >= n) continue;
          const double d = std::sqrt(static_cast<double>(dx * dx + dy * dy));
          if (mask.at(yy, xx) == kFemur) d_femur = std::min(d_femur, d);
          if (mask.at(yy, xx) == kTibia) d_tibia = std::min(d_tibia, d);
        }
      }
      const double u = us[y * size + x];
      const double v = vs[y * size + x];
      const bool femoral = d_femur <= g.femoral_thickness && v > femur_v && std::abs(u) <= 0.85 * g.femur_a;
      const bool tibial = d_tibia <= g.tibial_thickness && v < tibia_v && std::abs(u) <= 0.85 * g.tibia_a;
      if (femoral && (!tibial || d_femur <= d_tibia)) {
        out.at(y, x) = kFemoralCartilage;
      } else if (tibial) {
        out.at(y, x) = kTibialCartilage;
      }
    }
  }
  return out;
}

AnatomyMap generate_anatomy(std::uint64_t seed, std::size_t size, double spacing) {
  if (!(spacing > 0.0)) throw std::invalid_argument("pixel spacing must be positive");
  return AnatomyMap{rasterize(sample_geometry(seed, size), size), spacing, seed};
}

std::string to_string(DomainId id) {
  switch (id) {
    case DomainId::reference: return "reference";
    case DomainId::target_a: return "target_a";
    case DomainId::target_b: return "target_b";
  }
  return "unknown";
}

DomainId parse_domain(const std::string& s) {
  if (s == "reference") return DomainId::reference;
  if (s == "target_a") return DomainId::target_a;
  if (s == "target_b") return DomainId::target_b;
  throw std::invalid_argument("unknown domain '" + s + "' (expected reference, target_a or target_b)");
}

DomainStyle DomainStyle::preset(DomainId id) {
  DomainStyle s;
  s.id = id;
  s.bias_amplitude = 0.1;
  s.noise_sigma = 0.03;
  switch (id) {
    // bright cartilage, dark fat-suppressed bone marrow
    case DomainId::reference: s.class_means = {0.45, 0.20, 0.90, 0.30, 0.75}; break;
    // bright marrow fat, dark cartilage
    case DomainId::target_a: s.class_means = {0.30, 0.85, 0.15, 0.70, 0.05}; break;
    // everything dark except the fluid-filled background
    case DomainId::target_b: s.class_means = {0.55, 0.10, 0.30, 0.20, 0.40}; break;
  }
  return s;
}

void DomainStyle::validate() const {
  if (noise_sigma < 0.0 || !std::isfinite(noise_sigma)) throw std::invalid_argument("style noise sigma must be >= 0");
  if (bias_amplitude < 0.0 || bias_amplitude >= 1.0) throw std::invalid_argument("style bias amplitude must be in [0,1)");
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (!std::isfinite(class_means[i])) throw std::invalid_argument("style class means must be finite");
    for (std::size_t j = i + 1; j < kNumClasses; ++j) {
      if (class_means[i] == class_means[j]) {
        throw std::invalid_argument("style " + to_string(id) + ": classes " + std::to_string(i) + " and " +
                                    std::to_string(j) + " share a mean intensity");
      }
    }
  }
}

Image render_image(const LabelMask& anatomy, const DomainStyle& style, std::uint64_t seed) {
  style.validate();
  if (anatomy.labels.size() != anatomy.height * anatomy.width) throw std::invalid_argument("malformed label map");
  Rng rng(seed);
  // Bilinear-in-space bias field, zero-mean over seeds, bounded by the amplitude.
  double c1 = rng.uniform(-1.0, 1.0);
  double c2 = rng.uniform(-1.0, 1.0);
  double c3 = rng.uniform(-1.0, 1.0);
  const double norm = std::abs(c1) + std::abs(c2) + std::abs(c3);
  if (norm > 1.0) {
    c1 /= norm;
    c2 /= norm;
    c3 /= norm;
  }
  Image img(anatomy.height, anatomy.width);
  const double sy = anatomy.height > 1 ? 2.0 / static_cast<double>(anatomy.height - 1) : 0.0;
  const double sx = anatomy.width > 1 ? 2.0 / static_cast<double>(anatomy.width - 1) : 0.0;
  for (std::size_t y = 0; y < anatomy.height; ++y) {
    for (std::size_t x = 0; x < anatomy.width; ++x) {
      const std::uint8_t label = anatomy.at(y, x);
      if (label >= kNumClasses) throw std::invalid_argument("label " + std::to_string(label) + " out of range");
      const double u = static_cast<double>(x) * sx - 1.0;
      const double v = static_cast<double>(y) * sy - 1.0;
      const double field = style.bias_amplitude * (c1 * u + c2 * v + c3 * u * v);
      double value = style.class_means[label] * (1.0 + field);
      if (style.noise_sigma > 0.0) value += rng.normal(0.0, style.noise_sigma);
      img.at(y, x) = value;
    }
  }
  return img;
}

Image resample_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || image.height == 0 || image.width == 0) {
    throw std::invalid_argument("resample: empty image or target");
  }
  Image out(height, width);
  const double scale_y = static_cast<double>(image.height) / static_cast<double>(height);
  const double scale_x = static_cast<double>(image.width) / static_cast<double>(width);
  const double max_y = static_cast<double>(image.height - 1);
  const double max_x = static_cast<double>(image.width - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * scale_y - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * scale_x - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = image.at(y0, x0) * (1.0 - wx) + image.at(y0, x1) * wx;
      const double bottom = image.at(y1, x0) * (1.0 - wx) + image.at(y1, x1) * wx;
      out.at(y, x) = top * (1.0 - wy) + bottom * wy;
    }
  }
  return out;
}

LabelMask resample_nearest(const LabelMask& mask, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || mask.height == 0 || mask.width == 0) {
    throw std::invalid_argument("resample: empty mask or target");
  }
  LabelMask out(height, width);
  const double scale_y = static_cast<double>(mask.height) / static_cast<double>(height);
  const double scale_x = static_cast<double>(mask.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = std::min(static_cast<std::size_t>((static_cast<double>(y) + 0.5) * scale_y), mask.height - 1);
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = std::min(static_cast<std::size_t>((static_cast<double>(x) + 0.5) * scale_x), mask.width - 1);
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

std::size_t crop_side(std::size_t source, std::size_t target, double keep_fraction) {
  if (target == 0 || target > source) {
    throw std::invalid_argument("target size " + std::to_string(target) + " exceeds source size " +
                                std::to_string(source));
  }
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("keep fraction must be in (0,1]");
  const auto kept = static_cast<std::size_t>(std::lround(static_cast<double>(source) * keep_fraction));
  return std::min(source, std::max(target, kept));
}

Image center_crop(const Image& image, std::size_t side) {
  if (image.height != image.width) throw std::invalid_argument("center crop expects a square image");
  if (side > image.height) throw std::invalid_argument("crop larger than image");
  const std::size_t off = (image.height - side) / 2;
  Image out(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) out.at(y, x) = image.at(y + off, x + off);
  return out;
}

LabelMask center_crop(const LabelMask& mask, std::size_t side) {
  if (mask.height != mask.width) throw std::invalid_argument("center crop expects a square mask");
  if (side > mask.height) throw std::invalid_argument("crop larger than mask");
  const std::size_t off = (mask.height - side) / 2;
  LabelMask out(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) out.at(y, x) = mask.at(y + off, x + off);
  return out;
}

Image preprocess(const Image& image, std::size_t target, double keep_fraction, const std::string& context) {
  const std::string where = context.empty() ? std::string("image") : context;
  for (double v : image.pixels) {
    if (!std::isfinite(v)) throw PreprocessError(where + ": non-finite pixel");
  }
  Image out = resample_bilinear(center_crop(image, crop_side(image.height, target, keep_fraction)), target, target);
  double mean = 0.0;
  for (double v : out.pixels) mean += v;
  mean /= static_cast<double>(out.pixels.size());
  double var = 0.0;
  for (double v : out.pixels) var += (v - mean) * (v - mean);
  var /= static_cast<double>(out.pixels.size());
  const double sd = std::sqrt(var);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw PreprocessError(where + ": constant image cannot be normalized");
  }
  for (double& v : out.pixels) v = (v - mean) / sd;
  return out;
}

Image to_network_range(const Image& z) {
  Image out = z;
  for (double& v : out.pixels) v = std::clamp(v / kNetworkScale, -1.0, 1.0);
  return out;
}

LabelMask preprocess_mask(const LabelMask& mask, std::size_t target, double keep_fraction) {
  return resample_nearest(center_crop(mask, crop_side(mask.height, target, keep_fraction)), target, target);
}

void Subject::validate() const {
  if (slices.empty()) throw std::invalid_argument("subject " + id + " has no slices");
  if (!masks.empty() && masks.size() != slices.size()) {
    throw std::invalid_argument("subject " + id + ": mask count differs from slice count");
  }
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].height != slices[i].height || masks[i].width != slices[i].width) {
      throw std::invalid_argument("subject " + id + " slice " + std::to_string(i) + ": image and mask sizes differ");
    }
  }
}

Subject generate_subject(const std::string& id, const DomainStyle& style, std::uint64_t seed,
                         std::size_t slice_count, std::size_t raw_size, double spacing) {
  if (slice_count == 0) throw std::invalid_argument("subject needs at least one slice");
  if (!(spacing > 0.0)) throw std::invalid_argument("pixel spacing must be positive");
  const AnatomyGeometry geometry = sample_geometry(derive_seed(seed, "geometry"), raw_size);
  Subject subject;
  subject.id = id;
  subject.style = style.id;
  subject.spacing = spacing;
  for (std::size_t s = 0; s < slice_count; ++s) {
    LabelMask mask = rasterize(geometry.slice(s, slice_count), raw_size);
    subject.slices.push_back(render_image(mask, style, derive_seed(seed, "render", s)));
    subject.masks.push_back(std::move(mask));
  }
  return subject;
}

SplitCounts reference_split_counts(std::size_t subjects) {
  SplitCounts c;
  c.validation = subjects * 10 / 60;
  c.train = subjects - c.validation;
  if (c.validation == 0 || c.train == 0) {
    throw std::invalid_argument("reference domain needs at least 6 subjects for a 50/10 split, got " +
                                std::to_string(subjects));
  }
  return c;
}

SplitCounts target_split_counts(std::size_t subjects) {
  SplitCounts c;
  c.validation = subjects * 5 / 60;
  c.test = subjects * 20 / 60;
  c.train = subjects - c.validation - c.test;
  if (c.validation == 0 || c.test == 0 || c.train == 0) {
    throw std::invalid_argument("target domain needs at least 12 subjects for a 35/5/20 split, got " +
                                std::to_string(subjects));
  }
  return c;
}

std::string subject_id(const std::string& prefix, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", index);
  return prefix + "-" + buf;
}

DatasetSplit build_splits(std::size_t reference_subjects, std::size_t target_subjects, std::uint64_t seed) {
  const SplitCounts rc = reference_split_counts(reference_subjects);
  const SplitCounts tc = target_split_counts(target_subjects);
  DatasetSplit split;
  const auto ref_order = shuffled_indices(reference_subjects, derive_seed(seed, "split-reference"));
  for (std::size_t i = 0; i < reference_subjects; ++i) {
    const std::string sid = subject_id("ref", ref_order[i]);
    (i < rc.train ? split.reference_train : split.reference_validation).push_back(sid);
  }
  const auto tgt_order = shuffled_indices(target_subjects, derive_seed(seed, "split-target"));
  for (std::size_t i = 0; i < target_subjects; ++i) {
    const std::string sid = subject_id("tgt", tgt_order[i]);
    if (i < tc.train) {
      split.target_train.push_back(sid);
    } else if (i < tc.train + tc.validation) {
      split.target_validation.push_back(sid);
    } else {
      split.target_test.push_back(sid);
    }
  }
  for (auto* list : {&split.reference_train, &split.reference_validation, &split.target_train,
                     &split.target_validation, &split.target_test}) {
    std::sort(list->begin(), list->end());
  }
  return split;
}

}  // namespace susan
