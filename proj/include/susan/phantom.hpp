#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace susan {

/// Segmentation classes of the knee phantom.
enum Label : std::uint8_t {
  kBackground = 0,
  kFemur = 1,
  kFemoralCartilage = 2,
  kTibia = 3,
  kTibialCartilage = 4,
};
inline constexpr std::size_t kNumClasses = 5;

/// Single-channel 2-D image, row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  [[nodiscard]] double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Per-pixel class labels in [0, kNumClasses).
struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::uint8_t fill = kBackground)
      : height(h), width(w), labels(h * w, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  [[nodiscard]] std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

struct AnatomyMap {
  LabelMask mask;
  double spacing = 1.0;  ///< mm per pixel, isotropic
  std::uint64_t seed = 0;
};

/// Subject-level geometry of the two bones, in pixels of the raw (uncropped) frame.
struct AnatomyGeometry {
  double center_x = 0;     ///< joint centre
  double center_y = 0;
  double angle = 0;        ///< radians, rotation of both bones about the joint centre
  double gap = 0;          ///< distance between the facing bone surfaces
  double femur_a = 0;      ///< horizontal semi-axis
  double femur_b = 0;      ///< vertical semi-axis
  double tibia_a = 0;
  double tibia_b = 0;
  double femoral_thickness = 0;  ///< cartilage band width
  double tibial_thickness = 0;
  double slice_drift = 0;  ///< horizontal shift from first to last slice

  /// Geometry of slice `index` of `count`: bones narrow smoothly away from the central slice.
  [[nodiscard]] AnatomyGeometry slice(std::size_t index, std::size_t count) const;
};

inline constexpr std::size_t kMinAnatomySize = 32;

AnatomyGeometry sample_geometry(std::uint64_t seed, std::size_t size);
/// Label map of `geometry` on a size x size grid; throws if the bones do not fit the frame.
LabelMask rasterize(const AnatomyGeometry& geometry, std::size_t size);
/// Central slice of a random subject geometry.
AnatomyMap generate_anatomy(std::uint64_t seed, std::size_t size, double spacing);

enum class DomainId { reference, target_a, target_b };
std::string to_string(DomainId id);
DomainId parse_domain(const std::string& s);

struct DomainStyle {
  DomainId id = DomainId::reference;
  std::array<double, kNumClasses> class_means{};
  double bias_amplitude = 0.0;  ///< peak relative deviation of the multiplicative bias field
  double noise_sigma = 0.0;

  /// Preset contrast tables.
  static DomainStyle preset(DomainId id);
  void validate() const;
};

/// class mean x (1 + smooth bias field) + Gaussian noise.
Image render_image(const LabelMask& anatomy, const DomainStyle& style, std::uint64_t seed);

/// Bilinear resampling with half-pixel centre alignment; edges are clamped.
Image resample_bilinear(const Image& image, std::size_t height, std::size_t width);
/// Nearest-neighbour resampling for label maps, same centre alignment.
LabelMask resample_nearest(const LabelMask& mask, std::size_t height, std::size_t width);

/// Side of the centre crop applied before resampling: the central `keep_fraction` of the
/// frame, but never smaller than the target.
std::size_t crop_side(std::size_t source, std::size_t target, double keep_fraction);
inline constexpr double kDefaultKeepFraction = 8.0 / 9.0;

Image center_crop(const Image& image, std::size_t side);
LabelMask center_crop(const LabelMask& mask, std::size_t side);

class PreprocessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Centre crop, bilinear resample to target x target, z-normalize. `context` names the
/// subject/slice in error messages.
Image preprocess(const Image& image, std::size_t target, double keep_fraction = kDefaultKeepFraction,
                 const std::string& context = "");
/// z-scored intensities to the generator's tanh range: clamp(z / kNetworkScale, -1, 1).
inline constexpr double kNetworkScale = 4.0;
Image to_network_range(const Image& z);

/// Matching geometric transform of the label map.
LabelMask preprocess_mask(const LabelMask& mask, std::size_t target, double keep_fraction = kDefaultKeepFraction);

struct Subject {
  std::string id;
  DomainId style = DomainId::reference;
  double spacing = 1.0;
  std::vector<Image> slices;
  std::vector<LabelMask> masks;

  void validate() const;
};

/// Subject with `slice_count` slices of a shared random geometry rendered in `style`.
Subject generate_subject(const std::string& id, const DomainStyle& style, std::uint64_t seed,
                         std::size_t slice_count, std::size_t raw_size, double spacing);

struct DatasetSplit {
  std::vector<std::string> reference_train;
  std::vector<std::string> reference_validation;
  std::vector<std::string> target_train;
  std::vector<std::string> target_validation;
  std::vector<std::string> target_test;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

/// Ratio split with floor rounding and the remainder assigned to training.
/// Reference uses 50:10 (train:val), target 35:5:20 (train:val:test).
SplitCounts reference_split_counts(std::size_t subjects);
SplitCounts target_split_counts(std::size_t subjects);

std::string subject_id(const std::string& prefix, std::size_t index);

/// Shuffles subject ids "ref-NNN" and "tgt-NNN" deterministically and partitions them.
DatasetSplit build_splits(std::size_t reference_subjects, std::size_t target_subjects, std::uint64_t seed);

}  // namespace susan
