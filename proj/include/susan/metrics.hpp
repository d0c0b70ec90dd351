#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "susan/networks.hpp"
#include "susan/phantom.hpp"

namespace susan {

/// One class of a label mask as a boolean image.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;
  double spacing = 1.0;  ///< mm per pixel

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, double spacing_mm = 1.0)
      : height(h), width(w), bits(h * w, 0), spacing(spacing_mm) {}
  static BinaryMask from_labels(const LabelMask& mask, std::uint8_t cls, double spacing_mm = 1.0);

  [[nodiscard]] bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
  [[nodiscard]] std::size_t count() const;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 2|S n R| / (|S| + |R|); 1 when both are empty.
double dice(const BinaryMask& s, const BinaryMask& r);
/// 1 - |S n R| / |S u R|; 0 when both are empty.
double voe(const BinaryMask& s, const BinaryMask& r);

/// Mask pixels with at least one 4-neighbour outside the mask (outside the image counts).
std::vector<std::array<std::size_t, 2>> boundary_pixels(const BinaryMask& m);

/// Numerator and denominator of the average symmetric surface distance.
struct SurfaceSums {
  double distance_mm = 0.0;      ///< summed nearest-boundary distances, both directions
  std::size_t boundary_count = 0;  ///< |dS| + |dR|
};
/// Throws MetricError ("undefined surface distance") if either mask is empty.
SurfaceSums surface_distance_sums(const BinaryMask& s, const BinaryMask& r);
double assd(const BinaryMask& s, const BinaryMask& r);

/// Per-class correct (n_ii) and total (t_i) pixel counts.
struct ConfusionCounts {
  std::vector<std::uint64_t> correct;
  std::vector<std::uint64_t> total;

  explicit ConfusionCounts(std::size_t classes = kNumClasses) : correct(classes, 0), total(classes, 0) {}
  void add(const ConfusionCounts& other);
  /// sum n_ii / sum t_i over classes with t_i > 0 that are not excluded.
  [[nodiscard]] double accuracy(const std::vector<bool>& excluded = {}) const;
};

struct AccuracyResult {
  double accuracy = 0.0;
  ConfusionCounts counts;
};
AccuracyResult per_pixel_accuracy(const LabelMask& pred, const LabelMask& truth, std::size_t classes = kNumClasses);

/// Per-pixel accuracy of a segmentation classifier on images (N,1,H,W) with masks, pooled
/// over all pixels. Classes listed in `absent_in_training` are left out of the denominator.
template <typename T>
AccuracyResult fcn_score(RNet<T>& classifier, const Tensor4<T>& images, const std::vector<LabelMask>& truths,
                         const std::vector<bool>& absent_in_training = {});

/// Scores of one subject (all of its slices), indexed by class.
struct SubjectScores {
  std::array<double, kNumClasses> dice{};
  std::array<double, kNumClasses> voe{};
  std::array<double, kNumClasses> assd_mm{};
  std::array<bool, kNumClasses> assd_defined{};
  /// Slices skipped for ASSD because exactly one of prediction and truth is empty.
  std::array<std::size_t, kNumClasses> assd_skipped_slices{};
};

/// Dice and VOE pool pixel counts over the slices; ASSD pools boundary sums over slices where
/// both masks are non-empty.
SubjectScores score_subject(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& truth, double spacing);

struct WilcoxonResult {
  double p_value = 1.0;
  double w_plus = 0.0;     ///< sum of ranks of positive differences
  std::size_t n = 0;       ///< pairs with non-zero difference
  bool exact = false;
  bool degenerate = false;  ///< every difference was zero
};

/// Two-sided paired signed-rank test. Zero differences are dropped, tied magnitudes get mid
/// ranks. Exact null distribution for n <= exact_max, normal approximation with continuity and
/// tie correction above. Throws std::invalid_argument on length mismatch or fewer than 5 pairs.
inline constexpr std::size_t kWilcoxonExactMax = 12;
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    std::size_t exact_max = kWilcoxonExactMax);

std::string class_name(std::size_t cls);

/// Mean and sample standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};
MeanStd mean_std(const std::vector<double>& values);

/// One CSV row: a class of one method on one dataset.
struct MetricsRow {
  std::string dataset;
  std::string method;
  std::size_t cls = 0;
  MeanStd dc;
  MeanStd voe;  ///< reported for cartilage classes only
  MeanStd assd_mm;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  /// Lines written as '#' comments above the CSV header.
  std::vector<std::string> header_notes;
};

bool is_cartilage(std::size_t cls);
/// Rows for foreground classes 1..4 from per-subject scores.
std::vector<MetricsRow> summarize(const std::string& dataset, const std::string& method,
                                  const std::vector<SubjectScores>& subjects);

void write_metrics_csv(std::ostream& out, const MetricsReport& report);

/// Paired Dice comparison between methods, one square matrix per class.
struct MethodDice {
  std::string method;
  /// per_class[c][subject]
  std::array<std::vector<double>, kNumClasses> per_class;
};
void write_pvalue_matrix_csv(std::ostream& out, const std::string& dataset, const std::vector<MethodDice>& methods);

/// Fixed-precision decimal used in every CSV so repeated runs are byte-identical.
std::string format_number(double v);

}  // namespace susan
