#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "susan/experiment.hpp"
#include "susan/metrics.hpp"
#include "susan/trainer.hpp"

namespace susan {

/// Everything a command needs besides its own arguments.
struct CommandContext {
  ExperimentConfig config;
  std::filesystem::path out;
  bool force = false;
  /// train: continue from the last checkpoint instead of refusing a non-empty run directory.
  bool resume = false;
  /// train: stop after this many iterations (0 = run to the end); used to exercise resume.
  std::uint64_t stop_after = 0;
  /// sweep: train the values concurrently.
  bool parallel = false;
  Precision precision = Precision::f32;
  std::function<void(const std::string&)> log;
};

std::filesystem::path data_dir(const std::filesystem::path& out);
std::filesystem::path train_dir(const std::filesystem::path& out, TrainMode method);
std::filesystem::path eval_dir(const std::filesystem::path& out);
std::filesystem::path sweep_dir(const std::filesystem::path& out);
std::filesystem::path sweep_run_dir(const std::filesystem::path& out, double lambda_seg);

/// Generate both domains and write them under <out>/data.
void cmd_generate(const CommandContext& ctx);

/// Train one method on the stored dataset; checkpoints and histories go to <out>/train/<method>.
TrainResult cmd_train(const CommandContext& ctx, TrainMode method);

struct MethodEvaluation {
  TrainMode method = TrainMode::susan;
  std::vector<std::string> subjects;
  std::vector<SubjectScores> scores;
  std::vector<MetricsRow> rows;
};

/// Per-pixel accuracy of the target-trained classifier on real target test images and on
/// reference validation images translated into the target domain.
struct FcnScores {
  double real = 0.0;
  double synthetic = 0.0;
};

struct EvaluationReport {
  std::vector<MethodEvaluation> methods;
  std::optional<FcnScores> fcn;
};

/// Segment the target test subjects with every trained method and write
/// <out>/eval/{metrics.csv, pvalues.csv, fcn.csv, <method>/per_subject.csv}.
EvaluationReport cmd_evaluate(const CommandContext& ctx);

struct SweepRow {
  double lambda_seg = 0.0;
  double fcn_score = 0.0;
  std::array<double, kNumClasses> dice{};  ///< mean over test subjects; index 0 unused
  double mean_dice = 0.0;                   ///< mean of classes 1..4
};

/// Retrain SUSAN from scratch for each configured segmentation weight, evaluate each, write
/// <out>/sweep/sweep.csv. Trains the supervised classifier first if it is missing.
std::vector<SweepRow> cmd_sweep(const CommandContext& ctx);

enum class Direction { forward, backward };
std::string to_string(Direction d);
Direction parse_direction(const std::string& s);

/// Translate a split with the SUSAN generators; writes translated.susn and 8-bit PGM previews
/// to <out>/translate/<direction>. Empty `split` picks reference_validation for forward and
/// target_test for backward. Returns the number of images written.
std::size_t cmd_translate(const CommandContext& ctx, Direction direction, const std::string& split = "",
                          TrainMode method = TrainMode::susan);

/// Linear map of [-1, 1] to [0, 255] with clipping.
std::uint8_t preview_level(double v);
std::string encode_pgm(const float* pixels, std::size_t height, std::size_t width);

/// Per-subject rows: dataset,method,subject,class,DC,VOE,ASSD_mm,ASSD_skipped_slices with
/// round-trip precision.
void write_per_subject_csv(std::ostream& out, const std::string& dataset, const MethodEvaluation& eval);

}  // namespace susan
