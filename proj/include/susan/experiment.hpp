#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "susan/phantom.hpp"
#include "susan/trainer.hpp"

namespace susan {

/// Invalid user input: bad config text, unknown keys, mismatched artifacts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Precision { f32, f64 };
std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

inline constexpr const char* kToolVersion = "1.0.0";

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path output = "runs/desk";
  DomainId target_domain = DomainId::target_a;
  std::vector<TrainMode> methods{TrainMode::susan, TrainMode::supervised};
  std::vector<double> sweep_lambda_seg{0.5, 5.0, 10.0};

  std::size_t image_size = 64;
  std::size_t raw_size = 72;
  std::size_t slices_per_subject = 8;
  double spacing_mm = 0.5;
  std::size_t reference_subjects = 50;
  std::size_t target_subjects = 50;

  /// Optimizer, loss and network settings. Seed, mode and input sizes are filled in by
  /// train_config().
  TrainConfig train;

  ExperimentConfig();
  void validate() const;
  /// Sectioned key = value text; parse(canonical()) reproduces it exactly.
  [[nodiscard]] std::string canonical() const;
  /// SHA-1 of canonical() with the output directory left out.
  [[nodiscard]] std::string hash() const;
  /// SHA-1 over the settings that determine the generated dataset.
  [[nodiscard]] std::string dataset_hash() const;
  [[nodiscard]] TrainConfig train_config(TrainMode mode) const;
};

/// Throws ConfigError on syntax errors, unknown sections or keys, and invalid values.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

std::string sha1_hex(std::string_view data);
/// Hash git assigns to a file with this content ("blob <size>\0" + content).
std::string git_blob_sha1(std::string_view content);

/// Subjects of both domains with their split, in memory.
struct Dataset {
  DatasetSplit split;
  std::map<std::string, Subject> subjects;

  [[nodiscard]] std::vector<Subject> select(const std::vector<std::string>& ids) const;
};

Dataset generate_dataset(const ExperimentConfig& config);

/// One directory per domain with `<id>.susn` image stacks, `<id>.masks` label planes and a
/// manifest; `splits.txt` and `dataset.txt` at the top.
void write_dataset(const Dataset& dataset, const ExperimentConfig& config, const std::filesystem::path& dir);
/// Throws ConfigError if the stored dataset hash differs from the config's.
Dataset read_dataset(const std::filesystem::path& dir, const ExperimentConfig& config);

/// Label planes: "SUSM", u32 version, u32 slice count, u32 height, u32 width, then one byte per
/// pixel, slice-major. Little-endian.
std::string encode_masks(const std::vector<LabelMask>& masks);
std::vector<LabelMask> decode_masks(const std::string& bytes);

/// susan: reference train/validation with masks, target train/validation without.
/// supervised: target train/validation with masks (baseline comparison only).
TrainingData training_data(const Dataset& dataset, const ExperimentConfig& config, TrainMode mode);

/// Pixel spacing after cropping and resampling to the network size.
double preprocessed_spacing(const ExperimentConfig& config, double raw_spacing);

/// Hash of every file under an output directory, plus timings of the commands that wrote it.
struct RunManifest {
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::string precision;
  std::map<std::string, double> timings;          ///< command -> seconds
  std::map<std::string, std::string> files;       ///< relative path -> git blob SHA-1

  [[nodiscard]] std::string encode() const;
  static RunManifest decode(const std::string& text);
};

inline constexpr const char* kManifestName = "MANIFEST.txt";

/// Rescan `root`, keep earlier timings, record `command`, write MANIFEST.txt.
RunManifest update_manifest(const std::filesystem::path& root, const ExperimentConfig& config, Precision precision,
                            const std::string& command, double seconds);

}  // namespace susan
