#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "susan/metrics.hpp"
#include "susan/objectives.hpp"
#include "susan/optim.hpp"
#include "susan/phantom.hpp"
#include "susan/serialize.hpp"

namespace susan {

enum class TrainMode { susan, supervised };
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

/// Which validation value model selection minimizes in susan mode.
enum class SelectionLoss {
  generator_total,     ///< total objective without discriminator terms
  with_discriminator,  ///< adds the negated discriminator objectives
};
std::string to_string(SelectionLoss s);
SelectionLoss parse_selection_loss(const std::string& s);

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 3;
  std::size_t epochs = 20;
  LossWeights weights;
  GanLoss gan = GanLoss::non_saturating;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::susan;
  std::size_t validate_every_epochs = 1;
  SelectionLoss selection = SelectionLoss::generator_total;
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 3;
  RNetConfig generator;
  DiscriminatorConfig discriminator;

  void validate() const;
  /// Sorted key=value lines; equal configs give equal text.
  [[nodiscard]] std::string canonical() const;
  /// Hex digest of canonical().
  [[nodiscard]] std::string hash() const;
};

/// Slices of one domain, preprocessed and mapped to the network range.
struct SliceSet {
  DomainId domain = DomainId::reference;
  std::vector<Image> images;
  std::vector<LabelMask> masks;       ///< empty when the masks are withheld
  std::vector<std::string> subjects;  ///< owning subject of each slice

  [[nodiscard]] std::size_t size() const { return images.size(); }
  [[nodiscard]] bool has_masks() const { return !masks.empty(); }
  /// Throws std::invalid_argument naming `what` on inconsistent contents.
  void validate(const std::string& what, std::size_t image_size) const;
};

/// Preprocess every slice of `subjects` to image_size. Masks are copied only if `keep_masks`.
SliceSet make_slice_set(const std::vector<Subject>& subjects, std::size_t image_size, bool keep_masks);

/// Labeled sets carry masks. In susan mode the labeled domain is the reference domain and the
/// unlabeled sets are target images without masks; supervised mode uses the labeled sets only.
struct TrainingData {
  SliceSet labeled_train;
  SliceSet labeled_validation;
  SliceSet unlabeled_train;
  SliceSet unlabeled_validation;
};

template <typename T>
Tensor4<T> stack_images(const SliceSet& set, const std::vector<std::size_t>& indices);

/// Label batch tagged with the domain it came from.
struct MaskBatch {
  std::vector<std::uint8_t> labels;
  DomainId provenance = DomainId::reference;
};
MaskBatch stack_masks(const SliceSet& set, const std::vector<std::size_t>& indices);

class LeakageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Counts every mask batch that reaches a segmentation loss. In susan mode a batch from any
/// domain other than the reference throws LeakageError before it can touch a gradient.
struct LeakageAudit {
  bool enforce = true;
  std::uint64_t mask_batches = 0;
  std::uint64_t reference_batches = 0;
  std::uint64_t target_batches = 0;

  void record(const MaskBatch& batch);
  [[nodiscard]] bool clean() const { return target_batches == 0; }
};

/// Data order: independent per-domain shuffles, epochs counted on the labeled domain, the
/// unlabeled domain consumed as an endless stream of its own shuffled epochs. Every batch is a
/// pure function of (seed, iteration).
class EpochSchedule {
 public:
  EpochSchedule(std::uint64_t seed, std::size_t labeled, std::size_t unlabeled, std::size_t batch_size);

  struct Batch {
    std::size_t epoch = 0;
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> unlabeled;
  };
  [[nodiscard]] std::size_t iterations_per_epoch() const;
  [[nodiscard]] Batch batch(std::uint64_t iteration) const;
  [[nodiscard]] std::vector<std::size_t> labeled_order(std::size_t epoch) const;
  [[nodiscard]] std::vector<std::size_t> unlabeled_order(std::size_t epoch) const;

 private:
  std::uint64_t seed_;
  std::size_t labeled_;
  std::size_t unlabeled_;
  std::size_t batch_;
};

struct IterationRecord {
  std::uint64_t iteration = 0;
  LossReport loss;
  double wall_seconds = 0.0;
};

struct ValidationRecord {
  std::size_t epoch = 0;  ///< 0 for the pre-training point
  std::uint64_t iteration = 0;
  LossReport loss;
  double discriminator_x = 0.0;  ///< discriminator objectives (susan mode)
  double discriminator_y = 0.0;
  double selection = 0.0;  ///< value minimized by model selection
};

/// Discriminator objectives before the update.
struct DiscriminatorReport {
  double objective_x = 0.0;
  double objective_y = 0.0;
};

template <typename T>
class SusanTrainer {
 public:
  SusanTrainer(const TrainConfig& config, const TrainingData& data);

  struct GeneratorResult {
    LossReport loss;
    Tensor4<T> fx;  ///< F(x), detached
    Tensor4<T> by;  ///< B(y), detached
  };
  /// One Adam step of F and B on the total objective; the discriminators are frozen.
  GeneratorResult generator_step(const Tensor4<T>& x, const MaskBatch& masks, const Tensor4<T>& y);
  /// One Adam step of both discriminators on their negated objectives; fakes are constants.
  DiscriminatorReport discriminator_step(const Tensor4<T>& x, const Tensor4<T>& y, const Tensor4<T>& fx,
                                         const Tensor4<T>& by);
  /// Next scheduled iteration: exactly one generator step, then one discriminator step.
  LossReport step();
  /// Objective on the validation sets with every network in eval mode; nothing is updated.
  ValidationRecord validate();

  [[nodiscard]] std::uint64_t iteration() const { return iteration_; }
  [[nodiscard]] const EpochSchedule& schedule() const { return schedule_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const LeakageAudit& audit() const { return audit_; }

  RNet<T>& forward_net() { return f_; }
  RNet<T>& backward_net() { return b_; }
  PatchDiscriminator<T>& disc_x() { return dx_; }
  PatchDiscriminator<T>& disc_y() { return dy_; }
  std::vector<Parameter<T>*> generator_parameters();
  std::vector<Parameter<T>*> discriminator_parameters();

  /// Networks, running statistics and optimizer moments (F, B, DX, DY, adam.*).
  std::vector<NamedTensor> state_tensors();
  void load_state(const std::vector<NamedTensor>& tensors, std::uint64_t iteration, std::uint64_t gen_steps,
                  std::uint64_t disc_steps);
  [[nodiscard]] std::uint64_t generator_adam_steps() const { return gen_opt_.step; }
  [[nodiscard]] std::uint64_t discriminator_adam_steps() const { return disc_opt_.step; }

 private:
  TrainConfig config_;
  const TrainingData& data_;
  EpochSchedule schedule_;
  RNet<T> f_;
  RNet<T> b_;
  PatchDiscriminator<T> dx_;
  PatchDiscriminator<T> dy_;
  AdamState<T> gen_opt_;
  AdamState<T> disc_opt_;
  LeakageAudit audit_;
  std::uint64_t iteration_ = 0;
};

/// Single R-Net without the translation head, cross entropy on the labeled domain.
template <typename T>
class SupervisedTrainer {
 public:
  SupervisedTrainer(const TrainConfig& config, const TrainingData& data);

  LossReport train_step(const Tensor4<T>& x, const MaskBatch& masks);
  LossReport step();
  ValidationRecord validate();

  [[nodiscard]] std::uint64_t iteration() const { return iteration_; }
  [[nodiscard]] const EpochSchedule& schedule() const { return schedule_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  RNet<T>& net() { return net_; }

  std::vector<NamedTensor> state_tensors();
  void load_state(const std::vector<NamedTensor>& tensors, std::uint64_t iteration, std::uint64_t steps);
  [[nodiscard]] std::uint64_t adam_steps() const { return opt_.step; }

 private:
  TrainConfig config_;
  const TrainingData& data_;
  EpochSchedule schedule_;
  RNet<T> net_;
  AdamState<T> opt_;
  std::uint64_t iteration_ = 0;
};

/// Plain-text sidecar stored next to a checkpoint's SUSN file.
struct CheckpointInfo {
  std::string config_hash;
  std::string mode;
  std::uint64_t iteration = 0;
  double validation_loss = 0.0;
  std::uint64_t generator_steps = 0;
  std::uint64_t discriminator_steps = 0;
  // Training-loop state needed to resume.
  double initial_validation = 0.0;
  double best_validation = 0.0;
  std::uint64_t best_iteration = 0;
  std::size_t best_epoch = 0;
  std::size_t divergence_streak = 0;

  [[nodiscard]] std::string encode() const;
  static CheckpointInfo decode(const std::string& text);
};

/// Writes `<dir>/<name>.susn` and `<dir>/<name>.txt`.
void write_checkpoint(const std::filesystem::path& dir, const std::string& name, const std::vector<NamedTensor>& tensors,
                      const CheckpointInfo& info);
std::pair<std::vector<NamedTensor>, CheckpointInfo> read_checkpoint(const std::filesystem::path& dir,
                                                                    const std::string& name);

struct TrainOptions {
  /// When set, `last` and `best` checkpoints plus history CSVs are written at every validation.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Continue from `<checkpoint_dir>/last` if it exists.
  bool resume = false;
  /// Stop (after checkpointing) once this many iterations have run in total; 0 = no limit.
  std::uint64_t stop_after = 0;
  /// Called after every iteration (progress reporting).
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const ValidationRecord&)> on_validation;
};

struct TrainResult {
  std::vector<NamedTensor> best_state;
  ValidationRecord best;
  ValidationRecord initial;
  std::vector<IterationRecord> history;
  std::vector<ValidationRecord> validations;
  LeakageAudit audit;
  bool diverged = false;
  bool completed = false;  ///< false when stopped early by stop_after
  std::uint64_t iterations = 0;
};

/// SUSAN training: alternating generator/discriminator steps, validation once per cadence,
/// selection of the minimum validation point, divergence guard.
template <typename T>
TrainResult train(const TrainConfig& config, const TrainingData& data, const TrainOptions& options = {});

/// Supervised baseline with the same optimizer and selection machinery.
template <typename T>
TrainResult train_supervised(const TrainConfig& config, const TrainingData& data, const TrainOptions& options = {});

void write_history_csv(std::ostream& out, const std::vector<IterationRecord>& history);
std::vector<IterationRecord> read_history_csv(std::istream& in);
void write_validation_csv(std::ostream& out, const std::vector<ValidationRecord>& records);
std::vector<ValidationRecord> read_validation_csv(std::istream& in);

/// Copy named tensors into a network's state (names must match exactly).
template <typename T>
void load_network(RNet<T>& net, const std::vector<NamedTensor>& tensors);
template <typename T>
void load_network(PatchDiscriminator<T>& net, const std::vector<NamedTensor>& tensors);
template <typename T>
std::vector<NamedTensor> network_tensors(RNet<T>& net);

/// Per-pixel argmax of B's segmentation head on preprocessed target images (N,1,S,S).
template <typename T>
std::vector<LabelMask> segment_target(RNet<T>& backward_net, const Tensor4<T>& images);
/// Same with F on reference images.
template <typename T>
std::vector<LabelMask> segment_reference(RNet<T>& forward_net, const Tensor4<T>& images);

/// Translation head output in eval mode.
template <typename T>
Tensor4<T> translate(RNet<T>& net, const Tensor4<T>& images);

/// mean |second(first(img)) - img| over all pixels, eval mode.
template <typename T>
double cycle_error(RNet<T>& first, RNet<T>& second, const Tensor4<T>& images);

}  // namespace susan
