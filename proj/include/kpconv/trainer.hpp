#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "kpconv/config.hpp"
#include "kpconv/training.hpp"

namespace kpconv {

/// Raw labeled clouds of a dataset source, in a fixed order.
std::vector<PointCloud> load_dataset(const DatasetSource& source);

/// Training-ready dataset: every element grid-subsampled at the first cell
/// size, original features kept (input features are built per epoch, after
/// augmentation).
struct PreparedDataset {
  std::vector<PointCloud> elements;
  int num_classes = 0;

  double mean_points() const;
  std::size_t max_points() const;
};

PreparedDataset prepare_dataset(std::vector<PointCloud> clouds, double first_cell_size,
                                std::optional<int> num_classes = std::nullopt);
PreparedDataset prepare_dataset(const RunConfig& config);

/// Point budget per batch so that batches hold `batch_size` elements on
/// average; never below the largest element.
std::size_t batch_point_budget(const PreparedDataset& data, int batch_size);

/// Consecutive batches covering `elements` in order.
std::vector<Batch> make_batches(std::span<const PointCloud> elements, const std::vector<LayerConfig>& layers,
                                std::size_t budget);

struct EpochReport {
  int epoch = 0;
  int steps = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // running training accuracy over the epoch
  double rate = 0.0;
};

struct Evaluation {
  double accuracy = 0.0;
  std::size_t predictions = 0;
  std::vector<std::vector<long>> confusion;  // [truth][predicted]
};

/// Inference-mode accuracy (per element or per point, depending on the task).
Evaluation evaluate(KPNetwork& net, const PreparedDataset& data, InputFeatures features, std::size_t budget);

/// Replaces every batch-norm running statistic by the average of the batch
/// statistics over `inputs` (features already built), with the current
/// weights. Dropout masks use a fixed seed.
void recalibrate_batch_norm(KPNetwork& net, std::span<const PointCloud> inputs, std::size_t budget);

class Trainer {
 public:
  Trainer(RunConfig config, PreparedDataset data);
  /// Continues from a checkpoint (network weights, schedule, step, RNG).
  Trainer(RunConfig config, PreparedDataset data, Checkpoint checkpoint);

  /// One pass over the shuffled, augmented dataset. Writes one log record
  /// per step when `log` is given.
  EpochReport run_epoch(std::ostream* log = nullptr);
  /// Batch-norm recalibration on the unaugmented training set.
  void recalibrate();
  Evaluation evaluate_training_set();

  KPNetwork& network() { return network_; }
  TrainingState& state() { return state_; }
  const RunConfig& config() const { return config_; }
  const PreparedDataset& data() const { return data_; }
  std::size_t budget() const { return budget_; }
  void save(const std::filesystem::path& path) { save_checkpoint(path, network_, state_); }

 private:
  RunConfig config_;
  PreparedDataset data_;
  std::vector<LayerConfig> layers_;
  std::size_t budget_ = 0;
  KPNetwork network_;
  TrainingState state_;
};

struct TrainSummary {
  std::vector<EpochReport> epochs;
  std::vector<double> evaluated_accuracy;  // inference accuracy after each epoch (when tracked)
  bool reached_target = false;
};

/// Runs `config.training.epochs` epochs, stopping early when the inference
/// accuracy on the training set reaches `training.target_accuracy` (> 0).
/// Running statistics are recalibrated before every evaluation and at the
/// end. `progress` is called after every epoch.
TrainSummary train(Trainer& trainer, std::ostream* log = nullptr,
                   const std::function<void(const EpochReport&, std::optional<double>)>& progress = {});

}  // namespace kpconv
