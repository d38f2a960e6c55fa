#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>

#include "kpconv/network.hpp"

namespace kpconv {

/// Exponential learning-rate decay applied once per epoch; the per-epoch
/// factor divides the rate by 10 every `epochs_per_decade` epochs.
struct LearningRateSchedule {
  double initial_rate = 1e-3;
  double rate = 1e-3;
  int epoch = 0;
  double epochs_per_decade = 100.0;

  static LearningRateSchedule start(double initial, double epochs_per_decade = 100.0);
  double epoch_factor() const;
  void advance_epoch();
};

struct OptimizerConfig {
  double momentum = 0.98;
  double regularization_weight = 0.1;
};

/// v <- momentum * v + grad_scale * g;  p <- p - rate * v.
void momentum_sgd_update(std::span<Parameter* const> params, double rate, double momentum);

struct StepLosses {
  double cross_entropy = 0.0;
  double regularization = 0.0;
  double total = 0.0;
  int correct = 0;
  int predictions = 0;
};

/// Labels the loss is computed against: one per element for classification,
/// one per layer-0 point for segmentation.
std::vector<int> batch_targets(const Batch& batch, Task task);

/// Total loss (cross-entropy + weight * regularization) and its gradients,
/// without updating parameters. Gradients are accumulated into `grad`.
StepLosses evaluate_loss(KPNetwork& net, const Batch& batch, const ForwardContext& ctx,
                         double regularization_weight, bool backward);

/// One momentum-SGD step on `batch`. Throws NonFiniteLossError (after writing
/// a diagnostic dump next to `diagnostic_path` when given) if the loss is
/// not finite.
StepLosses train_step(KPNetwork& net, const Batch& batch, const LearningRateSchedule& schedule,
                      const OptimizerConfig& optimizer, std::uint64_t step_seed,
                      const std::filesystem::path& diagnostic_path = {});

/// Everything needed to resume training exactly.
struct TrainingState {
  LearningRateSchedule schedule;
  std::uint64_t step = 0;
  std::mt19937_64 rng;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned binary checkpoint, little-endian:
///   "KPCK", u32 version, string spec (JSON), network state, schedule
///   (f64 initial, f64 rate, i32 epoch, f64 epochs per decade), u64 step,
///   string RNG state.
void save_checkpoint(std::ostream& out, KPNetwork& net, const TrainingState& state);
void save_checkpoint(const std::filesystem::path& path, KPNetwork& net, const TrainingState& state);

struct Checkpoint {
  KPNetwork network;
  TrainingState state;
};
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& json);

/// One newline-delimited JSON record of the training log. Contains no wall
/// time, so logs are reproducible.
std::string training_log_record(int epoch, std::uint64_t step, double rate, const StepLosses& losses);

}  // namespace kpconv
