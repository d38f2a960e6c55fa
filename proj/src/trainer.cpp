#include "kpconv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "kpconv/errors.hpp"
#include "kpconv/io.hpp"

namespace kpconv {

namespace {

int label_classes(std::span<const PointCloud> clouds) {
  int top = -1;
  for (const auto& c : clouds) {
    for (int l : c.labels) {
      if (l < 0) throw ValidationError("dataset: negative label");
      top = std::max(top, l);
    }
  }
  if (top < 0) throw ValidationError("dataset: no labels");
  return top + 1;
}

std::vector<PointCloud> with_features(std::span<const PointCloud> clouds, InputFeatures mode) {
  std::vector<PointCloud> out;
  out.reserve(clouds.size());
  for (const auto& c : clouds) out.push_back(add_input_features(c, mode));
  return out;
}

std::mt19937_64 seeded_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6b70u};
  return std::mt19937_64(seq);
}

}  // namespace

std::vector<PointCloud> load_dataset(const DatasetSource& source) {
  if (source.kind != "directory") {
    return generate_synthetic_dataset(dataset_kind_from_string(source.kind), source.count, source.seed,
                                      source.synthetic);
  }
  const auto dir = resolve_data_path(source.directory);
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ply") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw EmptyInputError("dataset directory has no .ply files: " + dir.string());
  if (static_cast<int>(files.size()) > source.count) files.resize(source.count);
  std::vector<PointCloud> out;
  for (const auto& f : files) {
    auto cloud = read_ply(f).cloud;
    if (!cloud.has_labels()) throw ValidationError("dataset file has no labels: " + f.string());
    out.push_back(std::move(cloud));
  }
  return out;
}

double PreparedDataset::mean_points() const {
  if (elements.empty()) return 0.0;
  double total = 0.0;
  for (const auto& e : elements) total += static_cast<double>(e.size());
  return total / static_cast<double>(elements.size());
}

std::size_t PreparedDataset::max_points() const {
  std::size_t m = 0;
  for (const auto& e : elements) m = std::max(m, e.size());
  return m;
}

PreparedDataset prepare_dataset(std::vector<PointCloud> clouds, double first_cell_size, std::optional<int> num_classes) {
  if (clouds.empty()) throw EmptyInputError("dataset: no clouds");
  PreparedDataset data;
  data.num_classes = num_classes ? *num_classes : label_classes(clouds);
  data.elements.reserve(clouds.size());
  for (auto& c : clouds) {
    if (c.features.cols() == 0) c.features = Matrix::Zero(static_cast<Eigen::Index>(c.size()), 3);
    data.elements.push_back(grid_subsample(c, first_cell_size).support);
  }
  return data;
}

PreparedDataset prepare_dataset(const RunConfig& config) {
  return prepare_dataset(load_dataset(config.dataset), config.first_cell_size);
}

std::size_t batch_point_budget(const PreparedDataset& data, int batch_size) {
  const auto target = static_cast<std::size_t>(std::llround(data.mean_points() * batch_size));
  return std::max(target, data.max_points());
}

std::vector<Batch> make_batches(std::span<const PointCloud> elements, const std::vector<LayerConfig>& layers,
                                std::size_t budget) {
  std::vector<Batch> out;
  std::size_t pos = 0;
  while (pos < elements.size()) {
    auto batch = assemble_batch(elements.subspan(pos), layers, budget);
    for (auto& s : batch.sources) s += pos;
    pos += batch.element_count();
    out.push_back(std::move(batch));
  }
  return out;
}

Evaluation evaluate(KPNetwork& net, const PreparedDataset& data, InputFeatures features, std::size_t budget) {
  const auto layers = net.spec().layer_configs();
  const auto inputs = with_features(data.elements, features);
  Evaluation ev;
  const int C = net.spec().num_classes;
  ev.confusion.assign(C, std::vector<long>(C, 0));
  std::size_t correct = 0;
  std::size_t pos = 0;
  while (pos < inputs.size()) {
    const auto batch = assemble_batch(std::span(inputs).subspan(pos), layers, budget);
    pos += batch.element_count();
    const auto out = net.forward(batch, ForwardContext{false, 0});
    const auto targets = batch_targets(batch, net.spec().task);
    for (Eigen::Index r = 0; r < out.logits.rows(); ++r) {
      Eigen::Index pred = 0;
      out.logits.row(r).maxCoeff(&pred);
      const int truth = targets[r];
      if (truth < C) ++ev.confusion[truth][pred];
      correct += pred == truth;
      ++ev.predictions;
    }
  }
  ev.accuracy = ev.predictions ? static_cast<double>(correct) / static_cast<double>(ev.predictions) : 0.0;
  return ev;
}

void recalibrate_batch_norm(KPNetwork& net, std::span<const PointCloud> inputs, std::size_t budget) {
  const auto layers = net.spec().layer_configs();
  const auto norms = net.norms();
  std::vector<double> momenta;
  for (auto* bn : norms) {
    momenta.push_back(bn->momentum);
    bn->updates = 0;
  }
  std::size_t pos = 0;
  for (long t = 0; pos < inputs.size(); ++t) {
    const auto batch = assemble_batch(inputs.subspan(pos), layers, budget);
    pos += batch.element_count();
    for (auto* bn : norms) bn->momentum = static_cast<double>(t) / static_cast<double>(t + 1);
    net.forward(batch, ForwardContext{true, static_cast<std::uint64_t>(t)});
  }
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->momentum = momenta[i];
}

Trainer::Trainer(RunConfig config, PreparedDataset data)
    : config_(std::move(config)),
      data_(std::move(data)),
      network_(config_.network_spec(data_.num_classes)) {
  layers_ = network_.spec().layer_configs();
  budget_ = batch_point_budget(data_, config_.training.batch_size);
  state_.schedule = LearningRateSchedule::start(config_.training.learning_rate, config_.training.epochs_per_decade);
  state_.rng = seeded_rng(config_.seed);
}

Trainer::Trainer(RunConfig config, PreparedDataset data, Checkpoint checkpoint)
    : config_(std::move(config)), data_(std::move(data)), network_(std::move(checkpoint.network)) {
  if (network_.spec().num_classes != data_.num_classes) {
    throw ConfigError("checkpoint has " + std::to_string(network_.spec().num_classes) + " classes, dataset has " +
                      std::to_string(data_.num_classes));
  }
  layers_ = network_.spec().layer_configs();
  budget_ = batch_point_budget(data_, config_.training.batch_size);
  state_ = std::move(checkpoint.state);
}

EpochReport Trainer::run_epoch(std::ostream* log) {
  std::vector<std::size_t> order(data_.elements.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), state_.rng);
  std::vector<PointCloud> epoch_elements;
  epoch_elements.reserve(order.size());
  for (auto i : order) {
    const auto seed = state_.rng();
    epoch_elements.push_back(
        add_input_features(augment(data_.elements[i], config_.training.augmentation, seed), config_.input_features));
  }

  const OptimizerConfig optimizer{config_.training.momentum, config_.training.regularization_weight};
  EpochReport report;
  report.epoch = state_.schedule.epoch;
  report.rate = state_.schedule.rate;
  long correct = 0, predictions = 0;
  std::size_t pos = 0;
  while (pos < epoch_elements.size()) {
    const auto batch = assemble_batch(std::span(epoch_elements).subspan(pos), layers_, budget_);
    pos += batch.element_count();
    const auto losses = train_step(network_, batch, state_.schedule, optimizer, state_.rng());
    ++state_.step;
    ++report.steps;
    report.loss += losses.total;
    correct += losses.correct;
    predictions += losses.predictions;
    if (log) *log << training_log_record(state_.schedule.epoch, state_.step, state_.schedule.rate, losses) << '\n';
  }
  report.loss /= std::max(report.steps, 1);
  report.accuracy = predictions ? static_cast<double>(correct) / static_cast<double>(predictions) : 0.0;
  state_.schedule.advance_epoch();
  return report;
}

void Trainer::recalibrate() {
  const auto inputs = with_features(data_.elements, config_.input_features);
  recalibrate_batch_norm(network_, inputs, budget_);
}

Evaluation Trainer::evaluate_training_set() { return evaluate(network_, data_, config_.input_features, budget_); }

TrainSummary train(Trainer& trainer, std::ostream* log,
                   const std::function<void(const EpochReport&, std::optional<double>)>& progress) {
  TrainSummary summary;
  const double target = trainer.config().training.target_accuracy;
  while (trainer.state().schedule.epoch < trainer.config().training.epochs) {
    summary.epochs.push_back(trainer.run_epoch(log));
    std::optional<double> accuracy;
    if (target > 0.0) {
      trainer.recalibrate();
      accuracy = trainer.evaluate_training_set().accuracy;
      summary.evaluated_accuracy.push_back(*accuracy);
    }
    if (progress) progress(summary.epochs.back(), accuracy);
    if (accuracy && *accuracy >= target) {
      summary.reached_target = true;
      break;
    }
  }
  trainer.recalibrate();
  return summary;
}

}  // namespace kpconv
