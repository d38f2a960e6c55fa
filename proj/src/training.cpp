#include "kpconv/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "kpconv/errors.hpp"
#include "kpconv/io.hpp"

namespace kpconv {

LearningRateSchedule LearningRateSchedule::start(double initial, double epochs_per_decade) {
  LearningRateSchedule s;
  s.initial_rate = initial;
  s.rate = initial;
  s.epochs_per_decade = epochs_per_decade;
  return s;
}

double LearningRateSchedule::epoch_factor() const { return std::pow(10.0, -1.0 / epochs_per_decade); }

void LearningRateSchedule::advance_epoch() {
  rate *= epoch_factor();
  ++epoch;
}

void momentum_sgd_update(std::span<Parameter* const> params, double rate, double momentum) {
  for (auto* p : params) {
    p->momentum = momentum * p->momentum + p->grad_scale * p->grad;
    p->value -= rate * p->momentum;
  }
}

std::vector<int> batch_targets(const Batch& batch, Task task) {
  const auto& t = task == Task::classification ? batch.element_labels : batch.labels;
  if (t.empty()) throw ValidationError("training: batch has no labels");
  return t;
}

StepLosses evaluate_loss(KPNetwork& net, const Batch& batch, const ForwardContext& ctx,
                         double regularization_weight, bool backward) {
  const auto targets = batch_targets(batch, net.spec().task);
  auto out = net.forward(batch, ctx);
  const auto ce = softmax_cross_entropy(out.logits, targets);
  StepLosses losses;
  losses.cross_entropy = ce.loss;
  losses.regularization = out.regularization;
  losses.total = ce.loss + regularization_weight * out.regularization;
  losses.correct = ce.correct;
  losses.predictions = static_cast<int>(targets.size());
  if (backward && std::isfinite(losses.total)) net.backward(ce.gradient, regularization_weight);
  return losses;
}

StepLosses train_step(KPNetwork& net, const Batch& batch, const LearningRateSchedule& schedule,
                      const OptimizerConfig& optimizer, std::uint64_t step_seed,
                      const std::filesystem::path& diagnostic_path) {
  net.zero_grad();
  const ForwardContext ctx{true, step_seed};
  const auto losses = evaluate_loss(net, batch, ctx, optimizer.regularization_weight, true);
  if (!std::isfinite(losses.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << schedule.epoch << ": cross_entropy=" << losses.cross_entropy
        << " regularization=" << losses.regularization << " rate=" << schedule.rate;
    if (!diagnostic_path.empty()) {
      std::ofstream dump(diagnostic_path, std::ios::binary);
      write_batch_tables(dump, BatchTables::from(batch));
      std::ofstream note(diagnostic_path.string() + ".txt");
      note << msg.str() << '\n';
      msg << " (batch tables dumped to " << diagnostic_path.string() << ")";
    }
    throw NonFiniteLossError(msg.str());
  }
  const auto params = net.parameters();
  momentum_sgd_update(params, schedule.rate, optimizer.momentum);
  return losses;
}

std::string spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["task"] = to_string(spec.task);
  j["input_dim"] = spec.input_dim;
  j["num_classes"] = spec.num_classes;
  j["first_cell_size"] = spec.first_cell_size;
  j["widths"] = spec.widths;
  j["kernel_size"] = spec.kernel_size;
  j["sigma_ratio"] = spec.sigma_ratio;
  j["radius_ratio"] = spec.radius_ratio;
  j["deformable_blocks"] = spec.deformable_blocks;
  j["head_width"] = spec.head_width;
  j["dropout"] = spec.dropout;
  j["offset_lr_factor"] = spec.offset_lr_factor;
  j["seed"] = spec.seed;
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  NetworkSpec s;
  s.task = task_from_string(j.at("task").get<std::string>());
  s.input_dim = j.at("input_dim").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.first_cell_size = j.at("first_cell_size").get<double>();
  s.widths = j.at("widths").get<std::vector<int>>();
  s.kernel_size = j.at("kernel_size").get<int>();
  s.sigma_ratio = j.at("sigma_ratio").get<double>();
  s.radius_ratio = j.at("radius_ratio").get<double>();
  s.deformable_blocks = j.at("deformable_blocks").get<int>();
  s.head_width = j.at("head_width").get<int>();
  s.dropout = j.at("dropout").get<double>();
  s.offset_lr_factor = j.at("offset_lr_factor").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void save_checkpoint(std::ostream& out, KPNetwork& net, const TrainingState& state) {
  using namespace binary;
  out.write("KPCK", 4);
  put_u32(out, kCheckpointVersion);
  put_string(out, spec_to_json(net.spec()));
  net.save_state(out);
  put_f64(out, state.schedule.initial_rate);
  put_f64(out, state.schedule.rate);
  put_i32(out, state.schedule.epoch);
  put_f64(out, state.schedule.epochs_per_decade);
  put_u64(out, state.step);
  std::ostringstream rng;
  rng << state.rng;
  put_string(out, rng.str());
}

void save_checkpoint(const std::filesystem::path& path, KPNetwork& net, const TrainingState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  save_checkpoint(out, net, state);
}

Checkpoint load_checkpoint(std::istream& in) {
  using namespace binary;
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "KPCK", 4) != 0) throw IoError("checkpoint: bad magic");
  const auto version = get_u32(in);
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck{KPNetwork(spec_from_json(get_string(in))), {}};
  ck.network.load_state(in);
  ck.state.schedule.initial_rate = get_f64(in);
  ck.state.schedule.rate = get_f64(in);
  ck.state.schedule.epoch = get_i32(in);
  ck.state.schedule.epochs_per_decade = get_f64(in);
  ck.state.step = get_u64(in);
  std::istringstream rng(get_string(in));
  rng >> ck.state.rng;
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_checkpoint(in);
}

std::string training_log_record(int epoch, std::uint64_t step, double rate, const StepLosses& losses) {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["lr"] = rate;
  j["loss"] = losses.total;
  j["cross_entropy"] = losses.cross_entropy;
  j["regularization"] = losses.regularization;
  j["accuracy"] = losses.predictions ? static_cast<double>(losses.correct) / losses.predictions : 0.0;
  return j.dump();
}

}  // namespace kpconv
