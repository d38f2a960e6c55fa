#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kpconv/errors.hpp"
#include "kpconv/io.hpp"
#include "kpconv/trainer.hpp"
#include "oracles.hpp"

using namespace kpconv;

namespace {

RunConfig tiny_config() {
  RunConfig c = default_run_config(Task::classification);
  c.dataset.kind = "shapes3";
  c.dataset.count = 9;
  c.dataset.seed = 4;
  c.dataset.synthetic.points_per_cloud = 300;
  c.first_cell_size = 0.3;
  c.widths = {4, 4, 6, 6, 8};
  c.training.epochs = 2;
  c.training.batch_size = 3;
  c.training.learning_rate = 1e-2;
  c.seed = 3;
  return c;
}

std::string checkpoint_bytes(Trainer& t) {
  std::ostringstream out;
  save_checkpoint(out, t.network(), t.state());
  return out.str();
}

}  // namespace

TEST_CASE("learning rate is divided by 10 after 100 epochs") {
  auto s = LearningRateSchedule::start(1e-2);
  for (int e = 0; e < 100; ++e) s.advance_epoch();
  CHECK(s.epoch == 100);
  CHECK(std::abs(s.rate - 1e-3) < 1e-9);
  CHECK(std::abs(s.rate - 1e-3) / 1e-3 < 1e-12);
  auto fast = LearningRateSchedule::start(1.0, 20.0);
  for (int e = 0; e < 40; ++e) fast.advance_epoch();
  CHECK(fast.rate == doctest::Approx(1e-2).epsilon(1e-12));
}

TEST_CASE("momentum SGD update") {
  Parameter a("a", Matrix::Constant(1, 2, 1.0));
  Parameter b("b", Matrix::Constant(1, 2, 1.0), 0.1);
  a.grad = Matrix::Constant(1, 2, 2.0);
  b.grad = Matrix::Constant(1, 2, 2.0);
  a.momentum = Matrix::Constant(1, 2, 1.0);
  b.momentum = Matrix::Zero(1, 2);
  std::vector<Parameter*> params{&a, &b};
  momentum_sgd_update(params, 0.5, 0.9);
  CHECK(a.momentum(0, 0) == doctest::Approx(2.9));
  CHECK(a.value(0, 0) == doctest::Approx(1.0 - 0.5 * 2.9));
  CHECK(b.momentum(0, 1) == doctest::Approx(0.2));
  CHECK(b.value(0, 1) == doctest::Approx(0.9));

  SUBCASE("zero rate leaves values untouched while momentum accumulates") {
    const Matrix before = a.value;
    momentum_sgd_update(params, 0.0, 0.9);
    CHECK(a.value == before);
    CHECK(a.momentum(0, 0) == doctest::Approx(0.9 * 2.9 + 2.0));
  }
}

TEST_CASE("repeated steps on one batch reduce the classification loss") {
  NetworkSpec spec;
  spec.input_dim = 1;
  spec.num_classes = 3;
  spec.first_cell_size = 0.3;
  spec.widths = {4, 4, 6, 6, 8};
  spec.head_width = 8;
  spec.deformable_blocks = 2;
  KPNetwork net(spec);
  auto clouds = generate_synthetic_dataset(DatasetKind::shapes3, 6, 2, SyntheticOptions{300});
  std::vector<PointCloud> inputs;
  for (const auto& c : clouds) inputs.push_back(add_input_features(grid_subsample(c, 0.3).support, InputFeatures::ones));
  const auto batch = assemble_batch(inputs, spec.layer_configs(), 100000);
  const auto schedule = LearningRateSchedule::start(1e-2);
  double first = 0.0, tail = 0.0;
  for (int step = 0; step < 50; ++step) {
    const auto l = train_step(net, batch, schedule, OptimizerConfig{}, step);
    CHECK(std::isfinite(l.total));
    if (step == 0) first = l.cross_entropy;
    if (step >= 40) tail += l.cross_entropy / 10.0;
  }
  CHECK(tail < first);
}

TEST_CASE("non-finite losses stop training with a diagnostic dump") {
  NetworkSpec spec;
  spec.first_cell_size = 0.3;
  spec.widths = {4, 4, 6, 6, 8};
  spec.head_width = 8;
  KPNetwork net(spec);
  net.parameters().back()->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  auto clouds = generate_synthetic_dataset(DatasetKind::shapes3, 2, 2, SyntheticOptions{200});
  std::vector<PointCloud> inputs;
  for (const auto& c : clouds) inputs.push_back(add_input_features(grid_subsample(c, 0.3).support, InputFeatures::ones));
  const auto batch = assemble_batch(inputs, spec.layer_configs(), 100000);
  const auto dump = std::filesystem::temp_directory_path() / "kpconv_nonfinite.bin";
  std::filesystem::remove(dump);
  CHECK_THROWS_AS(train_step(net, batch, LearningRateSchedule::start(1e-3), OptimizerConfig{}, 0, dump),
                  NonFiniteLossError);
  CHECK(std::filesystem::exists(dump));
  std::ifstream in(dump, std::ios::binary);
  CHECK(read_batch_tables(in).layers.size() == 5);
}

TEST_CASE("network description survives JSON") {
  NetworkSpec s;
  s.task = Task::segmentation;
  s.input_dim = 4;
  s.num_classes = 7;
  s.first_cell_size = 0.04;
  s.widths = {8, 16, 16, 32, 32};
  s.deformable_blocks = 3;
  s.seed = 12;
  const auto back = spec_from_json(spec_to_json(s));
  CHECK(spec_to_json(back) == spec_to_json(s));
  CHECK(back.widths == s.widths);
  CHECK(back.task == Task::segmentation);
}

TEST_CASE("log records are JSON without wall time") {
  StepLosses l;
  l.total = 1.5;
  l.cross_entropy = 1.25;
  l.regularization = 2.5;
  l.correct = 3;
  l.predictions = 4;
  const auto j = nlohmann::json::parse(training_log_record(2, 17, 1e-3, l));
  CHECK(j["epoch"] == 2);
  CHECK(j["step"] == 17);
  CHECK(j["accuracy"].get<double>() == 0.75);
  CHECK(j["loss"].get<double>() == 1.5);
  CHECK_FALSE(j.contains("time"));
}

TEST_CASE("training is reproducible and resumes exactly") {
  const auto config = tiny_config();
  Trainer straight(config, prepare_dataset(config));
  straight.run_epoch();
  straight.run_epoch();

  Trainer again(config, prepare_dataset(config));
  std::ostringstream log_a, log_b;
  again.run_epoch(&log_a);
  std::stringstream saved;
  save_checkpoint(saved, again.network(), again.state());
  Trainer resumed(config, prepare_dataset(config), load_checkpoint(saved));
  CHECK(checkpoint_bytes(resumed) == checkpoint_bytes(again));
  CHECK(resumed.state().schedule.epoch == 1);
  resumed.run_epoch(&log_b);
  CHECK(checkpoint_bytes(resumed) == checkpoint_bytes(straight));
  CHECK_FALSE(log_a.str().empty());
  CHECK(straight.state().schedule.rate == doctest::Approx(1e-2 * std::pow(10.0, -2.0 / 100.0)));
}

TEST_CASE("checkpoints reject foreign data") {
  std::istringstream bad("KPXX");
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);
  const auto config = tiny_config();
  Trainer t(config, prepare_dataset(config));
  std::string bytes = checkpoint_bytes(t);
  bytes[4] = 99;
  std::istringstream future(bytes);
  CHECK_THROWS_AS(load_checkpoint(future), IoError);
  std::istringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(load_checkpoint(cut));
}

TEST_CASE("recalibration on a single batch makes inference match training statistics") {
  auto config = tiny_config();
  config.dropout = 0.0;
  Trainer t(config, prepare_dataset(config));
  t.run_epoch();
  std::vector<PointCloud> inputs;
  for (const auto& e : t.data().elements) inputs.push_back(add_input_features(e, config.input_features));
  recalibrate_batch_norm(t.network(), inputs, 1u << 30);
  for (auto* bn : t.network().norms()) CHECK(bn->momentum == 0.98);
  const auto batch = assemble_batch(inputs, t.network().spec().layer_configs(), 1u << 30);
  REQUIRE(batch.element_count() == inputs.size());
  const Matrix train_logits = t.network().forward(batch, ForwardContext{true, 0}).logits;
  const Matrix infer_logits = t.network().forward(batch, ForwardContext{false, 0}).logits;
  CHECK((train_logits - infer_logits).cwiseAbs().maxCoeff() < 1e-6 * (1.0 + train_logits.cwiseAbs().maxCoeff()));
}

TEST_CASE("train stops early at the target and reports evaluations") {
  auto config = tiny_config();
  config.training.epochs = 3;
  config.training.target_accuracy = 1e-9;
  Trainer t(config, prepare_dataset(config));
  int calls = 0;
  const auto summary = train(t, nullptr, [&](const EpochReport&, std::optional<double> acc) {
    ++calls;
    CHECK(acc.has_value());
  });
  CHECK(summary.reached_target);
  CHECK(summary.epochs.size() == 1);
  CHECK(calls == 1);
  CHECK(summary.evaluated_accuracy.size() == 1);
}
