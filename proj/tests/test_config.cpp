#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "kpconv/config.hpp"
#include "kpconv/errors.hpp"

using namespace kpconv;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in);
}

}  // namespace

TEST_CASE("defaults") {
  const auto c = default_run_config(Task::classification);
  CHECK(c.kernel_size == 15);
  CHECK(c.sigma_ratio == 1.0);
  CHECK(c.radius_ratio == 5.0);
  CHECK(c.training.momentum == 0.98);
  CHECK(c.training.regularization_weight == 0.1);
  CHECK(c.training.epochs_per_decade == 100.0);
  CHECK(c.first_cell_size == 0.02);
  CHECK(c.input_radius() == doctest::Approx(1.0));
  CHECK(c.widths == std::vector<int>{16, 32, 64, 128, 256});
  CHECK(c.min_visits == 3);
  const auto s = default_run_config(Task::segmentation);
  CHECK(s.training.learning_rate == 1e-2);
  CHECK(s.training.batch_size == 10);
  CHECK(s.dropout == 0.0);
  CHECK(s.input_features == InputFeatures::ones_xyz);
}

TEST_CASE("a config file overrides only the keys it names") {
  const auto c = parse(
      "version = 1\n"
      "# comment line\n"
      "[run]\n"
      "task = segmentation   # trailing comment\n"
      "seed = 7\n"
      "[network]\n"
      "first_cell_size = 0.05\n"
      "widths = 8, 16, 16, 32, 32\n"
      "[augment]\n"
      "flip_axes = xy\n"
      "rotate_vertical = true\n");
  CHECK(c.task == Task::segmentation);
  CHECK(c.seed == 7);
  CHECK(c.first_cell_size == 0.05);
  CHECK(c.input_radius() == doctest::Approx(2.5));
  CHECK(c.widths == std::vector<int>{8, 16, 16, 32, 32});
  CHECK(c.training.augmentation.flip_axes == std::array<bool, 3>{true, true, false});
  CHECK(c.training.augmentation.rotate_vertical);
  // segmentation defaults survive, regardless of where the task line is
  CHECK(c.training.learning_rate == 1e-2);
  const auto late = parse("version = 1\n[training]\nepochs = 3\n[run]\ntask = segmentation\n");
  CHECK(late.training.epochs == 3);
  CHECK(late.training.batch_size == 10);
}

TEST_CASE("formatted configs parse back to the same text") {
  auto c = default_run_config(Task::segmentation);
  c.dataset.synthetic.proportions = {0.5, 0.25, 0.25};
  c.training.augmentation.jitter_sigma = 0.001;
  c.training.augmentation.flip_axes = {false, true, false};
  c.sphere_radius = 0.3;
  const std::string text = format_run_config(c);
  CHECK(format_run_config(parse(text)) == text);
  CHECK(parse(text).dataset.synthetic.proportions == c.dataset.synthetic.proportions);
}

TEST_CASE("every key can be overridden with its formatted value") {
  const auto c = default_run_config(Task::classification);
  const std::string text = format_run_config(c);
  for (const auto& key : run_config_keys()) {
    const auto section = key.substr(0, key.find('.'));
    const auto name = key.substr(key.find('.') + 1);
    const auto at = text.find("\n" + name + " = ", text.find("[" + section + "]"));
    REQUIRE(at != std::string::npos);
    const auto start = at + name.size() + 4;
    const std::string value = text.substr(start, text.find('\n', start) - start);
    RunConfig copy = c;
    apply_override(copy, key, value);
    CHECK(format_run_config(copy) == text);
  }
}

TEST_CASE("bad configs are rejected") {
  const auto fails = [](const std::string& text) { CHECK_THROWS_AS(parse(text), ConfigError); };
  fails("[run]\nseed = 1\n");
  fails("version = 2\n");
  fails("version = 1\nseed = 1\n");
  fails("version = 1\n[run]\nunknown = 1\n");
  fails("version = 1\n[run]\nseed = one\n");
  fails("version = 1\n[run\n");
  fails("version = 1\n[run]\nseed\n");
  fails("version = 1\n[network]\nfirst_cell_size = 0\n");
  fails("version = 1\n[network]\nsphere_radius = -1\n");
  fails("version = 1\n[training]\nmomentum = 1\n");
  fails("version = 1\n[augment]\njitter_sigma = -0.5\n");
  fails("version = 1\n[augment]\nflip_axes = w\n");
  fails("version = 1\n[dataset]\nkind = modelnet40\n");
  fails("version = 1\n[dataset]\nkind = directory\n");
  fails("version = 1\n[voting]\nmin_visits = 0\n");
  fails("version = 1\n[network]\nkernel_size = 0\n");
  RunConfig c;
  CHECK_THROWS_AS(apply_override(c, "training.nope", "1"), ConfigError);
}

TEST_CASE("network spec follows the run config") {
  auto c = default_run_config(Task::segmentation);
  c.deformable_blocks = 4;
  const auto spec = c.network_spec(3);
  CHECK(spec.task == Task::segmentation);
  CHECK(spec.num_classes == 3);
  CHECK(spec.input_dim == 4);
  CHECK(spec.deformable_blocks == 4);
  CHECK(spec.first_cell_size == c.first_cell_size);
}

TEST_CASE("data directory comes from the environment") {
  const auto dir = std::filesystem::temp_directory_path() / "kpconv_data";
  ::setenv("KPCONV_DATA_DIR", dir.c_str(), 1);
  CHECK(data_directory() == dir);
  CHECK(resolve_data_path("scene.ply") == dir / "scene.ply");
  CHECK(resolve_data_path("/abs/scene.ply") == std::filesystem::path("/abs/scene.ply"));
  ::unsetenv("KPCONV_DATA_DIR");
  CHECK(data_directory() == std::filesystem::current_path());
}
