#include "kpconv/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "kpconv/errors.hpp"

namespace kpconv {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string key_error(const std::string& key, const std::string& value, const std::string& what) {
  return "config: " + key + " = '" + value + "': " + what;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(key_error(key, v, "expected a number"));
  }
  if (used != v.size()) throw ConfigError(key_error(key, v, "expected a number"));
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key_error(key, v, "expected an integer"));
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key_error(key, v, "expected true or false"));
}

std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Member>
Field double_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); }};
}

template <typename Int, typename Member>
Field int_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_int<Int>(key, v); }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename Member>
Field string_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run.task", [](const RunConfig& c) { return to_string(c.task); },
                 [](RunConfig& c, const std::string& v) { c.task = task_from_string(v); }});
    f.push_back(int_field<std::uint64_t>("run.seed", [](RunConfig& c) -> auto& { return c.seed; }));
    f.push_back(string_field("run.checkpoint", [](RunConfig& c) -> auto& { return c.checkpoint; }));
    f.push_back(string_field("run.log", [](RunConfig& c) -> auto& { return c.log; }));

    f.push_back(string_field("dataset.kind", [](RunConfig& c) -> auto& { return c.dataset.kind; }));
    f.push_back(int_field<int>("dataset.count", [](RunConfig& c) -> auto& { return c.dataset.count; }));
    f.push_back(int_field<std::uint64_t>("dataset.seed", [](RunConfig& c) -> auto& { return c.dataset.seed; }));
    f.push_back(string_field("dataset.directory", [](RunConfig& c) -> auto& { return c.dataset.directory; }));
    f.push_back(int_field<int>("dataset.points_per_cloud",
                               [](RunConfig& c) -> auto& { return c.dataset.synthetic.points_per_cloud; }));
    f.push_back(double_field("dataset.jitter", [](RunConfig& c) -> auto& { return c.dataset.synthetic.jitter; }));
    f.push_back(double_field("dataset.density", [](RunConfig& c) -> auto& { return c.dataset.synthetic.density; }));
    f.push_back({"dataset.proportions", [](const RunConfig& c) { return join(c.dataset.synthetic.proportions); },
                 [](RunConfig& c, const std::string& v) {
                   c.dataset.synthetic.proportions.clear();
                   for (const auto& item : split_list(v)) {
                     c.dataset.synthetic.proportions.push_back(parse_double("dataset.proportions", item));
                   }
                 }});
    f.push_back({"dataset.input_features", [](const RunConfig& c) { return to_string(c.input_features); },
                 [](RunConfig& c, const std::string& v) { c.input_features = input_features_from_string(v); }});

    f.push_back(double_field("network.first_cell_size", [](RunConfig& c) -> auto& { return c.first_cell_size; }));
    f.push_back(double_field("network.sphere_radius", [](RunConfig& c) -> auto& { return c.sphere_radius; }));
    f.push_back({"network.widths", [](const RunConfig& c) { return join(c.widths); },
                 [](RunConfig& c, const std::string& v) {
                   c.widths.clear();
                   for (const auto& item : split_list(v)) c.widths.push_back(parse_int<int>("network.widths", item));
                 }});
    f.push_back(int_field<int>("network.kernel_size", [](RunConfig& c) -> auto& { return c.kernel_size; }));
    f.push_back(double_field("network.sigma_ratio", [](RunConfig& c) -> auto& { return c.sigma_ratio; }));
    f.push_back(double_field("network.radius_ratio", [](RunConfig& c) -> auto& { return c.radius_ratio; }));
    f.push_back(int_field<int>("network.deformable_blocks", [](RunConfig& c) -> auto& { return c.deformable_blocks; }));
    f.push_back(double_field("network.dropout", [](RunConfig& c) -> auto& { return c.dropout; }));

    f.push_back(int_field<int>("training.epochs", [](RunConfig& c) -> auto& { return c.training.epochs; }));
    f.push_back(double_field("training.learning_rate", [](RunConfig& c) -> auto& { return c.training.learning_rate; }));
    f.push_back(double_field("training.momentum", [](RunConfig& c) -> auto& { return c.training.momentum; }));
    f.push_back(double_field("training.regularization_weight",
                             [](RunConfig& c) -> auto& { return c.training.regularization_weight; }));
    f.push_back(double_field("training.epochs_per_decade",
                             [](RunConfig& c) -> auto& { return c.training.epochs_per_decade; }));
    f.push_back(int_field<int>("training.batch_size", [](RunConfig& c) -> auto& { return c.training.batch_size; }));
    f.push_back(double_field("training.target_accuracy", [](RunConfig& c) -> auto& { return c.training.target_accuracy; }));

    f.push_back(double_field("augment.scale_min", [](RunConfig& c) -> auto& { return c.training.augmentation.scale_min; }));
    f.push_back(double_field("augment.scale_max", [](RunConfig& c) -> auto& { return c.training.augmentation.scale_max; }));
    f.push_back(bool_field("augment.anisotropic", [](RunConfig& c) -> auto& { return c.training.augmentation.anisotropic; }));
    f.push_back({"augment.flip_axes",
                 [](const RunConfig& c) {
                   std::string s;
                   const char* names = "xyz";
                   for (int a = 0; a < 3; ++a) {
                     if (c.training.augmentation.flip_axes[a]) s += names[a];
                   }
                   return s.empty() ? std::string("none") : s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   auto& axes = c.training.augmentation.flip_axes;
                   axes = {false, false, false};
                   if (v == "none") return;
                   for (char ch : v) {
                     if (ch < 'x' || ch > 'z') throw ConfigError(key_error("augment.flip_axes", v, "expected axes among xyz or none"));
                     axes[ch - 'x'] = true;
                   }
                 }});
    f.push_back(double_field("augment.flip_probability",
                             [](RunConfig& c) -> auto& { return c.training.augmentation.flip_probability; }));
    f.push_back(double_field("augment.jitter_sigma", [](RunConfig& c) -> auto& { return c.training.augmentation.jitter_sigma; }));
    f.push_back(bool_field("augment.rotate_vertical",
                           [](RunConfig& c) -> auto& { return c.training.augmentation.rotate_vertical; }));

    f.push_back(int_field<int>("voting.min_visits", [](RunConfig& c) -> auto& { return c.min_visits; }));
    f.push_back(int_field<int>("voting.max_passes", [](RunConfig& c) -> auto& { return c.max_passes; }));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

double RunConfig::input_radius() const { return sphere_radius > 0.0 ? sphere_radius : 50.0 * first_cell_size; }

NetworkSpec RunConfig::network_spec(int num_classes) const {
  NetworkSpec s;
  s.task = task;
  s.input_dim = input_feature_dim(input_features);
  s.num_classes = num_classes;
  s.first_cell_size = first_cell_size;
  s.widths = widths;
  s.kernel_size = kernel_size;
  s.sigma_ratio = sigma_ratio;
  s.radius_ratio = radius_ratio;
  s.deformable_blocks = deformable_blocks;
  s.dropout = dropout;
  s.seed = seed;
  s.validate();
  return s;
}

void RunConfig::validate() const {
  if (!(first_cell_size > 0.0)) throw ConfigError("config: first_cell_size must be > 0");
  if (sphere_radius < 0.0 || !(input_radius() > 0.0)) throw ConfigError("config: sphere radius must be > 0");
  if (dataset.count < 1) throw ConfigError("config: dataset.count must be >= 1");
  if (dataset.kind == "directory") {
    if (dataset.directory.empty()) throw ConfigError("config: dataset.directory is required for kind 'directory'");
  } else {
    dataset_kind_from_string(dataset.kind);
  }
  if (training.epochs < 0) throw ConfigError("config: training.epochs must be >= 0");
  if (!(training.learning_rate > 0.0)) throw ConfigError("config: training.learning_rate must be > 0");
  if (training.momentum < 0.0 || training.momentum >= 1.0) throw ConfigError("config: training.momentum must be in [0, 1)");
  if (training.regularization_weight < 0.0) throw ConfigError("config: negative regularization weight");
  if (!(training.epochs_per_decade > 0.0)) throw ConfigError("config: training.epochs_per_decade must be > 0");
  if (training.batch_size < 1) throw ConfigError("config: training.batch_size must be >= 1");
  training.augmentation.validate();
  if (min_visits < 1) throw ConfigError("config: voting.min_visits must be >= 1");
  if (max_passes < 1) throw ConfigError("config: voting.max_passes must be >= 1");
  network_spec(2);
}

RunConfig default_run_config(Task task) {
  RunConfig c;
  c.task = task;
  if (task == Task::segmentation) {
    c.dataset.kind = "indoor-boxes";
    c.dataset.count = 40;
    c.input_features = InputFeatures::ones_xyz;
    c.training.learning_rate = 1e-2;
    c.training.batch_size = 10;
    c.dropout = 0.0;
  }
  return c;
}

RunConfig parse_run_config(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line, section;
  int line_no = 0;
  bool have_version = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: line " + std::to_string(line_no) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty() && key == "version") {
      const int v = parse_int<int>("version", value);
      if (v != kRunConfigVersion) throw ConfigError("config: unsupported version " + value);
      have_version = true;
      continue;
    }
    if (section.empty()) throw ConfigError("config: line " + std::to_string(line_no) + ": key outside a section");
    entries.emplace_back(section + "." + key, value);
  }
  if (!have_version) throw ConfigError("config: missing 'version' line");

  // the task picks the defaults, so apply it first
  RunConfig c;
  for (const auto& [k, v] : entries) {
    if (k == "run.task") c = default_run_config(task_from_string(v));
  }
  for (const auto& [k, v] : entries) apply_override(c, k, v);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_run_config(in);
}

std::string format_run_config(const RunConfig& config) {
  std::ostringstream out;
  out << "version = " << kRunConfigVersion << '\n';
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out << "\n[" << s << "]\n";
      section = s;
    }
    out << f.key.substr(dot + 1) << " = " << f.get(config) << '\n';
  }
  return out.str();
}

void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(config, trim(value));
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::filesystem::path data_directory() {
  if (const char* dir = std::getenv("KPCONV_DATA_DIR"); dir && *dir) return dir;
  return std::filesystem::current_path();
}

std::filesystem::path resolve_data_path(const std::filesystem::path& path) {
  return path.is_absolute() ? path : data_directory() / path;
}

}  // namespace kpconv
