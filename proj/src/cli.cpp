#include "kpconv/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "kpconv/analysis.hpp"
#include "kpconv/config.hpp"
#include "kpconv/errors.hpp"
#include "kpconv/io.hpp"
#include "kpconv/kernel_points.hpp"
#include "kpconv/selftest.hpp"
#include "kpconv/trainer.hpp"
#include "kpconv/voting.hpp"

namespace kpconv {

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string file;
  std::string task;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.file, "Run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--task", args.task, "classification | segmentation (when no config file is given)");
  cmd->add_option("--set", args.overrides, "Override a configuration key: section.key=value")->allow_extra_args(false);
  cmd->add_option("--seed", args.seed, "Run seed (network initialization, shuffling, augmentation)");
}

RunConfig build_config(const ConfigArgs& args, const std::string& fallback_file = {}) {
  RunConfig cfg;
  if (!args.file.empty()) {
    cfg = load_run_config(args.file);
  } else if (!fallback_file.empty() && fs::exists(fallback_file)) {
    cfg = load_run_config(fallback_file);
  } else {
    cfg = default_run_config(args.task.empty() ? Task::classification : task_from_string(args.task));
  }
  for (const auto& o : args.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + o);
    apply_override(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  if (args.seed) cfg.seed = *args.seed;
  cfg.validate();
  return cfg;
}

std::string config_path_for(const std::string& checkpoint) { return checkpoint + ".config"; }

Point3 parse_point(const std::string& text) {
  std::stringstream ss(text);
  Point3 p;
  char sep = 0;
  if (!(ss >> p.x() >> sep >> p.y() >> sep >> p.z()) || !(ss >> std::ws).eof()) {
    throw ValidationError("expected a point as x,y,z: " + text);
  }
  return p;
}

void print_evaluation(std::ostream& out, const Evaluation& ev) {
  out << "accuracy " << std::setprecision(6) << ev.accuracy << " over " << ev.predictions << " predictions\n";
  out << "confusion (rows: truth, columns: prediction)\n";
  for (const auto& row : ev.confusion) {
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? " " : "") << row[c];
    out << '\n';
  }
}

}  // namespace

int cli_main(int argc, char** argv) { return cli_main(argc, argv, std::cout, std::cerr); }

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Kernel point convolutions on point clouds"};
  app.name("kpconv");
  app.require_subcommand(1);

  // kernel gen
  auto* kernel = app.add_subcommand("kernel", "Kernel point dispositions");
  kernel->require_subcommand(1);
  auto* kernel_gen = kernel->add_subcommand("gen", "Optimize a kernel disposition");
  int kernel_k = 15;
  std::uint64_t kernel_seed = 0;
  bool kernel_free = false;
  std::string kernel_out;
  kernel_gen->add_option("-k,--points", kernel_k, "Number of kernel points")->check(CLI::PositiveNumber);
  kernel_gen->add_option("--seed", kernel_seed, "Random start seed");
  kernel_gen->add_flag("--free-center", kernel_free, "Let the center point move");
  kernel_gen->add_option("--out", kernel_out, "Write <out>.txt and <out>.json instead of printing");

  // subsample
  auto* subsample = app.add_subcommand("subsample", "Grid subsampling of a PLY cloud");
  std::string sub_in, sub_out;
  double sub_cell = 0.0;
  subsample->add_option("--in", sub_in, "Input PLY")->required()->check(CLI::ExistingFile);
  subsample->add_option("--cell", sub_cell, "Cell size")->required();
  subsample->add_option("--out", sub_out, "Output PLY")->required();

  // neighbors
  auto* neighbors = app.add_subcommand("neighbors", "Radius neighborhoods of a PLY cloud");
  std::string nb_in, nb_queries, nb_out;
  double nb_radius = 0.0;
  std::optional<int> nb_cap;
  neighbors->add_option("--in", nb_in, "Support PLY")->required()->check(CLI::ExistingFile);
  neighbors->add_option("--queries", nb_queries, "Query PLY (default: the supports)")->check(CLI::ExistingFile);
  neighbors->add_option("--radius", nb_radius, "Search radius")->required();
  neighbors->add_option("--cap", nb_cap, "Keep at most this many neighbors per query");
  neighbors->add_option("--out", nb_out, "Output text file (default: stdout)");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network");
  ConfigArgs train_args;
  std::string train_out, train_log, train_resume;
  add_config_options(train_cmd, train_args);
  train_cmd->add_option("--out", train_out, "Checkpoint path (default: run.checkpoint)");
  train_cmd->add_option("--log", train_log, "Training log path (default: run.log)");
  train_cmd->add_option("--resume", train_resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Inference accuracy of a checkpoint on a dataset");
  ConfigArgs eval_args;
  std::string eval_model;
  add_config_options(eval_cmd, eval_args);
  eval_cmd->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);

  // segment
  auto* segment = app.add_subcommand("segment", "Sphere-voting segmentation of a scene");
  ConfigArgs seg_args;
  std::string seg_model, seg_scene, seg_out, seg_votes;
  add_config_options(segment, seg_args);
  segment->add_option("--model", seg_model, "Segmentation checkpoint")->required()->check(CLI::ExistingFile);
  segment->add_option("--scene", seg_scene, "Scene PLY")->required()->check(CLI::ExistingFile);
  segment->add_option("--out", seg_out, "Output PLY with predicted labels")->required();
  segment->add_option("--votes", seg_votes, "Per-sphere probability dump (CSV)");

  // erf
  auto* erf_cmd = app.add_subcommand("erf", "Effective receptive field of a block response");
  ConfigArgs erf_args;
  std::string erf_model, erf_cloud, erf_center, erf_out;
  int erf_block = 0;
  add_config_options(erf_cmd, erf_args);
  erf_cmd->add_option("--model", erf_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  erf_cmd->add_option("--cloud", erf_cloud, "Input PLY")->required()->check(CLI::ExistingFile);
  erf_cmd->add_option("--block", erf_block, "Block index")->required();
  erf_cmd->add_option("--center", erf_center, "Response location x,y,z")->required();
  erf_cmd->add_option("--out", erf_out, "Output prefix (.ply and .csv)")->required();

  // features
  auto* features = app.add_subcommand("features", "Rank dataset elements by a learned feature");
  ConfigArgs feat_args;
  std::string feat_model, feat_out;
  int feat_block = 0, feat_channel = 0, feat_top = 8;
  add_config_options(features, feat_args);
  features->add_option("--model", feat_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  features->add_option("--block", feat_block, "Block index")->required();
  features->add_option("--channel", feat_channel, "Output channel of the block")->required();
  features->add_option("--top", feat_top, "Number of elements kept");
  features->add_option("--out", feat_out, "Output directory")->required();

  // dataset
  auto* dataset = app.add_subcommand("dataset", "Write a synthetic dataset as PLY files");
  std::string ds_kind = "shapes3", ds_out;
  int ds_count = 10;
  std::uint64_t ds_seed = 0;
  dataset->add_option("--kind", ds_kind, "shapes3 | planes-corners | indoor-boxes");
  dataset->add_option("--count", ds_count, "Number of clouds")->check(CLI::PositiveNumber);
  dataset->add_option("--seed", ds_seed, "Generator seed");
  dataset->add_option("--out", ds_out, "Output directory")->required();

  // config
  auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
  ConfigArgs cfg_args;
  add_config_options(config_cmd, cfg_args);

  // selftest
  auto* selftest = app.add_subcommand("selftest", "Finite-difference gradient checks");
  std::uint64_t self_seed = 0;
  selftest->add_option("--seed", self_seed, "Instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  try {
    if (*kernel_gen) {
      const auto d = optimize_disposition(kernel_k, !kernel_free, kernel_seed);
      if (!d.converged) err << "warning: disposition did not converge in " << d.iterations << " iterations\n";
      if (kernel_out.empty()) {
        write_disposition_table(out, d);
      } else {
        std::ofstream table(kernel_out + ".txt");
        std::ofstream sidecar(kernel_out + ".json");
        if (!table || !sidecar) throw IoError("cannot write " + kernel_out + ".txt/.json");
        write_disposition_table(table, d);
        sidecar << disposition_sidecar_json(d) << '\n';
        out << "wrote " << kernel_out << ".txt and " << kernel_out << ".json\n";
      }
      return d.converged ? 0 : 1;
    }

    if (*subsample) {
      const auto cloud = read_ply(fs::path(sub_in)).cloud;
      const auto result = grid_subsample(cloud, sub_cell);
      write_ply(fs::path(sub_out), result.support);
      out << cloud.size() << " points -> " << result.support.size() << " points\n";
      return 0;
    }

    if (*neighbors) {
      const auto supports = read_ply(fs::path(nb_in)).cloud;
      const auto queries = nb_queries.empty() ? supports : read_ply(fs::path(nb_queries)).cloud;
      const auto table = radius_neighbors(queries.points, supports.points, nb_radius, nb_cap);
      std::ofstream file;
      if (!nb_out.empty()) {
        file.open(nb_out);
        if (!file) throw IoError("cannot write " + nb_out);
      }
      std::ostream& dst = nb_out.empty() ? out : file;
      for (int r = 0; r < table.rows; ++r) {
        bool first = true;
        for (auto idx : table.row(r)) {
          if (table.is_shadow(idx)) break;
          dst << (first ? "" : " ") << idx;
          first = false;
        }
        dst << '\n';
      }
      return 0;
    }

    if (*train_cmd) {
      RunConfig cfg = build_config(train_args);
      if (!train_out.empty()) cfg.checkpoint = train_out;
      if (!train_log.empty()) cfg.log = train_log;
      auto data = prepare_dataset(cfg);
      std::optional<Trainer> trainer;
      if (train_resume.empty()) {
        trainer.emplace(cfg, std::move(data));
      } else {
        trainer.emplace(cfg, std::move(data), load_checkpoint(fs::path(train_resume)));
      }
      std::ofstream log;
      if (!cfg.log.empty()) {
        log.open(cfg.log, train_resume.empty() ? std::ios::trunc : std::ios::app);
        if (!log) throw IoError("cannot write " + cfg.log);
      }
      const auto summary = train(*trainer, cfg.log.empty() ? nullptr : &log,
                                 [&](const EpochReport& r, std::optional<double> acc) {
                                   err << "epoch " << r.epoch << " loss " << r.loss << " train acc " << r.accuracy;
                                   if (acc) err << " eval acc " << *acc;
                                   err << '\n';
                                 });
      trainer->save(fs::path(cfg.checkpoint));
      std::ofstream cfg_file(config_path_for(cfg.checkpoint));
      cfg_file << format_run_config(cfg);
      if (!cfg_file) throw IoError("cannot write " + config_path_for(cfg.checkpoint));
      out << "trained " << summary.epochs.size() << " epochs; checkpoint " << cfg.checkpoint << '\n';
      if (cfg.training.target_accuracy > 0.0 && !summary.reached_target) {
        err << "error: target accuracy " << cfg.training.target_accuracy << " not reached\n";
        return 1;
      }
      return 0;
    }

    if (*eval_cmd) {
      const RunConfig cfg = build_config(eval_args, config_path_for(eval_model));
      auto ck = load_checkpoint(fs::path(eval_model));
      const auto data = prepare_dataset(load_dataset(cfg.dataset), ck.network.spec().first_cell_size,
                                        ck.network.spec().num_classes);
      print_evaluation(out, evaluate(ck.network, data, cfg.input_features,
                                     batch_point_budget(data, cfg.training.batch_size)));
      return 0;
    }

    if (*segment) {
      const RunConfig cfg = build_config(seg_args, config_path_for(seg_model));
      auto ck = load_checkpoint(fs::path(seg_model));
      auto scene = read_ply(fs::path(seg_scene)).cloud;
      const auto result = segment_scene(scene, ck.network, cfg, !seg_votes.empty());
      const auto truth = scene.labels;
      scene.labels = result.labels;
      std::vector<double> visits(result.visits.begin(), result.visits.end());
      write_ply(fs::path(seg_out), scene, {{"visits", visits}});
      out << result.spheres << " spheres in " << result.passes << " passes\n";
      if (!truth.empty()) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) correct += truth[i] == result.labels[i];
        out << "accuracy " << static_cast<double>(correct) / static_cast<double>(truth.size()) << '\n';
      }
      if (!seg_votes.empty()) {
        std::ofstream votes(seg_votes);
        if (!votes) throw IoError("cannot write " + seg_votes);
        votes << std::setprecision(17) << "sphere,point";
        for (int c = 0; c < ck.network.spec().num_classes; ++c) votes << ",p" << c;
        votes << '\n';
        for (std::size_t s = 0; s < result.votes.size(); ++s) {
          const auto& v = result.votes[s];
          for (std::size_t i = 0; i < v.scene_indices.size(); ++i) {
            votes << s << ',' << v.scene_indices[i];
            for (Eigen::Index c = 0; c < v.probabilities.cols(); ++c) votes << ',' << v.probabilities(i, c);
            votes << '\n';
          }
        }
      }
      return 0;
    }

    if (*erf_cmd) {
      const RunConfig cfg = build_config(erf_args, config_path_for(erf_model));
      auto ck = load_checkpoint(fs::path(erf_model));
      auto& net = ck.network;
      PointCloud cloud = read_ply(fs::path(erf_cloud)).cloud;
      if (cloud.features.cols() == 0) cloud.features = Matrix::Zero(static_cast<Eigen::Index>(cloud.size()), 3);
      cloud.labels.clear();
      const auto sub = grid_subsample(cloud, net.spec().first_cell_size);
      const std::vector<PointCloud> element{add_input_features(sub.support, cfg.input_features)};
      const auto layers = net.spec().layer_configs();
      const auto batch = assemble_batch(element, layers, element[0].size());
      NetworkErfModel model(net);
      const auto erf = compute_erf(model, batch, erf_block, parse_point(erf_center));
      if (erf.center_outside) {
        err << "warning: center outside the scene, snapped to " << erf.center.x() << ',' << erf.center.y() << ','
            << erf.center.z() << '\n';
      }
      write_erf(fs::path(erf_out), erf);
      out << "receptive radius " << erf.receptive_radius << "; wrote " << erf_out << ".ply and " << erf_out
          << ".csv\n";
      return 0;
    }

    if (*features) {
      const RunConfig cfg = build_config(feat_args, config_path_for(feat_model));
      auto ck = load_checkpoint(fs::path(feat_model));
      const auto clouds = load_dataset(cfg.dataset);
      const auto ranking =
          export_feature_activations(ck.network, clouds, cfg.input_features, feat_block, feat_channel, feat_top);
      if (ranking.all_zero) {
        out << "channel " << feat_channel << " of block " << feat_block << " is zero on every element; no ranking\n";
        return 0;
      }
      write_activation_ranking(fs::path(feat_out), ranking);
      out << "wrote " << ranking.elements.size() << " ranked elements to " << feat_out << '\n';
      return 0;
    }

    if (*dataset) {
      const auto clouds = generate_synthetic_dataset(dataset_kind_from_string(ds_kind), ds_count, ds_seed, {});
      fs::create_directories(ds_out);
      for (std::size_t i = 0; i < clouds.size(); ++i) {
        std::ostringstream name;
        name << ds_kind << '_' << std::setw(4) << std::setfill('0') << i << ".ply";
        write_ply(fs::path(ds_out) / name.str(), clouds[i]);
      }
      out << "wrote " << clouds.size() << " clouds to " << ds_out << '\n';
      return 0;
    }

    if (*config_cmd) {
      out << format_run_config(build_config(cfg_args));
      return 0;
    }

    if (*selftest) {
      bool ok = true;
      for (const auto& c : run_selftest(self_seed)) {
        out << (c.passed() ? "PASS " : "FAIL ") << std::left << std::setw(36) << c.name << std::right
            << " max rel err " << std::scientific << std::setprecision(2) << c.max_error << " < " << c.tolerance
            << std::defaultfloat << "  (" << c.checked << " entries, " << c.kinks << " kinks skipped)\n";
        ok = ok && c.passed();
      }
      out << "step 1e-05, relative-error floor 1e-08\n";
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace kpconv
