#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kpconv/cli.hpp"
#include "kpconv/datasets.hpp"
#include "kpconv/io.hpp"
#include "kpconv/network.hpp"

namespace fs = std::filesystem;
using namespace kpconv;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "kpconv");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  Run r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("kpconv_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> tiny(Task task) {
  std::vector<std::string> s{"--task", task == Task::classification ? "classification" : "segmentation",
                             "--set", "dataset.count=4",
                             "--set", "network.widths=4,4,6,6,8",
                             "--set", "training.epochs=1",
                             "--set", "training.batch_size=2"};
  if (task == Task::classification) {
    for (const char* kv : {"dataset.points_per_cloud=200", "network.first_cell_size=0.3"}) {
      s.push_back("--set");
      s.push_back(kv);
    }
  } else {
    for (const char* kv : {"dataset.count=2", "network.first_cell_size=0.15", "network.sphere_radius=1.0"}) {
      s.push_back("--set");
      s.push_back(kv);
    }
  }
  return s;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("usage errors exit with 2 and print the usage") {
  auto r = run({"train", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(run({"nonsense"}).code == 2);
  CHECK(run({"eval", "--model", "/nonexistent/model.ckpt"}).code == 2);
  CHECK(run({"kernel", "gen", "-k", "many"}).code == 2);
}

TEST_CASE("failures inside a command exit with 1") {
  const auto dir = scratch("fail");
  CHECK(run({"config", "--task", "classification", "--set", "training.nope=1"}).code == 1);
  CHECK(run({"config", "--task", "classification", "--set", "network.first_cell_size=-1"}).code == 1);
  std::ofstream(dir / "bad.ply") << "not a ply\n";
  const auto r = run({"subsample", "--in", (dir / "bad.ply").string(), "--cell", "0.1", "--out", (dir / "o.ply").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("kernel gen prints a table or writes a table and a sidecar") {
  auto r = run({"kernel", "gen", "-k", "5", "--seed", "2"});
  CHECK(r.code == 0);
  std::istringstream rows(r.out);
  std::string line;
  int n = 0;
  while (std::getline(rows, line)) n += !line.empty();
  CHECK(n == 5);
  const auto dir = scratch("kernel");
  CHECK(run({"kernel", "gen", "-k", "7", "--out", (dir / "k7").string()}).code == 0);
  CHECK(fs::exists(dir / "k7.txt"));
  const auto sidecar = nlohmann::json::parse(slurp(dir / "k7.json"));
  CHECK(sidecar["K"] == 7);
  CHECK(sidecar["converged"] == true);
}

TEST_CASE("dataset, subsample and neighbors commands") {
  const auto dir = scratch("geom");
  CHECK(run({"dataset", "--kind", "planes-corners", "--count", "2", "--seed", "3", "--out", dir.string()}).code == 0);
  const auto scene = dir / "planes-corners_0000.ply";
  REQUIRE(fs::exists(scene));
  const auto raw = read_ply(scene).cloud;
  auto r = run({"subsample", "--in", scene.string(), "--cell", "0.2", "--out", (dir / "sub.ply").string()});
  CHECK(r.code == 0);
  const auto sub = read_ply(dir / "sub.ply").cloud;
  CHECK(sub.points == grid_subsample(raw, 0.2).support.points);
  r = run({"neighbors", "--in", (dir / "sub.ply").string(), "--radius", "0.3", "--cap", "4"});
  CHECK(r.code == 0);
  std::istringstream rows(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(rows, line)) {
    std::istringstream idx(line);
    int first = -1, count = 0, v;
    while (idx >> v) {
      if (count == 0) first = v;
      ++count;
    }
    CHECK(count >= 1);
    CHECK(count <= 4);
    CHECK(first == static_cast<int>(n));  // nearest neighbor of a support is itself
    ++n;
  }
  CHECK(n == sub.size());
}

TEST_CASE("train is deterministic and its checkpoint drives eval, erf and features") {
  const auto dir = scratch("train");
  const auto a = dir / "a.ckpt", b = dir / "b.ckpt";
  auto r = run(concat({"train", "--seed", "0", "--out", a.string(), "--log", (dir / "a.log").string()},
                      tiny(Task::classification)));
  REQUIRE(r.code == 0);
  r = run(concat({"train", "--seed", "0", "--out", b.string(), "--log", (dir / "b.log").string()},
                 tiny(Task::classification)));
  REQUIRE(r.code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(dir / "a.log") == slurp(dir / "b.log"));
  CHECK(fs::exists(dir / "a.ckpt.config"));

  r = run({"eval", "--model", a.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("accuracy") != std::string::npos);

  CHECK(run({"dataset", "--kind", "shapes3", "--count", "1", "--out", (dir / "clouds").string()}).code == 0);
  r = run({"erf", "--model", a.string(), "--cloud", (dir / "clouds" / "shapes3_0000.ply").string(), "--block", "1",
           "--center", "9,9,9", "--out", (dir / "erf").string()});
  CHECK(r.code == 0);
  CHECK(r.err.find("snapped") != std::string::npos);
  CHECK(fs::exists(dir / "erf.ply"));
  CHECK(fs::exists(dir / "erf.csv"));

  r = run({"features", "--model", a.string(), "--block", "0", "--channel", "1", "--top", "2", "--out",
           (dir / "feat").string()});
  CHECK(r.code == 0);
  CHECK((fs::exists(dir / "feat" / "ranking.csv") || r.out.find("no ranking") != std::string::npos));
  CHECK(run({"features", "--model", a.string(), "--block", "0", "--channel", "999", "--out", (dir / "f2").string()})
            .code == 1);
}

TEST_CASE("an unreached target accuracy is a failure") {
  const auto dir = scratch("target");
  const auto r = run(concat({"train", "--out", (dir / "m.ckpt").string(), "--set", "training.target_accuracy=1.01"},
                            tiny(Task::classification)));
  CHECK(r.code == 1);
  CHECK(r.err.find("not reached") != std::string::npos);
  CHECK(fs::exists(dir / "m.ckpt"));
}

TEST_CASE("segment writes labels, visits and a vote dump") {
  const auto dir = scratch("segment");
  const auto model = dir / "seg.ckpt";
  REQUIRE(run(concat({"train", "--out", model.string()}, tiny(Task::segmentation))).code == 0);
  CHECK(run({"dataset", "--kind", "indoor-boxes", "--count", "1", "--seed", "9", "--out", dir.string()}).code == 0);
  const auto r = run({"segment", "--model", model.string(), "--scene", (dir / "indoor-boxes_0000.ply").string(),
                      "--out", (dir / "pred.ply").string(), "--votes", (dir / "votes.csv").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("accuracy") != std::string::npos);
  const auto pred = read_ply(dir / "pred.ply");
  CHECK(pred.cloud.has_labels());
  REQUIRE(pred.extra.size() == 1);
  CHECK(*std::min_element(pred.extra[0].values.begin(), pred.extra[0].values.end()) >= 1.0);
  std::ifstream votes(dir / "votes.csv");
  std::string header;
  std::getline(votes, header);
  CHECK(header == "sphere,point,p0,p1,p2");
}

TEST_CASE("config prints a parseable configuration") {
  const auto r = run({"config", "--task", "segmentation", "--set", "training.epochs=7"});
  REQUIRE(r.code == 0);
  const auto dir = scratch("config");
  std::ofstream(dir / "run.cfg") << r.out;
  const auto again = run({"config", "--config", (dir / "run.cfg").string()});
  CHECK(again.code == 0);
  CHECK(again.out == r.out);
  CHECK(r.out.find("epochs = 7") != std::string::npos);
}

TEST_CASE("selftest passes and reports its tolerances") {
  const auto r = run({"selftest"});
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("max rel err") != std::string::npos);
}
