#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "sama_test_cli";

struct Run {
  int code = -1;
  std::string out;
};

Run sama(const std::string& args) {
  fs::create_directories(kWork);
  const fs::path log = kWork / "stdout.txt";
  const std::string cmd = std::string(SAMA_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  r.out = s.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto other = b / e.path().filename();
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
    ++n;
  }
  return n > 0;
}

// Micro network on 16x16 images keeps every run under a second or two.
const std::string kMicro =
    " --set model.base_channels=4 --set model.stage_depths=1,1 --set model.channel_multipliers=1,2"
    " --set model.ssm_state=2 --set data.height=16 --set data.width=16 --set data.count=4";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("exit codes") {
    CHECK(sama("--help").code == 0);
    CHECK(sama("").code == 2);
    CHECK(sama("frobnicate").code == 2);
    CHECK(sama("profile --size 0").code == 2);
    const auto bad_key = sama("profile --set model.heds=2");
    CHECK(bad_key.code == 2);
    CHECK(bad_key.out.find("model.heds") != std::string::npos);
    CHECK(sama("eval --data " + kWork.string() + " --predictions " + (kWork / "missing").string()).code == 2);
    fs::create_directories(kWork / "empty");
    REQUIRE(sama("synth-data --out " + (kWork / "d0").string() + " --count 2 --size 16").code == 0);
    const auto runtime = sama("eval --data " + (kWork / "d0").string() + " --predictions " + (kWork / "empty").string());
    CHECK(runtime.code == 1);
  }

  TEST_CASE("synthetic data is a function of the seed") {
    fs::remove_all(kWork / "d1");
    fs::remove_all(kWork / "d2");
    fs::remove_all(kWork / "d3");
    REQUIRE(sama("synth-data --out " + (kWork / "d1").string() + " --count 3 --size 16 --seed 4").code == 0);
    REQUIRE(sama("synth-data --out " + (kWork / "d2").string() + " --count 3 --size 16 --seed 4").code == 0);
    REQUIRE(sama("synth-data --out " + (kWork / "d3").string() + " --count 3 --size 16 --seed 5").code == 0);
    CHECK(same_tree(kWork / "d1", kWork / "d2"));
    CHECK_FALSE(same_tree(kWork / "d1", kWork / "d3"));
    CHECK(fs::exists(kWork / "d1" / "img_0002.stn"));
    CHECK(fs::exists(kWork / "d1" / "mask_0002.stn"));
  }

  TEST_CASE("zero learning rate leaves the initial parameters") {
    const auto run = kWork / "lr0";
    fs::remove_all(run);
    const auto r = sama("train --out " + run.string() + kMicro + " --epochs 2 --iters 2 --lr 0 --save-init --quiet");
    REQUIRE(r.code == 0);
    CHECK(same_tree(run / "init", run / "checkpoint"));
    CHECK(fs::exists(run / "log.csv"));
    CHECK(fs::exists(run / "checkpoint" / "run.cfg"));
  }

  TEST_CASE("ground truth scored against itself") {
    const auto d = kWork / "gt";
    fs::remove_all(d);
    REQUIRE(sama("synth-data --out " + d.string() + " --count 3 --size 24").code == 0);
    const auto r = sama("eval --data " + d.string() + " --predictions " + d.string() + " --out " +
                        (kWork / "gt.csv").string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("mean DSC 1") != std::string::npos);
    const auto csv = slurp(kWork / "gt.csv");
    CHECK(csv.rfind("sample_id,class_id,dsc,nsd,flags\n", 0) == 0);
    CHECK(csv.find("\n0,1,1,1,") != std::string::npos);
  }

  TEST_CASE("same config, same log, checkpoint and metrics") {
    const auto cfg = kWork / "run.cfg";
    {
      std::ofstream out(cfg);
      out << "seed = 3\n[train]\nepochs = 3\niters_per_epoch = 2\nlr = 1e-3\n";
    }
    std::string logs[2], metrics[2];
    for (int i = 0; i < 2; ++i) {
      const auto run = kWork / ("rep" + std::to_string(i));
      fs::remove_all(run);
      REQUIRE(sama("train --config " + cfg.string() + " --out " + run.string() + kMicro + " --quiet").code == 0);
      REQUIRE(sama("eval --data " + (kWork / "gt").string() + " --checkpoint " + (run / "checkpoint").string() +
                   " --out " + (run / "metrics.csv").string() + " --pgm " + (run / "pgm").string())
                  .code == 0);
      logs[i] = slurp(run / "log.csv");
      metrics[i] = slurp(run / "metrics.csv");
      CHECK(fs::exists(run / "pgm" / "pred_0000_class1.pgm"));
    }
    CHECK(logs[0].rfind("epoch,lr,loss,dsc\n", 0) == 0);
    CHECK(logs[0] == logs[1]);
    CHECK(metrics[0] == metrics[1]);
    CHECK(same_tree(kWork / "rep0" / "checkpoint", kWork / "rep1" / "checkpoint"));
  }

  TEST_CASE("gradcheck and profile") {
    const auto g = sama("gradcheck --level micro");
    CHECK(g.code == 0);
    CHECK(g.out.find("selective_scan") != std::string::npos);
    const auto p = sama("profile --size 64 --csv " + (kWork / "prof.csv").string());
    CHECK(p.code == 0);
    CHECK(p.out.find("1 MAC = 2 FLOPs") != std::string::npos);
    CHECK(slurp(kWork / "prof.csv").rfind("layer,kind,params,macs\n", 0) == 0);
  }
}
