#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

// end-to-end checks against the built binary

namespace fs = std::filesystem;

namespace {

const std::string kBin = REPEATNET_BIN;

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  static int counter = 0;
  const fs::path out =
      fs::temp_directory_path() / ("rpn_cli_out_" + std::to_string(counter++));
  const std::string cmd = kBin + " " + args + " > " + out.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult result;
  result.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out);
  std::stringstream buf;
  buf << in.rdbuf();
  result.output = buf.str();
  fs::remove(out);
  return result;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("rpn_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const {
    return (path / name).string();
  }
};

}  // namespace

TEST_CASE("synth is deterministic and writes a config echo") {
  TempDir dir;
  auto a = run("synth --items 20 --sessions 50 --repeat-prob 0.5 --seed 42 "
               "--output " + (dir / "a.csv"));
  auto b = run("synth --items 20 --sessions 50 --repeat-prob 0.5 --seed 42 "
               "--output " + (dir / "b.csv"));
  CHECK(a.code == 0);
  CHECK(b.code == 0);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(fs::exists(dir / "a.csv.cfg"));
  const std::string cfg = slurp(dir / "a.csv.cfg");
  CHECK(cfg.find("seed=42") != std::string::npos);
  CHECK(cfg.find("repeat-prob=0.5") != std::string::npos);
}

TEST_CASE("prepare then stats prints per-split repeat ratios") {
  TempDir dir;
  REQUIRE(run("synth --items 25 --sessions 120 --seed 7 --output " +
              (dir / "s.csv")).code == 0);
  auto prep = run("prepare --input " + (dir / "s.csv") + " --output " +
                  (dir / "s.rpnd") + " --min-item-count 1 --split 8:1:1");
  CHECK(prep.code == 0);
  CHECK(prep.output.find("repeat_ratio=") != std::string::npos);

  auto stats = run("stats --data " + (dir / "s.rpnd"));
  CHECK(stats.code == 0);
  CHECK(stats.output.find("items:") != std::string::npos);
  CHECK(stats.output.find("train: sessions=96") != std::string::npos);
  CHECK(stats.output.find("validation: sessions=12") != std::string::npos);
  CHECK(stats.output.find("test: sessions=12") != std::string::npos);
}

TEST_CASE("usage and data errors map to exit codes 2 and 3") {
  CHECK(run("bogus-subcommand").code == 2);
  CHECK(run("prepare --input missing.csv").code == 2);  // missing --output
  CHECK(run("stats --data /nonexistent/file.rpnd").code == 3);
  TempDir dir;
  std::ofstream bad(dir / "bad.csv");
  bad << "session_id,timestamp,item_id\nonly,two\n";
  bad.close();
  auto r = run("prepare --input " + (dir / "bad.csv") + " --output " +
               (dir / "x.rpnd"));
  CHECK(r.code == 3);
  CHECK(r.output.find(":2:") != std::string::npos);
}

TEST_CASE("train, eval, and recommend compose") {
  TempDir dir;
  REQUIRE(run("synth --items 15 --sessions 150 --repeat-prob 0.6 --seed 3 "
              "--output " + (dir / "s.csv")).code == 0);
  REQUIRE(run("prepare --input " + (dir / "s.csv") + " --output " +
              (dir / "s.rpnd") + " --min-item-count 1").code == 0);

  auto tr = run("train --data " + (dir / "s.rpnd") + " --out " +
                (dir / "run") + " --d-emb 8 --d-hid 8 --batch-size 32 "
                "--max-epochs 2 --seed 5");
  CHECK(tr.code == 0);
  CHECK(fs::exists(dir / "run/best.ckpt"));
  CHECK(fs::exists(dir / "run/train_log.jsonl"));
  const std::string runcfg = slurp(dir / "run/run.cfg");
  CHECK(runcfg.find("batch-size=32") != std::string::npos);
  CHECK(runcfg.find("ablation=full") != std::string::npos);

  const std::string log = slurp(dir / "run/train_log.jsonl");
  CHECK(log.find("\"epoch\":1") != std::string::npos);
  CHECK(log.find("\"train_loss\":") != std::string::npos);

  auto ev = run("eval --checkpoint " + (dir / "run/best.ckpt") + " --data " +
                (dir / "s.rpnd") + " --k 10,20 --breakdown repeat --out " +
                (dir / "report"));
  CHECK(ev.code == 0);
  CHECK(ev.output.find("segment=repeat") != std::string::npos);
  CHECK(ev.output.find("segment=non_repeat") != std::string::npos);
  CHECK(ev.output.find("k=10") != std::string::npos);
  CHECK(ev.output.find("k=20") != std::string::npos);
  CHECK(fs::exists(dir / "report/report.jsonl"));

  // re-running eval on the same checkpoint yields the identical report
  auto ev2 = run("eval --checkpoint " + (dir / "run/best.ckpt") + " --data " +
                 (dir / "s.rpnd") + " --k 10,20 --breakdown repeat");
  CHECK(ev2.output == ev.output);

  auto rec = run("recommend --checkpoint " + (dir / "run/best.ckpt") +
                 " --data " + (dir / "s.rpnd") + " --session i1,i2,i1 --top 5");
  CHECK(rec.code == 0);
  CHECK(rec.output.find("p_repeat=") != std::string::npos);
  CHECK(rec.output.find("repeat") != std::string::npos);
  CHECK(rec.output.find("explore") != std::string::npos);

  // unknown items are dropped with a warning; fully unknown sessions are a
  // usage error
  auto recwarn = run("recommend --checkpoint " + (dir / "run/best.ckpt") +
                     " --data " + (dir / "s.rpnd") +
                     " --session i1,zzz --top 3");
  CHECK(recwarn.code == 0);
  CHECK(recwarn.output.find("warning: unknown item 'zzz'") !=
        std::string::npos);
  auto recbad = run("recommend --checkpoint " + (dir / "run/best.ckpt") +
                    " --data " + (dir / "s.rpnd") + " --session zzz --top 3");
  CHECK(recbad.code == 2);
}

TEST_CASE("ablation flows from train to eval labels") {
  TempDir dir;
  REQUIRE(run("synth --items 12 --sessions 80 --seed 9 --output " +
              (dir / "s.csv")).code == 0);
  REQUIRE(run("prepare --input " + (dir / "s.csv") + " --output " +
              (dir / "s.rpnd") + " --min-item-count 1").code == 0);
  auto tr = run("train --data " + (dir / "s.rpnd") + " --out " +
                (dir / "nr") + " --d-emb 6 --d-hid 6 --batch-size 32 "
                "--max-epochs 1 --ablation no-repeat");
  CHECK(tr.code == 0);
  auto ev = run("eval --checkpoint " + (dir / "nr/best.ckpt") + " --data " +
                (dir / "s.rpnd") + " --k 10");
  CHECK(ev.code == 0);
  CHECK(ev.output.find("ablation=no-repeat") != std::string::npos);

  // baselines evaluate without a checkpoint
  auto pop = run("eval --data " + (dir / "s.rpnd") + " --baseline pop --k 10");
  CHECK(pop.code == 0);
  CHECK(pop.output.find("model=pop") != std::string::npos);
}

TEST_CASE("train accepts a key=value config file overridden by flags") {
  TempDir dir;
  REQUIRE(run("synth --items 12 --sessions 60 --seed 4 --output " +
              (dir / "s.csv")).code == 0);
  REQUIRE(run("prepare --input " + (dir / "s.csv") + " --output " +
              (dir / "s.rpnd") + " --min-item-count 1").code == 0);
  std::ofstream cfg(dir / "train.cfg");
  cfg << "d-emb=6\nd-hid=6\nbatch-size=16\nmax-epochs=3\nseed=11\n";
  cfg.close();
  auto tr = run("train --data " + (dir / "s.rpnd") + " --out " +
                (dir / "run") + " --config " + (dir / "train.cfg") +
                " --max-epochs 1");
  CHECK(tr.code == 0);
  const std::string echo = slurp(dir / "run/run.cfg");
  CHECK(echo.find("d-emb=6") != std::string::npos);
  CHECK(echo.find("max-epochs=1") != std::string::npos);  // flag wins
  CHECK(echo.find("seed=11") != std::string::npos);
}
