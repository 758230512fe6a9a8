#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "plvl/data_io.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / "plvl_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

// Small model and data so every command finishes in about a second.
const std::string kTiny =
    " --model.image_size=16 --model.patch=4 --model.dim=8 --model.heads=2 --model.ffn_ratio=2"
    " --model.text_layers=1 --model.max_tokens=8 --blocks.total=4 --blocks.global_indexes=[2,4]"
    " --data.val_size=6 --optim.batch_size=2 --optim.lr=0.003";

CliRun run_cli(const std::string& args) {
  static int counter = 0;
  const auto base = work_dir() / ("run" + std::to_string(counter++));
  const std::string cmd = std::string(PLVL_CLI) + " " + args + " > " + base.string() + ".out 2> " + base.string() +
                          ".err";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(base.string() + ".out");
  r.err = slurp(base.string() + ".err");
  return r;
}

std::string out_dir(const std::string& name) { return (work_dir() / name).string(); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("train --optim.nope=1 --output.dir=" + out_dir("u1")).code, 2);
  EXPECT_EQ(run_cli("train stray --output.dir=" + out_dir("u2")).code, 2);
  EXPECT_EQ(run_cli("train --optim.lr=fast --output.dir=" + out_dir("u3")).code, 2);
  EXPECT_EQ(run_cli("eval --checkpoint /nonexistent.plvc --output.dir=" + out_dir("u4")).code, 2);
  const CliRun r = run_cli("train --model.vocab=/nonexistent/vocab.txt --output.dir=" + out_dir("u5"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.vocab"), std::string::npos);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, GenDataWritesDatasetAndRejectsEmpty) {
  const auto dir = out_dir("gen");
  const CliRun r = run_cli("gen-data --data.n=3 --split=val --output.dir=" + dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(fs::path(dir) / "val.jsonl"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "vocab.txt"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "images" / "val" / "000002.ppm"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "config.json"));
  EXPECT_EQ(plvl::load_jsonl(dir + "/val.jsonl", 64, 64).size(), 3u);
  EXPECT_EQ(run_cli("gen-data --data.n=0 --output.dir=" + out_dir("gen0")).code, 2);
  EXPECT_EQ(run_cli("gen-data --split=dev --output.dir=" + out_dir("gen1")).code, 2);
}

TEST(Cli, TrainEvalPredictRoundTrip) {
  const auto dir = out_dir("train");
  const CliRun t = run_cli("train" + kTiny + " --optim.steps=4 --train.checkpoint_every=2 --output.dir=" + dir);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.err.find("config:"), std::string::npos);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "final.plvc"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "checkpoints" / "step_000002.plvc"));
  std::istringstream log(slurp(fs::path(dir) / "train_log.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], ++lines);
    for (const char* k : {"l_focal_center", "l_l1_box", "l_giou_box", "l_focal_mask", "l_dice_mask", "total"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(lines, 4);

  const std::string ckpt = dir + "/final.plvc";
  const CliRun e1 = run_cli("eval" + kTiny + " --checkpoint " + ckpt + " --output.dir=" + out_dir("eval1"));
  const CliRun e2 = run_cli("eval" + kTiny + " --checkpoint " + ckpt + " --output.dir=" + out_dir("eval2"));
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  const auto m = nlohmann::json::parse(e1.out);
  EXPECT_EQ(m["n"], 6);
  EXPECT_TRUE(m.contains("rec_acc@0.5"));
  EXPECT_TRUE(m.contains("res_miou"));
  EXPECT_EQ(slurp(out_dir("eval1") + "/metrics_val.json"), slurp(out_dir("eval2") + "/metrics_val.json"));

  // An empty evaluation split is a usage error.
  EXPECT_EQ(run_cli("eval" + kTiny + " --data.val_size=0 --checkpoint " + ckpt + " --output.dir=" + out_dir("eval0")).code,
            2);

  // Predict on a generated image; grayscale input is accepted too.
  ASSERT_EQ(run_cli("gen-data --data.n=1 --output.dir=" + out_dir("pimg")).code, 0);
  const std::string image = out_dir("pimg") + "/images/val/000000.ppm";
  const auto pdir = out_dir("predict");
  const CliRun p = run_cli("predict" + kTiny + " --checkpoint " + ckpt + " --image " + image +
                     " --expression \"the red zorblax\" --output.dir=" + pdir);
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.err.find("warning"), std::string::npos);
  for (const char* f : {"box.json", "mask.pgm", "scoremap.pgm", "overlay.ppm"})
    EXPECT_TRUE(fs::exists(fs::path(pdir) / f)) << f;
  const auto box = nlohmann::json::parse(slurp(fs::path(pdir) / "box.json"));
  EXPECT_EQ(box["unknown_tokens"], 1);
  const auto mask = plvl::read_image(pdir + "/mask.pgm");
  EXPECT_EQ(mask.width, 16u);

  plvl::write_image_pgm(out_dir("gray.pgm"), plvl::Image8{1, 20, 20, std::vector<std::uint8_t>(400, 90)});
  EXPECT_EQ(run_cli("predict" + kTiny + " --checkpoint " + ckpt + " --image " + out_dir("gray.pgm") +
                 " --expression \"blue square\" --output.dir=" + out_dir("predict_gray"))
                .code,
            0);
  EXPECT_EQ(run_cli("predict" + kTiny + " --checkpoint " + ckpt + " --image " + image +
                 " --expression \" ,. \" --output.dir=" + out_dir("predict_empty"))
                .code,
            2);
}

TEST(Cli, ResumeContinuesTheSameTrajectory) {
  const auto full = out_dir("resume_full"), part = out_dir("resume_part");
  ASSERT_EQ(run_cli("train" + kTiny + " --optim.steps=6 --train.checkpoint_every=3 --output.dir=" + full).code, 0);
  const CliRun r = run_cli("train" + kTiny + " --optim.steps=6 --train.resume=" + full +
                     "/checkpoints/step_000003.plvc --output.dir=" + part);
  ASSERT_EQ(r.code, 0) << r.err;
  // Steps 4..6 of both logs agree exactly, and so do the final weights.
  std::istringstream a(slurp(fs::path(full) / "train_log.jsonl")), b(slurp(fs::path(part) / "train_log.jsonl"));
  std::vector<std::string> la, lb;
  for (std::string s; std::getline(a, s);) la.push_back(s);
  for (std::string s; std::getline(b, s);) lb.push_back(s);
  ASSERT_EQ(la.size(), 6u);
  ASSERT_EQ(lb.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(la[3 + i], lb[i]);
  EXPECT_EQ(slurp(fs::path(full) / "final.plvc"), slurp(fs::path(part) / "final.plvc"));
}

TEST(Cli, DivergenceExitsThree) {
  const CliRun r = run_cli("train" + kTiny + " --optim.steps=5 --optim.lr=1e30 --output.dir=" + out_dir("nan"));
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos);
}

TEST(Cli, ConfigFileIsReadAndFlagsWin) {
  const auto cfg = work_dir() / "cfg.json";
  std::ofstream(cfg) << R"({"optim.steps": 2, "optim.lr": 0.5})";
  const auto dir = out_dir("cfgrun");
  ASSERT_EQ(run_cli("-c " + cfg.string() + " train" + kTiny + " --output.dir=" + dir).code, 0);
  const auto j = nlohmann::json::parse(slurp(fs::path(dir) / "config.json"));
  EXPECT_EQ(j["optim.steps"], 2);
  EXPECT_DOUBLE_EQ(j["optim.lr"].get<double>(), 0.003);
  std::ofstream(work_dir() / "bad.json") << "{oops";
  EXPECT_EQ(run_cli("-c " + (work_dir() / "bad.json").string() + " train --output.dir=" + out_dir("cfgbad")).code, 2);
}

TEST(Cli, GradcheckDetectsCorruptedGradients) {
  const CliRun r = run_cli("gradcheck --seeds 1 --corrupt 0.01 --output.dir=" + out_dir("gc"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  EXPECT_TRUE(fs::exists(fs::path(out_dir("gc")) / "gradcheck.json"));
}
