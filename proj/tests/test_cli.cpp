#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "rtn/experiment.hpp"

namespace fs = std::filesystem;
using namespace rtn;

namespace {

struct RunResult {
  int code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(RTN_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string read_bytes(const fs::path& p) { return io::read_text(p); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rtn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_config("toy.json", R"({"seed": 5,
      "dataset": {"schemes": ["BPSK", "QPSK"], "snr_grid": [0, 10, 18], "frames_per_cell": 10},
      "train": {"batch_size": 16, "max_epochs": 3},
      "eval": {"density_frames": 5}})");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write_config(const std::string& name, const std::string& body) {
    io::write_text(dir_ / name, body);
    return (dir_ / name).string();
  }
  std::string p(const std::string& rel) const { return (dir_ / rel).string(); }

  RunResult generate(const std::string& out, const std::string& cfg = "toy.json") {
    return run_cli("generate --config " + p(cfg) + " --out " + p(out));
  }

  fs::path dir_;
};

}  // namespace

TEST(ExperimentConfig, DefaultsAndOverrides) {
  auto c = exp::parse_config(R"({"seed": 9, "model": {"kind": "rtn", "polar_mode": "verbatim"},
                                 "train": {"lr": 0.01, "max_epochs": 7, "localization_warmup_epochs": 3,
                                           "localization_lr_scale": 0.25},
                                 "split": {"train_fraction": 0.5}})");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.dataset.seed, 9u);
  EXPECT_EQ(c.model.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.model.kind, nn::ModelKind::rtn);
  EXPECT_EQ(c.model.polar_mode, radio::Atan2Mode::verbatim);
  EXPECT_DOUBLE_EQ(c.train.lr_init, 0.01);
  EXPECT_EQ(c.train.max_epochs, 7u);
  EXPECT_EQ(c.train.localization_warmup_epochs, 3u);
  EXPECT_DOUBLE_EQ(c.train.localization_lr_scale, 0.25);
  EXPECT_DOUBLE_EQ(c.split.train_fraction, 0.5);
  EXPECT_DOUBLE_EQ(c.split.val_fraction, 0.1);
  EXPECT_EQ(c.dataset.schemes.size(), 11u);
  EXPECT_EQ(c.model.classifier, nn::default_classifier());
}

TEST(ExperimentConfig, ChannelAndLayersParse) {
  auto c = exp::parse_config(R"({"dataset": {"channel": {"phase_range": [0, 0], "multipath": [[1, 0], [0.1, -0.2]]}},
                                 "model": {"classifier": ["flatten", "dense:classes", "softmax"]}})");
  EXPECT_EQ(c.dataset.channel.phase_lo, 0.0);
  EXPECT_EQ(c.dataset.channel.phase_hi, 0.0);
  ASSERT_EQ(c.dataset.channel.multipath.size(), 2u);
  EXPECT_EQ(c.dataset.channel.multipath[1], sig::cplx(0.1, -0.2));
  ASSERT_EQ(c.model.classifier.size(), 3u);
  EXPECT_EQ(c.model.classifier[1].units, nn::kClassUnits);
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadTypes) {
  EXPECT_THROW(exp::parse_config(R"({"sed": 1})"), InvalidInput);
  EXPECT_THROW(exp::parse_config(R"({"train": {"learning_rate": 1}})"), InvalidInput);
  EXPECT_THROW(exp::parse_config(R"({"dataset": {"channel": {"snr": 3}}})"), InvalidInput);
  EXPECT_THROW(exp::parse_config(R"({"train": {"batch_size": "big"}})"), InvalidInput);
  EXPECT_THROW(exp::parse_config(R"({"model": {"kind": "cnn"}})"), InvalidInput);
  EXPECT_THROW(exp::parse_config(R"({"dataset": {"pulse": "sinc"}})"), InvalidInput);
  EXPECT_THROW(exp::parse_config("{not json"), InvalidInput);
  try {
    exp::parse_config(R"({"eval": {"bins": 3}})");
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("'bins' in config eval"), std::string::npos) << e.what();
  }
}

TEST(ExperimentSplits, DisjointAndCoverAllFrames) {
  sig::DatasetConfig dc;
  dc.schemes = {"BPSK", "QPSK", "PAM4"};
  dc.snr_grid = {0, 10};
  dc.frames_per_cell = 20;
  const auto ds = sig::generate_dataset(dc);
  const auto s = exp::make_splits(ds, {}, 4);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), ds.size());
  EXPECT_EQ(s.test.size(), 48u);
  EXPECT_EQ(s.val.size(), 7u);  // 72 train frames, round(64.8) = 65 kept
  std::vector<int> seen(ds.size(), 0);
  for (const auto* v : {&s.train, &s.val, &s.test}) {
    for (std::size_t i : *v) ++seen[i];
  }
  for (int n : seen) EXPECT_EQ(n, 1);
  EXPECT_THROW(exp::make_splits(ds, {0.6, 0.0}, 4), InvalidInput);
}

TEST_F(CliTest, GenerateMinimalConfig) {
  auto r = generate("ds");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("60 frames"), std::string::npos) << r.output;
  EXPECT_EQ(fs::file_size(p("ds/frames.f32")), 60u * 2 * 128 * sizeof(float));
  auto i = run_cli("inspect " + p("ds"));
  EXPECT_EQ(i.code, 0) << i.output;
  EXPECT_NE(i.output.find("QPSK: 0dB=10 10dB=10 18dB=10"), std::string::npos) << i.output;
}

TEST_F(CliTest, GenerateIsDeterministic) {
  ASSERT_EQ(generate("a").code, 0);
  ASSERT_EQ(generate("b").code, 0);
  EXPECT_EQ(read_bytes(p("a/frames.f32")), read_bytes(p("b/frames.f32")));
  EXPECT_EQ(read_bytes(p("a/manifest.json")), read_bytes(p("b/manifest.json")));
  auto r = run_cli("generate --config " + p("toy.json") + " --seed 6 --out " + p("c"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(read_bytes(p("a/frames.f32")), read_bytes(p("c/frames.f32")));
}

TEST_F(CliTest, ErrorContracts) {
  write_config("bad_scheme.json", R"({"dataset": {"schemes": ["BPSK", "QAM1024"]}})");
  auto r = generate("x", "bad_scheme.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("QAM1024"), std::string::npos) << r.output;

  write_config("bad_key.json", R"({"dataset": {"frames": 3}})");
  r = generate("x", "bad_key.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("frames"), std::string::npos) << r.output;

  io::write_text(dir_ / "blocker", "file");
  r = run_cli("generate --config " + p("toy.json") + " --out " + p("blocker/ds"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("error:"), std::string::npos);

  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("train").code, 2);
  EXPECT_EQ(run_cli("train " + p("nowhere") + " --model cnn --out " + p("o")).code, 2);
  EXPECT_EQ(run_cli("inspect " + p("nowhere")).code, 2);
  EXPECT_EQ(run_cli("generate --config " + p("missing.json") + " --out " + p("o")).code, 2);
  EXPECT_EQ(run_cli("generate").code, 2);
}

TEST_F(CliTest, TrainRejectsCorruptContainer) {
  ASSERT_EQ(generate("ds").code, 0);
  fs::resize_file(p("ds/frames.f32"), 1000);
  auto r = run_cli("train " + p("ds") + " --config " + p("toy.json") + " --out " + p("run"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("file has 1000 bytes"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("n_frames=60"), std::string::npos) << r.output;
}

TEST_F(CliTest, TrainEvaluateResumeCompare) {
  ASSERT_EQ(generate("ds").code, 0);
  auto r = run_cli("train " + p("ds") + " --config " + p("toy.json") + " --out " + p("base"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto hist = train::parse_history_csv(io::read_text(p("base/history.csv")));
  ASSERT_EQ(hist.size(), 3u);
  for (std::size_t i = 1; i < hist.size(); ++i) EXPECT_LE(hist[i].lr, hist[i - 1].lr);

  r = run_cli("train " + p("ds") + " --config " + p("toy.json") + " --model rtn --epochs 2 --out " + p("rtn"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto ck = nn::load_checkpoint(p("rtn/checkpoint_best"));
  EXPECT_EQ(ck.config.kind, nn::ModelKind::rtn);
  bool has_loc = false;
  for (const auto& [name, t] : ck.tensors) has_loc |= name.rfind("param.loc.", 0) == 0;
  EXPECT_TRUE(has_loc);

  r = run_cli("train " + p("ds") + " --config " + p("toy.json") + " --epochs 5 --resume " +
              p("base/checkpoint_last") + " --out " + p("base"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto resumed = train::parse_history_csv(io::read_text(p("base/history.csv")));
  ASSERT_EQ(resumed.size(), 5u);
  for (std::size_t i = 0; i < resumed.size(); ++i) EXPECT_EQ(resumed[i].epoch, i + 1);

  r = run_cli("evaluate " + p("base/checkpoint_best") + " " + p("ds") + " --config " + p("toy.json") +
              " --out " + p("rep1"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("snr_db"), std::string::npos) << r.output;
  r = run_cli("evaluate " + p("base/checkpoint_best") + " " + p("ds") + " --config " + p("toy.json") +
              " --out " + p("rep2"));
  ASSERT_EQ(r.code, 0) << r.output;
  for (const auto& e : fs::directory_iterator(p("rep1"))) {
    EXPECT_EQ(read_bytes(e.path()), read_bytes(p("rep2") / e.path().filename())) << e.path();
  }

  r = run_cli("evaluate " + p("rtn/checkpoint_best") + " " + p("ds") + " --config " + p("toy.json") +
              " --compare " + p("base/checkpoint_best") + " --out " + p("cmp"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto header = io::read_text(p("cmp/accuracy_vs_snr.csv"));
  EXPECT_EQ(header.substr(0, header.find('\n')), "snr_db,n_frames,accuracy,compare_accuracy,delta");
}

TEST_F(CliTest, EvaluateRejectsClassCountMismatch) {
  ASSERT_EQ(generate("ds").code, 0);
  write_config("three.json", R"({"seed": 5, "dataset": {"schemes": ["BPSK", "QPSK", "PAM4"],
    "snr_grid": [0, 10, 18], "frames_per_cell": 10}})");
  ASSERT_EQ(generate("ds3", "three.json").code, 0);
  ASSERT_EQ(run_cli("train " + p("ds") + " --config " + p("toy.json") + " --epochs 1 --out " + p("run")).code, 0);
  auto r = run_cli("evaluate " + p("run/checkpoint_best") + " " + p("ds3") + " --out " + p("rep"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("3 classes"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("2"), std::string::npos) << r.output;
}
