#include <sys/wait.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "common.hpp"
#include "forge/commands.hpp"

namespace forge::testing {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "shakti-forge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// A micro run small enough to finish in well under a second per stage.
const char* kMicroConfig = R"({
  "model": "micro",
  "seed": 3,
  "data": {"n_glyphs": 1, "per_line": 1, "min_scale": 1, "max_scale": 1, "jitter": 1,
           "heldout_samples": 8, "eval_tokens": 256, "gen_count": 3},
  "stage_cfgs": {
    "1": {"total_steps": 4, "micro_batch": 2, "warmup_steps": 1},
    "2": {"total_steps": 3, "micro_batch": 2, "warmup_steps": 1},
    "3": {"total_steps": 3, "micro_batch": 2, "warmup_steps": 1, "checkpoint_every": 2}
  }
})";

fs::path micro_config(const fs::path& dir) {
  write_file(dir / "micro.json", kMicroConfig);
  return dir / "micro.json";
}

// ---------------------------------------------------------------------------
// Configuration parsing

TEST(ParseConfig, EmptyObjectWithOverridesFillsDefaults) {
  CliOverrides o;
  o.model = "1b";
  o.stage = 1;
  const auto rc = parse_config_text("{}", o);
  EXPECT_EQ(rc.model, "1b");
  EXPECT_EQ(rc.model_cfg, preset("1b"));
  ASSERT_EQ(rc.stages, (std::vector<int>{1}));
  const auto& sc = rc.stage_cfgs.at(1);
  EXPECT_EQ(sc.peak_lr, 3e-4);
  EXPECT_EQ(sc.grad_accum, 2u);
  EXPECT_EQ(sc, stage_defaults("1b", 1));
}

TEST(ParseConfig, InvariantViolationNamesKeyPath) {
  try {
    parse_config_text(R"({"stage_cfg":{"grad_accum":0}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage_cfg.grad_accum"), std::string::npos) << e.what();
  }
  try {
    parse_config_text(R"({"stage_cfgs":{"2":{"peak_lr":-1}}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage_cfgs.2.peak_lr"), std::string::npos) << e.what();
  }
}

TEST(ParseConfig, UnknownKeysAreRejectedAtEveryLevel) {
  for (const char* text : {R"({"sead": 1})", R"({"data": {"glyphs": 2}})",
                           R"({"model_cfg": {"layers": 2}})", R"({"stage_cfg": {"lr": 1e-3}})",
                           R"({"stage_cfgs": {"4": {}}})"}) {
    EXPECT_THROW(parse_config_text(text), ConfigError) << text;
  }
  try {
    parse_config_text(R"({"data": {"glyphs": 2}})");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.glyphs"), std::string::npos);
  }
}

TEST(ParseConfig, MalformedAndIllTypedInput) {
  EXPECT_THROW(parse_config_text("{\"seed\": "), ConfigError);
  EXPECT_THROW(parse_config_text("[]"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": "seven"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"model": "7b"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"stages": [0]})"), ConfigError);
  EXPECT_THROW(parse_config(scratch_dir("cfg-missing") / "absent.json"), ConfigError);
}

TEST(ParseConfig, CommandLineOverridesFile) {
  CliOverrides o;
  o.seed = 99;
  o.outdir = "elsewhere";
  o.stage = 2;
  const auto rc = parse_config_text(R"({"seed": 1, "outdir": "here", "stages": [1, 3]})", o);
  EXPECT_EQ(rc.seed, 99u);
  EXPECT_EQ(rc.outdir, "elsewhere");
  EXPECT_EQ(rc.stages, (std::vector<int>{2}));
  EXPECT_EQ(rc.stage_cfgs.size(), 1u);
}

TEST(ParseConfig, AlternateStageOneRateFlag) {
  CliOverrides o;
  o.model = "4b";
  EXPECT_EQ(parse_config_text("{}", o).stage_cfgs.at(1).peak_lr, 2e-4);
  o.table2_lr = true;
  EXPECT_EQ(parse_config_text("{}", o).stage_cfgs.at(1).peak_lr, 2e-5);
  EXPECT_EQ(parse_config_text(R"({"model": "4b", "table2_lr": true})").stage_cfgs.at(1).peak_lr, 2e-5);
  EXPECT_EQ(parse_config_text("{}", o).stage_cfgs.at(2).peak_lr, 4e-5);
}

TEST(ParseConfig, SerializeRoundTrip) {
  for (const char* text : {"{}", R"({"model": "1b", "seed": 12})", kMicroConfig,
                           R"({"model": "4b", "table2_lr": true, "stages": [1]})",
                           R"({"model_cfg": {"dec_layers": 6, "dec_pre_ln_count": 2}, "checkpoint": "a.skvl"})"}) {
    const auto rc = parse_config_text(text);
    const auto again = parse_config_text(serialize_config(rc));
    EXPECT_EQ(again, rc) << text;
    EXPECT_EQ(serialize_config(again), serialize_config(rc));
  }
}

// ---------------------------------------------------------------------------
// Commands

TEST(Cli, UsageErrorsMapToConfigExit) {
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"fly"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--model", "7b"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--stage", "4"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--seed", "x"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--help"}).code, kExitOk);
}

TEST(Cli, BadConfigFileExitsTwoWithKeyPath) {
  const auto dir = scratch_dir("cli-badcfg");
  write_file(dir / "a.json", R"({"stage_cfg": {"grad_accum": 0}})");
  auto r = cli({"train", "--config", (dir / "a.json").string(), "--outdir", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("stage_cfg.grad_accum"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "o"));

  write_file(dir / "b.json", R"({"unknown": 1})");
  EXPECT_EQ(cli({"train", "--config", (dir / "b.json").string()}).code, kExitConfig);
  write_file(dir / "c.json", "{ not json");
  EXPECT_EQ(cli({"eval", "--config", (dir / "c.json").string()}).code, kExitConfig);
}

TEST(Cli, TrainTwiceGivesByteIdenticalMetrics) {
  const auto dir = scratch_dir("cli-determinism");
  const auto cfg = micro_config(dir);
  for (const char* run : {"a", "b"}) {
    const auto r = cli({"train", "--config", cfg.string(), "--stage", "1", "--outdir", (dir / run).string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  const auto a = read_file(dir / "a" / "metrics.csv");
  EXPECT_EQ(a, read_file(dir / "b" / "metrics.csv"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 1 + 4);
  EXPECT_EQ(read_file(dir / "a" / "stage1.skvl"), read_file(dir / "b" / "stage1.skvl"));
}

TEST(Cli, ResolvedConfigAloneReproducesTheRun) {
  const auto dir = scratch_dir("cli-resolved");
  const auto cfg = micro_config(dir);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--seed", "11", "--outdir", (dir / "first").string()}).code,
            kExitOk);
  const auto resolved = read_file(dir / "first" / "config.resolved.json");
  const auto rc = parse_config_text(resolved);
  EXPECT_EQ(rc.seed, 11u);
  EXPECT_EQ(rc.stages, (std::vector<int>{1, 2, 3}));

  // Rerun from the resolved file alone, redirected to a new directory.
  write_file(dir / "resolved.json", resolved);
  ASSERT_EQ(cli({"train", "--config", (dir / "resolved.json").string(), "--outdir", (dir / "second").string()}).code,
            kExitOk);
  EXPECT_EQ(read_file(dir / "first" / "metrics.csv"), read_file(dir / "second" / "metrics.csv"));
  for (const char* f : {"stage1.skvl", "stage2.skvl", "stage3.skvl", "stage3_step000002.skvl"}) {
    ASSERT_TRUE(fs::exists(dir / "first" / f)) << f;
    EXPECT_EQ(read_file(dir / "first" / f), read_file(dir / "second" / f)) << f;
  }
}

TEST(Cli, NothingIsWrittenOutsideTheOutputDirectory) {
  const auto dir = scratch_dir("cli-confined");
  const auto cfg = micro_config(dir);
  const auto out = dir / "run";
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--stage", "1", "--outdir", out.string()}).code, kExitOk);
  ASSERT_EQ(cli({"eval", "--config", cfg.string(), "--outdir", out.string()}).code, kExitOk);
  ASSERT_EQ(cli({"gen-data", "--config", cfg.string(), "--outdir", out.string()}).code, kExitOk);
  std::vector<std::string> top;
  for (const auto& e : fs::directory_iterator(dir)) top.push_back(e.path().filename().string());
  std::sort(top.begin(), top.end());
  EXPECT_EQ(top, (std::vector<std::string>{"micro.json", "run"}));
}

TEST(Cli, EvalReportsPerplexityForStageOneAndAccuracyAfter) {
  const auto dir = scratch_dir("cli-eval");
  const auto cfg = micro_config(dir);
  const auto out = (dir / "run").string();
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--outdir", out}).code, kExitOk);

  auto r = cli({"eval", "--config", cfg.string(), "--outdir", out, (dir / "run" / "stage1.skvl").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto report = nlohmann::json::parse(read_file(dir / "run" / "eval.json"));
  EXPECT_EQ(report["metric"], "perplexity");
  EXPECT_EQ(report["stage"], 1);
  const double ppl = report["perplexity"];
  EXPECT_GE(ppl, 1.0);
  EXPECT_LT(ppl, 2.0 * 12);  // an untrained micro model stays near uniform over 12 tokens
  EXPECT_LE(report["entropy_floor_perplexity"].get<double>(), ppl);

  // With no checkpoint argument the latest stage file is used.
  r = cli({"eval", "--config", cfg.string(), "--outdir", out});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  report = nlohmann::json::parse(read_file(dir / "run" / "eval.json"));
  EXPECT_EQ(report["metric"], "accuracy");
  EXPECT_EQ(report["stage"], 3);
  EXPECT_EQ(report["samples"], 8);
  const double acc = report["accuracy"];
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_NE(r.out.find("exact-match accuracy"), std::string::npos);
}

TEST(Cli, EvalAndInspectWithoutCheckpointFail) {
  const auto dir = scratch_dir("cli-nockpt");
  EXPECT_EQ(cli({"eval", "--outdir", dir.string()}).code, kExitConfig);
  EXPECT_EQ(cli({"inspect", (dir / "missing.skvl").string()}).code, kExitCheckpoint);
}

TEST(Cli, InspectListsParametersAndDigests) {
  const auto dir = scratch_dir("cli-inspect");
  const auto cfg = micro_config(dir);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--stage", "1", "--outdir", dir.string()}).code, kExitOk);
  const auto r = cli({"inspect", (dir / "stage1.skvl").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("format version"), std::string::npos);
  EXPECT_NE(r.out.find("stage           1"), std::string::npos);
  EXPECT_NE(r.out.find("step            4"), std::string::npos);
  EXPECT_NE(r.out.find("content digest"), std::string::npos);
  const VlmModel<float> model(preset("micro"), 3);
  EXPECT_NE(r.out.find("parameters      " + std::to_string(model.parameter_count())), std::string::npos) << r.out;
  for (const auto& p : model.parameters()) EXPECT_NE(r.out.find(p.name), std::string::npos) << p.name;
}

TEST(Cli, InspectOnDamagedCheckpointExitsFour) {
  const auto dir = scratch_dir("cli-damaged");
  const auto cfg = micro_config(dir);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--stage", "1", "--outdir", dir.string()}).code, kExitOk);
  const auto full = read_file(dir / "stage1.skvl");

  write_file(dir / "cut.skvl", full.substr(0, full.size() / 2));
  auto r = cli({"inspect", (dir / "cut.skvl").string()});
  EXPECT_EQ(r.code, kExitCheckpoint);
  EXPECT_NE(r.err.find("checkpoint error"), std::string::npos);

  auto flipped = full;
  flipped[flipped.size() - 3] ^= 0x40;
  write_file(dir / "flip.skvl", flipped);
  EXPECT_EQ(cli({"inspect", "--checkpoint", (dir / "flip.skvl").string()}).code, kExitCheckpoint);
  EXPECT_EQ(cli({"eval", "--config", cfg.string(), "--outdir", dir.string(), (dir / "flip.skvl").string()}).code,
            kExitCheckpoint);
}

TEST(Cli, TrainFromMismatchedCheckpointIsACheckpointError) {
  const auto dir = scratch_dir("cli-mismatch");
  const auto cfg = micro_config(dir);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--stage", "1", "--outdir", (dir / "a").string()}).code, kExitOk);
  write_file(dir / "wider.json", R"({"model": "micro", "model_cfg": {"ffn_hidden": 24},
                                    "stage_cfgs": {"2": {"total_steps": 1, "warmup_steps": 0}}})");
  const auto r = cli({"train", "--config", (dir / "wider.json").string(), "--stage", "2", "--outdir",
                      (dir / "b").string(), "--checkpoint", (dir / "a" / "stage1.skvl").string()});
  EXPECT_EQ(r.code, kExitCheckpoint) << r.err;
}

TEST(Cli, DivergentTrainingExitsThree) {
  const auto dir = scratch_dir("cli-nan");
  write_file(dir / "hot.json", R"({"model": "micro", "stages": [1],
      "stage_cfgs": {"1": {"total_steps": 40, "micro_batch": 2, "warmup_steps": 0,
                           "peak_lr": 1e30, "min_lr": 1e29}}})");
  const auto r = cli({"train", "--config", (dir / "hot.json").string(), "--outdir", dir.string()});
  EXPECT_EQ(r.code, kExitNumeric) << r.err;
  EXPECT_NE(r.err.find("numeric abort"), std::string::npos);
}

TEST(Cli, GenDataWritesGlyphsAndCorpus) {
  const auto dir = scratch_dir("cli-gendata");
  const auto cfg = micro_config(dir);
  const auto out = dir / "data";
  ASSERT_EQ(cli({"gen-data", "--config", cfg.string(), "--outdir", out.string()}).code, kExitOk);
  const auto rc = parse_config(cfg);
  const auto params = glyph_params(rc.data, rc.model_cfg);
  std::ifstream manifest(out / "glyphs" / "manifest.tsv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(manifest, line)) {
    const auto tab = line.find('\t');
    const auto sample = gen_glyph_sample(sample_seed(stream_seed(3, "glyph"), Split::Heldout, n), params);
    EXPECT_EQ(load_ppm(out / "glyphs" / line.substr(0, tab)), sample.image);
    EXPECT_EQ(line.substr(tab + 1), caption_text(sample.caption_ids));
    ++n;
  }
  EXPECT_EQ(n, 3u);
  std::istringstream corpus(read_file(out / "corpus.txt"));
  std::size_t tokens = 0;
  for (int t; corpus >> t; ++tokens) {
    EXPECT_GE(t, 3);
    EXPECT_LT(t, 12);
  }
  EXPECT_EQ(tokens, 256u);
}

TEST(Cli, GradcheckSubprocessPrintsEveryCaseAndPasses) {
  const char* exe = std::getenv("FORGE_CLI");
  if (!exe) GTEST_SKIP() << "FORGE_CLI not set";
  const auto dir = scratch_dir("cli-gradcheck");
  const std::string cmd = std::string("\"") + exe + "\" gradcheck > \"" + (dir / "out.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  ASSERT_NE(status, -1);
  EXPECT_EQ(WEXITSTATUS(status), 0);
  const auto text = read_file(dir / "out.txt");
  for (const auto& c : gradcheck_cases()) EXPECT_NE(text.find(c.name), std::string::npos) << c.name;
  EXPECT_EQ(text.find("FAIL"), std::string::npos) << text;
}

TEST(Cli, SubprocessExitCodesMatchInProcess) {
  const char* exe = std::getenv("FORGE_CLI");
  if (!exe) GTEST_SKIP() << "FORGE_CLI not set";
  const auto dir = scratch_dir("cli-subproc");
  write_file(dir / "bad.json", R"({"stage_cfg": {"grad_accum": 0}})");
  write_file(dir / "junk.skvl", "SKVL but not really");
  auto run = [&](const std::string& args) {
    const int status = std::system(("\"" + std::string(exe) + "\" " + args + " 2>/dev/null >/dev/null").c_str());
    return WEXITSTATUS(status);
  };
  EXPECT_EQ(run("train --config \"" + (dir / "bad.json").string() + "\""), kExitConfig);
  EXPECT_EQ(run("inspect \"" + (dir / "junk.skvl").string() + "\""), kExitCheckpoint);
}

}  // namespace
}  // namespace forge::testing
