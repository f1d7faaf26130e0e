#pragma once

// Command-line entry points: train, eval, gradcheck, inspect, gen-data.
//
// Exit codes: 0 success, 1 other failure, 2 configuration error,
// 3 numeric abort, 4 checkpoint error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "forge/checkpoint.hpp"
#include "forge/gradcheck_suite.hpp"
#include "forge/run_config.hpp"
#include "forge/train.hpp"

namespace forge {

enum ExitCode : int { kExitOk = 0, kExitOther = 1, kExitConfig = 2, kExitNumeric = 3, kExitCheckpoint = 4 };

namespace fs = std::filesystem;

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string stage_checkpoint_name(int stage) { return "stage" + std::to_string(stage) + ".skvl"; }

/// Latest stage checkpoint in `dir`, or an empty path.
inline fs::path latest_checkpoint(const fs::path& dir) {
  for (int s = 3; s >= 1; --s) {
    const auto p = dir / stage_checkpoint_name(s);
    if (fs::exists(p)) return p;
  }
  return {};
}

/// Stage-1 evaluation stream: held-out Markov text from the run's corpus.
inline std::vector<std::int32_t> heldout_text(std::uint64_t root_seed, std::size_t vocab_size,
                                              std::size_t n_tokens) {
  std::vector<std::int32_t> tokens;
  for (auto t : corpus_source(root_seed, vocab_size).sample(sample_seed(root_seed, Split::Heldout, 0), n_tokens)) {
    tokens.push_back(text_token(t));
  }
  return tokens;
}

}  // namespace detail

/// Greedy-decoding exact-match accuracy on `count` held-out glyph samples.
template <class T>
double glyph_accuracy(const VlmModel<T>& model, std::uint64_t root_seed, const GlyphParams& params,
                      std::size_t count) {
  std::vector<std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    const auto sample = gen_glyph_sample(glyph_seed(root_seed, "glyph", Split::Heldout, i), params);
    Example ex = glyph_example(sample);
    auto target = ex.response;
    target.pop_back();  // EOS
    ex.response.clear();
    pairs.emplace_back(greedy_decode(model, ex, params.n_glyphs + 2), std::move(target));
  }
  return corpus_accuracy(pairs);
}

inline std::unique_ptr<DataStream> stage_stream(const RunConfig& rc, const StageConfig& sc) {
  if (sc.stage == 1) {
    return std::make_unique<MarkovStream>(rc.seed, rc.model_cfg.vocab_size, sc.max_seq_len, sc.micro_batch);
  }
  const bool prefs = objective_from_string(sc.objective) == Objective::LmDpo;
  return std::make_unique<GlyphStream>(rc.seed, sc.stage == 2 ? "glyph-stage2" : "glyph-stage3",
                                       glyph_params(rc.data, rc.model_cfg), sc.micro_batch, prefs);
}

inline int cmd_train(const RunConfig& rc, std::ostream& log) {
  const fs::path out = rc.outdir;
  fs::create_directories(out);
  detail::write_text(out / "config.resolved.json", serialize_config(rc));

  VlmModel<float> model(rc.model_cfg, rc.seed);
  if (!rc.checkpoint.empty()) {
    restore_model(model, load_checkpoint(rc.checkpoint));
    log << "initialised from " << rc.checkpoint << "\n";
  }

  std::ofstream metrics(out / "metrics.csv", std::ios::binary);
  metrics << kMetricsHeader << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  for (int s : rc.stages) {
    const StageConfig& sc = rc.stage_cfgs.at(s);
    auto stream = stage_stream(rc, sc);
    StageHooks<float> hooks;
    hooks.log = [&](const std::string& msg) { log << msg << "\n"; };
    hooks.on_step = [&](const StepMetrics& m) {
      metrics << metrics_row(m) << "\n";
      if (m.step % 50 == 0 || m.step == sc.total_steps) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[128];
        std::snprintf(buf, sizeof buf, "stage %d step %zu/%zu loss %.4f lr %.3g (%.0fs)", m.stage, m.step,
                      sc.total_steps, m.loss, m.lr, secs);
        log << buf << "\n";
      }
    };
    hooks.on_checkpoint = [&](const VlmModel<float>& m, const AdamW<float>& opt, std::size_t step) {
      const auto ck = capture_state(m, &opt, static_cast<std::uint32_t>(s), step, rc.seed);
      if (step != sc.total_steps) {
        char name[48];
        std::snprintf(name, sizeof name, "stage%d_step%06zu.skvl", s, step);
        save_checkpoint(ck, out / name);
      }
      save_checkpoint(ck, out / detail::stage_checkpoint_name(s));
    };
    const auto result = run_stage(model, sc, *stream, hooks);
    metrics.flush();
    const auto means = block_means(result.metrics, 100);
    std::ostringstream line;
    line << "stage " << s << " done: " << result.optimizer_steps << " steps";
    if (!means.empty()) {
      line << ", 100-step mean loss " << means.front() << " -> " << means.back();
    }
    log << line.str() << "\n";
  }
  return kExitOk;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out, std::ostream& log) {
  fs::path path = rc.checkpoint;
  if (path.empty()) path = detail::latest_checkpoint(rc.outdir);
  if (path.empty()) throw ConfigError("checkpoint: none given and none found in " + rc.outdir);
  const auto ck = load_checkpoint(path);
  const auto model = model_from_checkpoint<float>(ck);
  const ModelConfig& cfg = model.config();

  nlohmann::json report{{"checkpoint", path.string()}, {"stage", ck.stage}, {"step", ck.step},
                        {"seed", ck.seed}};
  if (ck.stage == 1) {
    const auto tokens = detail::heldout_text(ck.seed, cfg.vocab_size, rc.data.eval_tokens);
    const double ppl = perplexity(model, tokens, model.context_len());
    const double floor = std::exp(corpus_source(ck.seed, cfg.vocab_size).mean_context_entropy());
    report["metric"] = "perplexity";
    report["perplexity"] = ppl;
    report["entropy_floor_perplexity"] = floor;
    report["vocab_size"] = cfg.vocab_size;
    report["tokens"] = tokens.size();
    out << "perplexity " << ppl << " (vocab " << cfg.vocab_size << ", source floor " << floor << ")\n";
  } else {
    const auto params = glyph_params(rc.data, cfg);
    const double acc = glyph_accuracy(model, ck.seed, params, rc.data.heldout_samples);
    report["metric"] = "accuracy";
    report["accuracy"] = acc;
    report["samples"] = rc.data.heldout_samples;
    out << "exact-match accuracy " << acc << " on " << rc.data.heldout_samples << " held-out samples\n";
  }
  fs::create_directories(rc.outdir);
  detail::write_text(fs::path(rc.outdir) / "eval.json", report.dump(2) + "\n");
  log << "wrote " << (fs::path(rc.outdir) / "eval.json").string() << "\n";
  return kExitOk;
}

inline int cmd_gradcheck(std::ostream& out) {
  bool all = true;
  for (const auto& c : gradcheck_cases()) {
    double worst = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) worst = std::max(worst, c.run(seed));
    const GradcheckResult r{c.name, worst, c.threshold};
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-24s worst %.3e  threshold %.0e  %s", r.name.c_str(), r.worst,
                  r.threshold, r.passed() ? "PASS" : "FAIL");
    out << buf << "\n";
    all = all && r.passed();
  }
  return all ? kExitOk : kExitOther;
}

inline int cmd_inspect(const RunConfig& rc, std::ostream& out) {
  fs::path path = rc.checkpoint;
  if (path.empty()) path = detail::latest_checkpoint(rc.outdir);
  if (path.empty()) throw ConfigError("checkpoint: none given and none found in " + rc.outdir);
  const auto ck = load_checkpoint(path);
  const auto meta = nlohmann::json::parse(ck.meta);
  out << "file            " << path.string() << "\n"
      << "format version  " << ck.version << "\n"
      << "stage           " << ck.stage << "\n"
      << "step            " << ck.step << "\n"
      << "seed            " << ck.seed << "\n"
      << "config digest   " << detail::hex64(ck.config_digest) << "\n"
      << "content digest  " << detail::hex64(ck.content_digest) << "\n"
      << "model           " << meta.at("config").value("name", std::string("?")) << ", context "
      << meta.value("context_len", std::size_t{0}) << "\n";
  std::size_t params = 0, moments = 0;
  for (const auto& b : ck.blobs) {
    if (b.name.rfind("param/", 0) != 0) {
      moments += b.values.size();
      continue;
    }
    params += b.values.size();
    std::string shape = "[";
    for (std::size_t i = 0; i < b.shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(b.shape[i]);
    shape += "]";
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-40s %-14s %zu", b.name.substr(6).c_str(), shape.c_str(), b.values.size());
    out << buf << "\n";
  }
  out << "parameters      " << params << "\n"
      << "optimizer state " << moments << " values\n";
  return kExitOk;
}

inline int cmd_gen_data(const RunConfig& rc, std::ostream& log) {
  const fs::path out = rc.outdir;
  fs::create_directories(out);
  const auto params = glyph_params(rc.data, rc.model_cfg);
  write_glyph_dataset(out / "glyphs", stream_seed(rc.seed, "glyph"), Split::Heldout, rc.data.gen_count, params);
  const auto tokens = detail::heldout_text(rc.seed, rc.model_cfg.vocab_size, rc.data.eval_tokens);
  std::ofstream corpus(out / "corpus.txt", std::ios::binary);
  for (std::size_t i = 0; i < tokens.size(); ++i) corpus << tokens[i] << (i + 1 == tokens.size() ? '\n' : ' ');
  log << "wrote " << rc.data.gen_count << " glyph samples and " << tokens.size() << " corpus tokens to "
      << out.string() << "\n";
  return kExitOk;
}

/// Parses arguments, dispatches, and maps failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"shakti-forge: desk-scale vision-language model training harness"};
  app.require_subcommand(1, 1);
  std::string config_path, positional;
  CliOverrides cli;
  std::string model;
  int stage = 0;
  std::uint64_t seed = 0;
  std::string outdir, checkpoint;

  std::vector<CLI::App*> subs;
  for (const char* name : {"train", "eval", "gradcheck", "inspect", "gen-data"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--model", model, "model variant")->check(CLI::IsMember({"1b", "4b", "toy", "micro"}));
    sub->add_option("--stage", stage, "train a single stage")->check(CLI::Range(1, 3));
    sub->add_option("--seed", seed, "root seed");
    sub->add_option("--outdir", outdir, "output directory");
    sub->add_option("--checkpoint", checkpoint, "checkpoint to read");
    sub->add_flag("--table2-lr", cli.table2_lr, "use the tabulated 4B stage-1 learning rate");
    if (std::string(name) == "eval" || std::string(name) == "inspect") {
      sub->add_option("checkpoint_file", positional, "checkpoint to read");
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--model")) cli.model = model;
  if (sub->count("--stage")) cli.stage = stage;
  if (sub->count("--seed")) cli.seed = seed;
  if (sub->count("--outdir")) cli.outdir = outdir;
  if (sub->count("--checkpoint")) cli.checkpoint = checkpoint;
  if (!positional.empty()) cli.checkpoint = positional;

  try {
    const RunConfig rc = config_path.empty() ? parse_config_json(nlohmann::json::object(), cli)
                                             : parse_config(config_path, cli);
    const std::string cmd = sub->get_name();
    if (cmd == "train") return cmd_train(rc, err);
    if (cmd == "eval") return cmd_eval(rc, out, err);
    if (cmd == "gradcheck") return cmd_gradcheck(out);
    if (cmd == "inspect") return cmd_inspect(rc, out);
    return cmd_gen_data(rc, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace forge
