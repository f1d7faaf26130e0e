#pragma once

// Run configuration: strict JSON parsing with key-path errors, defaults from
// presets and stage tables, and a resolved form that round-trips.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/stage.hpp"

namespace forge {

struct DataConfig {
  std::size_t n_glyphs = 3;
  std::size_t per_line = 4;
  std::size_t min_scale = 2;
  std::size_t max_scale = 2;
  std::size_t jitter = 4;
  int background = 235;
  int max_ink = 90;
  std::size_t heldout_samples = 512;  // glyph samples scored by eval
  std::size_t eval_tokens = 8192;     // Markov tokens scored by eval
  std::size_t gen_count = 32;         // samples written by gen-data

  bool operator==(const DataConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataConfig, n_glyphs, per_line, min_scale, max_scale, jitter,
                                   background, max_ink, heldout_samples, eval_tokens, gen_count)

inline GlyphParams glyph_params(const DataConfig& d, const ModelConfig& m) {
  GlyphParams g;
  g.image_size = m.image_size;
  g.n_glyphs = d.n_glyphs;
  g.glyph_set_size = std::min<std::size_t>(kGlyphFont.size(), m.vocab_size - SpecialTokens::count);
  g.per_line = d.per_line;
  g.min_scale = d.min_scale;
  g.max_scale = d.max_scale;
  g.jitter = d.jitter;
  g.background = static_cast<std::uint8_t>(d.background);
  g.max_ink = static_cast<std::uint8_t>(d.max_ink);
  return g;
}

struct RunConfig {
  std::string model = "toy";
  ModelConfig model_cfg = preset("toy");
  std::vector<int> stages{1, 2, 3};
  std::map<int, StageConfig> stage_cfgs;
  std::uint64_t seed = 0;
  DataConfig data;
  std::string outdir = "out";
  std::string checkpoint;  // input checkpoint for eval, inspect, or to start training from
  bool table2_lr = false;

  bool operator==(const RunConfig&) const = default;
};

/// Command-line values; each one, when present, overrides the file.
struct CliOverrides {
  std::optional<std::string> model;
  std::optional<int> stage;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> outdir;
  std::optional<std::string> checkpoint;
  bool table2_lr = false;
};

namespace detail {

/// Applies the keys of `patch` onto the JSON form of `base`, rejecting
/// unknown keys and ill-typed values with the key path in the message.
template <class S>
S merge_strict(const S& base, const nlohmann::json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError(path + ": expected an object");
  nlohmann::json merged = base;
  for (const auto& [key, value] : patch.items()) {
    if (!merged.contains(key)) throw ConfigError(path + "." + key + ": unknown key");
    nlohmann::json trial = merged;
    trial[key] = value;
    try {
      (void)trial.get<S>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + "." + key + ": invalid value (" + e.what() + ")");
    }
    merged = std::move(trial);
  }
  return merged.get<S>();
}

template <class V>
V get_as(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": invalid value (" + e.what() + ")");
  }
}

}  // namespace detail

inline RunConfig parse_config_json(const nlohmann::json& doc, const CliOverrides& cli = {}) {
  static const std::vector<std::string> kKeys{"model", "model_cfg", "stages", "stage_cfg",
                                              "stage_cfgs", "seed", "data", "outdir",
                                              "checkpoint", "table2_lr"};
  if (!doc.is_object()) throw ConfigError("config: top level must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ConfigError(key + ": unknown key");
    }
  }
  RunConfig rc;
  if (doc.contains("model")) rc.model = detail::get_as<std::string>(doc["model"], "model");
  if (cli.model) rc.model = *cli.model;
  if (rc.model != "1b" && rc.model != "4b" && rc.model != "toy" && rc.model != "micro") {
    throw ConfigError("model: unknown variant \"" + rc.model + "\"");
  }
  rc.model_cfg = preset(rc.model);
  if (doc.contains("model_cfg")) rc.model_cfg = detail::merge_strict(rc.model_cfg, doc["model_cfg"], "model_cfg");
  try {
    rc.model_cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model_cfg.") + e.what());
  }

  if (doc.contains("stages")) {
    rc.stages = detail::get_as<std::vector<int>>(doc["stages"], "stages");
  }
  if (cli.stage) rc.stages = {*cli.stage};
  if (rc.stages.empty()) throw ConfigError("stages: must name at least one stage");
  for (int s : rc.stages) {
    if (s < 1 || s > 3) throw ConfigError("stages: stage " + std::to_string(s) + " is not 1, 2 or 3");
  }

  if (doc.contains("seed")) rc.seed = detail::get_as<std::uint64_t>(doc["seed"], "seed");
  if (cli.seed) rc.seed = *cli.seed;
  if (doc.contains("table2_lr")) rc.table2_lr = detail::get_as<bool>(doc["table2_lr"], "table2_lr");
  rc.table2_lr = rc.table2_lr || cli.table2_lr;
  if (doc.contains("outdir")) rc.outdir = detail::get_as<std::string>(doc["outdir"], "outdir");
  if (cli.outdir) rc.outdir = *cli.outdir;
  if (doc.contains("checkpoint")) rc.checkpoint = detail::get_as<std::string>(doc["checkpoint"], "checkpoint");
  if (cli.checkpoint) rc.checkpoint = *cli.checkpoint;
  if (doc.contains("data")) rc.data = detail::merge_strict(rc.data, doc["data"], "data");

  nlohmann::json per_stage = nlohmann::json::object();
  if (doc.contains("stage_cfgs")) {
    per_stage = doc["stage_cfgs"];
    if (!per_stage.is_object()) throw ConfigError("stage_cfgs: expected an object keyed by stage");
    for (const auto& [key, _] : per_stage.items()) {
      if (key != "1" && key != "2" && key != "3") throw ConfigError("stage_cfgs." + key + ": unknown stage");
    }
  }
  for (int s : rc.stages) {
    StageConfig sc = stage_defaults(rc.model, s, rc.table2_lr);
    std::string path = "stage_cfg";
    if (doc.contains("stage_cfg")) sc = detail::merge_strict(sc, doc["stage_cfg"], "stage_cfg");
    const std::string key = std::to_string(s);
    if (per_stage.contains(key)) {
      path = "stage_cfgs." + key;
      sc = detail::merge_strict(sc, per_stage[key], path);
    }
    if (sc.stage != s) throw ConfigError(path + ".stage: must equal " + key);
    sc.validate(path);
    rc.stage_cfgs[s] = sc;
  }
  return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [s, sc] : rc.stage_cfgs) stages[std::to_string(s)] = sc;
  return {{"model", rc.model},       {"model_cfg", rc.model_cfg}, {"stages", rc.stages},
          {"stage_cfgs", stages},    {"seed", rc.seed},           {"data", rc.data},
          {"outdir", rc.outdir},     {"checkpoint", rc.checkpoint},
          {"table2_lr", rc.table2_lr}};
}

inline std::string serialize_config(const RunConfig& rc) { return to_json(rc).dump(2) + "\n"; }

inline RunConfig parse_config_text(const std::string& text, const CliOverrides& cli = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON (") + e.what() + ")");
  }
  return parse_config_json(doc, cli);
}

inline RunConfig parse_config(const std::filesystem::path& path, const CliOverrides& cli = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), cli);
}

}  // namespace forge
