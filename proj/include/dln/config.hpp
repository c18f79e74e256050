#pragma once

// Run configuration: one YAML document describing a full experiment
// (task, backend, layer stack, hyperparameters, seeds, optional sweep
// grid).  Parsing is strict: unknown keys and ill-typed values are
// reported with the offending key path so a typo in "hyperparameters"
// does not silently fall back to a default.
//
// Serialization is canonical: every field is emitted, in a fixed order,
// regardless of which keys the source document spelled out.  That makes
// serialize(parse(doc)) a fixed point, which is what the round-trip
// guarantee (and the re-run-from-run-dir guarantee) rests on.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "dln/evalkit.hpp"
#include "dln/http_lm.hpp"
#include "dln/toy_lm.hpp"

namespace dln {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace config_detail {

[[noreturn]] inline void fail(const std::string& key, const std::string& msg) {
  throw ConfigError(key + ": " + msg);
}

inline void require_map(const YAML::Node& node, const std::string& key) {
  if (!node.IsMap()) fail(key, "expected a mapping");
}

// Every typed getter funnels through here so the error message always
// names the full key path.
template <typename T>
T as(const YAML::Node& node, const std::string& key) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    fail(key, "value is missing or has the wrong type");
  }
}

template <typename T>
T get_or(const YAML::Node& map, const std::string& prefix, const std::string& name, T fallback) {
  const YAML::Node child = map[name];
  if (!child) return fallback;
  return as<T>(child, prefix + name);
}

inline void reject_unknown_keys(const YAML::Node& map, const std::string& prefix,
                                std::initializer_list<const char*> allowed) {
  for (const auto& kv : map) {
    const std::string key = kv.first.as<std::string>();
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) { ok = true; break; }
    if (!ok) fail(prefix + key, "unknown key");
  }
}

}  // namespace config_detail

struct TaskConfig {
  std::string path;              // JSONL file, relative paths resolve against the config file
  std::string name;              // defaults to the file stem when empty
  SplitSpec split{0, 0, 0};
  std::uint64_t data_seed = 1;   // shuffle seed used when carving splits
};

struct BackendSelection {
  std::string kind = "toy";      // "toy" | "http"
  ToyLmConfig toy;
  HttpLmConfig http;
  std::size_t max_in_flight = 4; // applies to the toy backend; http has its own field
  double price_per_1k_units = 0.0;
};

struct LayerSpec {
  std::string template_path;
  std::string prompt;            // initial prompt text
  bool residual = false;
};

// Keys match the sweep-axis names used throughout: num_h_samples is K,
// logp_penalty is the exploration coefficient, use_memory is the prompt
// memory capacity (0 disables it), bh_tpl names the proposal template
// variant.
struct Hyperparameters {
  int batch_size = 20;
  int iterations = 20;
  int eval_every = 2;
  int n_candidates = 20;
  int num_h_samples = 5;
  double alpha_sharp = 1.0;
  double logp_penalty = 0.0;
  int tolerance = 2;
  int use_memory = 5;
  bool held_out_prompt_ranking = true;
  std::array<double, 3> posterior_mixture{0.5, 0.5, 0.0};
  double posterior_temperature = 0.7;
  double proposal_temperature = 0.7;
  int max_new_units = 64;
  std::string bh_tpl = "q_action_prompt:v3.5";
  std::vector<std::string> stop_sequences;
};

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;  // raw scalars, parsed per-key when applied
};

struct RunConfig {
  TaskConfig task;
  BackendSelection backend;
  std::vector<LayerSpec> layers;
  Hyperparameters hp;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs";

  std::string templates_dir = "templates";
  // Explicit template paths override the bh_tpl variant lookup.
  std::string proposal_template;     // empty -> resolve from hp.bh_tpl
  std::string y_conditioned_template;
  std::string edit_template;

  std::vector<SweepAxis> sweep;

  // Directory the config file was loaded from; relative paths in the
  // config resolve against it.  Not serialized.
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return fp;
    return base_dir / fp;
  }

  std::size_t depth() const { return layers.size(); }

  void validate() const;
};

namespace config_detail {

inline const std::map<std::string, std::string>& proposal_variants() {
  static const std::map<std::string, std::string> variants = {
      {"q_action_prompt:v3.0", "prompt_proposal_v3_0.yaml"},
      {"q_action_prompt:v3.5", "prompt_proposal_v3_5.yaml"},
  };
  return variants;
}

inline bool parse_bool(const std::string& raw, const std::string& key) {
  if (raw == "true" || raw == "True" || raw == "1") return true;
  if (raw == "false" || raw == "False" || raw == "0") return false;
  fail(key, "expected a boolean, got '" + raw + "'");
}

inline int parse_int(const std::string& raw, const std::string& key) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    fail(key, "expected an integer, got '" + raw + "'");
  }
}

inline double parse_double(const std::string& raw, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    fail(key, "expected a number, got '" + raw + "'");
  }
}

}  // namespace config_detail

// Applies one sweep override to a hyperparameter block.  The axis names
// are the config keys themselves, so a grid written down elsewhere can
// be pasted into the sweep section verbatim.
inline void apply_override(Hyperparameters& hp, const std::string& key, const std::string& raw) {
  using namespace config_detail;
  const std::string ctx = "sweep." + key;
  if (key == "batch_size") hp.batch_size = parse_int(raw, ctx);
  else if (key == "iterations") hp.iterations = parse_int(raw, ctx);
  else if (key == "eval_every") hp.eval_every = parse_int(raw, ctx);
  else if (key == "n_candidates") hp.n_candidates = parse_int(raw, ctx);
  else if (key == "num_h_samples") hp.num_h_samples = parse_int(raw, ctx);
  else if (key == "alpha_sharp") hp.alpha_sharp = parse_double(raw, ctx);
  else if (key == "logp_penalty") hp.logp_penalty = parse_double(raw, ctx);
  else if (key == "tolerance") hp.tolerance = parse_int(raw, ctx);
  else if (key == "use_memory") hp.use_memory = parse_int(raw, ctx);
  else if (key == "held_out_prompt_ranking") hp.held_out_prompt_ranking = parse_bool(raw, ctx);
  else if (key == "posterior_temperature") hp.posterior_temperature = parse_double(raw, ctx);
  else if (key == "proposal_temperature") hp.proposal_temperature = parse_double(raw, ctx);
  else if (key == "max_new_units") hp.max_new_units = parse_int(raw, ctx);
  else if (key == "bh_tpl") hp.bh_tpl = raw;
  else config_detail::fail(ctx, "not a sweepable hyperparameter");
}

inline void RunConfig::validate() const {
  using config_detail::fail;
  if (task.path.empty()) fail("task.path", "required");
  if (layers.empty()) fail("architecture.layers", "at least one layer is required");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].template_path.empty())
      fail("architecture.layers[" + std::to_string(i) + "].template", "required");
  }
  if (backend.kind != "toy" && backend.kind != "http")
    fail("backend.kind", "expected 'toy' or 'http', got '" + backend.kind + "'");

  if (hp.iterations < 1) fail("hyperparameters.iterations", "must be >= 1");
  if (hp.eval_every < 1) fail("hyperparameters.eval_every", "must be >= 1");
  if (hp.n_candidates < 1) fail("hyperparameters.n_candidates", "must be >= 1");
  if (hp.batch_size < 1) fail("hyperparameters.batch_size", "must be >= 1");
  if (hp.held_out_prompt_ranking && hp.batch_size < 2)
    fail("hyperparameters.batch_size", "must be >= 2 when held_out_prompt_ranking is enabled");
  if (layers.size() >= 2 && hp.num_h_samples < 1)
    fail("hyperparameters.num_h_samples", "must be >= 1 for stacks with two or more layers");
  if (hp.alpha_sharp < 0.0) fail("hyperparameters.alpha_sharp", "must be >= 0");
  if (hp.logp_penalty < 0.0) fail("hyperparameters.logp_penalty", "must be >= 0");
  if (hp.use_memory < 0) fail("hyperparameters.use_memory", "must be >= 0");
  if (hp.max_new_units < 1) fail("hyperparameters.max_new_units", "must be >= 1");
  if (hp.proposal_temperature < 0.0) fail("hyperparameters.proposal_temperature", "must be >= 0");
  if (hp.posterior_temperature < 0.0) fail("hyperparameters.posterior_temperature", "must be >= 0");

  double mix_sum = 0.0;
  for (double w : hp.posterior_mixture) {
    if (w < 0.0) fail("hyperparameters.posterior_mixture", "weights must be >= 0");
    mix_sum += w;
  }
  if (std::abs(mix_sum - 1.0) > 1e-9)
    fail("hyperparameters.posterior_mixture", "weights must sum to 1");
  if (layers.size() >= 2) {
    if (hp.posterior_mixture[1] > 0.0 && y_conditioned_template.empty())
      fail("architecture.y_conditioned_template",
           "required when posterior_mixture[1] > 0 and the stack has hidden layers");
    if (hp.posterior_mixture[2] > 0.0 && edit_template.empty())
      fail("architecture.edit_template",
           "required when posterior_mixture[2] > 0 and the stack has hidden layers");
  }

  if (proposal_template.empty() &&
      !config_detail::proposal_variants().count(hp.bh_tpl))
    fail("hyperparameters.bh_tpl", "unknown proposal template variant '" + hp.bh_tpl + "'");

  if (seeds.empty()) fail("seeds", "at least one seed is required");

  for (const auto& axis : sweep) {
    if (axis.values.empty()) fail("sweep." + axis.key, "empty value list");
    Hyperparameters probe = hp;
    for (const auto& v : axis.values) apply_override(probe, axis.key, v);
  }
}

// Path of the proposal template for this config: an explicit
// architecture.proposal_template wins, otherwise the bh_tpl variant is
// looked up under templates_dir.
inline std::filesystem::path proposal_template_path(const RunConfig& cfg) {
  if (!cfg.proposal_template.empty()) return cfg.resolve(cfg.proposal_template);
  const auto& variants = config_detail::proposal_variants();
  auto it = variants.find(cfg.hp.bh_tpl);
  if (it == variants.end())
    config_detail::fail("hyperparameters.bh_tpl",
                        "unknown proposal template variant '" + cfg.hp.bh_tpl + "'");
  return cfg.resolve(cfg.templates_dir) / it->second;
}

inline RunConfig parse_config(const std::string& text,
                              const std::filesystem::path& base_dir = ".") {
  using namespace config_detail;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  require_map(root, "config");
  reject_unknown_keys(root, "", {"task", "backend", "architecture", "hyperparameters",
                                 "seeds", "output_dir", "sweep"});

  RunConfig cfg;
  cfg.base_dir = base_dir;

  {
    const YAML::Node task = root["task"];
    if (!task) fail("task", "required section");
    require_map(task, "task");
    reject_unknown_keys(task, "task.", {"path", "name", "split", "data_seed"});
    cfg.task.path = as<std::string>(task["path"], "task.path");
    cfg.task.name = get_or<std::string>(task, "task.", "name", "");
    cfg.task.data_seed = get_or<std::uint64_t>(task, "task.", "data_seed", 1);
    const YAML::Node split = task["split"];
    if (!split) fail("task.split", "required (train/valid/test sizes)");
    require_map(split, "task.split");
    reject_unknown_keys(split, "task.split.", {"train", "valid", "test"});
    cfg.task.split.train = as<std::size_t>(split["train"], "task.split.train");
    cfg.task.split.valid = as<std::size_t>(split["valid"], "task.split.valid");
    cfg.task.split.test = get_or<std::size_t>(split, "task.split.", "test", 0);
  }

  if (const YAML::Node backend = root["backend"]) {
    require_map(backend, "backend");
    reject_unknown_keys(backend, "backend.",
                        {"kind", "toy", "http", "max_in_flight", "price_per_1k_units"});
    cfg.backend.kind = get_or<std::string>(backend, "backend.", "kind", "toy");
    cfg.backend.max_in_flight = get_or<std::size_t>(backend, "backend.", "max_in_flight", 4);
    cfg.backend.price_per_1k_units =
        get_or<double>(backend, "backend.", "price_per_1k_units", 0.0);
    if (const YAML::Node toy = backend["toy"]) {
      require_map(toy, "backend.toy");
      reject_unknown_keys(toy, "backend.toy.",
                          {"seed", "vocabulary", "order", "max_units", "peakedness", "eos_bias"});
      cfg.backend.toy.seed = get_or<std::uint64_t>(toy, "backend.toy.", "seed", 1);
      if (const YAML::Node vocab = toy["vocabulary"])
        cfg.backend.toy.vocab = as<std::vector<std::string>>(vocab, "backend.toy.vocabulary");
      cfg.backend.toy.order =
          get_or<std::size_t>(toy, "backend.toy.", "order", cfg.backend.toy.order);
      cfg.backend.toy.max_units =
          get_or<std::size_t>(toy, "backend.toy.", "max_units", cfg.backend.toy.max_units);
      cfg.backend.toy.peakedness =
          get_or<double>(toy, "backend.toy.", "peakedness", cfg.backend.toy.peakedness);
      cfg.backend.toy.eos_bias =
          get_or<double>(toy, "backend.toy.", "eos_bias", cfg.backend.toy.eos_bias);
    }
    if (const YAML::Node http = backend["http"]) {
      require_map(http, "backend.http");
      reject_unknown_keys(http, "backend.http.",
                          {"base_url", "path", "model", "api_key_env", "max_attempts",
                           "backoff_ms", "timeout_seconds", "max_in_flight",
                           "price_per_1k_units"});
      auto& h = cfg.backend.http;
      h.base_url = get_or<std::string>(http, "backend.http.", "base_url", h.base_url);
      h.path = get_or<std::string>(http, "backend.http.", "path", h.path);
      h.model = get_or<std::string>(http, "backend.http.", "model", h.model);
      h.api_key_env = get_or<std::string>(http, "backend.http.", "api_key_env", h.api_key_env);
      h.max_attempts = get_or<int>(http, "backend.http.", "max_attempts", h.max_attempts);
      h.backoff_ms = get_or<int>(http, "backend.http.", "backoff_ms", h.backoff_ms);
      h.timeout_seconds =
          get_or<double>(http, "backend.http.", "timeout_seconds", h.timeout_seconds);
      h.max_in_flight = get_or<std::size_t>(http, "backend.http.", "max_in_flight", h.max_in_flight);
      h.price_per_1k_units =
          get_or<double>(http, "backend.http.", "price_per_1k_units", h.price_per_1k_units);
    }
  }

  {
    const YAML::Node arch = root["architecture"];
    if (!arch) fail("architecture", "required section");
    require_map(arch, "architecture");
    reject_unknown_keys(arch, "architecture.",
                        {"layers", "templates_dir", "proposal_template",
                         "y_conditioned_template", "edit_template"});
    const YAML::Node layers = arch["layers"];
    if (!layers || !layers.IsSequence() || layers.size() == 0)
      fail("architecture.layers", "expected a non-empty sequence");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "architecture.layers[" + std::to_string(i) + "].";
      const YAML::Node ln = layers[i];
      require_map(ln, "architecture.layers[" + std::to_string(i) + "]");
      reject_unknown_keys(ln, prefix, {"template", "prompt", "residual"});
      LayerSpec spec;
      spec.template_path = as<std::string>(ln["template"], prefix + "template");
      spec.prompt = get_or<std::string>(ln, prefix, "prompt", "");
      spec.residual = get_or<bool>(ln, prefix, "residual", false);
      cfg.layers.push_back(std::move(spec));
    }
    cfg.templates_dir =
        get_or<std::string>(arch, "architecture.", "templates_dir", cfg.templates_dir);
    cfg.proposal_template =
        get_or<std::string>(arch, "architecture.", "proposal_template", "");
    cfg.y_conditioned_template =
        get_or<std::string>(arch, "architecture.", "y_conditioned_template", "");
    cfg.edit_template = get_or<std::string>(arch, "architecture.", "edit_template", "");
  }

  if (const YAML::Node hp = root["hyperparameters"]) {
    require_map(hp, "hyperparameters");
    reject_unknown_keys(hp, "hyperparameters.",
                        {"batch_size", "iterations", "eval_every", "n_candidates",
                         "num_h_samples", "alpha_sharp", "logp_penalty", "tolerance",
                         "use_memory", "held_out_prompt_ranking", "posterior_mixture",
                         "posterior_temperature", "proposal_temperature", "max_new_units",
                         "bh_tpl", "stop_sequences"});
    auto& h = cfg.hp;
    h.batch_size = get_or<int>(hp, "hyperparameters.", "batch_size", h.batch_size);
    h.iterations = get_or<int>(hp, "hyperparameters.", "iterations", h.iterations);
    h.eval_every = get_or<int>(hp, "hyperparameters.", "eval_every", h.eval_every);
    h.n_candidates = get_or<int>(hp, "hyperparameters.", "n_candidates", h.n_candidates);
    h.num_h_samples = get_or<int>(hp, "hyperparameters.", "num_h_samples", h.num_h_samples);
    h.alpha_sharp = get_or<double>(hp, "hyperparameters.", "alpha_sharp", h.alpha_sharp);
    h.logp_penalty = get_or<double>(hp, "hyperparameters.", "logp_penalty", h.logp_penalty);
    h.tolerance = get_or<int>(hp, "hyperparameters.", "tolerance", h.tolerance);
    h.use_memory = get_or<int>(hp, "hyperparameters.", "use_memory", h.use_memory);
    h.held_out_prompt_ranking = get_or<bool>(hp, "hyperparameters.", "held_out_prompt_ranking",
                                             h.held_out_prompt_ranking);
    if (const YAML::Node mix = hp["posterior_mixture"]) {
      if (!mix.IsSequence() || mix.size() != 3)
        fail("hyperparameters.posterior_mixture", "expected exactly three weights");
      for (std::size_t i = 0; i < 3; ++i)
        h.posterior_mixture[i] = as<double>(mix[i], "hyperparameters.posterior_mixture");
    }
    h.posterior_temperature =
        get_or<double>(hp, "hyperparameters.", "posterior_temperature", h.posterior_temperature);
    h.proposal_temperature =
        get_or<double>(hp, "hyperparameters.", "proposal_temperature", h.proposal_temperature);
    h.max_new_units = get_or<int>(hp, "hyperparameters.", "max_new_units", h.max_new_units);
    h.bh_tpl = get_or<std::string>(hp, "hyperparameters.", "bh_tpl", h.bh_tpl);
    if (const YAML::Node stops = hp["stop_sequences"])
      h.stop_sequences =
          as<std::vector<std::string>>(stops, "hyperparameters.stop_sequences");
  }

  if (const YAML::Node seeds = root["seeds"]) {
    if (!seeds.IsSequence()) fail("seeds", "expected a sequence of integers");
    cfg.seeds = as<std::vector<std::uint64_t>>(seeds, "seeds");
  }
  cfg.output_dir = get_or<std::string>(root, "", "output_dir", cfg.output_dir);

  if (const YAML::Node sweep = root["sweep"]) {
    require_map(sweep, "sweep");
    for (const auto& kv : sweep) {
      SweepAxis axis;
      axis.key = kv.first.as<std::string>();
      const YAML::Node values = kv.second;
      if (!values.IsSequence() || values.size() == 0)
        fail("sweep." + axis.key, "expected a non-empty sequence of values");
      for (const auto& v : values)
        axis.values.push_back(as<std::string>(v, "sweep." + axis.key));
      cfg.sweep.push_back(std::move(axis));
    }
  }

  // Paths are pinned down at parse time so the canonical copy written
  // into a run directory stays loadable from there (re-running a stored
  // config must reproduce the run regardless of where it was moved to).
  auto absolutize = [&cfg](std::string& s) {
    if (s.empty()) return;
    s = std::filesystem::absolute(cfg.resolve(s)).lexically_normal().generic_string();
  };
  absolutize(cfg.task.path);
  for (auto& layer : cfg.layers) absolutize(layer.template_path);
  absolutize(cfg.templates_dir);
  absolutize(cfg.proposal_template);
  absolutize(cfg.y_conditioned_template);
  absolutize(cfg.edit_template);
  absolutize(cfg.output_dir);

  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const auto parent = path.parent_path();
  return parse_config(buf.str(), parent.empty() ? "." : parent);
}

// Canonical form: every field, fixed order.  Sweep axes keep document
// order so setting indices stay stable across save/load.
inline std::string serialize_config(const RunConfig& cfg) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "path" << YAML::Value << cfg.task.path;
  out << YAML::Key << "name" << YAML::Value << cfg.task.name;
  out << YAML::Key << "split" << YAML::Value << YAML::Flow << YAML::BeginMap;
  out << YAML::Key << "train" << YAML::Value << cfg.task.split.train;
  out << YAML::Key << "valid" << YAML::Value << cfg.task.split.valid;
  out << YAML::Key << "test" << YAML::Value << cfg.task.split.test;
  out << YAML::EndMap;
  out << YAML::Key << "data_seed" << YAML::Value << cfg.task.data_seed;
  out << YAML::EndMap;

  out << YAML::Key << "backend" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << cfg.backend.kind;
  out << YAML::Key << "max_in_flight" << YAML::Value << cfg.backend.max_in_flight;
  out << YAML::Key << "price_per_1k_units" << YAML::Value << cfg.backend.price_per_1k_units;
  out << YAML::Key << "toy" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << cfg.backend.toy.seed;
  out << YAML::Key << "vocabulary" << YAML::Value << YAML::Flow << cfg.backend.toy.vocab;
  out << YAML::Key << "order" << YAML::Value << cfg.backend.toy.order;
  out << YAML::Key << "max_units" << YAML::Value << cfg.backend.toy.max_units;
  out << YAML::Key << "peakedness" << YAML::Value << cfg.backend.toy.peakedness;
  out << YAML::Key << "eos_bias" << YAML::Value << cfg.backend.toy.eos_bias;
  out << YAML::EndMap;
  out << YAML::Key << "http" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "base_url" << YAML::Value << cfg.backend.http.base_url;
  out << YAML::Key << "path" << YAML::Value << cfg.backend.http.path;
  out << YAML::Key << "model" << YAML::Value << cfg.backend.http.model;
  out << YAML::Key << "api_key_env" << YAML::Value << cfg.backend.http.api_key_env;
  out << YAML::Key << "max_attempts" << YAML::Value << cfg.backend.http.max_attempts;
  out << YAML::Key << "backoff_ms" << YAML::Value << cfg.backend.http.backoff_ms;
  out << YAML::Key << "timeout_seconds" << YAML::Value << cfg.backend.http.timeout_seconds;
  out << YAML::Key << "max_in_flight" << YAML::Value << cfg.backend.http.max_in_flight;
  out << YAML::Key << "price_per_1k_units" << YAML::Value
      << cfg.backend.http.price_per_1k_units;
  out << YAML::EndMap;
  out << YAML::EndMap;

  out << YAML::Key << "architecture" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "layers" << YAML::Value << YAML::BeginSeq;
  for (const auto& layer : cfg.layers) {
    out << YAML::BeginMap;
    out << YAML::Key << "template" << YAML::Value << layer.template_path;
    out << YAML::Key << "prompt" << YAML::Value << layer.prompt;
    out << YAML::Key << "residual" << YAML::Value << layer.residual;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "templates_dir" << YAML::Value << cfg.templates_dir;
  out << YAML::Key << "proposal_template" << YAML::Value << cfg.proposal_template;
  out << YAML::Key << "y_conditioned_template" << YAML::Value << cfg.y_conditioned_template;
  out << YAML::Key << "edit_template" << YAML::Value << cfg.edit_template;
  out << YAML::EndMap;

  out << YAML::Key << "hyperparameters" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "batch_size" << YAML::Value << cfg.hp.batch_size;
  out << YAML::Key << "iterations" << YAML::Value << cfg.hp.iterations;
  out << YAML::Key << "eval_every" << YAML::Value << cfg.hp.eval_every;
  out << YAML::Key << "n_candidates" << YAML::Value << cfg.hp.n_candidates;
  out << YAML::Key << "num_h_samples" << YAML::Value << cfg.hp.num_h_samples;
  out << YAML::Key << "alpha_sharp" << YAML::Value << cfg.hp.alpha_sharp;
  out << YAML::Key << "logp_penalty" << YAML::Value << cfg.hp.logp_penalty;
  out << YAML::Key << "tolerance" << YAML::Value << cfg.hp.tolerance;
  out << YAML::Key << "use_memory" << YAML::Value << cfg.hp.use_memory;
  out << YAML::Key << "held_out_prompt_ranking" << YAML::Value
      << cfg.hp.held_out_prompt_ranking;
  out << YAML::Key << "posterior_mixture" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double w : cfg.hp.posterior_mixture) out << w;
  out << YAML::EndSeq;
  out << YAML::Key << "posterior_temperature" << YAML::Value << cfg.hp.posterior_temperature;
  out << YAML::Key << "proposal_temperature" << YAML::Value << cfg.hp.proposal_temperature;
  out << YAML::Key << "max_new_units" << YAML::Value << cfg.hp.max_new_units;
  out << YAML::Key << "bh_tpl" << YAML::Value << cfg.hp.bh_tpl;
  out << YAML::Key << "stop_sequences" << YAML::Value << YAML::Flow << cfg.hp.stop_sequences;
  out << YAML::EndMap;

  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.seeds;
  out << YAML::Key << "output_dir" << YAML::Value << cfg.output_dir;

  if (!cfg.sweep.empty()) {
    out << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
    for (const auto& axis : cfg.sweep)
      out << YAML::Key << axis.key << YAML::Value << YAML::Flow << axis.values;
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// One sweep setting: the key/value overrides that produce it, in axis
// order with the last axis varying fastest.
struct SweepSetting {
  std::vector<std::pair<std::string, std::string>> overrides;

  Hyperparameters apply(const Hyperparameters& base) const {
    Hyperparameters hp = base;
    for (const auto& [key, value] : overrides) apply_override(hp, key, value);
    return hp;
  }
};

inline std::vector<SweepSetting> sweep_settings(const RunConfig& cfg) {
  std::vector<SweepSetting> settings{SweepSetting{}};
  for (const auto& axis : cfg.sweep) {
    std::vector<SweepSetting> next;
    next.reserve(settings.size() * axis.values.size());
    for (const auto& partial : settings) {
      for (const auto& value : axis.values) {
        SweepSetting s = partial;
        s.overrides.emplace_back(axis.key, value);
        next.push_back(std::move(s));
      }
    }
    settings = std::move(next);
  }
  return settings;
}

}  // namespace dln
