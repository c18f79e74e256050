#pragma once

// Experiment runner: turns a RunConfig into run directories, aggregates,
// and reports. One training run per seed, each with its own backend (so
// the per-seed token ledgers stay independent), selection on validation,
// test accuracy reported for the selected prompts.
//
// Run directory layout:
//   config.yaml          canonical copy; re-running it reproduces the run
//   seed-<s>/checkpoints.jsonl   one JSON document per evaluation event
//   seed-<s>/result.json         final state + per-seed ledger
//   aggregate.json       mean and 95% CI over seeds (validation and test)
//   ledger.json          unit/call totals summed across seeds, with cost

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "dln/config.hpp"
#include "dln/dln1.hpp"
#include "dln/dln2.hpp"
#include "dln/evalkit.hpp"
#include "dln/http_lm.hpp"
#include "dln/toy_lm.hpp"

namespace dln {
namespace runner {

namespace fs = std::filesystem;
using nlohmann::json;

struct Interval {
  double mean = 0.0;
  double ci95_half_width = 0.0;  // 0 when fewer than two values
  std::vector<double> values;
};

// Two-sided 95% confidence interval for the mean, using the t
// distribution with n-1 degrees of freedom over the per-seed values.
inline Interval mean_ci95(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("mean_ci95: no values");
  Interval out;
  out.values = std::move(values);
  double sum = 0.0;
  for (double v : out.values) sum += v;
  const double n = static_cast<double>(out.values.size());
  out.mean = sum / n;
  if (out.values.size() >= 2) {
    double ss = 0.0;
    for (double v : out.values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    boost::math::students_t dist(n - 1.0);
    out.ci95_half_width = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
  }
  return out;
}

inline json interval_json(const Interval& iv) {
  return json{{"mean", iv.mean},
              {"ci95_half_width", iv.ci95_half_width},
              {"values", iv.values}};
}

inline std::unique_ptr<LmBackend> make_backend(const RunConfig& cfg) {
  if (cfg.backend.kind == "toy") {
    auto lm = std::make_unique<ToyLm>(cfg.backend.toy);
    lm->set_max_in_flight(cfg.backend.max_in_flight);
    return lm;
  }
  if (cfg.backend.kind == "http") return std::make_unique<HttpLm>(cfg.backend.http);
  throw ConfigError("backend.kind: expected 'toy' or 'http', got '" +
                    cfg.backend.kind + "'");
}

// Price used for cost estimates: the top-level backend price, falling
// back to the http-specific one when the former is unset.
inline double effective_price(const RunConfig& cfg) {
  if (cfg.backend.price_per_1k_units != 0.0) return cfg.backend.price_per_1k_units;
  if (cfg.backend.kind == "http") return cfg.backend.http.price_per_1k_units;
  return 0.0;
}

inline LayerStack make_stack(const RunConfig& cfg) {
  LayerStack stack;
  for (const auto& spec : cfg.layers) {
    Layer layer;
    layer.prompt = Prompt{spec.prompt, PromptOrigin::initialization, 0, std::nullopt};
    layer.forward_template = Template::load_file(cfg.resolve(spec.template_path));
    layer.residual = spec.residual;
    stack.layers.push_back(std::move(layer));
  }
  stack.validate();
  return stack;
}

inline PosteriorConfig make_posterior_config(const RunConfig& cfg) {
  PosteriorConfig pcfg;
  pcfg.k_samples = cfg.hp.num_h_samples;
  pcfg.mixture = cfg.hp.posterior_mixture;
  pcfg.alpha_sharp = cfg.hp.alpha_sharp;
  pcfg.temperature = cfg.hp.posterior_temperature;
  pcfg.max_new_units = cfg.hp.max_new_units;
  if (!cfg.y_conditioned_template.empty())
    pcfg.y_conditioned_tpl = Template::load_file(cfg.resolve(cfg.y_conditioned_template));
  if (!cfg.edit_template.empty())
    pcfg.edit_tpl = Template::load_file(cfg.resolve(cfg.edit_template));
  pcfg.validate();
  return pcfg;
}

inline TrainerOptions make_trainer_options(
    const RunConfig& cfg, std::uint64_t seed,
    std::function<void(const json&)> sink = nullptr) {
  TrainerOptions opt;
  opt.iterations = cfg.hp.iterations;
  opt.batch_size = cfg.hp.batch_size;
  opt.eval_every = cfg.hp.eval_every;
  opt.n_candidates = cfg.hp.n_candidates;
  opt.logp_penalty = cfg.hp.logp_penalty;
  opt.tolerance = cfg.hp.tolerance;
  opt.memory_capacity = static_cast<std::size_t>(cfg.hp.use_memory);
  opt.held_out_prompt_ranking = cfg.hp.held_out_prompt_ranking;
  opt.proposal_temperature = cfg.hp.proposal_temperature;
  opt.max_new_units = cfg.hp.max_new_units;
  opt.stop_sequences = cfg.hp.stop_sequences;
  opt.seed = seed;
  opt.checkpoint_sink = std::move(sink);
  return opt;
}

namespace detail {

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

inline void write_json(const fs::path& path, const json& doc) {
  write_file(path, doc.dump(2) + "\n");
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing file: " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("unparseable JSON: " + path.string());
  return doc;
}

struct LedgerTotals {
  std::uint64_t prompt_units = 0;
  std::uint64_t completion_units = 0;
  std::uint64_t calls = 0;

  void add(const TokenLedger& ledger) {
    prompt_units += ledger.prompt_units();
    completion_units += ledger.completion_units();
    calls += ledger.call_count();
  }
};

inline json ledger_json(const LedgerTotals& t, double price) {
  const std::uint64_t total = t.prompt_units + t.completion_units;
  return json{{"prompt_units", t.prompt_units},
              {"completion_units", t.completion_units},
              {"total_units", total},
              {"calls", t.calls},
              {"price_per_1k_units", price},
              {"estimated_cost", static_cast<double>(total) / 1000.0 * price}};
}

inline json ledger_json(const TokenLedger& ledger, double price) {
  LedgerTotals t;
  t.add(ledger);
  return ledger_json(t, price);
}

// Temperature-0 predictions for a split, with the given prompt texts
// swapped into the architecture.
inline std::vector<std::string> predict(const RunConfig& cfg, LmBackend& lm,
                                        LayerStack stack,
                                        const std::vector<Prompt>& prompts,
                                        const std::vector<std::string>& inputs) {
  if (prompts.size() != stack.depth())
    throw std::invalid_argument("predict: prompt count != stack depth");
  for (std::size_t l = 0; l < stack.depth(); ++l) stack.layers[l].prompt = prompts[l];
  if (stack.depth() == 1)
    return dln1::batch_infer(inputs, stack.layers[0].prompt, lm,
                             stack.layers[0].forward_template,
                             cfg.hp.max_new_units, cfg.hp.stop_sequences);
  auto chains = dln2::batch_forward_chains(inputs, stack, lm, cfg.hp.max_new_units,
                                           cfg.hp.stop_sequences);
  std::vector<std::string> preds;
  preds.reserve(chains.size());
  for (auto& c : chains) preds.push_back(c.back());
  return preds;
}

inline json seed_result_json(std::uint64_t seed, const TrainState& st,
                             const json& test_accuracy, const TokenLedger& ledger,
                             double price) {
  json prompts = json::array();
  for (const auto& p : st.prompts) prompts.push_back(prompt_json(p));
  json best = json::array();
  for (const auto& p : st.best_prompts) best.push_back(prompt_json(p));
  json history = json::array();
  for (const auto& [it, acc] : st.val_history) history.push_back({it, acc});
  return json{{"seed", seed},
              {"iterations_completed", st.iteration},
              {"prompts", prompts},
              {"best_prompts", best},
              {"best_val_accuracy", st.best_val_accuracy},
              {"val_history", history},
              {"test_accuracy", test_accuracy},
              {"ledger", ledger_json(ledger, price)}};
}

}  // namespace detail

/// Trains cfg once per seed into run_dir and returns the aggregate
/// document (also written to run_dir/aggregate.json).
inline json run_train(const RunConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  const auto data = load_dataset(cfg.resolve(cfg.task.path), cfg.task.split,
                                 cfg.task.data_seed, cfg.task.name);
  const double price = effective_price(cfg);
  const Template proposal_tpl = Template::load_file(proposal_template_path(cfg));

  fs::create_directories(run_dir);
  detail::write_file(run_dir / "config.yaml", serialize_config(cfg));

  detail::LedgerTotals totals;
  std::vector<double> val_scores, test_scores;
  bool have_test = !data.test.empty();

  for (std::uint64_t seed : cfg.seeds) {
    const fs::path seed_dir = run_dir / ("seed-" + std::to_string(seed));
    fs::create_directories(seed_dir);
    auto ckpt_out = std::make_shared<std::ofstream>(seed_dir / "checkpoints.jsonl");
    if (!*ckpt_out)
      throw std::runtime_error("cannot write " + (seed_dir / "checkpoints.jsonl").string());
    auto sink = [ckpt_out](const json& doc) { *ckpt_out << doc.dump() << "\n" << std::flush; };

    auto lm = make_backend(cfg);
    auto stack = make_stack(cfg);
    const TrainerOptions opt = make_trainer_options(cfg, seed, sink);

    TrainState st;
    if (stack.depth() == 1) {
      st = dln1::train(data, *lm, stack.layers[0].forward_template, proposal_tpl,
                       stack.layers[0].prompt, opt);
    } else {
      const auto pcfg = make_posterior_config(cfg);
      // The 2-layer residual architecture gets the dedicated two-layer
      // step; everything else goes through the generalized sweeps.
      if (stack.depth() == 2 && stack.layers.back().residual)
        st = dln2::train(data, *lm, stack, proposal_tpl, pcfg, opt);
      else
        st = dln2::train_multi(data, *lm, stack, proposal_tpl, pcfg, opt);
    }

    json test_acc = nullptr;
    if (have_test) {
      std::vector<std::string> inputs;
      std::vector<std::string> golds;
      for (const auto& ex : data.test) {
        inputs.push_back(ex.input);
        golds.push_back(ex.target);
      }
      auto preds = detail::predict(cfg, *lm, stack, st.best_prompts, inputs);
      const double acc = accuracy(preds, golds);
      test_acc = acc;
      test_scores.push_back(acc);
    }
    val_scores.push_back(st.best_val_accuracy);
    totals.add(lm->ledger());

    detail::write_json(seed_dir / "result.json",
                       detail::seed_result_json(seed, st, test_acc, lm->ledger(), price));
  }

  json aggregate{{"task", data.task_name},
                 {"depth", cfg.layers.size()},
                 {"seeds", cfg.seeds},
                 {"validation", interval_json(mean_ci95(val_scores))},
                 {"test", have_test ? interval_json(mean_ci95(test_scores)) : json(nullptr)}};
  detail::write_json(run_dir / "aggregate.json", aggregate);
  detail::write_json(run_dir / "ledger.json", detail::ledger_json(totals, price));
  return aggregate;
}

/// Cartesian-product sweep: one cmd_train per setting, selection by mean
/// validation accuracy (ties to the lowest setting index). Returns the
/// sweep document (also written to sweep_dir/sweep.json).
inline json run_sweep(const RunConfig& cfg, const fs::path& sweep_dir) {
  cfg.validate();
  const auto settings = sweep_settings(cfg);
  fs::create_directories(sweep_dir);

  json rows = json::array();
  std::size_t best_index = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < settings.size(); ++i) {
    RunConfig sub = cfg;
    sub.hp = settings[i].apply(cfg.hp);
    sub.sweep.clear();
    sub.validate();

    std::ostringstream name;
    name << "setting-" << std::setw(3) << std::setfill('0') << i;
    const fs::path dir = sweep_dir / name.str();
    const json aggregate = run_train(sub, dir);

    json overrides = json::object();
    for (const auto& [key, value] : settings[i].overrides) overrides[key] = value;
    const double val_mean = aggregate.at("validation").at("mean").get<double>();
    rows.push_back(json{{"index", i},
                        {"dir", name.str()},
                        {"overrides", overrides},
                        {"validation", aggregate.at("validation")},
                        {"test", aggregate.at("test")}});
    if (val_mean > best_val) {
      best_val = val_mean;
      best_index = i;
    }
  }

  json doc{{"settings", rows},
           {"best_index", best_index},
           {"best_overrides", rows[best_index].at("overrides")},
           {"best_validation", rows[best_index].at("validation")},
           {"best_test", rows[best_index].at("test")}};
  detail::write_json(sweep_dir / "sweep.json", doc);
  return doc;
}

struct InferResult {
  std::vector<std::string> hiddens;  // empty for single-layer stacks
  std::string output;
};

namespace detail {

// Locates the result.json to infer from: `target` is either a run
// directory (pick --seed, or the best seed by validation) or a result
// file itself (its config.yaml is searched upward).
inline std::pair<json, RunConfig> locate_prompts(const fs::path& target,
                                                 std::optional<std::uint64_t> seed) {
  fs::path result_path;
  fs::path config_path;
  if (fs::is_directory(target)) {
    config_path = target / "config.yaml";
    if (seed) {
      result_path = target / ("seed-" + std::to_string(*seed)) / "result.json";
      if (!fs::exists(result_path))
        throw ConfigError("no checkpointed result for seed " + std::to_string(*seed) +
                          " under " + target.string());
    } else {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& entry : fs::directory_iterator(target)) {
        if (!entry.is_directory()) continue;
        const fs::path candidate = entry.path() / "result.json";
        if (!fs::exists(candidate)) continue;
        const json doc = read_json(candidate);
        const double val = doc.value("best_val_accuracy", -1.0);
        if (val > best) {
          best = val;
          result_path = candidate;
        }
      }
      if (result_path.empty())
        throw ConfigError("no seed results under " + target.string());
    }
  } else if (fs::exists(target)) {
    result_path = target;
    // A result file inside a run dir keeps its config one level up.
    for (const fs::path dir : {target.parent_path(), target.parent_path().parent_path()}) {
      if (fs::exists(dir / "config.yaml")) {
        config_path = dir / "config.yaml";
        break;
      }
    }
    if (config_path.empty())
      throw ConfigError("no config.yaml next to " + target.string());
  } else {
    throw ConfigError("missing checkpoint: " + target.string());
  }
  if (!fs::exists(config_path))
    throw ConfigError("missing config: " + config_path.string());
  return {read_json(result_path), load_config(config_path)};
}

inline std::vector<Prompt> prompts_from_result(const json& result,
                                               std::size_t depth) {
  const char* key = result.contains("best_prompts") ? "best_prompts" : "prompts";
  if (!result.contains(key))
    throw ConfigError("result file has no prompts");
  std::vector<Prompt> prompts;
  for (const auto& pj : result.at(key)) {
    Prompt p;
    p.text = pj.at("text").get<std::string>();
    prompts.push_back(std::move(p));
  }
  if (prompts.size() != depth)
    throw ConfigError("result file has " + std::to_string(prompts.size()) +
                      " prompts but the architecture has " + std::to_string(depth) +
                      " layers");
  return prompts;
}

}  // namespace detail

/// Temperature-0 forward pass with checkpointed prompts. For stacks of
/// two or more layers the intermediate hidden strings are returned too.
inline InferResult run_infer(const fs::path& target, const std::string& input,
                             std::optional<std::uint64_t> seed = std::nullopt) {
  auto [result, cfg] = detail::locate_prompts(target, seed);
  auto prompts = detail::prompts_from_result(result, cfg.layers.size());
  auto lm = make_backend(cfg);
  auto stack = make_stack(cfg);
  for (std::size_t l = 0; l < stack.depth(); ++l) stack.layers[l].prompt = prompts[l];

  InferResult out;
  if (stack.depth() == 1) {
    out.output = dln1::infer(input, stack.layers[0].prompt, *lm,
                             stack.layers[0].forward_template, cfg.hp.max_new_units,
                             cfg.hp.stop_sequences);
  } else {
    auto [hiddens, y] = dln2::forward(input, stack, *lm, cfg.hp.max_new_units,
                                      cfg.hp.stop_sequences);
    out.hiddens = std::move(hiddens);
    out.output = std::move(y);
  }
  return out;
}

/// Usage/cost report over a run directory: unit and call totals, the
/// estimated cost at the configured price, and the per-seed validation
/// trajectories.
inline json run_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir))
    throw ConfigError("not a run directory: " + run_dir.string());
  const json ledger = detail::read_json(run_dir / "ledger.json");
  const double price = ledger.value("price_per_1k_units", 0.0);
  const auto total_units = ledger.value("total_units", std::uint64_t{0});

  json trajectories = json::object();
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (!entry.is_directory()) continue;
    const fs::path result_path = entry.path() / "result.json";
    if (!fs::exists(result_path)) continue;
    const json result = detail::read_json(result_path);
    trajectories[std::to_string(result.value("seed", std::uint64_t{0}))] =
        result.value("val_history", json::array());
  }

  json doc{{"price_per_1k_units", price},
           {"prompt_units", ledger.value("prompt_units", std::uint64_t{0})},
           {"completion_units", ledger.value("completion_units", std::uint64_t{0})},
           {"total_units", total_units},
           {"calls", ledger.value("calls", std::uint64_t{0})},
           {"estimated_cost", static_cast<double>(total_units) / 1000.0 * price},
           {"validation_trajectories", trajectories}};
  const fs::path aggregate_path = run_dir / "aggregate.json";
  if (fs::exists(aggregate_path)) doc["aggregate"] = detail::read_json(aggregate_path);
  return doc;
}

}  // namespace runner
}  // namespace dln
