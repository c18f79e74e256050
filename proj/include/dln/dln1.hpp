#pragma once

// One-layer language network: temperature-0 inference and the discrete
// prompt-search loop (minibatch -> infer -> propose -> select), with
// held-out candidate ranking, a best-prompt memory, and tolerance-based
// backtracking. The shared training plumbing (options, state, memory,
// checkpoints, batch scheduling) lives here; dln2 builds on it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dln/evalkit.hpp"
#include "dln/lm_backend.hpp"
#include "dln/rng.hpp"
#include "dln/scoring.hpp"
#include "dln/templates.hpp"
#include "dln/text.hpp"

namespace dln {

enum class PromptOrigin { initialization, proposed, memory };

inline const char* origin_name(PromptOrigin o) {
  switch (o) {
    case PromptOrigin::initialization: return "initialization";
    case PromptOrigin::proposed: return "proposed";
    case PromptOrigin::memory: return "memory";
  }
  return "?";
}

struct Prompt {
  std::string text;  // empty only for hidden-layer initializations
  PromptOrigin origin = PromptOrigin::initialization;
  int created_at_iteration = 0;
  std::optional<double> val_score;
};

/// Keeps the M best prompts (or prompt tuples, for deeper stacks) seen at
/// validation time, sorted by accuracy descending. Duplicate texts keep
/// their best score instead of occupying two slots.
class PromptMemory {
 public:
  struct Entry {
    std::vector<std::string> texts;  // one per layer
    double val_accuracy = 0.0;
  };

  explicit PromptMemory(std::size_t capacity = 5) : capacity_(capacity) {
    if (capacity_ == 0)
      throw std::invalid_argument("PromptMemory: capacity must be positive");
  }

  void record(std::vector<std::string> texts, double val_accuracy) {
    for (auto& e : entries_) {
      if (e.texts == texts) {
        e.val_accuracy = std::max(e.val_accuracy, val_accuracy);
        sort_entries();
        return;
      }
    }
    entries_.push_back(Entry{std::move(texts), val_accuracy});
    sort_entries();
    if (entries_.size() > capacity_) entries_.resize(capacity_);
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t capacity() const noexcept { return capacity_; }

  const Entry& best() const {
    if (entries_.empty()) throw std::logic_error("PromptMemory: empty");
    return entries_.front();
  }

 private:
  void sort_entries() {
    // Stable so that, at equal accuracy, the earlier entry stays ahead.
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const Entry& a, const Entry& b) {
                       return a.val_accuracy > b.val_accuracy;
                     });
  }

  std::vector<Entry> entries_;
  std::size_t capacity_;
};

/// Knobs shared by the one-layer and multi-layer trainers. Field names
/// track the run-config keys; depth-2+ fields are ignored by dln1.
struct TrainerOptions {
  int iterations = 20;     // I
  int batch_size = 20;
  int eval_every = 2;
  int n_candidates = 20;   // N proposals per layer per step
  double logp_penalty = 0.0;  // lambda_0 for the exploration reward, annealed to 0
  // Backtracking: reload the best memory entry once validation has been
  // below the best score for more than `tolerance` consecutive
  // evaluations. Negative disables backtracking.
  int tolerance = 2;
  std::size_t memory_capacity = 5;  // 0 disables the memory (and backtracking)
  bool held_out_prompt_ranking = true;
  double proposal_temperature = 0.7;
  int max_new_units = 64;
  std::vector<std::string> stop_sequences;
  std::uint64_t seed = 1;
  // Called with a checkpoint document after every validation evaluation
  // and right before a backend-failure abort.
  std::function<void(const nlohmann::json&)> checkpoint_sink;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("options: iterations < 1");
    if (batch_size < 1) throw std::invalid_argument("options: batch_size < 1");
    if (eval_every < 1) throw std::invalid_argument("options: eval_every < 1");
    if (n_candidates < 1) throw std::invalid_argument("options: n_candidates < 1");
    if (held_out_prompt_ranking && batch_size < 2)
      throw std::invalid_argument(
          "options: held-out ranking needs batch_size >= 2");
    if (logp_penalty < 0) throw std::invalid_argument("options: logp_penalty < 0");
  }
};

struct TrainState {
  std::vector<Prompt> prompts;       // current, one per layer
  std::vector<Prompt> best_prompts;  // best validation snapshot
  double best_val_accuracy = -1.0;   // -1 until the first evaluation
  std::vector<std::pair<int, double>> val_history;  // (iteration, accuracy)
  std::optional<PromptMemory> memory;
  std::uint64_t seed = 1;
  int iteration = 0;  // last completed iteration
};

inline nlohmann::json prompt_json(const Prompt& p) {
  nlohmann::json j{{"text", p.text},
                   {"origin", origin_name(p.origin)},
                   {"created_at_iteration", p.created_at_iteration}};
  if (p.val_score) j["val_score"] = *p.val_score;
  return j;
}

/// Checkpoint document. (seed, iteration) is the complete RNG state:
/// every stream is re-derived positionally from those two values.
inline nlohmann::json checkpoint_json(const TrainState& st,
                                      const TokenLedger& ledger) {
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& p : st.prompts) prompts.push_back(prompt_json(p));
  nlohmann::json memory = nlohmann::json::array();
  if (st.memory)
    for (const auto& e : st.memory->entries())
      memory.push_back({{"texts", e.texts}, {"val_accuracy", e.val_accuracy}});
  nlohmann::json best = nlohmann::json::array();
  for (const auto& p : st.best_prompts) best.push_back(prompt_json(p));
  nlohmann::json history = nlohmann::json::array();
  for (const auto& [it, acc] : st.val_history) history.push_back({it, acc});
  return nlohmann::json{
      {"iteration", st.iteration},
      {"prompts", prompts},
      {"best_prompts", best},
      {"best_val_accuracy", st.best_val_accuracy},
      {"memory", memory},
      {"val_history", history},
      {"rng", {{"seed", st.seed}, {"iteration", st.iteration}}},
      {"ledger",
       {{"prompt_units", ledger.prompt_units()},
        {"completion_units", ledger.completion_units()},
        {"calls", ledger.call_count()}}}};
}

// ---- batch scheduling -----------------------------------------------------

/// Positions of iteration i's minibatch (i is 1-based). Each epoch is a
/// fresh seeded permutation consumed batch-by-batch without replacement;
/// the short tail of an epoch is dropped (the next epoch reshuffles, so
/// nothing is starved).
inline std::vector<std::size_t> minibatch_indices(std::size_t n_examples,
                                                  std::size_t batch_size,
                                                  std::uint64_t seed,
                                                  std::uint64_t iteration) {
  if (n_examples == 0) throw std::invalid_argument("minibatch: empty train set");
  if (batch_size == 0) throw std::invalid_argument("minibatch: batch_size == 0");
  if (iteration == 0) throw std::invalid_argument("minibatch: iteration is 1-based");
  std::size_t take = std::min(batch_size, n_examples);
  std::size_t per_epoch = n_examples / take;  // >= 1
  std::uint64_t k = iteration - 1;
  std::uint64_t epoch = k / per_epoch;
  std::size_t slot = static_cast<std::size_t>(k % per_epoch);

  std::vector<std::size_t> perm(n_examples);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng::Stream stream(
      rng::derive(seed, rng::tag(rng::Tag::minibatch_shuffle), epoch));
  stream.shuffle(perm);
  return {perm.begin() + slot * take, perm.begin() + slot * take + take};
}

/// Held-out prompt ranking splits the minibatch in two: proposals see one
/// half, scoring uses the other (the scoring half takes the odd extra).
/// Disabled, both halves are the whole batch.
struct BatchSplit {
  std::vector<std::size_t> proposal;
  std::vector<std::size_t> scoring;
};

inline BatchSplit held_out_split(std::size_t batch_size, bool enabled,
                                 std::uint64_t seed, std::uint64_t iteration) {
  if (batch_size == 0) throw std::invalid_argument("held_out_split: empty batch");
  BatchSplit split;
  if (!enabled) {
    split.proposal.resize(batch_size);
    std::iota(split.proposal.begin(), split.proposal.end(), std::size_t{0});
    split.scoring = split.proposal;
    return split;
  }
  if (batch_size < 2)
    throw std::invalid_argument("held_out_split: need a batch of >= 2");
  std::vector<std::size_t> order(batch_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng::Stream stream(
      rng::derive(seed, rng::tag(rng::Tag::held_out_split), iteration));
  stream.shuffle(order);
  std::size_t half = batch_size / 2;
  split.proposal.assign(order.begin(), order.begin() + half);
  split.scoring.assign(order.begin() + half, order.end());
  // Positions within a half keep dataset order; the draw decided membership.
  std::sort(split.proposal.begin(), split.proposal.end());
  std::sort(split.scoring.begin(), split.scoring.end());
  return split;
}

/// Counts consecutive below-best validation evaluations and fires once
/// the count exceeds the tolerance (the signal to reload the best memory
/// entry). Negative tolerance never fires; a non-regressing evaluation
/// resets the count.
class BacktrackPolicy {
 public:
  explicit BacktrackPolicy(int tolerance) : tolerance_(tolerance) {}

  bool observe(double accuracy, double best_so_far) {
    if (accuracy >= best_so_far) {
      regressing_ = 0;
      return false;
    }
    ++regressing_;
    if (tolerance_ < 0 || regressing_ <= tolerance_) return false;
    regressing_ = 0;
    return true;
  }

  int regressing() const noexcept { return regressing_; }

 private:
  int tolerance_;
  int regressing_ = 0;
};

/// Positional-RNG context for one training step: which run, which
/// iteration, which layer's prompt (or hidden level) is being worked on.
struct StepKeys {
  std::uint64_t seed = 1;
  std::uint64_t iteration = 1;
  std::uint64_t layer = 0;
};

namespace dln1 {

inline std::string infer(const std::string& x, const Prompt& prompt,
                         LmBackend& lm, const Template& forward_tpl,
                         int max_new_units = 64,
                         const std::vector<std::string>& stops = {}) {
  Binding b;
  b.vars["prompt"] = prompt.text;
  b.vars["input"] = x;
  GenerationRequest req;
  req.context = forward_tpl.render(b).text;
  req.temperature = 0.0;
  req.n_samples = 1;
  req.max_new_units = max_new_units;
  req.stop_sequences = stops;
  return text::trim(lm.generate(req).front());
}

inline std::vector<std::string> batch_infer(
    const std::vector<std::string>& inputs, const Prompt& prompt,
    LmBackend& lm, const Template& forward_tpl, int max_new_units = 64,
    const std::vector<std::string>& stops = {}) {
  std::vector<GenerationRequest> reqs;
  reqs.reserve(inputs.size());
  for (const auto& x : inputs) {
    Binding b;
    b.vars["prompt"] = prompt.text;
    b.vars["input"] = x;
    GenerationRequest req;
    req.context = forward_tpl.render(b).text;
    req.temperature = 0.0;
    req.n_samples = 1;
    req.max_new_units = max_new_units;
    req.stop_sequences = stops;
    reqs.push_back(std::move(req));
  }
  std::vector<std::string> out;
  out.reserve(inputs.size());
  for (auto& samples : lm.batch_generate(reqs))
    out.push_back(text::trim(samples.front()));
  return out;
}

/// Samples n candidate prompts at the proposal temperature. Each candidate
/// renders the proposal template with its own rng-chosen message
/// alternative and its own random subset of the example pool, then the
/// incumbent is appended (the candidate set always contains it).
inline std::vector<Prompt> propose(const Prompt& current,
                                   const std::vector<BackwardInfo>& pool,
                                   LmBackend& lm, const Template& proposal_tpl,
                                   int n, const StepKeys& keys,
                                   double temperature = 0.7,
                                   int max_new_units = 64) {
  if (pool.empty()) throw std::invalid_argument("propose: empty example pool");
  if (n < 1) throw std::invalid_argument("propose: n < 1");

  std::vector<GenerationRequest> reqs;
  reqs.reserve(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    rng::Stream subset_stream(rng::derive(
        keys.seed, rng::tag(rng::Tag::proposal_subset), keys.iteration,
        keys.layer, static_cast<std::uint64_t>(c)));
    std::size_t subset_size =
        1 + static_cast<std::size_t>(subset_stream.next_below(pool.size()));
    auto picked = subset_stream.sample_indices(pool.size(), subset_size);
    std::sort(picked.begin(), picked.end());  // keep batch order in the render

    Binding b;
    b.vars["prompt"] = current.text;
    for (std::size_t i : picked) b.backward_infos.push_back(pool[i]);

    rng::Stream msg_stream(rng::derive(
        keys.seed, rng::tag(rng::Tag::proposal_message), keys.iteration,
        keys.layer, static_cast<std::uint64_t>(c)));
    GenerationRequest req;
    req.context = proposal_tpl.render(b, msg_stream).text;
    req.temperature = temperature;
    req.n_samples = 1;
    req.max_new_units = max_new_units;
    req.sample_seed = rng::derive(
        keys.seed, rng::tag(rng::Tag::proposal_sample), keys.iteration,
        keys.layer, static_cast<std::uint64_t>(c));
    reqs.push_back(std::move(req));
  }

  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  for (auto& samples : lm.batch_generate(reqs)) {
    Prompt p;
    p.text = text::trim(samples.front());
    p.origin = PromptOrigin::proposed;
    p.created_at_iteration = static_cast<int>(keys.iteration);
    out.push_back(std::move(p));
  }
  out.push_back(current);
  return out;
}

/// Batch score per candidate: sum over the scoring examples of
/// length-normalized log p(y | forward(x, candidate)). Textually identical
/// candidates are scored once and share the result.
inline std::vector<double> score_prompts(
    const std::vector<Prompt>& candidates,
    const std::vector<std::pair<std::string, std::string>>& pairs,
    LmBackend& lm, const Template& forward_tpl) {
  if (candidates.empty()) throw std::invalid_argument("score_prompts: no candidates");
  if (pairs.empty()) throw std::invalid_argument("score_prompts: no examples");

  std::vector<std::size_t> unique_of(candidates.size());
  std::vector<const std::string*> unique_texts;
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto [it, inserted] = seen.emplace(candidates[i].text, unique_texts.size());
    if (inserted) unique_texts.push_back(&candidates[i].text);
    unique_of[i] = it->second;
  }

  std::vector<std::pair<std::string, std::string>> queries;
  queries.reserve(unique_texts.size() * pairs.size());
  for (const auto* textp : unique_texts) {
    for (const auto& [x, y] : pairs) {
      Binding b;
      b.vars["prompt"] = *textp;
      b.vars["input"] = x;
      queries.emplace_back(forward_tpl.render(b).text, y);
    }
  }
  auto scored = lm.batch_logprob(queries);

  std::vector<double> unique_scores(unique_texts.size(), 0.0);
  std::size_t q = 0;
  for (std::size_t u = 0; u < unique_texts.size(); ++u)
    for (std::size_t e = 0; e < pairs.size(); ++e)
      unique_scores[u] += scored[q++].normalized_logprob;

  std::vector<double> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    out[i] = unique_scores[unique_of[i]];
  return out;
}

/// Argmax with ties resolved toward the incumbent, then the lowest index.
inline std::size_t select_index(const std::vector<double>& scores,
                                std::size_t incumbent) {
  if (scores.empty()) throw std::invalid_argument("select_index: empty");
  if (incumbent >= scores.size())
    throw std::invalid_argument("select_index: incumbent out of range");
  std::size_t best = incumbent;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

inline Prompt select(const std::vector<Prompt>& candidates,
                     const std::vector<std::pair<std::string, std::string>>& pairs,
                     LmBackend& lm, const Template& forward_tpl,
                     std::size_t incumbent_index) {
  auto scores = score_prompts(candidates, pairs, lm, forward_tpl);
  return candidates[select_index(scores, incumbent_index)];
}

/// Full training loop. Every eval_every iterations the current prompt is
/// scored on the validation split; the memory and the best-by-validation
/// snapshot are updated and a checkpoint is emitted. On an unrecoverable
/// backend failure the checkpoint is emitted before the error propagates.
inline TrainState train(const SplitDataset& data, LmBackend& lm,
                        const Template& forward_tpl, const Template& proposal_tpl,
                        const Prompt& init, const TrainerOptions& opt) {
  opt.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty train split");
  if (data.valid.empty()) throw std::invalid_argument("train: empty validation split");

  TrainState st;
  st.seed = opt.seed;
  st.prompts = {init};
  st.best_prompts = {init};
  if (opt.memory_capacity > 0) st.memory.emplace(opt.memory_capacity);

  auto emit_checkpoint = [&](const char* event, const std::string& error = "") {
    if (!opt.checkpoint_sink) return;
    nlohmann::json doc = checkpoint_json(st, lm.ledger());
    doc["event"] = event;
    if (!error.empty()) doc["error"] = error;
    opt.checkpoint_sink(doc);
  };

  BacktrackPolicy backtrack(opt.tolerance);
  for (int i = 1; i <= opt.iterations; ++i) {
    try {
      auto batch = minibatch_indices(data.train.size(),
                                     static_cast<std::size_t>(opt.batch_size),
                                     opt.seed, static_cast<std::uint64_t>(i));
      auto split = held_out_split(batch.size(), opt.held_out_prompt_ranking,
                                  opt.seed, static_cast<std::uint64_t>(i));

      std::vector<std::string> prop_inputs;
      prop_inputs.reserve(split.proposal.size());
      for (std::size_t p : split.proposal)
        prop_inputs.push_back(data.train[batch[p]].input);
      auto predictions = batch_infer(prop_inputs, st.prompts[0], lm, forward_tpl,
                                     opt.max_new_units, opt.stop_sequences);

      std::vector<BackwardInfo> pool;
      pool.reserve(split.proposal.size());
      for (std::size_t p = 0; p < split.proposal.size(); ++p) {
        const auto& ex = data.train[batch[split.proposal[p]]];
        pool.push_back(BackwardInfo{ex.input, predictions[p], ex.target});
      }

      StepKeys keys{opt.seed, static_cast<std::uint64_t>(i), 0};
      auto candidates = propose(st.prompts[0], pool, lm, proposal_tpl,
                                opt.n_candidates, keys,
                                opt.proposal_temperature, opt.max_new_units);

      std::vector<std::pair<std::string, std::string>> scoring_pairs;
      scoring_pairs.reserve(split.scoring.size());
      for (std::size_t s : split.scoring) {
        const auto& ex = data.train[batch[s]];
        scoring_pairs.emplace_back(ex.input, ex.target);
      }
      st.prompts[0] = select(candidates, scoring_pairs, lm, forward_tpl,
                             candidates.size() - 1);
      st.iteration = i;

      if (i % opt.eval_every == 0) {
        double acc = evaluate(
            [&](const std::vector<std::string>& xs) {
              return batch_infer(xs, st.prompts[0], lm, forward_tpl,
                                 opt.max_new_units, opt.stop_sequences);
            },
            data.valid);
        st.prompts[0].val_score = acc;
        st.val_history.emplace_back(i, acc);
        if (st.memory) st.memory->record({st.prompts[0].text}, acc);

        if (acc > st.best_val_accuracy) {
          st.best_val_accuracy = acc;
          st.best_prompts = st.prompts;
        }
        if (backtrack.observe(acc, st.best_val_accuracy) && st.memory &&
            !st.memory->empty()) {
          const auto& top = st.memory->best();
          st.prompts[0] = Prompt{top.texts[0], PromptOrigin::memory, i,
                                 top.val_accuracy};
        }
        emit_checkpoint("evaluation");
      }
    } catch (const BackendError& e) {
      emit_checkpoint("abort", e.what());
      throw;
    } catch (const BatchError& e) {
      emit_checkpoint("abort", e.what());
      throw;
    }
  }
  return st;
}

}  // namespace dln1
}  // namespace dln
