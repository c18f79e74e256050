#pragma once

// Multi-layer language networks: residual forward pass, posterior proposal
// mixture over latent hidden strings, sharpened weighting, and joint prompt
// updates. Two training routes exist on purpose:
//
//   - train_step / train: the two-layer algorithm written out explicitly
//     (single latent level, first/second-layer score formulas);
//   - multi_step / train_multi: the generalized L-layer sweeps (backward
//     latent sweep, then a per-layer double-weighted prompt sweep).
//
// Both routes draw every random decision from the same positional RNG keys
// and push all arithmetic through the same scoring primitives, so at L = 2
// they must produce byte-identical selections. Keeping them separate is
// what makes that a meaningful check.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dln/dln1.hpp"
#include "dln/evalkit.hpp"
#include "dln/lm_backend.hpp"
#include "dln/rng.hpp"
#include "dln/scoring.hpp"
#include "dln/templates.hpp"
#include "dln/text.hpp"

namespace dln {

struct Layer {
  Prompt prompt;
  Template forward_template;
  // Residual layers see the original input next to the incoming hidden
  // (bindings {prompt, input=x, h}); plain layers see only the incoming
  // value (bindings {prompt, input=h}).
  bool residual = false;
};

struct LayerStack {
  std::vector<Layer> layers;

  std::size_t depth() const noexcept { return layers.size(); }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("LayerStack: no layers");
    for (std::size_t l = 0; l + 1 < layers.size(); ++l)
      if (layers[l].residual)
        throw std::invalid_argument(
            "LayerStack: residual connection only allowed on the final layer");
  }
};

/// Rendered context of layer l given the original input and the incoming
/// value, under an arbitrary prompt text.
inline std::string layer_context(const LayerStack& stack, std::size_t l,
                                 const std::string& original_x,
                                 const std::string& incoming,
                                 const std::string& prompt_text) {
  Binding b;
  b.vars["prompt"] = prompt_text;
  if (stack.layers[l].residual) {
    b.vars["input"] = original_x;
    b.vars["h"] = incoming;
  } else {
    b.vars["input"] = incoming;
  }
  return stack.layers[l].forward_template.render(b).text;
}

/// Posterior proposal settings: K samples from a mixture of
///   q_pri      - the layer's own prior (forward context, higher temperature)
///   q_pri_plus - the prior conditioned on the target ("given that the
///                answer is ...")
///   q_edit     - an editing template that sees the current hidden, the
///                downstream prompt, and the target
/// with weights sharpened by alpha_sharp afterwards.
struct PosteriorConfig {
  int k_samples = 5;
  std::array<double, 3> mixture{0.5, 0.5, 0.0};  // q_pri, q_pri_plus, q_edit
  double alpha_sharp = 1.0;
  double temperature = 0.7;
  int max_new_units = 64;
  std::optional<Template> y_conditioned_tpl;  // required if mixture[1] > 0
  std::optional<Template> edit_tpl;           // required if mixture[2] > 0

  void validate() const {
    if (k_samples < 1) throw std::invalid_argument("posterior: k_samples < 1");
    if (temperature < 0) throw std::invalid_argument("posterior: negative temperature");
    if (max_new_units < 1) throw std::invalid_argument("posterior: max_new_units < 1");
    double total = 0.0;
    for (double w : mixture) {
      if (w < 0) throw std::invalid_argument("posterior: negative mixture weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument("posterior: mixture must sum to 1");
    if (mixture[1] > 0 && !y_conditioned_tpl)
      throw std::invalid_argument("posterior: q_pri_plus needs its template");
    if (mixture[2] > 0 && !edit_tpl)
      throw std::invalid_argument("posterior: q_edit needs its template");
  }
};

/// Positional-RNG context for posterior draws: latent level l (1-based,
/// the hidden between layers l-1 and l) and the example's batch position.
struct PosteriorKeys {
  std::uint64_t seed = 1;
  std::uint64_t iteration = 1;
  std::uint64_t level = 1;
  std::uint64_t example = 0;
};

namespace dln2 {

/// Temperature-0 pass over the whole stack for a batch of inputs.
/// chains[e] = {x, h_1, ..., h_{L-1}, y_hat}: position l holds the value
/// entering layer l, and the last position is the final output.
inline std::vector<std::vector<std::string>> batch_forward_chains(
    const std::vector<std::string>& xs, const LayerStack& stack, LmBackend& lm,
    int max_new_units = 64, const std::vector<std::string>& stops = {}) {
  stack.validate();
  if (xs.empty()) throw std::invalid_argument("forward: no inputs");
  std::vector<std::vector<std::string>> chains(xs.size());
  for (std::size_t e = 0; e < xs.size(); ++e) chains[e] = {xs[e]};
  for (std::size_t l = 0; l < stack.depth(); ++l) {
    std::vector<GenerationRequest> reqs;
    reqs.reserve(xs.size());
    for (std::size_t e = 0; e < xs.size(); ++e) {
      GenerationRequest req;
      req.context = layer_context(stack, l, xs[e], chains[e].back(),
                                  stack.layers[l].prompt.text);
      req.temperature = 0.0;
      req.n_samples = 1;
      req.max_new_units = max_new_units;
      req.stop_sequences = stops;
      reqs.push_back(std::move(req));
    }
    auto outs = lm.batch_generate(reqs);
    for (std::size_t e = 0; e < xs.size(); ++e)
      chains[e].push_back(text::trim(outs[e].front()));
  }
  return chains;
}

/// Single-input wrapper: returns the latent hiddens (without x and y_hat)
/// and the final output.
inline std::pair<std::vector<std::string>, std::string> forward(
    const std::string& x, const LayerStack& stack, LmBackend& lm,
    int max_new_units = 64, const std::vector<std::string>& stops = {}) {
  auto chain = batch_forward_chains({x}, stack, lm, max_new_units, stops)[0];
  std::vector<std::string> hiddens(chain.begin() + 1, chain.end() - 1);
  return {std::move(hiddens), chain.back()};
}

/// K posterior proposals for the hidden at keys.level, weighted by
/// sharpen(alpha + beta) where
///   alpha = normalized log p(h^k | context of the layer below)
///   beta  = normalized log p(upper_target | context of the layer above
///           given h^k).
/// Duplicates among the samples are kept; an empty generation falls back
/// to the forward hidden h_hat.
inline WeightedSampleSet sample_posterior(
    const std::string& original_x, const std::string& lower_input,
    const std::string& upper_target, const std::string& h_hat,
    const LayerStack& stack, const PosteriorConfig& cfg, LmBackend& lm,
    const PosteriorKeys& keys) {
  stack.validate();
  cfg.validate();
  const std::size_t l = static_cast<std::size_t>(keys.level);
  if (l < 1 || l >= stack.depth())
    throw std::invalid_argument("sample_posterior: level out of range");
  if (upper_target.empty())
    throw std::invalid_argument("sample_posterior: empty target");

  const std::string prior_ctx = layer_context(
      stack, l - 1, original_x, lower_input, stack.layers[l - 1].prompt.text);
  const std::vector<double> mixture(cfg.mixture.begin(), cfg.mixture.end());

  std::vector<GenerationRequest> reqs;
  reqs.reserve(static_cast<std::size_t>(cfg.k_samples));
  for (int k = 0; k < cfg.k_samples; ++k) {
    rng::Stream pick(rng::derive(keys.seed,
                                 rng::tag(rng::Tag::posterior_component),
                                 keys.iteration, keys.level, keys.example,
                                 static_cast<std::uint64_t>(k)));
    std::size_t component = pick.next_categorical(mixture);

    GenerationRequest req;
    if (component == 0) {
      req.context = prior_ctx;
    } else if (component == 1) {
      Binding b;
      b.vars["input"] = lower_input;
      b.vars["y"] = upper_target;
      b.vars["prompt"] = stack.layers[l - 1].prompt.text;
      req.context = cfg.y_conditioned_tpl->render(b).text;
    } else {
      Binding b;
      b.vars["next_prompt"] = stack.layers[l].prompt.text;
      b.vars["input"] = lower_input;
      b.vars["h"] = h_hat;
      b.vars["y"] = upper_target;
      rng::Stream msg(rng::derive(keys.seed,
                                  rng::tag(rng::Tag::posterior_edit_message),
                                  keys.iteration, keys.level, keys.example,
                                  static_cast<std::uint64_t>(k)));
      req.context = cfg.edit_tpl->render(b, msg).text;
    }
    req.temperature = cfg.temperature;
    req.n_samples = 1;
    req.max_new_units = cfg.max_new_units;
    req.sample_seed = rng::derive(keys.seed, rng::tag(rng::Tag::posterior_sample),
                                  keys.iteration, keys.level, keys.example,
                                  static_cast<std::uint64_t>(k));
    reqs.push_back(std::move(req));
  }

  auto gens = lm.batch_generate(reqs);
  std::vector<std::string> hiddens;
  hiddens.reserve(gens.size());
  for (auto& g : gens) {
    std::string h = text::trim(g.front());
    if (h.empty()) h = h_hat;
    if (h.empty())
      throw std::domain_error(
          "sample_posterior: empty sample and empty forward hidden");
    hiddens.push_back(std::move(h));
  }

  std::vector<std::pair<std::string, std::string>> queries;
  queries.reserve(hiddens.size() * 2);
  for (const auto& h : hiddens) queries.emplace_back(prior_ctx, h);
  for (const auto& h : hiddens)
    queries.emplace_back(
        layer_context(stack, l, original_x, h, stack.layers[l].prompt.text),
        upper_target);
  auto scored = lm.batch_logprob(queries);

  std::vector<PosteriorSample> samples(hiddens.size());
  for (std::size_t k = 0; k < hiddens.size(); ++k) {
    samples[k].hidden = hiddens[k];
    samples[k].alpha = scored[k].normalized_logprob;
    samples[k].beta = scored[hiddens.size() + k].normalized_logprob;
  }
  return WeightedSampleSet::make(std::move(samples), cfg.alpha_sharp);
}

/// Per-step knobs shared by both step routines.
struct StepOptions {
  int n_candidates = 20;  // 0 = incumbent-only pools (degenerate but legal)
  double lambda = 0.0;
  bool held_out_prompt_ranking = true;
  double proposal_temperature = 0.7;
  int max_new_units = 64;
  std::vector<std::string> stop_sequences;
  std::uint64_t seed = 1;
  std::uint64_t iteration = 1;
};

namespace detail {

/// Evaluates `score` once per distinct candidate text (first-occurrence
/// order) and fans the values back out.
template <typename ScoreFn>
std::vector<double> score_unique(const std::vector<Prompt>& candidates,
                                 ScoreFn&& score) {
  std::vector<double> out(candidates.size());
  std::unordered_map<std::string, double> cache;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto it = cache.find(candidates[i].text);
    if (it == cache.end())
      it = cache.emplace(candidates[i].text, score(candidates[i].text)).first;
    out[i] = it->second;
  }
  return out;
}

inline std::vector<Prompt> candidate_pool(
    const Prompt& incumbent, const std::vector<BackwardInfo>& pool,
    LmBackend& lm, const Template& proposal_tpl, const StepOptions& sopt,
    std::size_t layer) {
  // No candidates requested, or nothing usable to show the proposer (every
  // incoming hidden in the proposal half was empty): keep the incumbent.
  if (sopt.n_candidates == 0 || pool.empty()) return {incumbent};
  return dln1::propose(incumbent, pool, lm, proposal_tpl, sopt.n_candidates,
                       StepKeys{sopt.seed, sopt.iteration, layer},
                       sopt.proposal_temperature, sopt.max_new_units);
}

}  // namespace detail

/// One two-layer update: forward the minibatch, sample and sharpen the
/// latent posterior per example, select the best hidden h*, then propose
/// and score candidate prompts for both layers (the first layer's score
/// carries the lambda-weighted exploration reward). Incumbents stay in
/// both pools, so a step never lowers either layer's batch score.
inline LayerStack train_step(
    const std::vector<std::pair<std::string, std::string>>& batch,
    const LayerStack& stack, const PosteriorConfig& pcfg,
    const Template& proposal_tpl, LmBackend& lm, const StepOptions& sopt) {
  stack.validate();
  pcfg.validate();
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  if (stack.depth() != 2)
    throw std::invalid_argument("train_step: needs a 2-layer stack");
  if (!stack.layers[1].residual)
    throw std::invalid_argument("train_step: output layer must be residual");

  const std::size_t B = batch.size();
  auto split = held_out_split(B, sopt.held_out_prompt_ranking, sopt.seed,
                              sopt.iteration);

  std::vector<std::string> xs(B), ys(B);
  for (std::size_t e = 0; e < B; ++e) {
    xs[e] = batch[e].first;
    ys[e] = batch[e].second;
  }
  auto chains = batch_forward_chains(xs, stack, lm, sopt.max_new_units,
                                     sopt.stop_sequences);

  std::vector<WeightedSampleSet> posteriors;
  posteriors.reserve(B);
  for (std::size_t e = 0; e < B; ++e)
    posteriors.push_back(sample_posterior(
        xs[e], xs[e], ys[e], chains[e][1], stack, pcfg, lm,
        PosteriorKeys{sopt.seed, sopt.iteration, 1, e}));

  std::vector<BackwardInfo> pool0, pool1;
  for (std::size_t p : split.proposal) {
    const std::string& h_hat = chains[p][1];
    const std::string& h_star =
        posteriors[p].samples[posteriors[p].best_index()].hidden;
    pool0.push_back(BackwardInfo{xs[p], h_hat, h_star});
    if (!h_hat.empty())
      pool1.push_back(BackwardInfo{h_hat, chains[p][2], ys[p]});
  }
  auto candidates0 = detail::candidate_pool(stack.layers[0].prompt, pool0, lm,
                                            proposal_tpl, sopt, 0);
  auto candidates1 = detail::candidate_pool(stack.layers[1].prompt, pool1, lm,
                                            proposal_tpl, sopt, 1);

  std::vector<std::string> xs_s, ys_s;
  std::vector<WeightedSampleSet> post_s;
  std::vector<std::pair<std::string, std::string>> wrong_cases;
  for (std::size_t s : split.scoring) {
    xs_s.push_back(xs[s]);
    ys_s.push_back(ys[s]);
    post_s.push_back(posteriors[s]);
    if (normalize(chains[s][2]) != normalize(ys[s]))
      wrong_cases.emplace_back(xs[s], chains[s][1]);
  }

  auto scores0 = detail::score_unique(candidates0, [&](const std::string& t) {
    return prompt_score_first_layer(t, xs_s, post_s, lm,
                                    stack.layers[0].forward_template) +
           exploration_reward(t, wrong_cases, lm,
                              stack.layers[0].forward_template, sopt.lambda);
  });
  auto scores1 = detail::score_unique(candidates1, [&](const std::string& t) {
    return prompt_score_second_layer(t, xs_s, post_s, ys_s, lm,
                                     stack.layers[1].forward_template);
  });

  LayerStack out = stack;
  out.layers[0].prompt = candidates0[dln1::select_index(scores0, candidates0.size() - 1)];
  out.layers[1].prompt = candidates1[dln1::select_index(scores1, candidates1.size() - 1)];
  return out;
}

/// One generalized update for any depth. Backward sweep: walking from the
/// top latent level down, sample K posterior proposals per example, weight
/// them, and fix the per-level argmax h*. Prompt sweep: per layer, propose
/// candidates and score them with the double-weighted sum over the level's
/// and the next level's weighted sets (endpoints are point masses on x and
/// y). Non-final layers add the exploration reward.
inline LayerStack multi_step(
    const std::vector<std::pair<std::string, std::string>>& batch,
    const LayerStack& stack, const PosteriorConfig& pcfg,
    const Template& proposal_tpl, LmBackend& lm, const StepOptions& sopt) {
  stack.validate();
  pcfg.validate();
  if (batch.empty()) throw std::invalid_argument("multi_step: empty batch");

  const std::size_t L = stack.depth();
  const std::size_t B = batch.size();
  auto split = held_out_split(B, sopt.held_out_prompt_ranking, sopt.seed,
                              sopt.iteration);

  std::vector<std::string> xs(B), ys(B);
  for (std::size_t e = 0; e < B; ++e) {
    xs[e] = batch[e].first;
    ys[e] = batch[e].second;
  }
  auto chains = batch_forward_chains(xs, stack, lm, sopt.max_new_units,
                                     sopt.stop_sequences);

  // Backward latent sweep, top level first. h_star[l][e] is the selected
  // hidden for level l; level L is pinned to the label.
  std::vector<std::vector<WeightedSampleSet>> posteriors(L);
  std::vector<std::vector<std::string>> h_star(L + 1);
  h_star[L] = ys;
  for (std::size_t l = L - 1; l >= 1; --l) {
    posteriors[l].reserve(B);
    h_star[l].resize(B);
    for (std::size_t e = 0; e < B; ++e) {
      posteriors[l].push_back(sample_posterior(
          xs[e], chains[e][l - 1], h_star[l + 1][e], chains[e][l], stack, pcfg,
          lm, PosteriorKeys{sopt.seed, sopt.iteration, l, e}));
      const auto& set = posteriors[l].back();
      h_star[l][e] = set.samples[set.best_index()].hidden;
    }
  }

  // Weighted endpoint sets for the double sum at each level.
  auto level_set = [&](std::size_t l, std::size_t e) -> WeightedStrings {
    if (l == 0) return WeightedStrings::point_mass(xs[e]);
    if (l == L) return WeightedStrings::point_mass(ys[e]);
    return WeightedStrings::from_samples(posteriors[l][e]);
  };

  LayerStack out = stack;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<BackwardInfo> pool;
    for (std::size_t p : split.proposal) {
      const std::string& incoming = chains[p][l];
      if (incoming.empty()) continue;
      pool.push_back(BackwardInfo{incoming, chains[p][l + 1], h_star[l + 1][p]});
    }
    auto candidates = detail::candidate_pool(stack.layers[l].prompt, pool, lm,
                                             proposal_tpl, sopt, l);

    std::vector<WeightedStrings> lower, upper;
    std::vector<std::string> xs_s;
    std::vector<std::pair<std::string, std::string>> wrong_cases;
    for (std::size_t s : split.scoring) {
      lower.push_back(level_set(l, s));
      upper.push_back(level_set(l + 1, s));
      xs_s.push_back(xs[s]);
      if (l + 1 < L && normalize(chains[s][L]) != normalize(ys[s]))
        wrong_cases.emplace_back(chains[s][l], chains[s][l + 1]);
    }

    auto scores = detail::score_unique(candidates, [&](const std::string& t) {
      auto ctx = [&](std::size_t e, const std::string& incoming) {
        return layer_context(stack, l, xs_s[e], incoming, t);
      };
      double s = double_weighted_score(lower, upper, ctx, lm);
      if (l + 1 < L)
        s += exploration_reward(t, wrong_cases, lm,
                                stack.layers[l].forward_template, sopt.lambda);
      return s;
    });
    out.layers[l].prompt = candidates[dln1::select_index(scores, candidates.size() - 1)];
  }
  return out;
}

namespace detail {

template <typename StepFn>
TrainState run_stack_loop(const SplitDataset& data, LmBackend& lm,
                          LayerStack stack, const TrainerOptions& opt,
                          const nlohmann::json& checkpoint_extra,
                          StepFn&& step) {
  opt.validate();
  stack.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty train split");
  if (data.valid.empty()) throw std::invalid_argument("train: empty validation split");

  TrainState st;
  st.seed = opt.seed;
  for (const auto& layer : stack.layers) st.prompts.push_back(layer.prompt);
  st.best_prompts = st.prompts;
  if (opt.memory_capacity > 0) st.memory.emplace(opt.memory_capacity);

  double lambda_now = opt.logp_penalty;
  auto emit_checkpoint = [&](const char* event, const std::string& error = "") {
    if (!opt.checkpoint_sink) return;
    nlohmann::json doc = checkpoint_json(st, lm.ledger());
    doc["event"] = event;
    doc["lambda"] = lambda_now;
    for (const auto& [k, v] : checkpoint_extra.items()) doc[k] = v;
    if (!error.empty()) doc["error"] = error;
    opt.checkpoint_sink(doc);
  };

  auto stack_texts = [&] {
    std::vector<std::string> texts;
    for (const auto& layer : stack.layers) texts.push_back(layer.prompt.text);
    return texts;
  };

  BacktrackPolicy backtrack(opt.tolerance);
  for (int i = 1; i <= opt.iterations; ++i) {
    lambda_now = opt.logp_penalty *
                 (1.0 - static_cast<double>(i) / static_cast<double>(opt.iterations));
    try {
      auto batch_idx = minibatch_indices(data.train.size(),
                                         static_cast<std::size_t>(opt.batch_size),
                                         opt.seed, static_cast<std::uint64_t>(i));
      std::vector<std::pair<std::string, std::string>> pairs;
      pairs.reserve(batch_idx.size());
      for (std::size_t b : batch_idx)
        pairs.emplace_back(data.train[b].input, data.train[b].target);

      stack = step(pairs, stack, lambda_now, i);
      st.prompts.clear();
      for (const auto& layer : stack.layers) st.prompts.push_back(layer.prompt);
      st.iteration = i;

      if (i % opt.eval_every == 0) {
        double acc = evaluate(
            [&](const std::vector<std::string>& inputs) {
              std::vector<std::string> preds;
              for (auto& chain : batch_forward_chains(
                       inputs, stack, lm, opt.max_new_units, opt.stop_sequences))
                preds.push_back(chain.back());
              return preds;
            },
            data.valid);
        for (auto& p : st.prompts) p.val_score = acc;
        for (std::size_t l = 0; l < stack.layers.size(); ++l)
          stack.layers[l].prompt.val_score = acc;
        st.val_history.emplace_back(i, acc);
        if (st.memory) st.memory->record(stack_texts(), acc);

        if (acc > st.best_val_accuracy) {
          st.best_val_accuracy = acc;
          st.best_prompts = st.prompts;
        }
        if (backtrack.observe(acc, st.best_val_accuracy) && st.memory &&
            !st.memory->empty()) {
          const auto& top = st.memory->best();
          for (std::size_t l = 0; l < stack.layers.size(); ++l) {
            stack.layers[l].prompt =
                Prompt{top.texts[l], PromptOrigin::memory, i, top.val_accuracy};
          }
          st.prompts.clear();
          for (const auto& layer : stack.layers) st.prompts.push_back(layer.prompt);
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

template <typename StepFn>
TrainState run_with_step(const SplitDataset& data, LmBackend& lm,
                         LayerStack stack, const Template& proposal_tpl,
                         const PosteriorConfig& pcfg, const TrainerOptions& opt,
                         StepFn&& stepper) {
  nlohmann::json extra{{"posterior_mixture", pcfg.mixture}};
  return run_stack_loop(
      data, lm, std::move(stack), opt, extra,
      [&](const std::vector<std::pair<std::string, std::string>>& pairs,
          const LayerStack& cur, double lambda, int iteration) {
        StepOptions sopt;
        sopt.n_candidates = opt.n_candidates;
        sopt.lambda = lambda;
        sopt.held_out_prompt_ranking = opt.held_out_prompt_ranking;
        sopt.proposal_temperature = opt.proposal_temperature;
        sopt.max_new_units = opt.max_new_units;
        sopt.stop_sequences = opt.stop_sequences;
        sopt.seed = opt.seed;
        sopt.iteration = static_cast<std::uint64_t>(iteration);
        return stepper(pairs, cur, pcfg, proposal_tpl, lm, sopt);
      });
}

}  // namespace detail

/// Two-layer training: the explicit two-layer step inside the shared loop
/// (minibatch schedule, lambda annealing, validation cadence, memory and
/// backtracking over the prompt pair as one unit).
inline TrainState train(const SplitDataset& data, LmBackend& lm,
                        LayerStack stack, const Template& proposal_tpl,
                        const PosteriorConfig& pcfg, const TrainerOptions& opt) {
  if (stack.depth() != 2)
    throw std::invalid_argument("train: needs a 2-layer stack");
  return detail::run_with_step(data, lm, std::move(stack), proposal_tpl, pcfg,
                               opt, [](auto&&... args) {
                                 return train_step(
                                     std::forward<decltype(args)>(args)...);
                               });
}

/// Generalized L-layer training with the sweep-based step. At L = 2 this
/// must match train() byte for byte; at L = 1 it degenerates to the
/// one-layer algorithm (no latent sweep at all).
inline TrainState train_multi(const SplitDataset& data, LmBackend& lm,
                              LayerStack stack, const Template& proposal_tpl,
                              const PosteriorConfig& pcfg,
                              const TrainerOptions& opt) {
  return detail::run_with_step(data, lm, std::move(stack), proposal_tpl, pcfg,
                               opt, [](auto&&... args) {
                                 return multi_step(
                                     std::forward<decltype(args)>(args)...);
                               });
}

}  // namespace dln2
}  // namespace dln
