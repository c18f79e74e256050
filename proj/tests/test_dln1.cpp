#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "dln/dln1.hpp"
#include "dln/toy_lm.hpp"
#include "support/test_backends.hpp"
#include "support/test_paths.hpp"

using namespace dln;

namespace {

ToyLm make_toy(std::uint64_t seed = 3) {
  ToyLmConfig cfg;
  cfg.seed = seed;
  cfg.vocab = {"alpha", "beta", "gamma"};
  // The window must reach back past the input to the prompt, or candidate
  // prompts could not move the scores at all.
  cfg.order = 16;
  cfg.max_units = 2;
  cfg.peakedness = 4.0;
  cfg.eos_bias = 1.0;
  return ToyLm(cfg);
}

Template load_tpl(const std::string& name) {
  return Template::load_file(testsupport::template_path(name));
}

SplitDataset make_data(int n_train, int n_valid) {
  SplitDataset ds;
  ds.task_name = "toy";
  const char* labels[] = {"alpha", "beta"};
  for (int i = 0; i < n_train; ++i)
    ds.train.push_back(Example{"exm" + std::to_string(i) + " question",
                               labels[i % 2], "tr" + std::to_string(i)});
  for (int i = 0; i < n_valid; ++i)
    ds.valid.push_back(Example{"vexm" + std::to_string(i) + " question",
                               labels[i % 2], "va" + std::to_string(i)});
  ds.class_labels = {"alpha", "beta"};
  return ds;
}

}  // namespace

TEST_CASE("prompt memory keeps the best entries sorted and deduplicated") {
  CHECK_THROWS_AS(PromptMemory(0), std::invalid_argument);

  PromptMemory mem(3);
  CHECK(mem.empty());
  CHECK_THROWS_AS(mem.best(), std::logic_error);

  mem.record({"a"}, 0.2);
  mem.record({"b"}, 0.8);
  mem.record({"c"}, 0.5);
  mem.record({"d"}, 0.6);  // evicts "a"
  REQUIRE(mem.entries().size() == 3);
  CHECK(mem.best().texts == std::vector<std::string>{"b"});
  CHECK(mem.entries()[1].texts == std::vector<std::string>{"d"});
  CHECK(mem.entries()[2].texts == std::vector<std::string>{"c"});

  // Duplicate text: keeps the better score, no extra slot.
  mem.record({"c"}, 0.1);
  REQUIRE(mem.entries().size() == 3);
  CHECK(mem.entries()[2].val_accuracy == 0.5);
  mem.record({"c"}, 0.9);
  CHECK(mem.best().texts == std::vector<std::string>{"c"});

  // Equal scores keep insertion order.
  PromptMemory tie(4);
  tie.record({"first"}, 0.5);
  tie.record({"second"}, 0.5);
  CHECK(tie.entries()[0].texts[0] == "first");
  CHECK(tie.entries()[1].texts[0] == "second");
}

TEST_CASE("backtracking policy fires after tolerance consecutive regressions") {
  BacktrackPolicy zero(0);
  CHECK_FALSE(zero.observe(0.5, 0.5));  // not below best
  CHECK(zero.observe(0.4, 0.5));        // first regression fires at once

  BacktrackPolicy two(2);
  CHECK_FALSE(two.observe(0.4, 0.5));
  CHECK_FALSE(two.observe(0.4, 0.5));
  CHECK(two.observe(0.4, 0.5));  // third consecutive regression
  CHECK(two.regressing() == 0);  // firing resets the count

  // A non-regressing evaluation resets the streak.
  BacktrackPolicy reset(1);
  CHECK_FALSE(reset.observe(0.4, 0.5));
  CHECK_FALSE(reset.observe(0.5, 0.5));
  CHECK_FALSE(reset.observe(0.4, 0.5));
  CHECK(reset.observe(0.4, 0.5));

  BacktrackPolicy disabled(-1);
  for (int i = 0; i < 10; ++i) CHECK_FALSE(disabled.observe(0.0, 1.0));
}

TEST_CASE("minibatches cover each epoch without replacement") {
  std::set<std::size_t> seen;
  std::vector<std::vector<std::size_t>> batches;
  for (std::uint64_t i = 1; i <= 5; ++i) {
    auto b = minibatch_indices(10, 2, 42, i);
    REQUIRE(b.size() == 2);
    batches.push_back(b);
    for (auto x : b) {
      CHECK(seen.count(x) == 0);  // no repeats within the epoch
      seen.insert(x);
    }
  }
  CHECK(seen.size() == 10);

  // Deterministic in the seed, and a fresh permutation each epoch.
  CHECK(minibatch_indices(10, 2, 42, 3) == batches[2]);
  CHECK(minibatch_indices(10, 2, 43, 1) != batches[0]);
  std::vector<std::size_t> epoch2;
  for (std::uint64_t i = 6; i <= 10; ++i)
    for (auto x : minibatch_indices(10, 2, 42, i)) epoch2.push_back(x);
  std::vector<std::size_t> epoch1;
  for (const auto& b : batches) epoch1.insert(epoch1.end(), b.begin(), b.end());
  CHECK(epoch1 != epoch2);
  CHECK(std::set<std::size_t>(epoch2.begin(), epoch2.end()).size() == 10);

  // Oversized batch clamps to the whole set; short tails are dropped.
  CHECK(minibatch_indices(3, 8, 1, 1).size() == 3);
  auto a = minibatch_indices(5, 2, 7, 1);
  auto b = minibatch_indices(5, 2, 7, 2);
  auto c = minibatch_indices(5, 2, 7, 3);  // next epoch already
  std::set<std::size_t> firsts(a.begin(), a.end());
  firsts.insert(b.begin(), b.end());
  CHECK(firsts.size() == 4);
  CHECK(c.size() == 2);

  CHECK_THROWS_AS(minibatch_indices(0, 2, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(minibatch_indices(5, 0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(minibatch_indices(5, 2, 1, 0), std::invalid_argument);
}

TEST_CASE("held-out split halves the batch") {
  auto off = held_out_split(5, false, 1, 1);
  CHECK(off.proposal == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(off.scoring == off.proposal);

  auto on = held_out_split(7, true, 1, 1);
  CHECK(on.proposal.size() == 3);  // scoring takes the odd extra
  CHECK(on.scoring.size() == 4);
  std::set<std::size_t> all(on.proposal.begin(), on.proposal.end());
  for (auto x : on.scoring) {
    CHECK(all.count(x) == 0);
    all.insert(x);
  }
  CHECK(all.size() == 7);

  auto again = held_out_split(7, true, 1, 1);
  CHECK(again.proposal == on.proposal);
  bool any_difference = false;
  for (std::uint64_t i = 2; i <= 6; ++i)
    any_difference |= held_out_split(7, true, 1, i).proposal != on.proposal;
  CHECK(any_difference);

  CHECK_THROWS_AS(held_out_split(1, true, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(held_out_split(0, false, 1, 1), std::invalid_argument);
}

TEST_CASE("inference is deterministic and threads the prompt into the context") {
  auto lm = make_toy();
  testing::RecordingBackend rec(lm);
  auto fwd = load_tpl("classification_forward");
  Prompt p{"Classify the item.", PromptOrigin::initialization, 0, {}};

  auto y1 = dln1::infer("exm0 question", p, rec, fwd);
  auto y2 = dln1::infer("exm0 question", p, rec, fwd);
  CHECK(y1 == y2);
  CHECK_FALSE(y1.empty());

  REQUIRE(rec.generate_requests.size() == 2);
  const auto& req = rec.generate_requests[0];
  CHECK(req.temperature == 0.0);
  Binding b;
  b.vars["prompt"] = p.text;
  b.vars["input"] = "exm0 question";
  CHECK(req.context == fwd.render(b).text);
  CHECK(req.context.rfind(p.text, 0) == 0);  // context starts with the prompt

  auto many = dln1::batch_infer({"one question", "two question"}, p, rec, fwd);
  REQUIRE(many.size() == 2);
  CHECK(many[0] == dln1::infer("one question", p, rec, fwd));
}

TEST_CASE("propose returns n candidates plus the incumbent") {
  auto lm = make_toy();
  testing::RecordingBackend rec(lm);
  auto proposal = load_tpl("prompt_proposal_v3_5");

  std::vector<BackwardInfo> pool{
      {"exm0 question", "alpha", "alpha"},
      {"exm1 question", "alpha", "beta"},
      {"exm2 question", "gamma", "alpha"},
      {"exm3 question", "beta", "beta"},
  };
  Prompt current{"seed prompt", PromptOrigin::initialization, 0, {}};
  StepKeys keys{11, 4, 0};

  auto cands = dln1::propose(current, pool, rec, proposal, 6, keys);
  REQUIRE(cands.size() == 7);
  CHECK(cands.back().text == current.text);
  CHECK(cands.back().origin == PromptOrigin::initialization);
  for (std::size_t i = 0; i + 1 < cands.size(); ++i) {
    CHECK(cands[i].origin == PromptOrigin::proposed);
    CHECK(cands[i].created_at_iteration == 4);
  }

  // Same keys, fresh backend: identical contexts, seeds, and texts.
  auto lm2 = make_toy();
  testing::RecordingBackend rec2(lm2);
  auto cands2 = dln1::propose(current, pool, rec2, proposal, 6, keys);
  REQUIRE(rec2.generate_requests.size() == rec.generate_requests.size());
  for (std::size_t i = 0; i < rec.generate_requests.size(); ++i) {
    CHECK(rec2.generate_requests[i].context == rec.generate_requests[i].context);
    CHECK(rec2.generate_requests[i].sample_seed ==
          rec.generate_requests[i].sample_seed);
  }
  for (std::size_t i = 0; i < cands.size(); ++i)
    CHECK(cands2[i].text == cands[i].text);

  // Per-candidate message and subset draws give diverse contexts.
  std::set<std::string> contexts;
  for (const auto& r : rec.generate_requests) {
    contexts.insert(r.context);
    CHECK(r.temperature == 0.7);
    CHECK(r.context.find("seed prompt") != std::string::npos);
  }
  CHECK(contexts.size() >= 2);

  CHECK_THROWS_AS(dln1::propose(current, {}, rec, proposal, 3, keys),
                  std::invalid_argument);
  CHECK_THROWS_AS(dln1::propose(current, pool, rec, proposal, 0, keys),
                  std::invalid_argument);
}

TEST_CASE("candidate scoring dedups identical texts") {
  auto lm = make_toy();
  testing::RecordingBackend rec(lm);
  auto fwd = load_tpl("classification_forward");

  std::vector<Prompt> cands{
      {"alpha beta", PromptOrigin::proposed, 1, {}},
      {"gamma", PromptOrigin::proposed, 1, {}},
      {"alpha beta", PromptOrigin::proposed, 1, {}},
      {"incumbent text", PromptOrigin::initialization, 0, {}},
  };
  std::vector<std::pair<std::string, std::string>> pairs{
      {"exm0 question", "alpha"},
      {"exm1 question", "beta"},
      {"exm2 question", "gamma beta"},
  };

  auto scores = dln1::score_prompts(cands, pairs, rec, fwd);
  REQUIRE(scores.size() == 4);
  CHECK(scores[0] == scores[2]);
  CHECK(rec.logprob_requests.size() == 3 * 3);  // three unique texts

  // Oracle recomputation: sum of length-normalized log-probs per candidate.
  auto by_hand = [&](const std::string& text) {
    double total = 0.0;
    for (const auto& [x, y] : pairs) {
      Binding b;
      b.vars["prompt"] = text;
      b.vars["input"] = x;
      total += lm.logprob(fwd.render(b).text, y).normalized_logprob;
    }
    return total;
  };
  for (std::size_t i = 0; i < cands.size(); ++i)
    CHECK(scores[i] == by_hand(cands[i].text));

  std::size_t want = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[want]) want = i;
  auto picked = dln1::select(cands, pairs, rec, fwd, 3);
  CHECK(picked.text == cands[want].text);
}

TEST_CASE("selection ties favor the incumbent, then the lowest index") {
  CHECK(dln1::select_index({1.0, 5.0, 5.0, 2.0}, 3) == 1);
  CHECK(dln1::select_index({2.0, 2.0, 2.0}, 2) == 2);   // all tied: incumbent
  CHECK(dln1::select_index({5.0, 1.0, 5.0}, 2) == 2);   // tie with incumbent
  CHECK(dln1::select_index({7.0}, 0) == 0);
  CHECK_THROWS_AS(dln1::select_index({}, 0), std::invalid_argument);
  CHECK_THROWS_AS(dln1::select_index({1.0}, 5), std::invalid_argument);

  // Duplicate of the incumbent's text scores identically, so the
  // incumbent itself is returned.
  auto lm = make_toy();
  auto fwd = load_tpl("classification_forward");
  std::vector<Prompt> cands{
      {"same words", PromptOrigin::proposed, 1, {}},
      {"same words", PromptOrigin::initialization, 0, {}},
  };
  auto picked = dln1::select(cands, {{"exm0 question", "alpha"}}, lm, fwd, 1);
  CHECK(picked.origin == PromptOrigin::initialization);
}

TEST_CASE("selected prompt never scores below the incumbent") {
  auto lm = make_toy(19);
  auto fwd = load_tpl("classification_forward");
  const std::vector<std::string> words{"alpha", "beta", "gamma", "alpha beta",
                                       "beta gamma", "gamma alpha"};

  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    rng::Stream s(rng::derive(77, rng::tag(rng::Tag::fuzz), trial));
    std::vector<Prompt> cands;
    std::size_t n = 1 + s.next_below(4);
    for (std::size_t i = 0; i < n; ++i)
      cands.push_back(
          {words[s.next_below(words.size())], PromptOrigin::proposed, 1, {}});
    cands.push_back(
        {words[s.next_below(words.size())], PromptOrigin::initialization, 0, {}});

    std::vector<std::pair<std::string, std::string>> pairs;
    std::size_t m = 1 + s.next_below(3);
    for (std::size_t e = 0; e < m; ++e)
      pairs.emplace_back("exm" + std::to_string(s.next_below(50)) + " question",
                         words[s.next_below(3)]);

    auto scores = dln1::score_prompts(cands, pairs, lm, fwd);
    auto sel = dln1::select_index(scores, cands.size() - 1);
    CHECK(scores[sel] >= scores.back());
  }
}

TEST_CASE("training evaluates on schedule and reproduces bit-for-bit") {
  auto data = make_data(8, 4);
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  Prompt init{"Pick the right label.", PromptOrigin::initialization, 0, {}};

  TrainerOptions opt;
  opt.iterations = 6;
  opt.batch_size = 4;
  opt.eval_every = 2;
  opt.n_candidates = 3;
  opt.memory_capacity = 3;
  opt.tolerance = 2;
  opt.seed = 11;
  std::vector<nlohmann::json> checkpoints;
  opt.checkpoint_sink = [&](const nlohmann::json& j) { checkpoints.push_back(j); };

  auto lm = make_toy();
  auto st = dln1::train(data, lm, fwd, proposal, init, opt);

  REQUIRE(st.val_history.size() == 3);
  CHECK(st.val_history[0].first == 2);
  CHECK(st.val_history[1].first == 4);
  CHECK(st.val_history[2].first == 6);
  CHECK(st.iteration == 6);
  CHECK(st.seed == 11);

  double best = -1.0;
  for (const auto& [it, acc] : st.val_history) best = std::max(best, acc);
  CHECK(st.best_val_accuracy == best);
  REQUIRE(st.best_prompts.size() == 1);
  REQUIRE(st.best_prompts[0].val_score.has_value());
  CHECK(*st.best_prompts[0].val_score == best);

  REQUIRE(st.memory.has_value());
  CHECK_FALSE(st.memory->empty());
  CHECK(st.memory->entries().size() <= 3);
  for (std::size_t i = 1; i < st.memory->entries().size(); ++i)
    CHECK(st.memory->entries()[i - 1].val_accuracy >=
          st.memory->entries()[i].val_accuracy);

  REQUIRE(checkpoints.size() == 3);
  for (const auto& doc : checkpoints) {
    CHECK(doc["event"] == "evaluation");
    CHECK(doc.contains("prompts"));
    CHECK(doc.contains("memory"));
    CHECK(doc["rng"]["seed"] == 11);
    CHECK(doc["ledger"].contains("calls"));
  }
  CHECK(checkpoints.back()["iteration"] == 6);

  auto lm2 = make_toy();
  auto st2 = dln1::train(data, lm2, fwd, proposal, init, opt);
  CHECK(st2.prompts[0].text == st.prompts[0].text);
  CHECK(st2.best_prompts[0].text == st.best_prompts[0].text);
  CHECK(st2.val_history == st.val_history);

  // Different seed: the request traffic itself must change (derived
  // sampling seeds and rendered proposal contexts both depend on it).
  TrainerOptions one = opt;
  one.iterations = 1;
  one.checkpoint_sink = nullptr;
  auto traffic = [&](std::uint64_t seed) {
    one.seed = seed;
    auto backend = make_toy();
    testing::RecordingBackend r(backend);
    dln1::train(data, r, fwd, proposal, init, one);
    std::vector<std::uint64_t> seeds;
    for (const auto& req : r.generate_requests)
      if (req.temperature > 0) seeds.push_back(req.sample_seed);
    return seeds;
  };
  CHECK(traffic(11) != traffic(12));
}

TEST_CASE("default cadence yields ten evaluations over twenty iterations") {
  auto data = make_data(8, 2);
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  TrainerOptions opt;
  opt.iterations = 20;
  opt.batch_size = 4;
  opt.eval_every = 2;
  opt.n_candidates = 2;
  opt.seed = 5;

  auto lm = make_toy();
  auto st = dln1::train(data, lm, fwd, proposal,
                        {"start here", PromptOrigin::initialization, 0, {}}, opt);
  CHECK(st.val_history.size() == 10);
}

TEST_CASE("tolerance -1 disables backtracking but memory still records") {
  auto data = make_data(6, 3);
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  TrainerOptions opt;
  opt.iterations = 4;
  opt.batch_size = 3;
  opt.eval_every = 2;
  opt.n_candidates = 2;
  opt.tolerance = -1;
  opt.memory_capacity = 2;
  opt.held_out_prompt_ranking = true;
  opt.seed = 9;

  auto lm = make_toy();
  auto st = dln1::train(data, lm, fwd, proposal,
                        {"label it", PromptOrigin::initialization, 0, {}}, opt);
  REQUIRE(st.memory.has_value());
  CHECK_FALSE(st.memory->empty());

  TrainerOptions nomem = opt;
  nomem.memory_capacity = 0;
  auto lm2 = make_toy();
  auto st2 = dln1::train(data, lm2, fwd, proposal,
                         {"label it", PromptOrigin::initialization, 0, {}}, nomem);
  CHECK_FALSE(st2.memory.has_value());
}

TEST_CASE("held-out proposal contexts exclude scoring examples") {
  auto data = make_data(8, 2);
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  TrainerOptions opt;
  opt.iterations = 1;
  opt.batch_size = 4;
  opt.eval_every = 1;
  opt.n_candidates = 4;
  opt.held_out_prompt_ranking = true;
  opt.seed = 21;

  auto lm = make_toy();
  testing::RecordingBackend rec(lm);
  dln1::train(data, rec, fwd, proposal,
              {"start", PromptOrigin::initialization, 0, {}}, opt);

  auto batch = minibatch_indices(data.train.size(), 4, opt.seed, 1);
  auto split = held_out_split(4, true, opt.seed, 1);
  std::vector<std::string> proposal_inputs, scoring_inputs;
  for (auto p : split.proposal) proposal_inputs.push_back(data.train[batch[p]].input);
  for (auto s : split.scoring) scoring_inputs.push_back(data.train[batch[s]].input);

  bool saw_proposal_context = false;
  for (const auto& r : rec.generate_requests) {
    if (r.context.find("# Student successes") == std::string::npos) continue;
    saw_proposal_context = true;
    for (const auto& x : scoring_inputs)
      CHECK(r.context.find(x) == std::string::npos);
  }
  CHECK(saw_proposal_context);

  // The candidate-ranking side only consults the scoring half.
  for (const auto& [ctx, y] : rec.logprob_requests) {
    for (const auto& x : proposal_inputs)
      CHECK(ctx.find(x) == std::string::npos);
  }
}

TEST_CASE("backend failure persists a checkpoint before aborting") {
  auto data = make_data(8, 4);
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  TrainerOptions opt;
  opt.iterations = 6;
  opt.batch_size = 4;
  opt.eval_every = 2;
  opt.n_candidates = 3;
  opt.seed = 11;
  std::vector<nlohmann::json> checkpoints;
  opt.checkpoint_sink = [&](const nlohmann::json& j) { checkpoints.push_back(j); };

  auto lm = make_toy();
  testing::FlakyBackend flaky(lm, 40);
  bool threw = false;
  try {
    dln1::train(data, flaky, fwd, proposal,
                {"start", PromptOrigin::initialization, 0, {}}, opt);
  } catch (const std::runtime_error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("injected failure") != std::string::npos);
  }
  REQUIRE(threw);
  REQUIRE_FALSE(checkpoints.empty());
  CHECK(checkpoints.back()["event"] == "abort");
  CHECK(checkpoints.back().contains("error"));
  CHECK(checkpoints.back()["iteration"].get<int>() < 6);
}

TEST_CASE("trainer rejects inconsistent options and empty splits") {
  auto fwd = load_tpl("classification_forward");
  auto proposal = load_tpl("prompt_proposal_v3_5");
  auto lm = make_toy();
  Prompt init{"p", PromptOrigin::initialization, 0, {}};

  TrainerOptions bad;
  bad.iterations = 0;
  CHECK_THROWS_AS(dln1::train(make_data(4, 2), lm, fwd, proposal, init, bad),
                  std::invalid_argument);

  TrainerOptions heldout;
  heldout.batch_size = 1;
  heldout.held_out_prompt_ranking = true;
  CHECK_THROWS_AS(dln1::train(make_data(4, 2), lm, fwd, proposal, init, heldout),
                  std::invalid_argument);

  TrainerOptions ok;
  ok.iterations = 1;
  ok.batch_size = 2;
  ok.n_candidates = 1;
  SplitDataset no_valid = make_data(4, 2);
  no_valid.valid.clear();
  CHECK_THROWS_AS(dln1::train(no_valid, lm, fwd, proposal, init, ok),
                  std::invalid_argument);
  SplitDataset no_train = make_data(4, 2);
  no_train.train.clear();
  CHECK_THROWS_AS(dln1::train(no_train, lm, fwd, proposal, init, ok),
                  std::invalid_argument);
}
