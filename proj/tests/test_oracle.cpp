#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dln/oracle.hpp"
#include "dln/scoring.hpp"
#include "dln/toy_lm.hpp"
#include "support/test_paths.hpp"

using namespace dln;
using Catch::Matchers::WithinAbs;

namespace {

Template hid_tpl() {
  return Template::load_file(testsupport::template_path("hidden_step_by_step"));
}
Template res_tpl() {
  return Template::load_file(testsupport::template_path("residual_classification"));
}

ToyLm make_lm(std::uint64_t seed, std::size_t v, std::size_t max_units,
              double peak, double eos_bias = 1.0) {
  ToyLmConfig cfg;
  cfg.seed = seed;
  for (std::size_t i = 0; i < v; ++i) cfg.vocab.push_back(std::string(1, char('a' + i)));
  cfg.max_units = max_units;
  cfg.peakedness = peak;
  cfg.eos_bias = eos_bias;
  return ToyLm(cfg);
}

}  // namespace

TEST_CASE("enumerable space validation") {
  CHECK_THROWS_AS(oracle::EnumerableSpace({}, 2), std::invalid_argument);
  CHECK_THROWS_AS(oracle::EnumerableSpace({"a", "a"}, 2), std::invalid_argument);
  CHECK_THROWS_AS(oracle::EnumerableSpace({"a b c"}, 2), std::invalid_argument);
  CHECK_NOTHROW(oracle::EnumerableSpace({"a b", "c"}, 2));
}

TEST_CASE("singleton space reduces the marginal to the joint") {
  auto lm = make_lm(51, 3, 2, 2.0);
  auto hid = hid_tpl();
  auto res = res_tpl();
  const std::string x = "input", y = "a b", pi0 = "p0", pi1 = "p1", h = "c a";

  oracle::EnumerableSpace space({h}, 2);
  double marginal = oracle::exact_marginal(x, y, hid, pi0, res, pi1, lm, space);

  Binding b0;
  b0.vars["prompt"] = pi0;
  b0.vars["input"] = x;
  Binding b1;
  b1.vars["prompt"] = pi1;
  b1.vars["input"] = x;
  b1.vars["h"] = h;
  double joint = lm.logprob(hid.render(b0).text, h).total_logprob +
                 lm.logprob(res.render(b1).text, y).total_logprob;
  CHECK_THAT(marginal, WithinAbs(joint, 1e-12));
}

TEST_CASE("marginals over the full support obey total probability") {
  for (std::uint64_t seed : {52ull, 53ull, 54ull}) {
    auto lm = make_lm(seed, 3, 2, 3.0, seed % 2 ? 0.8 : 0.0);
    auto hid = hid_tpl();
    auto res = res_tpl();
    auto support = lm.support();
    oracle::EnumerableSpace space(support, 2);
    double mass = 0.0;
    for (const auto& y : support)
      mass += std::exp(
          oracle::exact_marginal("the x", y, hid, "p0", res, "p1", lm, space));
    CHECK_THAT(mass, WithinAbs(1.0, 1e-9));
  }
}

TEST_CASE("four-hidden two-output instance matches a hand-style sum") {
  auto lm = make_lm(55, 2, 2, 4.0, 0.0);  // support: exactly the 4 2-unit strings
  auto hid = hid_tpl();
  auto res = res_tpl();
  auto support = lm.support();
  REQUIRE(support.size() == 4);
  oracle::EnumerableSpace space(support, 2);

  Binding b0;
  b0.vars["prompt"] = "p0";
  b0.vars["input"] = "x";
  std::string ctx0 = hid.render(b0).text;

  for (const std::string y : {"a b", "b a"}) {
    // independent route: plain probability accumulation, no log-sum-exp
    long double total = 0.0L;
    for (const auto& h : support) {
      Binding b1;
      b1.vars["prompt"] = "p1";
      b1.vars["input"] = "x";
      b1.vars["h"] = h;
      long double ph = std::exp((long double)lm.logprob(ctx0, h).total_logprob);
      long double py = std::exp(
          (long double)lm.logprob(res.render(b1).text, y).total_logprob);
      total += ph * py;
    }
    double got = oracle::exact_marginal("x", y, hid, "p0", res, "p1", lm, space);
    CHECK_THAT(got, WithinAbs((double)std::log(total), 1e-12));
  }
}

TEST_CASE("posterior normalizes, and is uniform when the model is flat") {
  auto flat = make_lm(56, 3, 1, 0.0);  // peakedness 0: every conditional uniform
  auto hid = hid_tpl();
  auto res = res_tpl();
  auto support = flat.support();
  oracle::EnumerableSpace space(support, 1);
  auto post = oracle::exact_posterior("x", "a", hid, "p0", res, "p1", flat, space);
  double sum = 0.0;
  for (double p : post) {
    CHECK_THAT(p, WithinAbs(1.0 / support.size(), 1e-12));
    sum += p;
  }
  CHECK_THAT(sum, WithinAbs(1.0, 1e-9));

  // constant likelihood => prior equals posterior => KL is zero
  std::vector<double> prior(support.size(), 1.0 / support.size());
  CHECK_THAT(oracle::kl_divergence(prior, post), WithinAbs(0.0, 1e-12));
}

TEST_CASE("prior-posterior KL is positive once the model is peaked") {
  auto lm = make_lm(57, 4, 1, 5.0);
  auto hid = hid_tpl();
  auto res = res_tpl();
  auto support = lm.support();
  oracle::EnumerableSpace space(support, 1);

  Binding b0;
  b0.vars["prompt"] = "p0";
  b0.vars["input"] = "x";
  std::string ctx0 = hid.render(b0).text;
  std::vector<double> prior;
  for (const auto& h : support)
    prior.push_back(std::exp(lm.logprob(ctx0, h).total_logprob));

  auto post = oracle::exact_posterior("x", "b", hid, "p0", res, "p1", lm, space);
  double kl = oracle::kl_divergence(prior, post);
  CHECK(kl > 1e-6);
  CHECK(std::isfinite(kl));
}

TEST_CASE("kl divergence edge cases") {
  CHECK_THROWS_AS(oracle::kl_divergence({1.0}, {0.5, 0.5}), std::invalid_argument);
  CHECK(oracle::kl_divergence({0.0, 1.0}, {0.5, 0.5}) ==
        std::log(2.0));  // skip the zero-mass term
  CHECK(std::isinf(oracle::kl_divergence({0.5, 0.5}, {1.0, 0.0})));
}

TEST_CASE("sharpened weights equal the restricted renormalized posterior") {
  // Unit-length spaces make normalized and total log-probs coincide, so
  // the sharpening inputs are exactly the joint terms of the posterior.
  rng::Stream fuzz(rng::derive(58, rng::tag(rng::Tag::fuzz)));
  auto hid = hid_tpl();
  auto res = res_tpl();
  for (int trial = 0; trial < 20; ++trial) {
    auto lm = make_lm(600 + trial, 4 + trial % 3, 1, 1.0 + 4 * fuzz.next_double());
    auto support = lm.support();
    oracle::EnumerableSpace space(support, 1);
    const std::string x = "q" + std::to_string(trial), y = support[0];
    auto post = oracle::exact_posterior(x, y, hid, "p0", res, "p1", lm, space);

    // pick a strict subset of distinct hiddens as the "samples"
    auto idx = fuzz.sample_indices(support.size(), 3);
    Binding b0;
    b0.vars["prompt"] = "p0";
    b0.vars["input"] = x;
    std::string ctx0 = hid.render(b0).text;
    std::vector<PosteriorSample> samples;
    double restricted_mass = 0.0;
    for (auto i : idx) {
      Binding b1;
      b1.vars["prompt"] = "p1";
      b1.vars["input"] = x;
      b1.vars["h"] = support[i];
      samples.push_back(
          {support[i], lm.logprob(ctx0, support[i]).normalized_logprob,
           lm.logprob(res.render(b1).text, y).normalized_logprob});
      restricted_mass += post[i];
    }
    auto set = WeightedSampleSet::make(samples, 1.0);
    for (std::size_t k = 0; k < idx.size(); ++k)
      REQUIRE_THAT(set.weights[k], WithinAbs(post[idx[k]] / restricted_mass, 1e-9));
  }
}
