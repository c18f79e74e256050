#pragma once

// Numeric machinery shared by both trainers: log-sum-exp accumulation,
// posterior sharpening, ELBO-weighted prompt scores, the exploration
// reward, and the enumerable-space ELBO/marginal verification utility.
//
// Two log-prob conventions coexist and are kept strictly apart:
//   - prompt scores and the exploration reward use length-normalized
//     log-probs (the search heuristic);
//   - the ELBO/marginal utility uses total log-probs, because it makes
//     statements about the model's actual distribution.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dln/lm_backend.hpp"
#include "dln/templates.hpp"

namespace dln {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log Σ exp(v_i) with max-subtraction. Empty or all -inf input -> -inf.
inline double logsumexp(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

/// Normalized exp(v_i) / Σ_j exp(v_j), max-subtracted. All -inf -> error.
inline std::vector<double> softmax(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf)
    throw std::domain_error("softmax: all inputs are -inf");
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

struct PosteriorSample {
  std::string hidden;
  double alpha = 0.0;  // log p(h | lower context)
  double beta = 0.0;   // log p(upper target | context built from h)
};

/// sharpen(): softmax over alpha_sharp * (alpha_i + beta_i).
/// alpha_sharp = 0 gives uniform weights; large values approach one-hot.
inline std::vector<double> sharpen(
    const std::vector<std::pair<double, double>>& raw, double alpha_sharp) {
  if (raw.empty()) throw std::invalid_argument("sharpen: empty sample list");
  if (alpha_sharp < 0 || !std::isfinite(alpha_sharp))
    throw std::invalid_argument("sharpen: alpha_sharp must be finite and >= 0");
  std::vector<double> scaled(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    double joint = raw[i].first + raw[i].second;
    if (!std::isfinite(joint))
      throw std::domain_error("sharpen: non-finite entry at index " +
                              std::to_string(i));
    scaled[i] = alpha_sharp * joint;
  }
  return softmax(scaled);
}

struct WeightedSampleSet {
  std::vector<PosteriorSample> samples;
  double alpha_sharp = 1.0;
  std::vector<double> weights;

  static WeightedSampleSet make(std::vector<PosteriorSample> samples,
                                double alpha_sharp) {
    WeightedSampleSet set;
    set.samples = std::move(samples);
    set.alpha_sharp = alpha_sharp;
    std::vector<std::pair<double, double>> raw;
    raw.reserve(set.samples.size());
    for (const auto& s : set.samples) raw.emplace_back(s.alpha, s.beta);
    set.weights = sharpen(raw, alpha_sharp);
    return set;
  }

  /// Argmax weight, ties to the lowest index.
  std::size_t best_index() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < weights.size(); ++i)
      if (weights[i] > weights[best]) best = i;
    return best;
  }
};

/// One side of a double-weighted score: strings with normalized weights.
struct WeightedStrings {
  std::vector<std::string> texts;
  std::vector<double> weights;

  static WeightedStrings point_mass(std::string s) {
    return WeightedStrings{{std::move(s)}, {1.0}};
  }
  static WeightedStrings from_samples(const WeightedSampleSet& set) {
    WeightedStrings ws;
    for (const auto& s : set.samples) ws.texts.push_back(s.hidden);
    ws.weights = set.weights;
    return ws;
  }
};

/// Shared core of every prompt score: per example, the double sum
///   Σ_i Σ_j  w_lower[i] · w_upper[j] · normalized log p(upper[j] | ctx(e, lower[i]))
/// summed across examples. Zero-weight terms are skipped entirely (no
/// backend call, and no 0·(-inf) poisoning). Pair order is fixed
/// (example-major, then lower, then upper), so accumulation is
/// bit-reproducible.
inline double double_weighted_score(
    const std::vector<WeightedStrings>& lower,
    const std::vector<WeightedStrings>& upper,
    const std::function<std::string(std::size_t, const std::string&)>& context_fn,
    LmBackend& lm) {
  if (lower.size() != upper.size())
    throw std::invalid_argument("double_weighted_score: side size mismatch");
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<double> coeffs;
  for (std::size_t e = 0; e < lower.size(); ++e) {
    for (std::size_t i = 0; i < lower[e].texts.size(); ++i) {
      if (lower[e].weights[i] == 0.0) continue;
      std::string ctx = context_fn(e, lower[e].texts[i]);
      for (std::size_t j = 0; j < upper[e].texts.size(); ++j) {
        if (upper[e].weights[j] == 0.0) continue;
        pairs.emplace_back(ctx, upper[e].texts[j]);
        coeffs.push_back(lower[e].weights[i] * upper[e].weights[j]);
      }
    }
  }
  if (pairs.empty()) return 0.0;
  auto scored = lm.batch_logprob(pairs);
  double total = 0.0;
  for (std::size_t i = 0; i < scored.size(); ++i)
    total += coeffs[i] * scored[i].normalized_logprob;
  return total;
}

/// s_0-style score: Σ_x Σ_k q^k · normalized log p(h^k | fwd(x, candidate)).
inline double prompt_score_first_layer(const std::string& candidate,
                                       const std::vector<std::string>& inputs,
                                       const std::vector<WeightedSampleSet>& samples,
                                       LmBackend& lm, const Template& forward_tpl) {
  if (inputs.size() != samples.size())
    throw std::invalid_argument("prompt_score_first_layer: size mismatch");
  std::vector<WeightedStrings> lower, upper;
  for (std::size_t e = 0; e < inputs.size(); ++e) {
    lower.push_back(WeightedStrings::point_mass(inputs[e]));
    upper.push_back(WeightedStrings::from_samples(samples[e]));
  }
  auto ctx = [&](std::size_t, const std::string& x) {
    Binding b;
    b.vars["prompt"] = candidate;
    b.vars["input"] = x;
    return forward_tpl.render(b).text;
  };
  return double_weighted_score(lower, upper, ctx, lm);
}

/// s_1-style score: Σ_x Σ_k q^k · normalized log p(y | residual(h^k, x, candidate)).
inline double prompt_score_second_layer(
    const std::string& candidate,
    const std::vector<std::string>& inputs,
    const std::vector<WeightedSampleSet>& samples,
    const std::vector<std::string>& targets, LmBackend& lm,
    const Template& residual_tpl) {
  if (inputs.size() != samples.size() || inputs.size() != targets.size())
    throw std::invalid_argument("prompt_score_second_layer: size mismatch");
  std::vector<WeightedStrings> lower, upper;
  for (std::size_t e = 0; e < inputs.size(); ++e) {
    lower.push_back(WeightedStrings::from_samples(samples[e]));
    upper.push_back(WeightedStrings::point_mass(targets[e]));
  }
  auto ctx = [&](std::size_t e, const std::string& h) {
    Binding b;
    b.vars["prompt"] = candidate;
    b.vars["input"] = inputs[e];
    b.vars["h"] = h;
    return residual_tpl.render(b).text;
  };
  return double_weighted_score(lower, upper, ctx, lm);
}

/// Exploration reward for first-layer candidates (annealed by lambda):
///   r = -lambda · Σ over wrong cases of normalized log p(ĥ | fwd(x, candidate))
/// Always >= 0. Cases with an empty forward hidden are skipped (nothing
/// to score).
inline double exploration_reward(
    const std::string& candidate,
    const std::vector<std::pair<std::string, std::string>>& wrong_cases,
    LmBackend& lm, const Template& forward_tpl, double lambda) {
  if (lambda < 0) throw std::invalid_argument("exploration_reward: lambda < 0");
  if (lambda == 0 || wrong_cases.empty()) return 0.0;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [x, h_hat] : wrong_cases) {
    if (text::unit_count(h_hat) == 0) continue;
    Binding b;
    b.vars["prompt"] = candidate;
    b.vars["input"] = x;
    pairs.emplace_back(forward_tpl.render(b).text, h_hat);
  }
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& sc : lm.batch_logprob(pairs)) total += sc.normalized_logprob;
  return -lambda * total;
}

// ---- enumerable-space verification --------------------------------------

struct ElboCheck {
  double elbo = 0.0;
  double log_marginal = 0.0;
};

/// Exact ELBO and log-marginal over an enumerable hidden space:
///   log_marginal = log Σ_h p(y | ctx1(h)) p(h | ctx0)
///   elbo(q)      = Σ_h q(h) [log p(y | ctx1(h)) + log p(h | ctx0)] + H[q]
/// using total log-probs. For any normalized q, elbo <= log_marginal,
/// with equality exactly at the true posterior.
inline ElboCheck elbo_lower_bounds_marginal_check(
    const std::string& x, const std::string& y, const Template& hidden_tpl,
    const std::string& pi0, const Template& residual_tpl, const std::string& pi1,
    LmBackend& lm, const std::vector<std::string>& hidden_space,
    const std::vector<double>& q) {
  if (hidden_space.empty())
    throw std::invalid_argument("elbo check: empty hidden space");
  if (hidden_space.size() > 100000)
    throw std::domain_error("elbo check: hidden space exceeds enumeration guard");
  if (q.size() != hidden_space.size())
    throw std::invalid_argument("elbo check: q size mismatch");
  double qsum = 0.0;
  for (double qi : q) {
    if (qi < 0) throw std::invalid_argument("elbo check: negative q entry");
    qsum += qi;
  }
  if (std::abs(qsum - 1.0) > 1e-6)
    throw std::invalid_argument("elbo check: q does not sum to 1");

  Binding b0;
  b0.vars["prompt"] = pi0;
  b0.vars["input"] = x;
  std::string ctx0 = hidden_tpl.render(b0).text;

  std::vector<double> joint(hidden_space.size());
  for (std::size_t i = 0; i < hidden_space.size(); ++i) {
    const std::string& h = hidden_space[i];
    Binding b1;
    b1.vars["prompt"] = pi1;
    b1.vars["input"] = x;
    b1.vars["h"] = h;
    double lp_h = lm.logprob(ctx0, h).total_logprob;
    double lp_y = lm.logprob(residual_tpl.render(b1).text, y).total_logprob;
    joint[i] = lp_h + lp_y;
  }

  ElboCheck out;
  out.log_marginal = logsumexp(joint);
  double elbo = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;  // 0·log 0 and 0·(-inf) both contribute 0
    if (joint[i] == kNegInf) {
      elbo = kNegInf;
      break;
    }
    elbo += q[i] * (joint[i] - std::log(q[i] / qsum));
  }
  out.elbo = elbo;
  return out;
}

}  // namespace dln
