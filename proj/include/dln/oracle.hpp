#pragma once

// Brute-force references over enumerable toy spaces. Everything here is
// the slow, obviously-correct route that the fast paths are tested
// against; nothing in the trainers calls into this header.
//
// All quantities use total log-probs: these are statements about the
// model's actual distribution, not search heuristics.

#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dln/lm_backend.hpp"
#include "dln/scoring.hpp"
#include "dln/templates.hpp"
#include "dln/text.hpp"

namespace dln::oracle {

inline constexpr std::size_t kEnumerationGuard = 100000;

/// An explicit finite candidate space with a length bound.
struct EnumerableSpace {
  std::vector<std::string> strings;
  std::size_t max_len = 0;  // in whitespace units

  EnumerableSpace(std::vector<std::string> s, std::size_t bound)
      : strings(std::move(s)), max_len(bound) {
    if (strings.empty())
      throw std::invalid_argument("EnumerableSpace: empty");
    if (strings.size() > kEnumerationGuard)
      throw std::domain_error("EnumerableSpace: exceeds enumeration guard");
    std::set<std::string> uniq(strings.begin(), strings.end());
    if (uniq.size() != strings.size())
      throw std::invalid_argument("EnumerableSpace: duplicate strings");
    for (const auto& s2 : strings)
      if (text::unit_count(s2) > max_len)
        throw std::invalid_argument("EnumerableSpace: string over max_len: '" +
                                    s2 + "'");
  }
};

namespace detail {

inline std::vector<double> joint_logprobs(const std::string& x, const std::string& y,
                                          const Template& hidden_tpl,
                                          const std::string& pi0,
                                          const Template& residual_tpl,
                                          const std::string& pi1, LmBackend& lm,
                                          const EnumerableSpace& space) {
  Binding b0;
  b0.vars["prompt"] = pi0;
  b0.vars["input"] = x;
  const std::string ctx0 = hidden_tpl.render(b0).text;
  std::vector<double> joint;
  joint.reserve(space.strings.size());
  for (const auto& h : space.strings) {
    Binding b1;
    b1.vars["prompt"] = pi1;
    b1.vars["input"] = x;
    b1.vars["h"] = h;
    joint.push_back(lm.logprob(ctx0, h).total_logprob +
                    lm.logprob(residual_tpl.render(b1).text, y).total_logprob);
  }
  return joint;
}

}  // namespace detail

/// log Σ_h∈space p(y | 𝒯_r(h, x, π1)) · p(h | 𝒯(x, π0)).
inline double exact_marginal(const std::string& x, const std::string& y,
                             const Template& hidden_tpl, const std::string& pi0,
                             const Template& residual_tpl, const std::string& pi1,
                             LmBackend& lm, const EnumerableSpace& space) {
  return logsumexp(detail::joint_logprobs(x, y, hidden_tpl, pi0, residual_tpl,
                                          pi1, lm, space));
}

/// p(h | x, y) over the space, via normalized joints.
inline std::vector<double> exact_posterior(
    const std::string& x, const std::string& y, const Template& hidden_tpl,
    const std::string& pi0, const Template& residual_tpl, const std::string& pi1,
    LmBackend& lm, const EnumerableSpace& space) {
  return softmax(detail::joint_logprobs(x, y, hidden_tpl, pi0, residual_tpl, pi1,
                                        lm, space));
}

/// KL(q ‖ p) over a shared support. q-mass on a p-zero -> +inf.
inline double kl_divergence(const std::vector<double>& q,
                            const std::vector<double>& p) {
  if (q.size() != p.size())
    throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    if (p[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return kl;
}

}  // namespace dln::oracle
