#pragma once

// Deterministic toy language model: a seeded, weighted, finite-order
// Markov model over a small symbol vocabulary with an end-of-sequence
// symbol. Log-probs are exact and output spaces are enumerable, which is
// what lets the probabilistic machinery be checked against brute force.
//
// Next-unit weights come from hashing (seed, window of last `order`
// units, candidate unit): weight = exp(peakedness * u) with u in [0,1).
// EOS is excluded before the first continuation unit (so continuations
// are never empty), weighted by eos_bias afterwards, and forced once
// max_units have been emitted. Sampling takes an explicit per-call seed,
// so results never depend on call order or threading.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dln/lm_backend.hpp"
#include "dln/rng.hpp"
#include "dln/text.hpp"

namespace dln {

struct ToyLmConfig {
  std::uint64_t seed = 1;
  std::vector<std::string> vocab;  // nonempty, <= 32 distinct symbols
  std::size_t order = 16;          // window length in units
  std::size_t max_units = 4;       // hard length cap; EOS forced here
  double peakedness = 4.0;         // 0 => uniform conditionals
  double eos_bias = 1.0;           // 0 => all outputs have exactly max_units
};

class ToyLm final : public LmBackend {
 public:
  explicit ToyLm(ToyLmConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.vocab.empty() || cfg_.vocab.size() > 32)
      throw std::invalid_argument("ToyLm: vocab must have 1..32 symbols");
    if (cfg_.max_units == 0)
      throw std::invalid_argument("ToyLm: max_units must be positive");
    if (cfg_.eos_bias < 0 || cfg_.peakedness < 0)
      throw std::invalid_argument("ToyLm: eos_bias and peakedness must be >= 0");
    for (const auto& u : cfg_.vocab) {
      if (u.empty() || text::split_units(u).size() != 1)
        throw std::invalid_argument("ToyLm: vocab symbols must be single units");
      if (std::count(cfg_.vocab.begin(), cfg_.vocab.end(), u) != 1)
        throw std::invalid_argument("ToyLm: duplicate vocab symbol '" + u + "'");
    }
  }

  const ToyLmConfig& config() const noexcept { return cfg_; }

  std::vector<std::string> generate(const GenerationRequest& request) override {
    if (request.context.empty())
      throw std::invalid_argument("generate: empty context");
    if (request.n_samples < 1)
      throw std::invalid_argument("generate: n_samples must be >= 1");
    if (request.temperature < 0)
      throw std::invalid_argument("generate: negative temperature");

    std::size_t cap = std::min<std::size_t>(
        cfg_.max_units, static_cast<std::size_t>(std::max(request.max_new_units, 1)));
    std::vector<std::string> outputs;
    outputs.reserve(static_cast<std::size_t>(request.n_samples));
    for (int s = 0; s < request.n_samples; ++s) {
      rng::Stream stream(rng::derive(cfg_.seed, kGenerateSalt, request.sample_seed,
                                     text::fnv1a64(request.context),
                                     static_cast<std::uint64_t>(s)));
      outputs.push_back(sample_one(request.context, request.temperature, cap, stream));
    }
    for (auto& o : outputs) o = apply_stops(o, request.stop_sequences);
    charge_generate(request.context, outputs);
    return outputs;
  }

  ScoredContinuation logprob(const std::string& context,
                             const std::string& continuation) override {
    if (context.empty()) throw std::invalid_argument("logprob: empty context");
    auto units = text::split_units(continuation);
    if (units.empty()) throw std::invalid_argument("logprob: empty continuation");
    charge_logprob(context, continuation);

    constexpr double ninf = -std::numeric_limits<double>::infinity();
    ScoredContinuation sc;
    sc.text = continuation;
    sc.unit_count = units.size();
    double total = 0.0;
    if (units.size() > cfg_.max_units) {
      total = ninf;  // beyond the hard cap the model assigns zero mass
    } else {
      std::vector<std::string> prefix = text::split_units(context);
      for (std::size_t i = 0; i < units.size() && total != ninf; ++i) {
        auto probs = conditional(prefix, i);
        std::size_t idx = vocab_index(units[i]);
        double p = idx < cfg_.vocab.size() ? probs[idx] : 0.0;
        total = p > 0 ? total + std::log(p) : ninf;
        prefix.push_back(units[i]);
      }
      if (total != ninf) {
        // Probability of stopping exactly here.
        double p_eos = conditional(prefix, units.size()).back();
        total = p_eos > 0 ? total + std::log(p_eos) : ninf;
      }
    }
    sc.total_logprob = total;
    sc.normalized_logprob = total / static_cast<double>(sc.unit_count);
    return sc;
  }

  /// Normalized next-unit distribution after `emitted` continuation units
  /// have been produced following `full_prefix`. Entries follow vocab
  /// order; the final entry is EOS.
  std::vector<double> next_distribution(const std::string& full_prefix,
                                        std::size_t emitted) const {
    return conditional(text::split_units(full_prefix), emitted);
  }

  /// Every string the model can emit (eos_bias = 0: exactly max_units
  /// units; otherwise any length in 1..max_units). Deterministic order.
  /// The probabilities of these strings under any context sum to 1.
  std::vector<std::string> support() const {
    std::size_t min_len = cfg_.eos_bias == 0 ? cfg_.max_units : 1;
    double size_est = 0;
    for (std::size_t l = min_len; l <= cfg_.max_units; ++l)
      size_est += std::pow(static_cast<double>(cfg_.vocab.size()),
                           static_cast<double>(l));
    if (size_est > 1e6)
      throw std::domain_error("ToyLm::support: space too large to enumerate");

    std::vector<std::string> out;
    std::vector<std::size_t> digits;
    for (std::size_t len = min_len; len <= cfg_.max_units; ++len) {
      digits.assign(len, 0);
      for (;;) {
        std::vector<std::string> units;
        units.reserve(len);
        for (std::size_t d : digits) units.push_back(cfg_.vocab[d]);
        out.push_back(text::join(units));
        std::size_t pos = len;
        while (pos > 0 && ++digits[pos - 1] == cfg_.vocab.size()) {
          digits[pos - 1] = 0;
          --pos;
        }
        if (pos == 0) break;
      }
    }
    return out;
  }

 private:
  static constexpr std::uint64_t kGenerateSalt = 0x67656E6572617465ULL;
  static constexpr std::uint64_t kEosSalt = 0x0404040404040404ULL;

  std::size_t vocab_index(const std::string& u) const {
    for (std::size_t i = 0; i < cfg_.vocab.size(); ++i)
      if (cfg_.vocab[i] == u) return i;
    return cfg_.vocab.size();
  }

  static double u01(std::uint64_t h) {
    return static_cast<double>(rng::mix64(h) >> 11) * 0x1.0p-53;
  }

  std::uint64_t window_hash(const std::vector<std::string>& prefix) const {
    std::size_t take = std::min(cfg_.order, prefix.size());
    std::uint64_t h = rng::mix64(cfg_.seed);
    for (std::size_t i = prefix.size() - take; i < prefix.size(); ++i)
      h = rng::combine(h, text::fnv1a64(prefix[i]));
    return h;
  }

  /// Probabilities over vocab (in order) then EOS, given the window at
  /// the end of `prefix`, with `emitted` continuation units already out.
  std::vector<double> conditional(const std::vector<std::string>& prefix,
                                  std::size_t emitted) const {
    std::size_t v = cfg_.vocab.size();
    std::vector<double> w(v + 1, 0.0);
    if (emitted >= cfg_.max_units) {
      w[v] = 1.0;
      return w;
    }
    std::uint64_t wh = window_hash(prefix);
    for (std::size_t i = 0; i < v; ++i)
      w[i] = std::exp(cfg_.peakedness *
                      u01(rng::combine(wh, text::fnv1a64(cfg_.vocab[i]))));
    if (emitted > 0 && cfg_.eos_bias > 0)
      w[v] = cfg_.eos_bias * std::exp(cfg_.peakedness *
                                      u01(rng::combine(wh, kEosSalt)));
    double total = 0.0;
    for (double x : w) total += x;
    for (double& x : w) x /= total;
    return w;
  }

  std::string sample_one(const std::string& context, double temperature,
                         std::size_t cap, rng::Stream& stream) const {
    std::vector<std::string> prefix = text::split_units(context);
    std::vector<std::string> emitted_units;
    for (std::size_t step = 0; step < cap; ++step) {
      auto probs = conditional(prefix, step);
      std::size_t pick;
      if (temperature == 0.0) {
        pick = static_cast<std::size_t>(
            std::max_element(probs.begin(), probs.end()) - probs.begin());
      } else {
        std::vector<double> w(probs.size());
        for (std::size_t i = 0; i < probs.size(); ++i)
          w[i] = probs[i] > 0 ? std::exp(std::log(probs[i]) / temperature) : 0.0;
        pick = stream.next_categorical(w);
      }
      if (pick == cfg_.vocab.size()) break;  // EOS
      emitted_units.push_back(cfg_.vocab[pick]);
      prefix.push_back(cfg_.vocab[pick]);
    }
    return text::join(emitted_units);
  }

  static std::string apply_stops(std::string s,
                                 const std::vector<std::string>& stops) {
    std::size_t cut = std::string::npos;
    for (const auto& stop : stops) {
      if (stop.empty()) continue;
      std::size_t p = s.find(stop);
      if (p != std::string::npos) cut = std::min(cut, p);
    }
    if (cut != std::string::npos) s.resize(cut);
    return text::trim(s);
  }

  ToyLmConfig cfg_;
};

}  // namespace dln
