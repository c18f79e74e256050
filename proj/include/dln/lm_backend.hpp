#pragma once

// Backend-agnostic language model interface: temperature sampling plus
// exact continuation scoring, with a thread-safe usage ledger and
// order-preserving bounded-parallel batch helpers.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dln/text.hpp"

namespace dln {

struct GenerationRequest {
  std::string context;
  double temperature = 0.0;
  int n_samples = 1;
  int max_new_units = 256;
  std::vector<std::string> stop_sequences;
  // Positional sampling seed. Backends that support it (the toy LM) make
  // temperature>0 draws a pure function of (request, seed); remote
  // backends ignore it.
  std::uint64_t sample_seed = 0;
};

struct ScoredContinuation {
  std::string text;
  double total_logprob = 0.0;
  std::size_t unit_count = 0;
  double normalized_logprob = 0.0;
};

/// Usage counters in backend-native units (tokens for remote models,
/// whitespace units for the toy LM). Safe under concurrent updates.
class TokenLedger {
 public:
  void add_prompt(std::size_t n) noexcept { prompt_units_ += n; }
  void add_completion(std::size_t n) noexcept { completion_units_ += n; }
  void add_call() noexcept { ++call_count_; }

  std::uint64_t prompt_units() const noexcept { return prompt_units_; }
  std::uint64_t completion_units() const noexcept { return completion_units_; }
  std::uint64_t call_count() const noexcept { return call_count_; }
  std::uint64_t total_units() const noexcept {
    return prompt_units_ + completion_units_;
  }

  double estimated_cost(double price_per_1k_units) const noexcept {
    return static_cast<double>(total_units()) / 1000.0 * price_per_1k_units;
  }

 private:
  std::atomic<std::uint64_t> prompt_units_{0};
  std::atomic<std::uint64_t> completion_units_{0};
  std::atomic<std::uint64_t> call_count_{0};
};

class BackendError : public std::runtime_error {
 public:
  enum class Kind {
    transient,        // network/5xx/429; retryable
    context_too_long, // request exceeds the model window; not retryable
    unscoreable,      // endpoint cannot echo log-probs; misconfiguration
    protocol,         // malformed response or unexpected status
  };

  BackendError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// A batch operation that failed for some elements after retries. The
/// whole batch is aborted; `failed_indices` identifies the offenders.
class BatchError : public std::runtime_error {
 public:
  BatchError(std::vector<std::size_t> failed, const std::string& first_what)
      : std::runtime_error("batch failed at " +
                           std::to_string(failed.size()) +
                           " element(s); first error: " + first_what),
        failed_indices_(std::move(failed)) {}

  const std::vector<std::size_t>& failed_indices() const noexcept {
    return failed_indices_;
  }

 private:
  std::vector<std::size_t> failed_indices_;
};

namespace detail {

/// Applies fn to [0, n) with at most `max_in_flight` worker threads,
/// writing results in input order. Exceptions are collected; if any
/// element failed the whole map throws BatchError.
template <typename Result, typename Fn>
std::vector<Result> bounded_parallel_map(std::size_t n, std::size_t max_in_flight,
                                         Fn&& fn) {
  std::vector<Result> results(n);
  if (n == 0) return results;
  std::size_t workers = max_in_flight == 0 ? 1 : std::min(max_in_flight, n);
  std::vector<std::string> errors(n);
  std::vector<char> failed(n, 0);

  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        results[i] = fn(i);
      } catch (const std::exception& e) {
        failed[i] = 1;
        errors[i] = e.what();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          results[i] = fn(i);
        } catch (const std::exception& e) {
          failed[i] = 1;
          errors[i] = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < n; ++i)
    if (failed[i]) bad.push_back(i);
  if (!bad.empty()) throw BatchError(std::move(bad), errors[bad.front()]);
  return results;
}

}  // namespace detail

class LmBackend {
 public:
  virtual ~LmBackend() = default;

  /// Samples request.n_samples continuations. Temperature 0 is greedy and
  /// deterministic. Outputs are truncated at the first stop sequence.
  virtual std::vector<std::string> generate(const GenerationRequest& request) = 0;

  /// Exact log p(continuation | context) under the backend's model,
  /// with per-unit length normalization. Deterministic.
  virtual ScoredContinuation logprob(const std::string& context,
                                     const std::string& continuation) = 0;

  virtual std::vector<ScoredContinuation> batch_logprob(
      const std::vector<std::pair<std::string, std::string>>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("batch_logprob: empty batch");
    return detail::bounded_parallel_map<ScoredContinuation>(
        pairs.size(), max_in_flight_,
        [&](std::size_t i) { return logprob(pairs[i].first, pairs[i].second); });
  }

  virtual std::vector<std::vector<std::string>> batch_generate(
      const std::vector<GenerationRequest>& requests) {
    if (requests.empty()) throw std::invalid_argument("batch_generate: empty batch");
    return detail::bounded_parallel_map<std::vector<std::string>>(
        requests.size(), max_in_flight_,
        [&](std::size_t i) { return generate(requests[i]); });
  }

  TokenLedger& ledger() noexcept { return ledger_; }
  const TokenLedger& ledger() const noexcept { return ledger_; }

  void set_max_in_flight(std::size_t n) noexcept { max_in_flight_ = n; }
  std::size_t max_in_flight() const noexcept { return max_in_flight_; }

 protected:
  void charge_generate(const std::string& context,
                       const std::vector<std::string>& outputs) {
    ledger_.add_prompt(text::unit_count(context));
    std::size_t out = 0;
    for (const auto& o : outputs) out += text::unit_count(o);
    ledger_.add_completion(out);
    ledger_.add_call();
  }

  void charge_logprob(const std::string& context, const std::string& continuation) {
    // Echo-style scoring sends context and continuation together as the
    // prompt; nothing new is generated.
    ledger_.add_prompt(text::unit_count(context) + text::unit_count(continuation));
    ledger_.add_call();
  }

 private:
  TokenLedger ledger_;
  std::size_t max_in_flight_ = 1;
};

}  // namespace dln
