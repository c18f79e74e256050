#pragma once

// OpenAI-compatible completions client. Generation posts the context and
// samples n continuations; scoring posts context+continuation with
// echo=true, logprobs=0, max_tokens=0 and sums the echoed token log-probs
// whose text_offset falls inside the continuation. Unit boundaries are
// the backend tokenizer's business; the client only trusts text_offset.
//
// Transient transport failures (connect errors, 429, 5xx) are retried
// with exponential backoff; everything else surfaces immediately with a
// typed BackendError.

#include <chrono>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dln/lm_backend.hpp"
#include "dln/text.hpp"

namespace dln {

struct HttpLmConfig {
  std::string base_url = "http://127.0.0.1:8080";  // scheme://host[:port]
  std::string path = "/v1/completions";
  std::string model;
  // Name of the environment variable holding the API key. Empty means the
  // endpoint needs no credentials. The variable itself must be set.
  std::string api_key_env;
  int max_attempts = 5;
  int backoff_ms = 250;  // doubles after each failed attempt
  double timeout_seconds = 120.0;
  std::size_t max_in_flight = 4;
  double price_per_1k_units = 0.0;  // for cost reports; 0 = unknown
};

class HttpLm final : public LmBackend {
 public:
  explicit HttpLm(HttpLmConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.base_url.empty())
      throw std::invalid_argument("HttpLm: base_url must be set");
    if (cfg_.max_attempts < 1)
      throw std::invalid_argument("HttpLm: max_attempts must be >= 1");
    if (cfg_.backoff_ms < 0)
      throw std::invalid_argument("HttpLm: backoff_ms must be >= 0");
    if (!cfg_.api_key_env.empty()) {
      const char* key = std::getenv(cfg_.api_key_env.c_str());
      if (key == nullptr || *key == '\0')
        throw std::invalid_argument("HttpLm: environment variable '" +
                                    cfg_.api_key_env + "' is not set");
      api_key_ = key;
    }
    set_max_in_flight(cfg_.max_in_flight);
  }

  const HttpLmConfig& config() const noexcept { return cfg_; }

  std::vector<std::string> generate(const GenerationRequest& request) override {
    if (request.context.empty())
      throw std::invalid_argument("generate: empty context");
    if (request.n_samples < 1)
      throw std::invalid_argument("generate: n_samples must be >= 1");
    if (request.temperature < 0)
      throw std::invalid_argument("generate: negative temperature");

    nlohmann::json body{
        {"model", cfg_.model},
        {"prompt", request.context},
        {"temperature", request.temperature},
        {"n", request.n_samples},
        {"max_tokens", request.max_new_units},
        // 53-bit slice keeps the value exact in JSON; backends that ignore
        // seeds just lose replayability, nothing else.
        {"seed", request.sample_seed & ((std::uint64_t{1} << 53) - 1)},
    };
    if (!request.stop_sequences.empty()) body["stop"] = request.stop_sequences;

    auto doc = post(body);
    auto choices = doc.find("choices");
    if (choices == doc.end() || !choices->is_array() ||
        choices->size() != static_cast<std::size_t>(request.n_samples))
      throw BackendError(BackendError::Kind::protocol,
                         "generate: expected " + std::to_string(request.n_samples) +
                             " choices, got " + describe_choices(doc));

    std::vector<std::string> out(static_cast<std::size_t>(request.n_samples));
    std::size_t fallback_pos = 0;
    for (const auto& choice : *choices) {
      if (!choice.contains("text"))
        throw BackendError(BackendError::Kind::protocol,
                           "generate: choice without text");
      std::size_t idx = choice.value("index", fallback_pos);
      if (idx >= out.size())
        throw BackendError(BackendError::Kind::protocol,
                           "generate: choice index out of range");
      out[idx] = truncate_at_stops(choice.at("text").get<std::string>(),
                                   request.stop_sequences);
      ++fallback_pos;
    }

    if (auto usage = doc.find("usage"); usage != doc.end() && usage->is_object()) {
      ledger().add_prompt(usage->value("prompt_tokens", std::uint64_t{0}));
      ledger().add_completion(usage->value("completion_tokens", std::uint64_t{0}));
      ledger().add_call();
    } else {
      charge_generate(request.context, out);
    }
    return out;
  }

  ScoredContinuation logprob(const std::string& context,
                             const std::string& continuation) override {
    if (context.empty()) throw std::invalid_argument("logprob: empty context");
    if (text::unit_count(continuation) == 0)
      throw std::invalid_argument("logprob: empty continuation");

    nlohmann::json body{
        {"model", cfg_.model},  {"prompt", context + continuation},
        {"max_tokens", 0},      {"temperature", 0.0},
        {"echo", true},         {"logprobs", 0},
    };
    auto doc = post(body);

    auto choices = doc.find("choices");
    if (choices == doc.end() || !choices->is_array() || choices->empty())
      throw BackendError(BackendError::Kind::protocol, "logprob: no choices");
    const auto& logprobs = (*choices)[0].find("logprobs") != (*choices)[0].end()
                               ? (*choices)[0]["logprobs"]
                               : nlohmann::json();
    if (!logprobs.is_object() || !logprobs.contains("token_logprobs") ||
        !logprobs.contains("text_offset"))
      throw BackendError(BackendError::Kind::unscoreable,
                         "logprob: endpoint did not echo token log-probs; "
                         "check that it supports echo=true with logprobs");
    const auto& lps = logprobs["token_logprobs"];
    const auto& offsets = logprobs["text_offset"];
    if (!lps.is_array() || !offsets.is_array() || lps.size() != offsets.size())
      throw BackendError(BackendError::Kind::protocol,
                         "logprob: token_logprobs/text_offset mismatch");

    double total = 0.0;
    std::size_t units = 0;
    for (std::size_t i = 0; i < lps.size(); ++i) {
      if (offsets[i].get<std::size_t>() < context.size()) continue;
      if (lps[i].is_null())
        throw BackendError(BackendError::Kind::unscoreable,
                           "logprob: null log-prob inside the continuation");
      total += lps[i].get<double>();
      ++units;
    }
    if (units == 0)
      throw BackendError(BackendError::Kind::unscoreable,
                         "logprob: no echoed tokens start inside the "
                         "continuation (tokenizer merged the boundary?)");

    if (auto usage = doc.find("usage"); usage != doc.end() && usage->is_object()) {
      ledger().add_prompt(usage->value("prompt_tokens", std::uint64_t{0}));
      ledger().add_completion(usage->value("completion_tokens", std::uint64_t{0}));
      ledger().add_call();
    } else {
      charge_logprob(context, continuation);
    }

    ScoredContinuation sc;
    sc.text = continuation;
    sc.total_logprob = total;
    sc.unit_count = units;
    sc.normalized_logprob = total / static_cast<double>(units);
    return sc;
  }

 private:
  static std::string truncate_at_stops(std::string s,
                                       const std::vector<std::string>& stops) {
    std::size_t cut = std::string::npos;
    for (const auto& stop : stops) {
      if (stop.empty()) continue;
      std::size_t p = s.find(stop);
      if (p != std::string::npos) cut = std::min(cut, p);
    }
    if (cut != std::string::npos) s.resize(cut);
    return s;
  }

  static std::string snippet(const std::string& body) {
    return body.size() <= 200 ? body : body.substr(0, 200) + "...";
  }

  static std::string describe_choices(const nlohmann::json& doc) {
    auto it = doc.find("choices");
    if (it == doc.end()) return "none";
    if (!it->is_array()) return "a non-array";
    return std::to_string(it->size());
  }

  static bool looks_like_context_overflow(const std::string& body) {
    return body.find("maximum context length") != std::string::npos ||
           body.find("context_length_exceeded") != std::string::npos;
  }

  nlohmann::json post(const nlohmann::json& body) {
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (!api_key_.empty())
      headers.emplace("Authorization", "Bearer " + api_key_);

    std::string last_failure = "no attempt made";
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
      if (attempt > 1 && cfg_.backoff_ms > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(
            static_cast<long long>(cfg_.backoff_ms) << (attempt - 2)));

      // One client per call: httplib clients are not safe to share across
      // the batch workers.
      httplib::Client cli(cfg_.base_url);
      auto timeout = std::chrono::milliseconds(
          static_cast<long long>(cfg_.timeout_seconds * 1000.0));
      cli.set_connection_timeout(timeout);
      cli.set_read_timeout(timeout);
      cli.set_write_timeout(timeout);

      auto res = cli.Post(cfg_.path, headers, payload, "application/json");
      if (!res) {
        last_failure = "transport: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) {
        auto doc = nlohmann::json::parse(res->body, nullptr, false);
        if (doc.is_discarded())
          throw BackendError(BackendError::Kind::protocol,
                             "unparseable response: " + snippet(res->body));
        return doc;
      }
      if (res->status == 429 || res->status >= 500) {
        last_failure = "status " + std::to_string(res->status);
        continue;
      }
      if (looks_like_context_overflow(res->body))
        throw BackendError(
            BackendError::Kind::context_too_long,
            "request of " + std::to_string(payload.size()) +
                " bytes exceeds the model context (model '" + cfg_.model +
                "'): " + snippet(res->body));
      throw BackendError(BackendError::Kind::protocol,
                         "status " + std::to_string(res->status) + ": " +
                             snippet(res->body));
    }
    throw BackendError(BackendError::Kind::transient,
                       "backend unreachable after " +
                           std::to_string(cfg_.max_attempts) +
                           " attempts; last failure: " + last_failure);
  }

  HttpLmConfig cfg_;
  std::string api_key_;
};

}  // namespace dln
