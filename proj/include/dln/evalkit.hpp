#pragma once

// Dataset ingestion and the exact-match metric.
//
// Source files are JSON Lines: one {"input": ..., "target": ..., "id"?: ...}
// object per line. Splits are carved from a single source by seeded
// shuffle, so a (file, split sizes, seed) triple always produces the same
// byte-identical dataset.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dln/rng.hpp"
#include "dln/text.hpp"

namespace dln {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Example {
  std::string input;
  std::string target;
  std::string id;
};

struct SplitSpec {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
};

struct SplitDataset {
  std::vector<Example> train, valid, test;
  std::string task_name;
  std::vector<std::string> class_labels;  // distinct normalized targets
};

/// The canonical answer form used on both sides of every comparison.
inline std::string normalize(std::string_view s) {
  return text::normalize_answer(s);
}

inline SplitDataset load_dataset(const std::filesystem::path& path,
                                 const SplitSpec& spec, std::uint64_t seed,
                                 std::string task_name = "") {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path.string());

  std::vector<Example> all;
  std::set<std::string> ids;
  std::set<std::string> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.filename().string() + " line " +
                      std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("input") || !rec.contains("target"))
      throw DataError(path.filename().string() + " line " +
                      std::to_string(line_no) + ": need input and target");
    Example ex;
    ex.input = rec["input"].get<std::string>();
    ex.target = rec["target"].get<std::string>();
    if (ex.input.empty() || ex.target.empty())
      throw DataError(path.filename().string() + " line " +
                      std::to_string(line_no) + ": empty input or target");
    if (rec.contains("id")) {
      ex.id = rec["id"].get<std::string>();
    } else {
      // content hash salted with the line number, so repeated records
      // stay distinguishable
      char buf[20];
      std::snprintf(buf, sizeof buf, "%016llx",
                    static_cast<unsigned long long>(rng::combine(
                        text::fnv1a64(ex.input + '\x1f' + ex.target), line_no)));
      ex.id = std::string("ex-") + buf;
    }
    if (!ids.insert(ex.id).second)
      throw DataError(path.filename().string() + " line " +
                      std::to_string(line_no) + ": duplicate id '" + ex.id + "'");
    labels.insert(normalize(ex.target));
    all.push_back(std::move(ex));
  }

  if (spec.train + spec.valid + spec.test > all.size())
    throw DataError("split sizes exceed source size (" +
                    std::to_string(spec.train + spec.valid + spec.test) + " > " +
                    std::to_string(all.size()) + ")");

  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Stream stream(rng::derive(seed, rng::tag(rng::Tag::data_shuffle)));
  stream.shuffle(order);

  SplitDataset ds;
  ds.task_name = task_name.empty() ? path.stem().string() : std::move(task_name);
  ds.class_labels.assign(labels.begin(), labels.end());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < spec.train; ++i) ds.train.push_back(all[order[pos++]]);
  for (std::size_t i = 0; i < spec.valid; ++i) ds.valid.push_back(all[order[pos++]]);
  for (std::size_t i = 0; i < spec.test; ++i) ds.test.push_back(all[order[pos++]]);
  return ds;
}

inline double accuracy(const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds) {
  if (preds.size() != golds.size())
    throw std::invalid_argument("accuracy: length mismatch");
  if (preds.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (normalize(preds[i]) == normalize(golds[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Runs `batch_infer` over the split's inputs and scores the result.
/// The infer function is whatever the caller's architecture provides
/// (single prompt, layer stack, remote model); it must be temperature 0.
inline double evaluate(
    const std::function<std::vector<std::string>(const std::vector<std::string>&)>&
        batch_infer,
    const std::vector<Example>& split) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<std::string> inputs, golds;
  inputs.reserve(split.size());
  for (const auto& ex : split) {
    inputs.push_back(ex.input);
    golds.push_back(ex.target);
  }
  auto preds = batch_infer(inputs);
  if (preds.size() != inputs.size())
    throw std::runtime_error("evaluate: inference returned wrong count");
  return accuracy(preds, golds);
}

}  // namespace dln
