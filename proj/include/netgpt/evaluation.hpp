#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "netgpt/encoding.hpp"
#include "netgpt/error.hpp"
#include "netgpt/ingestion.hpp"
#include "netgpt/model.hpp"
#include "netgpt/training.hpp"

namespace netgpt {

inline constexpr std::string_view kUnknownLabel = "unknown";

namespace detail {

// Bytes of the generated answer: everything before the first [eos], markers
// dropped.
inline Bytes answer_bytes(const Vocabulary& vocab, std::span<const TokenId> generated) {
  std::vector<TokenId> kept;
  for (TokenId id : generated) {
    if (id == vocab.marker_id(Marker::kEos)) break;
    if (id >= vocab.size() || vocab.is_marker(id)) continue;
    kept.push_back(id);
  }
  return hex_to_bytes(detokenize(vocab, kept));
}

inline Bytes label_rendering(const Vocabulary& vocab, std::string_view label, std::size_t target_len) {
  const auto tokens = render_target(vocab, label, target_len);
  return answer_bytes(vocab, tokens);
}

}  // namespace detail

// Matches the decoded answer against the label set. A label is a candidate
// when its (target_len-truncated) rendering and the answer agree up to the
// shorter of the two; the longest agreement wins, earlier labels on ties.
inline std::string decode_label(std::span<const TokenId> generated, const TaskSpec& task,
                                const Vocabulary& vocab) {
  const Bytes answer = detail::answer_bytes(vocab, generated);
  if (answer.empty()) return std::string(kUnknownLabel);
  std::size_t best_len = 0;
  const std::string* best = nullptr;
  for (const auto& label : task.label_set) {
    const Bytes rendering = detail::label_rendering(vocab, label, task.target_len);
    const std::size_t n = std::min(rendering.size(), answer.size());
    if (n == 0 || !std::equal(answer.begin(), answer.begin() + static_cast<std::ptrdiff_t>(n), rendering.begin())) {
      continue;
    }
    if (n > best_len) {
      best_len = n;
      best = &label;
    }
  }
  return best ? *best : std::string(kUnknownLabel);
}

// Generated field value: text for text renderings, hex for raw-byte ones.
inline std::string decode_value(std::span<const TokenId> generated, const TaskSpec& task,
                                const Vocabulary& vocab) {
  const Bytes answer = detail::answer_bytes(vocab, generated);
  if (task.rendering == TargetRendering::kRawBytes) return bytes_to_hex(answer);
  return bytes_to_text(answer).text;
}

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const std::string> predictions, std::span<const std::string> references) {
  if (predictions.empty() || predictions.size() != references.size()) {
    throw Error(ErrorCode::kData, "accuracy needs equal, non-empty prediction and reference lists");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == references[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Unweighted mean of per-class F1 over label_set. Predictions outside the set
// (e.g. "unknown") only count as misses of their reference class.
inline double macro_f1(std::span<const std::string> predictions, std::span<const std::string> references,
                       std::span<const std::string> label_set) {
  if (predictions.empty() || predictions.size() != references.size()) {
    throw Error(ErrorCode::kData, "macro_f1 needs equal, non-empty prediction and reference lists");
  }
  if (label_set.empty()) throw Error(ErrorCode::kData, "macro_f1 needs a label set");
  double sum = 0.0;
  for (const auto& label : label_set) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      const bool p = predictions[i] == label;
      const bool r = references[i] == label;
      tp += p && r;
      fp += p && !r;
      fn += !p && r;
    }
    const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    if (precision + recall > 0.0) sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / static_cast<double>(label_set.size());
}

enum class DrMode { kIntersection, kStrict };

inline std::string_view to_string(DrMode mode) {
  return mode == DrMode::kIntersection ? "intersection" : "strict";
}

inline double diversity_ratio(std::span<const std::string> generated, std::span<const std::string> reference,
                              DrMode mode = DrMode::kIntersection) {
  if (reference.empty()) throw Error(ErrorCode::kData, "diversity ratio needs a non-empty reference");
  const std::set<std::string> ref(reference.begin(), reference.end());
  const std::set<std::string> gen(generated.begin(), generated.end());
  std::size_t count = gen.size();
  if (mode == DrMode::kIntersection) {
    count = 0;
    for (const auto& g : gen) count += ref.count(g);
  }
  return static_cast<double>(count) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Task evaluation

struct MetricsRecord {
  std::string task;
  std::string dataset;
  double ac = 0.0;
  double f1 = 0.0;
  std::optional<double> dr;         // generation only, intersection mode
  std::optional<double> dr_strict;  // generation only
  DrMode dr_mode = DrMode::kIntersection;  // which of the two is headline
  std::string decoding = "greedy";
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::vector<std::string> predictions;
  std::vector<std::string> references;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"task", task},
                        {"dataset", dataset},
                        {"AC", ac},
                        {"F1", f1},
                        {"mode", {{"dr", to_string(dr_mode)}, {"decoding", decoding}}},
                        {"seed", seed},
                        {"count", count}};
    if (dr) j["DR"] = *dr;
    if (dr_strict) j["DR_strict"] = *dr_strict;
    return j;
  }

  static std::string csv_header() { return "task,dataset,AC,F1,DR,DR_strict,dr_mode,decoding,seed,count"; }

  std::string csv_row() const {
    auto num = [](std::optional<double> v) {
      if (!v) return std::string();
      std::ostringstream s;
      s.precision(6);
      s << std::fixed << *v;
      return s.str();
    };
    return task + "," + dataset + "," + num(ac) + "," + num(f1) + "," + num(dr) + "," + num(dr_strict) + "," +
           std::string(to_string(dr_mode)) + "," + decoding + "," + std::to_string(seed) + "," +
           std::to_string(count);
  }
};

// Appends a row, writing the header first if the file is new or empty.
inline void append_metrics_csv(const std::string& path, const MetricsRecord& record) {
  bool fresh = true;
  {
    std::ifstream in(path);
    fresh = !in || in.peek() == std::ifstream::traits_type::eof();
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path);
  if (fresh) out << MetricsRecord::csv_header() << "\n";
  out << record.csv_row() << "\n";
}

struct EvaluateOptions {
  std::string dataset = "test";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t max_seq_len = 256;
  std::optional<std::string> recorded_vocab_hash;  // from the checkpoint
  DrMode dr_mode = DrMode::kIntersection;
};

// Greedy continuation after the prompt and body, up to target_len + 1 tokens.
template <typename T>
std::vector<TokenId> predict_tokens(const ModelParams<T>& params, const Vocabulary& vocab, const TaskSpec& task,
                                    const Traffic& traffic, std::size_t max_len) {
  const std::size_t limit = std::min(max_len, params.config.max_seq_len);
  const auto prefix = build_task_sequence(vocab, task, traffic, std::nullopt, limit, params.config.segment_count);
  GenerateOptions options;
  options.max_new = task.target_len + 1;
  options.mode = DecodeMode::kGreedy;
  options.stop_token = vocab.marker_id(Marker::kEos);
  return generate(params, prefix.sequence, options);
}

// Per-example predictions in input order, computed by `workers` threads.
template <typename T>
std::vector<std::string> predict(const ModelParams<T>& params, const Vocabulary& vocab, const TaskSpec& task,
                                 std::span<const Example> examples, std::size_t max_len, std::size_t workers) {
  std::vector<std::string> out(examples.size());
  auto run = [&](std::size_t i) {
    const auto tokens = predict_tokens(params, vocab, task, examples[i].traffic, max_len);
    out[i] = task.kind == TaskKind::kUnderstanding ? decode_label(tokens, task, vocab)
                                                   : decode_value(tokens, task, vocab);
  };
  workers = std::max<std::size_t>(1, std::min(workers, examples.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < examples.size(); ++i) run(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < examples.size(); i += workers) run(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// Understanding: AC and macro-F1 over the task's labels. Generation (one
// packet per example): exact-match AC, macro-F1 over the reference values,
// and DR in both modes.
template <typename T>
MetricsRecord evaluate_task(const ModelParams<T>& params, std::span<const Example> test_set, const TaskSpec& task,
                            const Vocabulary& vocab, const EvaluateOptions& options = {}) {
  if (options.recorded_vocab_hash && *options.recorded_vocab_hash != vocab.hash()) {
    throw Error(ErrorCode::kVocabMismatch, "checkpoint was trained with vocabulary " + *options.recorded_vocab_hash +
                                               " but " + vocab.hash() + " was given");
  }
  if (vocab.size() > params.config.vocab_size) {
    throw Error(ErrorCode::kVocabMismatch, "vocabulary of " + std::to_string(vocab.size()) +
                                               " pieces exceeds the model's " +
                                               std::to_string(params.config.vocab_size));
  }
  task.validate();
  if (test_set.empty()) throw Error(ErrorCode::kData, "empty test set");

  MetricsRecord record;
  record.task = task.name;
  record.dataset = options.dataset;
  record.seed = options.seed;
  record.dr_mode = options.dr_mode;
  record.count = test_set.size();

  for (const auto& ex : test_set) {
    if (task.kind == TaskKind::kUnderstanding) {
      if (!ex.label || !task.has_label(*ex.label)) {
        throw Error(ErrorCode::kData, "item " + ex.id + " has no label in the task's label set");
      }
      record.references.push_back(*ex.label);
    } else {
      // Compared as rendered, i.e. cut to target_len tokens like the answer.
      const auto packets = packets_of(ex.traffic);
      const auto value = field_value(packets.front(), *task.field, task.rendering);
      record.references.push_back(decode_value(target_tokens(vocab, task, value), task, vocab));
    }
  }
  record.predictions = predict(params, vocab, task, test_set, options.max_seq_len, options.workers);

  record.ac = accuracy(record.predictions, record.references);
  if (task.kind == TaskKind::kUnderstanding) {
    record.f1 = macro_f1(record.predictions, record.references, task.label_set);
  } else {
    const std::set<std::string> unique(record.references.begin(), record.references.end());
    const std::vector<std::string> values(unique.begin(), unique.end());
    record.f1 = macro_f1(record.predictions, record.references, values);
    const double inter = diversity_ratio(record.predictions, record.references, DrMode::kIntersection);
    const double strict = diversity_ratio(record.predictions, record.references, DrMode::kStrict);
    record.dr = inter;
    record.dr_strict = strict;
  }
  return record;
}

}  // namespace netgpt
