#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "netgpt/augmentation.hpp"
#include "netgpt/encoding.hpp"
#include "netgpt/error.hpp"
#include "netgpt/ingestion.hpp"
#include "netgpt/model.hpp"
#include "netgpt/rng.hpp"

namespace netgpt {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t batch_size = 96;
  std::size_t steps = 500'000;  // used when epochs == 0
  std::size_t epochs = 0;
  double learning_rate = 2e-5;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  std::size_t max_seq_len = 512;
  std::size_t shuffle_copies = 1;
  std::size_t workers = 1;
  std::size_t checkpoint_every = 0;  // steps; 0 disables

  static TrainConfig pretrain_defaults() { return {}; }

  static TrainConfig retrain_defaults() {
    TrainConfig c;
    c.batch_size = 32;
    c.epochs = 3;
    c.max_seq_len = 256;
    return c;
  }

  static TrainConfig understanding_defaults() {
    TrainConfig c;
    c.batch_size = 32;
    c.epochs = 50;
    c.max_seq_len = 256;
    c.shuffle_copies = 0;
    return c;
  }

  static TrainConfig generation_defaults() {
    TrainConfig c = understanding_defaults();
    c.epochs = 10;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, what); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (epochs == 0 && steps == 0) fail("steps or epochs must be positive");
    if (!(learning_rate >= 0.0)) fail("learning_rate must be non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in [0, 1)");
    if (max_seq_len == 0) fail("max_seq_len must be positive");
    if (workers == 0) fail("workers must be positive");
  }

  std::size_t total_steps(std::size_t example_count) const {
    if (epochs == 0) return steps;
    return epochs * ((example_count + batch_size - 1) / batch_size);
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},     {"steps", c.steps},
       {"epochs", c.epochs},             {"learning_rate", c.learning_rate},
       {"warmup_ratio", c.warmup_ratio}, {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},               {"beta2", c.beta2},
       {"epsilon", c.epsilon},           {"grad_clip", c.grad_clip},
       {"seed", c.seed},                 {"max_seq_len", c.max_seq_len},
       {"shuffle_copies", c.shuffle_copies}, {"workers", c.workers},
       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.shuffle_copies = j.value("shuffle_copies", c.shuffle_copies);
  c.workers = j.value("workers", c.workers);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

// Linear warmup to the base rate at step floor(ratio * total), then linear
// decay. Steps are 1-based.
inline double scheduled_learning_rate(std::size_t step, std::size_t total, double warmup_ratio,
                                      double base) {
  const auto warmup = static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total)));
  if (warmup > 0 && step <= warmup) {
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  }
  // Decay starts from the base rate at the last warmup step (step 1 without
  // warmup) and ends one step short of zero.
  const std::size_t anchor = std::max<std::size_t>(warmup, 1);
  const double remaining = static_cast<double>(total - std::min(step, total) + 1);
  return base * remaining / static_cast<double>(total - std::min(anchor, total) + 1);
}

// ---------------------------------------------------------------------------
// Optimizer

// Adaptive moments with decoupled weight decay on matrices (not on gains or
// biases).
template <typename T>
class AdamW {
 public:
  AdamW(const ModelConfig& config, const TrainConfig& train)
      : train_(train), m_(ModelParams<T>::zeros(config)), v_(ModelParams<T>::zeros(config)) {}

  void step(ModelParams<T>& params, const ModelParams<T>& grads, double learning_rate) {
    ++t_;
    const double bc1 = 1.0 - std::pow(train_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(train_.beta2, static_cast<double>(t_));
    std::vector<Matrix<T>*> ps, ms, vs;
    std::vector<const Matrix<T>*> gs;
    params.for_each([&ps](const std::string&, Matrix<T>& m) { ps.push_back(&m); });
    m_.for_each([&ms](const std::string&, Matrix<T>& m) { ms.push_back(&m); });
    v_.for_each([&vs](const std::string&, Matrix<T>& m) { vs.push_back(&m); });
    grads.for_each([&gs](const std::string&, const Matrix<T>& m) { gs.push_back(&m); });
    const T b1 = static_cast<T>(train_.beta1);
    const T b2 = static_cast<T>(train_.beta2);
    const T lr = static_cast<T>(learning_rate);
    const T step1 = static_cast<T>(learning_rate / bc1);
    const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
    const T eps = static_cast<T>(train_.epsilon);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      auto& m = *ms[i];
      auto& v = *vs[i];
      const auto& g = *gs[i];
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      if (train_.weight_decay > 0.0 && p.rows() > 1 && p.cols() > 1) {
        p *= T(1) - lr * static_cast<T>(train_.weight_decay);
      }
      p.array() -= step1 * m.array() / (v.array().sqrt() / sqrt_bc2 + eps);
    }
  }

 private:
  TrainConfig train_;
  ModelParams<T> m_;
  ModelParams<T> v_;
  std::size_t t_ = 0;
};

template <typename T>
double global_norm(const ModelParams<T>& grads) {
  double sq = 0.0;
  grads.for_each([&sq](const std::string&, const Matrix<T>& m) {
    sq += static_cast<double>(m.template cast<double>().squaredNorm());
  });
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Generic loop

struct TrainingExample {
  TokenSequence sequence;
  LossMask mask;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<LossRecord> history;
};

template <typename T>
using StepCallback = std::function<void(const LossRecord&, const ModelParams<T>&)>;

namespace detail {

// Batch loss with per-sequence gradient buffers summed in sequence order, so
// the result does not depend on the worker count.
template <typename T>
double batch_loss_and_grad(const ModelParams<T>& params, std::span<const TrainingExample* const> batch,
                           std::size_t workers, std::uint64_t dropout_seed, ModelParams<T>& grads) {
  std::size_t targets = 0;
  for (const auto* ex : batch) targets += count_targets(ex->mask);
  if (targets == 0) throw Error(ErrorCode::kAllMasked, "every position of the batch is masked");
  const T weight = T(1) / static_cast<T>(targets);
  grads.set_zero();
  const bool use_dropout = params.config.dropout_rate > 0.0;

  if (workers <= 1 || batch.size() <= 1) {
    // Same summation as the threaded path: one buffer per sequence, added in
    // order.
    ModelParams<T> buffer = ModelParams<T>::zeros(params.config);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Rng rng = Rng::derive(dropout_seed, i);
      if (i > 0) buffer.set_zero();
      total += sequence_nll(params, batch[i]->sequence, batch[i]->mask, &buffer, weight,
                            use_dropout ? &rng : nullptr);
      grads.add_scaled(buffer, T(1));
    }
    return total / static_cast<double>(targets);
  }

  std::vector<ModelParams<T>> per_sequence(batch.size());
  std::vector<double> nll(batch.size(), 0.0);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < batch.size(); i += workers) {
          per_sequence[i] = ModelParams<T>::zeros(params.config);
          Rng rng = Rng::derive(dropout_seed, i);
          nll[i] = sequence_nll(params, batch[i]->sequence, batch[i]->mask, &per_sequence[i], weight,
                                use_dropout ? &rng : nullptr);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    grads.add_scaled(per_sequence[i], T(1));
    total += nll[i];
  }
  return total / static_cast<double>(targets);
}

}  // namespace detail

// Minibatch AdamW over `examples` for `total_steps` steps. Batches walk a
// seeded permutation of the examples, reshuffled every epoch.
template <typename T>
TrainResult<T> train_examples(ModelParams<T> params, std::span<const TrainingExample> examples,
                              const TrainConfig& config, std::size_t total_steps,
                              const StepCallback<T>& on_step = {}) {
  config.validate();
  if (examples.empty()) throw Error(ErrorCode::kData, "no training examples");
  TrainResult<T> result;
  AdamW<T> optimizer(params.config, config);
  ModelParams<T> grads = ModelParams<T>::zeros(params.config);
  Rng order_rng(config.seed);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<const TrainingExample*> batch;

  for (std::size_t step = 1; step <= total_steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(config.batch_size, examples.size())) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&examples[order[cursor++]]);
    }
    const double lr = scheduled_learning_rate(step, total_steps, config.warmup_ratio, config.learning_rate);
    const double loss_value = detail::batch_loss_and_grad<T>(
        params, batch, config.workers, config.seed ^ (0x9e3779b97f4a7c15ULL * step), grads);
    if (!std::isfinite(loss_value)) throw DivergenceError(step);
    if (config.grad_clip > 0.0) {
      const double norm = global_norm(grads);
      if (!std::isfinite(norm)) throw DivergenceError(step);
      if (norm > config.grad_clip) {
        const T s = static_cast<T>(config.grad_clip / norm);
        grads.for_each([s](const std::string&, Matrix<T>& m) { m *= s; });
      }
    }
    optimizer.step(params, grads, lr);
    LossRecord record{step, loss_value, lr};
    result.history.push_back(record);
    if (on_step) on_step(record, params);
  }
  result.params = std::move(params);
  return result;
}

// Every position after the first except [pad].
inline LossMask language_model_mask(const Vocabulary& vocab, const TokenSequence& seq) {
  LossMask mask(seq.size(), 1);
  if (!mask.empty()) mask[0] = 0;
  const TokenId pad = vocab.marker_id(Marker::kPad);
  for (std::size_t k = 0; k < seq.size(); ++k) {
    if (seq.token_ids[k] == pad) mask[k] = 0;
  }
  return mask;
}

// Segment ids past the model's table share its last row.
inline void cap_segments(TokenSequence& seq, std::size_t segment_count) {
  const auto last = static_cast<std::uint32_t>(segment_count - 1);
  for (auto& s : seq.segment_ids) s = std::min(s, last);
}

// ---------------------------------------------------------------------------
// Pretraining and quick retraining

// Language-model objective over unlabeled sequences (no shuffling).
template <typename T>
TrainResult<T> pretrain(const ModelParams<T>& init, const Vocabulary& vocab,
                        std::span<const TokenSequence> corpus, const TrainConfig& config,
                        const StepCallback<T>& on_step = {}) {
  if (corpus.empty()) throw Error(ErrorCode::kData, "pretraining corpus is empty");
  std::vector<TrainingExample> examples;
  examples.reserve(corpus.size());
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    TokenSequence s = seq;
    s.truncate(std::min(config.max_seq_len, init.config.max_seq_len));
    cap_segments(s, init.config.segment_count);
    LossMask mask = language_model_mask(vocab, s);
    examples.push_back({std::move(s), std::move(mask)});
  }
  if (examples.empty()) throw Error(ErrorCode::kData, "pretraining corpus has no usable sequence");
  return train_examples(init, examples, config, config.total_steps(examples.size()), on_step);
}

// Plain (marker-free, unsegmented) sequences for a set of examples.
inline std::vector<TokenSequence> plain_sequences(const Vocabulary& vocab,
                                                  std::span<const Example> dataset,
                                                  std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(dataset.size());
  for (const auto& ex : dataset) out.push_back(assemble_plain_sequence(vocab, packets_of(ex.traffic), max_len));
  return out;
}

// Continues the language-model objective on the task's data expanded with
// header-field shuffles, without [pck] delimiters or segments.
template <typename T>
TrainResult<T> retrain_shuffled(const ModelParams<T>& params, const Vocabulary& vocab,
                                std::span<const Example> dataset, const TrainConfig& config,
                                ShuffleMode mode = ShuffleMode::kPairSwap,
                                const StepCallback<T>& on_step = {}) {
  const auto expanded = expand_with_shuffles(dataset, config.shuffle_copies, config.seed, mode);
  std::vector<TokenSequence> corpus;
  corpus.reserve(expanded.size());
  const std::size_t max_len = std::min(config.max_seq_len, params.config.max_seq_len);
  for (const auto& item : expanded) {
    corpus.push_back(assemble_plain_sequence(vocab, packets_of(item.example.traffic), max_len));
  }
  return pretrain(params, vocab, corpus, config, on_step);
}

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind { kUnderstanding, kGeneration };
enum class Granularity { kPacket, kFlow };
enum class HeaderField { kSrcIp, kDstIp, kSrcPort, kDstPort, kLength };
enum class TargetRendering { kText, kRawBytes };

inline constexpr std::string_view to_string(HeaderField f) {
  switch (f) {
    case HeaderField::kSrcIp: return "src_ip";
    case HeaderField::kDstIp: return "dst_ip";
    case HeaderField::kSrcPort: return "src_port";
    case HeaderField::kDstPort: return "dst_port";
    case HeaderField::kLength: return "length";
  }
  return "?";
}

inline HeaderField header_field_from_name(std::string_view name) {
  for (auto f : {HeaderField::kSrcIp, HeaderField::kDstIp, HeaderField::kSrcPort, HeaderField::kDstPort,
                 HeaderField::kLength}) {
    if (to_string(f) == name) return f;
  }
  throw Error(ErrorCode::kConfig, "unknown header field " + std::string(name));
}

struct TaskSpec {
  TaskKind kind = TaskKind::kUnderstanding;
  std::string name;                     // understanding prompt text
  std::vector<std::string> label_set;   // understanding labels
  std::optional<HeaderField> field;     // generation target
  std::size_t target_len = 4;
  Granularity granularity = Granularity::kPacket;
  TargetRendering rendering = TargetRendering::kText;

  static TaskSpec understanding(std::string name, std::vector<std::string> labels,
                                Granularity granularity = Granularity::kPacket) {
    TaskSpec t;
    t.kind = TaskKind::kUnderstanding;
    t.name = std::move(name);
    t.label_set = std::move(labels);
    t.granularity = granularity;
    return t;
  }

  static TaskSpec generation(std::string_view field_name) {
    TaskSpec t;
    t.kind = TaskKind::kGeneration;
    t.field = header_field_from_name(field_name);
    t.name = std::string(field_name);
    t.granularity = Granularity::kPacket;
    return t;
  }

  // Text that is hex-encoded and prepended as the prompt.
  std::string prompt() const {
    return kind == TaskKind::kGeneration && field ? std::string(to_string(*field)) : name;
  }

  void validate() const {
    if (target_len == 0) throw Error(ErrorCode::kConfig, "target_len must be positive");
    if (kind == TaskKind::kUnderstanding) {
      if (label_set.size() < 2) {
        throw Error(ErrorCode::kConfig, "understanding task " + name + " needs at least 2 labels");
      }
    } else {
      if (!field) throw Error(ErrorCode::kConfig, "generation task needs exactly one header field");
      if (granularity != Granularity::kPacket) {
        throw Error(ErrorCode::kConfig, "generation tasks are packet-level");
      }
    }
  }

  bool has_label(std::string_view label) const {
    return std::find(label_set.begin(), label_set.end(), label) != label_set.end();
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"kind", t.kind == TaskKind::kUnderstanding ? "understanding" : "generation"},
       {"name", t.name},
       {"label_set", t.label_set},
       {"target_len", t.target_len},
       {"granularity", t.granularity == Granularity::kFlow ? "flow" : "packet"},
       {"rendering", t.rendering == TargetRendering::kText ? "text" : "raw"}};
  if (t.field) j["field"] = to_string(*t.field);
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  const std::string kind = j.value("kind", std::string("understanding"));
  if (kind != "understanding" && kind != "generation") throw Error(ErrorCode::kConfig, "bad task kind " + kind);
  t.kind = kind == "understanding" ? TaskKind::kUnderstanding : TaskKind::kGeneration;
  t.name = j.value("name", std::string());
  t.label_set = j.value("label_set", std::vector<std::string>{});
  t.target_len = j.value("target_len", t.target_len);
  t.granularity = j.value("granularity", std::string("packet")) == "flow" ? Granularity::kFlow : Granularity::kPacket;
  t.rendering = j.value("rendering", std::string("text")) == "raw" ? TargetRendering::kRawBytes : TargetRendering::kText;
  if (j.contains("field")) {
    t.field = header_field_from_name(j["field"].get<std::string>());
    if (t.name.empty()) t.name = j["field"].get<std::string>();
  } else if (t.kind == TaskKind::kGeneration) {
    t.field = header_field_from_name(t.name);
  }
}

// Named unit holding a field, located through the unit names so shuffled
// packets resolve correctly.
inline const ShuffleUnit& field_unit(const Packet& packet, HeaderField field) {
  std::string name;
  const std::string transport = packet.transport ? std::string(to_string(*packet.transport)) : "";
  switch (field) {
    case HeaderField::kSrcIp: name = "ip.src"; break;
    case HeaderField::kDstIp: name = "ip.dst"; break;
    case HeaderField::kLength: name = "ip.len"; break;
    case HeaderField::kSrcPort: name = transport + ".sport"; break;
    case HeaderField::kDstPort: name = transport + ".dport"; break;
  }
  for (const auto& u : packet.shuffle_units) {
    if (u.name == name) return u;
  }
  throw Error(ErrorCode::kData, "packet has no " + std::string(to_string(field)) + " field");
}

// Decimal / dotted-quad text of a field, or the hex of its raw bytes.
inline std::string field_value(const Packet& packet, HeaderField field,
                               TargetRendering rendering = TargetRendering::kText) {
  const auto& unit = field_unit(packet, field);
  const auto bytes = packet.bytes(unit.range);
  if (rendering == TargetRendering::kRawBytes) return bytes_to_hex(bytes);
  switch (field) {
    case HeaderField::kSrcIp: return format_ipv4(packet.five_tuple.src_ip);
    case HeaderField::kDstIp: return format_ipv4(packet.five_tuple.dst_ip);
    case HeaderField::kSrcPort: return std::to_string(packet.five_tuple.src_port);
    case HeaderField::kDstPort: return std::to_string(packet.five_tuple.dst_port);
    case HeaderField::kLength: return std::to_string((bytes[0] << 8) | bytes[1]);
  }
  return {};
}

inline std::vector<TokenId> target_tokens(const Vocabulary& vocab, const TaskSpec& task,
                                          const std::string& value, bool* truncated = nullptr) {
  if (task.rendering == TargetRendering::kRawBytes) {
    auto tokens = tokenize(vocab, value, MarkerMatching::kDisabled);
    if (truncated) *truncated = tokens.size() > task.target_len;
    tokens.resize(task.target_len, vocab.marker_id(Marker::kPad));
    tokens.push_back(vocab.marker_id(Marker::kEos));
    return tokens;
  }
  return render_target(vocab, value, task.target_len, truncated);
}

// Prompted sequence for one example. The body is cut to leave room for the
// prompt and the target region. With `target` empty the sequence ends after
// the body (inference prefix).
inline PromptedSequence build_task_sequence(const Vocabulary& vocab, const TaskSpec& task,
                                            const Traffic& traffic, const std::optional<std::string>& target,
                                            std::size_t max_len, std::size_t segment_count) {
  const auto prompt = tokenize(vocab, text_to_hex(task.prompt()), MarkerMatching::kDisabled);
  const std::size_t reserved = prompt.size() + task.target_len + 1;
  if (reserved + 1 > max_len) {
    throw Error(ErrorCode::kBudget, "prompt and target do not fit in " + std::to_string(max_len) + " tokens");
  }
  const std::size_t body_budget = max_len - reserved;
  TokenSequence body;
  if (task.kind == TaskKind::kGeneration) {
    // A flow stands in through its first packet.
    const auto packets = packets_of(traffic);
    if (packets.empty()) throw Error(ErrorCode::kData, "generation item has no packet");
    const Packet* packet = &packets.front();
    // The target field's bytes are excised from the body.
    const auto& unit = field_unit(*packet, *task.field);
    const auto net = packet->network_bytes();
    const std::size_t cut = unit.range.offset - packet->ip_header.offset;
    Bytes kept(net.begin(), net.begin() + static_cast<std::ptrdiff_t>(cut));
    kept.insert(kept.end(), net.begin() + static_cast<std::ptrdiff_t>(cut + unit.range.length), net.end());
    body.push(vocab.marker_id(Marker::kCls), 0);
    for (TokenId t : tokenize_bytes(vocab, kept, MarkerMatching::kDisabled)) {
      if (body.size() + 1 >= body_budget) break;
      body.push(t, 0);
    }
    body.push(vocab.marker_id(Marker::kPck), 0);
  } else if (task.granularity == Granularity::kFlow) {
    if (const auto* flow = std::get_if<Flow>(&traffic)) {
      body = assemble_flow_sequence(vocab, *flow, body_budget);
    } else {
      Flow single{std::get<Packet>(traffic).five_tuple, {std::get<Packet>(traffic)}, false};
      body = assemble_flow_sequence(vocab, single, body_budget);
    }
  } else {
    // A packet is framed like a one-packet flow so that [pck] marks where the
    // answer starts.
    const auto& packet = packets_of(traffic).front();
    body = assemble_flow_sequence(vocab, Flow{packet.five_tuple, {packet}, false}, body_budget);
  }
  cap_segments(body, segment_count);

  PromptedSequence out = assemble_prompted_sequence(vocab, task.prompt(), body, std::nullopt, max_len,
                                                    task.target_len);
  if (target) {
    const std::uint32_t segment = out.sequence.segment_ids.back();
    for (TokenId t : target_tokens(vocab, task, *target, &out.target_truncated)) out.sequence.push(t, segment);
    out.target_end = out.sequence.size();
  }
  return out;
}

inline TrainingExample supervised_example(PromptedSequence prompted) {
  TrainingExample ex;
  ex.mask.assign(prompted.sequence.size(), 0);
  for (std::size_t k = prompted.target_begin; k < prompted.target_end; ++k) ex.mask[k] = 1;
  ex.sequence = std::move(prompted.sequence);
  return ex;
}

struct TaskData {
  TaskSpec task;
  std::vector<Example> examples;
};

// Understanding tasks cast as generation: task name as prompt, label text as
// the target; only target positions are supervised. Several tasks train
// together when given (examples interleaved by the shuffled batch order).
template <typename T>
TrainResult<T> finetune_understanding(const ModelParams<T>& params, const Vocabulary& vocab,
                                      std::span<const TaskData> tasks, const TrainConfig& config,
                                      const StepCallback<T>& on_step = {}) {
  std::vector<TrainingExample> examples;
  const std::size_t max_len = std::min(config.max_seq_len, params.config.max_seq_len);
  for (const auto& data : tasks) {
    data.task.validate();
    if (data.task.kind != TaskKind::kUnderstanding) {
      throw Error(ErrorCode::kConfig, "task " + data.task.name + " is not an understanding task");
    }
    for (const auto& ex : data.examples) {
      if (!ex.label || !data.task.has_label(*ex.label)) {
        throw Error(ErrorCode::kData, "item " + ex.id + " has label '" + ex.label.value_or("") +
                                          "' outside the label set of task " + data.task.name);
      }
      examples.push_back(supervised_example(
          build_task_sequence(vocab, data.task, ex.traffic, ex.label, max_len, params.config.segment_count)));
    }
  }
  if (examples.empty()) throw Error(ErrorCode::kData, "no finetuning examples");
  return train_examples(params, examples, config, config.total_steps(examples.size()), on_step);
}

// Header-field generation: for each (packet, field) the prompt is the field
// name, the body is the packet without that field, the target is its value.
template <typename T>
TrainResult<T> finetune_generation(const ModelParams<T>& params, const Vocabulary& vocab,
                                   std::span<const Packet> packets, std::span<const TaskSpec> tasks,
                                   const TrainConfig& config, const StepCallback<T>& on_step = {}) {
  std::vector<TrainingExample> examples;
  const std::size_t max_len = std::min(config.max_seq_len, params.config.max_seq_len);
  for (const auto& task : tasks) {
    task.validate();
    if (task.kind != TaskKind::kGeneration) {
      throw Error(ErrorCode::kConfig, "task " + task.name + " is not a generation task");
    }
    for (const auto& packet : packets) {
      const std::string value = field_value(packet, *task.field, task.rendering);
      examples.push_back(supervised_example(
          build_task_sequence(vocab, task, packet, value, max_len, params.config.segment_count)));
    }
  }
  if (examples.empty()) throw Error(ErrorCode::kData, "no finetuning examples");
  return train_examples(params, examples, config, config.total_steps(examples.size()), on_step);
}

}  // namespace netgpt
