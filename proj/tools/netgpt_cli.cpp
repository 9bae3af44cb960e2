// netgpt-cli: ingest captures, build vocabularies, train, generate, evaluate.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <set>

#include "netgpt/netgpt.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace netgpt;

namespace {

// Relative paths hang off NETGPT_RUN_ROOT when it is set.
fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("NETGPT_RUN_ROOT"); root && *root) path = fs::path(root) / path;
  }
  return path;
}

fs::path existing(const std::string& p) {
  const auto path = resolve(p);
  if (!fs::exists(path)) throw Error(ErrorCode::kIo, "no such file: " + path.string());
  return path;
}

fs::path output_dir(const std::string& p) {
  const auto path = resolve(p);
  fs::create_directories(path);
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

// Decoded model outputs may be invalid UTF-8; those bytes become U+FFFD.
void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2, ' ', false, json::error_handler_t::replace) + "\n");
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, "bad JSON in " + path.string() + ": " + e.what());
  }
}

// Input fingerprints by role. Paths are left out so reruns elsewhere match.
struct Inputs {
  json hashes = json::object();
  void add(const std::string& role, const fs::path& path) { hashes[role] = hash_file(path.string()); }
};

json stamp(const Inputs& inputs) {
  return {{"tool", "netgpt"}, {"version", std::string(kVersion)}, {"inputs", inputs.hashes}};
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<Split> splits_from(const std::string& text) {
  std::vector<Split> out;
  for (const auto& s : split_list(text)) out.push_back(split_from_string(s));
  if (out.empty()) throw Error(ErrorCode::kConfig, "no splits given");
  return out;
}

std::vector<Example> examples_in(const DatasetManifest& manifest, const fs::path& manifest_path,
                                 const std::vector<Split>& splits) {
  std::vector<Example> out;
  for (Split s : splits) {
    auto part = load_examples(manifest, manifest_path.parent_path(), {s});
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  if (out.empty()) throw Error(ErrorCode::kData, "no items in the requested splits");
  return out;
}

// One example per packet, for packet-level generation.
std::vector<Example> as_packets(const std::vector<Example>& examples) {
  std::vector<Example> out;
  for (const auto& ex : examples) {
    if (std::holds_alternative<Packet>(ex.traffic)) {
      out.push_back(ex);
      continue;
    }
    const auto packets = packets_of(ex.traffic);
    for (std::size_t k = 0; k < packets.size(); ++k) {
      out.push_back({ex.id + "#" + std::to_string(k), packets[k], ex.label});
    }
  }
  return out;
}

// Flags that override a config struct only when given on the command line.
template <typename Cfg>
struct Overrides {
  std::vector<std::function<void(Cfg&)>> apply;

  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& name, T Cfg::*field, const std::string& help) {
    auto value = std::make_shared<T>();
    auto* opt = app->add_option(name, *value, help);
    apply.push_back([opt, value, field](Cfg& c) {
      if (opt->count() > 0) c.*field = *value;
    });
    return opt;
  }

  void operator()(Cfg& c) const {
    for (const auto& f : apply) f(c);
  }
};

void add_train_flags(CLI::App* app, Overrides<TrainConfig>& o) {
  o.add(app, "--batch", &TrainConfig::batch_size, "minibatch size");
  o.add(app, "--steps", &TrainConfig::steps, "optimizer steps (when --epochs is 0)");
  o.add(app, "--epochs", &TrainConfig::epochs, "passes over the data; overrides --steps");
  o.add(app, "--lr", &TrainConfig::learning_rate, "peak learning rate");
  o.add(app, "--warmup", &TrainConfig::warmup_ratio, "warmup fraction of the steps");
  o.add(app, "--weight-decay", &TrainConfig::weight_decay, "decoupled weight decay");
  o.add(app, "--grad-clip", &TrainConfig::grad_clip, "global gradient norm cap, 0 disables");
  o.add(app, "--max-seq-len", &TrainConfig::max_seq_len, "token budget per sequence");
  o.add(app, "--checkpoint-every", &TrainConfig::checkpoint_every, "steps between checkpoints, 0 disables");
  o.add(app, "--workers", &TrainConfig::workers, "threads computing the batch gradient");
}

void add_model_flags(CLI::App* app, Overrides<ModelConfig>& o) {
  o.add(app, "--layers", &ModelConfig::n_layers, "decoder blocks");
  o.add(app, "--d-model", &ModelConfig::d_model, "hidden width");
  o.add(app, "--heads", &ModelConfig::n_heads, "attention heads");
  o.add(app, "--ff", &ModelConfig::d_ff, "feed-forward width");
  o.add(app, "--segments", &ModelConfig::segment_count, "segment embedding rows");
  o.add(app, "--dropout", &ModelConfig::dropout_rate, "dropout rate");
  o.add(app, "--init-scale", &ModelConfig::init_scale, "weight init standard deviation");
}

// defaults < config file < flags
TrainConfig effective_train(TrainConfig base, const json& config, const Overrides<TrainConfig>& flags,
                            std::uint64_t seed) {
  if (config.contains("train")) from_json(config["train"], base);
  flags(base);
  base.seed = seed;
  base.validate();
  return base;
}

void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& history) {
  std::ostringstream out;
  out << "step,loss,lr\n" << std::setprecision(9);
  for (const auto& r : history) out << r.step << ',' << r.loss << ',' << r.learning_rate << '\n';
  write_text(path, out.str());
}

// Trains through `run`, writing loss.csv, periodic and final checkpoints,
// config.json and run.json into `out`.
template <typename Run>
void training_run(const fs::path& out, const std::string& stage, const TrainConfig& train, json config,
                  const Inputs& inputs, json metadata, Run&& run) {
  metadata.update(stamp(inputs));
  metadata["stage"] = stage;
  metadata["seed"] = train.seed;
  config["train"] = train;
  config.update(stamp(inputs));
  config["stage"] = stage;
  write_json(out / "config.json", config);

  StepCallback<float> on_step;
  if (train.checkpoint_every > 0) {
    fs::create_directories(out / "checkpoints");
    on_step = [&](const LossRecord& r, const ModelParams<float>& p) {
      if (r.step % train.checkpoint_every != 0) return;
      json m = metadata;
      m["step"] = r.step;
      save_checkpoint((out / "checkpoints" / ("step-" + std::to_string(r.step) + ".ckpt")).string(), p, m);
    };
  }
  const TrainResult<float> result = run(on_step);
  write_loss_csv(out / "loss.csv", result.history);
  metadata["step"] = result.history.size();
  save_checkpoint((out / "model.ckpt").string(), result.params, metadata);

  json manifest = stamp(inputs);
  manifest["stage"] = stage;
  manifest["seeds"] = {{"train", train.seed}};
  manifest["steps"] = result.history.size();
  manifest["final_loss"] = result.history.empty() ? 0.0 : result.history.back().loss;
  manifest["outputs"] = {{"model.ckpt", hash_file((out / "model.ckpt").string())},
                         {"loss.csv", hash_file((out / "loss.csv").string())},
                         {"config.json", hash_file((out / "config.json").string())}};
  write_json(out / "run.json", manifest);
  std::cout << stage << ": " << result.history.size() << " steps, final loss " << manifest["final_loss"]
            << " -> " << (out / "model.ckpt").string() << "\n";
}

// Checkpoint and vocabulary must belong together.
void check_vocab(const Checkpoint& ck, const Vocabulary& vocab) {
  const auto recorded = ck.vocab_hash();
  if (!recorded.empty() && recorded != vocab.hash()) {
    throw Error(ErrorCode::kVocabMismatch,
                "checkpoint was trained with vocabulary " + recorded + " but " + vocab.hash() + " was given");
  }
  if (vocab.size() > ck.params.config.vocab_size) {
    throw Error(ErrorCode::kVocabMismatch, "vocabulary larger than the checkpoint's embedding table");
  }
}

// ---------------------------------------------------------------------------
// Tasks: from flags or the config file's "tasks" array

struct CliTask {
  TaskSpec spec;
  std::map<std::string, std::string> label_map;  // manifest label -> task label
};

struct TaskFlags {
  std::string name;
  std::string labels;
  std::vector<std::string> fields;
  std::string granularity = "packet";
  std::size_t target_len = 4;
  bool raw_targets = false;

  void add(CLI::App* app) {
    app->add_option("--task", name, "understanding task name (also its prompt)");
    app->add_option("--labels", labels, "comma-separated label set; default: labels found in the data");
    app->add_option("--field", fields, "generation target field (repeatable)")
        ->check(CLI::IsMember({"src_ip", "dst_ip", "src_port", "dst_port", "length"}));
    app->add_option("--granularity", granularity, "packet or flow")->check(CLI::IsMember({"packet", "flow"}));
    app->add_option("--target-len", target_len, "target slots before [eos]");
    app->add_flag("--raw-targets", raw_targets, "generation targets as raw field bytes");
  }
};

std::vector<CliTask> tasks_from(const TaskFlags& f, const json& config, const std::vector<Example>& data) {
  std::vector<CliTask> tasks;
  if (!f.name.empty()) {
    auto labels = split_list(f.labels);
    if (labels.empty()) {
      std::set<std::string> seen;
      for (const auto& ex : data) {
        if (ex.label) seen.insert(*ex.label);
      }
      labels.assign(seen.begin(), seen.end());
    }
    CliTask t;
    t.spec = TaskSpec::understanding(f.name, labels,
                                     f.granularity == "flow" ? Granularity::kFlow : Granularity::kPacket);
    t.spec.target_len = f.target_len;
    tasks.push_back(t);
  }
  for (const auto& field : f.fields) {
    CliTask t;
    t.spec = TaskSpec::generation(field);
    t.spec.target_len = f.target_len;
    if (f.raw_targets) t.spec.rendering = TargetRendering::kRawBytes;
    tasks.push_back(t);
  }
  if (tasks.empty() && config.contains("tasks")) {
    for (const auto& jt : config["tasks"]) {
      CliTask t;
      t.spec = jt.get<TaskSpec>();
      if (jt.contains("label_map")) t.label_map = jt["label_map"].get<std::map<std::string, std::string>>();
      tasks.push_back(t);
    }
  }
  if (tasks.empty()) throw Error(ErrorCode::kConfig, "no task given (use --task, --field or a config \"tasks\" list)");
  for (const auto& t : tasks) t.spec.validate();
  return tasks;
}

std::vector<Example> relabel(std::vector<Example> data, const CliTask& task) {
  if (task.label_map.empty()) return data;
  for (auto& ex : data) {
    if (!ex.label) continue;
    auto it = task.label_map.find(*ex.label);
    if (it != task.label_map.end()) ex.label = it->second;
  }
  return data;
}

json tasks_json(const std::vector<CliTask>& tasks) {
  json out = json::array();
  for (const auto& t : tasks) {
    json j = t.spec;
    if (!t.label_map.empty()) j["label_map"] = t.label_map;
    out.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
  std::string out;
  std::string config_path;
  std::uint64_t seed = 0;

  json config() const { return config_path.empty() ? json::object() : read_json(existing(config_path)); }
};

void add_out(CLI::App* app, Common& c) { app->add_option("--out", c.out, "output directory")->required(); }
void add_seed(CLI::App* app, Common& c) { app->add_option("--seed", c.seed, "random seed")->required(); }
void add_config(CLI::App* app, Common& c) { app->add_option("--config", c.config_path, "JSON config file"); }

struct SynthArgs {
  Common common;
  std::size_t classes = 2;
  std::size_t flows = 100;
  std::size_t min_packets = 1;
  std::size_t max_packets = 3;
  std::size_t validation = 0;
  std::size_t test = 0;
  std::size_t signature_offset = 0;
  std::string transport = "udp";
};

void cmd_synth(const SynthArgs& a) {
  if (a.classes == 0 || a.flows % a.classes != 0) {
    throw Error(ErrorCode::kConfig, "--flows must be a multiple of --classes");
  }
  SyntheticSpec spec;
  spec.class_count = a.classes;
  spec.flows_per_class = a.flows / a.classes;
  spec.min_packets_per_flow = a.min_packets;
  spec.max_packets_per_flow = a.max_packets;
  spec.validation_count = a.validation;
  spec.test_count = a.test;
  spec.signature_offset = a.signature_offset;
  spec.transport = a.transport == "tcp" ? kIpProtoTcp : kIpProtoUdp;
  const auto corpus = generate_synthetic_corpus(spec, a.common.seed);
  const auto out = output_dir(a.common.out);
  write_capture((out / spec.capture_file).string(), corpus.link_type, corpus.raw_packets());

  Inputs inputs;
  const json config = {{"classes", a.classes},          {"flows", a.flows},
                       {"min_packets", a.min_packets},  {"max_packets", a.max_packets},
                       {"validation", a.validation},    {"test", a.test},
                       {"signature_offset", a.signature_offset}, {"transport", a.transport},
                       {"seed", a.common.seed}};
  DatasetManifest manifest = corpus.manifest;
  manifest.metadata = stamp(inputs);
  manifest.metadata["generator"] = config;
  manifest.metadata["capture_hash"] = hash_file((out / spec.capture_file).string());
  manifest.save((out / "manifest.json").string());
  json snapshot = config;
  snapshot.update(stamp(inputs));
  write_json(out / "config.json", snapshot);
  std::cout << "synth: " << corpus.flows.size() << " flows -> " << (out / "manifest.json").string() << "\n";
}

struct IngestArgs {
  Common common;
  std::string capture;
  std::string label;
  std::string granularity = "flow";
  std::string name = "dataset";
  std::size_t max_tokens = 512;
  std::size_t validation = 0;
  std::size_t test = 0;
};

void cmd_ingest(const IngestArgs& a) {
  const auto capture_path = fs::absolute(existing(a.capture));
  const Capture capture = read_capture(capture_path.string());
  std::vector<std::pair<std::size_t, Packet>> parsed;  // record index, packet
  std::size_t skipped = 0;
  for (std::size_t r = 0; r < capture.records.size(); ++r) {
    try {
      parsed.emplace_back(r, parse_packet(capture.records[r].packet, capture.link_type));
    } catch (const Error&) {
      ++skipped;  // non-IPv4 and malformed frames are not traffic items
    }
  }
  auto make_item = [&](const std::string& id, ItemKind kind, const std::vector<std::size_t>& records) {
    ManifestItem item;
    item.id = id;
    item.kind = kind;
    if (!a.label.empty()) item.label = a.label;
    item.source.file = capture_path.string();
    item.source.records = records;
    for (auto r : records) item.source.offsets.push_back(capture.records[r].file_offset);
    return item;
  };

  std::vector<ManifestItem> items;
  std::size_t truncated = 0;
  if (a.granularity == "packet") {
    for (const auto& [r, p] : parsed) items.push_back(make_item("pkt-" + std::to_string(r), ItemKind::kPacket, {r}));
  } else {
    std::map<FiveTuple, std::size_t> index;
    std::vector<std::vector<std::pair<std::size_t, Packet>>> groups;
    for (const auto& rp : parsed) {
      auto [it, fresh] = index.try_emplace(rp.second.five_tuple, groups.size());
      if (fresh) groups.emplace_back();
      groups[it->second].push_back(rp);
    }
    const Vocabulary base;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto& members = groups[g];
      std::stable_sort(members.begin(), members.end(),
                       [](const auto& x, const auto& y) { return x.second.timestamp() < y.second.timestamp(); });
      Flow flow{members.front().second.five_tuple, {}, false};
      for (const auto& m : members) flow.packets.push_back(m.second);
      const Flow kept = truncate_heavy(flow, a.max_tokens, base);
      truncated += kept.truncated ? 1 : 0;
      std::vector<std::size_t> records;
      for (std::size_t k = 0; k < kept.packets.size(); ++k) records.push_back(members[k].first);
      items.push_back(make_item("flow-" + std::to_string(g), ItemKind::kFlow, records));
    }
  }
  if (items.empty()) throw Error(ErrorCode::kData, "capture holds no IPv4 traffic");
  DatasetManifest manifest = split_dataset(std::move(items), a.common.seed, a.validation, a.test,
                                           Split::kTrain, a.name);
  Inputs inputs;
  inputs.add("capture", capture_path);
  manifest.metadata = stamp(inputs);
  manifest.metadata["ingest"] = {{"granularity", a.granularity}, {"max_tokens", a.max_tokens},
                                 {"seed", a.common.seed},        {"skipped_records", skipped},
                                 {"truncated_flows", truncated}};
  const auto out = output_dir(a.common.out);
  manifest.save((out / "manifest.json").string());
  json snapshot = manifest.metadata;
  snapshot["validation"] = a.validation;
  snapshot["test"] = a.test;
  write_json(out / "config.json", snapshot);
  std::cout << "ingest: " << manifest.items.size() << " items (" << skipped << " records skipped) -> "
            << (out / "manifest.json").string() << "\n";
}

struct VocabArgs {
  Common common;
  std::string manifest;
  std::string splits = "pretrain,train";
  std::size_t size = 1024;
  std::size_t min_frequency = 2;
};

void cmd_build_vocab(const VocabArgs& a) {
  const auto manifest_path = existing(a.manifest);
  const auto manifest = DatasetManifest::load(manifest_path.string());
  std::vector<Split> splits;
  for (Split s : splits_from(a.splits)) {
    if (!manifest.items_in({s}).empty()) splits.push_back(s);
  }
  std::vector<std::string> corpus;
  for (const auto& ex : examples_in(manifest, manifest_path, splits)) {
    for (const auto& p : packets_of(ex.traffic)) corpus.push_back(bytes_to_hex(p.network_bytes()));
  }
  const Vocabulary vocab = build_vocab(corpus, a.size, a.min_frequency);
  Inputs inputs;
  inputs.add("manifest", manifest_path);
  const auto out = output_dir(a.common.out);
  write_text(out / "vocab.txt", "# " + stamp(inputs).dump() + "\n" + vocab.serialize());
  json snapshot = stamp(inputs);
  snapshot["size"] = a.size;
  snapshot["min_frequency"] = a.min_frequency;
  snapshot["splits"] = a.splits;
  snapshot["vocab_hash"] = vocab.hash();
  write_json(out / "config.json", snapshot);
  std::cout << "build-vocab: " << vocab.size() << " pieces, hash " << vocab.hash() << "\n";
}

struct StageArgs {
  Common common;
  std::string manifest;
  std::string vocab;
  std::string checkpoint;
  std::string splits = "train";
  Overrides<TrainConfig> train;
  Overrides<ModelConfig> model;
  TaskFlags task;
  std::size_t copies = 1;
  bool full_shuffle = false;
  bool allow_no_retrain = false;
  CLI::Option* copies_opt = nullptr;
};

void cmd_pretrain(const StageArgs& a) {
  const json config = a.common.config();
  const auto manifest_path = existing(a.manifest);
  const auto vocab_path = existing(a.vocab);
  const auto manifest = DatasetManifest::load(manifest_path.string());
  const auto vocab = Vocabulary::load(vocab_path.string());
  const TrainConfig train = effective_train(TrainConfig::pretrain_defaults(), config, a.train, a.common.seed);

  ModelConfig model;
  if (config.contains("model")) from_json(config["model"], model);
  model.max_seq_len = train.max_seq_len;
  a.model(model);
  if (!config.contains("model") || !config["model"].contains("vocab_size")) model.vocab_size = vocab.size();
  if (model.vocab_size < vocab.size()) {
    throw Error(ErrorCode::kConfig, "model vocab_size " + std::to_string(model.vocab_size) +
                                        " is smaller than the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  const auto init = init_model<float>(model, a.common.seed);

  const auto corpus = plain_sequences(vocab, examples_in(manifest, manifest_path, splits_from(a.splits)),
                                     train.max_seq_len);
  Inputs inputs;
  inputs.add("manifest", manifest_path);
  inputs.add("vocab", vocab_path);
  json snapshot = {{"model", model}, {"splits", a.splits}};
  json meta = {{"vocab_hash", vocab.hash()}, {"retrained", false}};
  training_run(output_dir(a.common.out), "pretrain", train, snapshot, inputs, meta,
               [&](const StepCallback<float>& cb) { return pretrain(init, vocab, corpus, train, cb); });
}

struct Loaded {
  fs::path manifest_path, vocab_path, checkpoint_path;
  DatasetManifest manifest;
  Vocabulary vocab;
  Checkpoint checkpoint;
  Inputs inputs;
};

Loaded load_stage_inputs(const StageArgs& a) {
  Loaded l;
  l.manifest_path = existing(a.manifest);
  l.vocab_path = existing(a.vocab);
  l.checkpoint_path = existing(a.checkpoint);
  l.manifest = DatasetManifest::load(l.manifest_path.string());
  l.vocab = Vocabulary::load(l.vocab_path.string());
  l.checkpoint = load_checkpoint(l.checkpoint_path.string());
  check_vocab(l.checkpoint, l.vocab);
  l.inputs.add("manifest", l.manifest_path);
  l.inputs.add("vocab", l.vocab_path);
  l.inputs.add("checkpoint", l.checkpoint_path);
  return l;
}

void cmd_retrain(const StageArgs& a) {
  const json config = a.common.config();
  auto l = load_stage_inputs(a);
  TrainConfig train = effective_train(TrainConfig::retrain_defaults(), config, a.train, a.common.seed);
  if (a.copies_opt->count() > 0) train.shuffle_copies = a.copies;
  const auto data = examples_in(l.manifest, l.manifest_path, splits_from(a.splits));
  const ShuffleMode mode = a.full_shuffle ? ShuffleMode::kFullPermutation : ShuffleMode::kPairSwap;
  json snapshot = {{"model", l.checkpoint.params.config},
                   {"splits", a.splits},
                   {"shuffle_mode", a.full_shuffle ? "full" : "pair"}};
  json meta = {{"vocab_hash", l.vocab.hash()}, {"retrained", true}};
  training_run(output_dir(a.common.out), "retrain", train, snapshot, l.inputs, meta,
               [&](const StepCallback<float>& cb) {
                 return retrain_shuffled(l.checkpoint.params, l.vocab, data, train, mode, cb);
               });
}

void cmd_finetune(const StageArgs& a) {
  const json config = a.common.config();
  auto l = load_stage_inputs(a);
  if (!a.allow_no_retrain && !l.checkpoint.metadata.value("retrained", false)) {
    throw Error(ErrorCode::kConfig,
                "checkpoint has not been through retrain (run retrain first or pass --allow-no-retrain)");
  }
  const auto data = examples_in(l.manifest, l.manifest_path, splits_from(a.splits));
  const auto tasks = tasks_from(a.task, config, data);
  const bool generation = tasks.front().spec.kind == TaskKind::kGeneration;
  for (const auto& t : tasks) {
    if ((t.spec.kind == TaskKind::kGeneration) != generation) {
      throw Error(ErrorCode::kConfig, "understanding and generation tasks finetune separately");
    }
  }
  const TrainConfig train = effective_train(
      generation ? TrainConfig::generation_defaults() : TrainConfig::understanding_defaults(), config, a.train,
      a.common.seed);
  json snapshot = {{"model", l.checkpoint.params.config}, {"splits", a.splits}, {"tasks", tasks_json(tasks)}};
  json meta = {{"vocab_hash", l.vocab.hash()},
               {"retrained", l.checkpoint.metadata.value("retrained", false)},
               {"tasks", tasks_json(tasks)}};
  const auto out = output_dir(a.common.out);
  if (generation) {
    std::vector<Packet> packets;
    for (const auto& ex : as_packets(data)) packets.push_back(std::get<Packet>(ex.traffic));
    std::vector<TaskSpec> specs;
    for (const auto& t : tasks) specs.push_back(t.spec);
    training_run(out, "finetune", train, snapshot, l.inputs, meta, [&](const StepCallback<float>& cb) {
      return finetune_generation(l.checkpoint.params, l.vocab, packets, specs, train, cb);
    });
  } else {
    std::vector<TaskData> task_data;
    for (const auto& t : tasks) task_data.push_back({t.spec, relabel(data, t)});
    training_run(out, "finetune", train, snapshot, l.inputs, meta, [&](const StepCallback<float>& cb) {
      return finetune_understanding(l.checkpoint.params, l.vocab, task_data, train, cb);
    });
  }
}

struct InferArgs {
  StageArgs stage;
  std::string split = "test";
  std::string mode = "greedy";
  std::size_t top_k = 8;
  std::size_t workers = 1;
  std::size_t max_seq_len = 256;
  std::string dr_mode = "intersection";
  CLI::Option* seed_opt = nullptr;
};

std::vector<CliTask> infer_tasks(const InferArgs& a, const Loaded& l, std::vector<Example>& data) {
  json config = a.stage.common.config();
  if (a.stage.task.name.empty() && a.stage.task.fields.empty() && !config.contains("tasks")) {
    // Fall back to the tasks the checkpoint was finetuned on.
    if (l.checkpoint.metadata.contains("tasks")) config["tasks"] = l.checkpoint.metadata["tasks"];
  }
  return tasks_from(a.stage.task, config, data);
}

void cmd_generate(const InferArgs& a) {
  if (a.mode == "topk" && a.seed_opt->count() == 0) {
    throw Error(ErrorCode::kConfig, "--seed is required for top-k sampling");
  }
  auto l = load_stage_inputs(a.stage);
  auto data = examples_in(l.manifest, l.manifest_path, {split_from_string(a.split)});
  const auto tasks = infer_tasks(a, l, data);
  const auto& params = l.checkpoint.params;
  json items = json::array();
  for (const auto& task : tasks) {
    const auto set = task.spec.kind == TaskKind::kGeneration ? as_packets(data) : relabel(data, task);
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto limit = std::min(a.max_seq_len, params.config.max_seq_len);
      const auto prefix = build_task_sequence(l.vocab, task.spec, set[i].traffic, std::nullopt, limit,
                                              params.config.segment_count);
      GenerateOptions options;
      options.max_new = task.spec.target_len + 1;
      options.mode = a.mode == "topk" ? DecodeMode::kTopK : DecodeMode::kGreedy;
      options.top_k = a.top_k;
      options.seed = Rng::derive(a.stage.common.seed, i).next();
      options.stop_token = l.vocab.marker_id(Marker::kEos);
      const auto tokens = generate(params, prefix.sequence, options);
      const std::string value = task.spec.kind == TaskKind::kUnderstanding
                                    ? decode_label(tokens, task.spec, l.vocab)
                                    : decode_value(tokens, task.spec, l.vocab);
      items.push_back({{"id", set[i].id}, {"task", task.spec.name}, {"output", value}});
    }
  }
  const auto out = output_dir(a.stage.common.out);
  json doc = stamp(l.inputs);
  doc["decoding"] = {{"mode", a.mode}, {"top_k", a.top_k}, {"seed", a.stage.common.seed}};
  doc["items"] = items;
  write_json(out / "generated.json", doc);
  std::cout << "generate: " << items.size() << " outputs -> " << (out / "generated.json").string() << "\n";
}

void cmd_evaluate(const InferArgs& a) {
  auto l = load_stage_inputs(a.stage);
  auto data = examples_in(l.manifest, l.manifest_path, {split_from_string(a.split)});
  const auto tasks = infer_tasks(a, l, data);
  const auto out = output_dir(a.stage.common.out);
  json results = json::array();
  for (const auto& task : tasks) {
    EvaluateOptions options;
    options.dataset = l.manifest.name + ":" + a.split;
    options.seed = a.stage.common.seed;
    options.workers = a.workers;
    options.max_seq_len = a.max_seq_len;
    options.recorded_vocab_hash = l.checkpoint.vocab_hash();
    if (options.recorded_vocab_hash->empty()) options.recorded_vocab_hash.reset();
    options.dr_mode = a.dr_mode == "strict" ? DrMode::kStrict : DrMode::kIntersection;
    const auto set = task.spec.kind == TaskKind::kGeneration ? as_packets(data) : relabel(data, task);
    const auto record = evaluate_task(l.checkpoint.params, set, task.spec, l.vocab, options);
    append_metrics_csv((out / "metrics.csv").string(), record);
    json r = record.to_json();
    r["predictions"] = record.predictions;
    r["references"] = record.references;
    results.push_back(r);
    std::cout << "evaluate " << task.spec.name << ": AC " << record.ac << " F1 " << record.f1;
    if (record.dr) std::cout << " DR " << *record.dr << " DR_strict " << *record.dr_strict;
    std::cout << "\n";
  }
  json doc = stamp(l.inputs);
  doc["results"] = results;
  write_json(out / "metrics.json", doc);
}

int run(int argc, char** argv) {
  CLI::App app{"netgpt: traffic language model toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a labeled synthetic capture and its manifest");
  add_out(s, synth.common);
  add_seed(s, synth.common);
  s->add_option("--classes", synth.classes, "number of classes");
  s->add_option("--flows", synth.flows, "total flows, split evenly over the classes");
  s->add_option("--min-packets", synth.min_packets, "fewest packets per flow");
  s->add_option("--max-packets", synth.max_packets, "most packets per flow");
  s->add_option("--validation", synth.validation, "validation items");
  s->add_option("--test", synth.test, "test items");
  s->add_option("--signature-offset", synth.signature_offset, "payload offset of the class signature");
  s->add_option("--transport", synth.transport, "udp or tcp")->check(CLI::IsMember({"udp", "tcp"}));

  IngestArgs ingest;
  auto* in = app.add_subcommand("ingest", "turn a pcap capture into a dataset manifest");
  add_out(in, ingest.common);
  add_seed(in, ingest.common);
  in->add_option("--capture", ingest.capture, "pcap file")->required();
  in->add_option("--label", ingest.label, "label for every item");
  in->add_option("--granularity", ingest.granularity, "flow or packet")->check(CLI::IsMember({"flow", "packet"}));
  in->add_option("--name", ingest.name, "dataset name");
  in->add_option("--max-tokens", ingest.max_tokens, "flows longer than this keep their first three packets");
  in->add_option("--validation", ingest.validation, "validation items");
  in->add_option("--test", ingest.test, "test items");

  VocabArgs vocab;
  auto* v = app.add_subcommand("build-vocab", "learn a hex vocabulary from a manifest");
  add_out(v, vocab.common);
  v->add_option("--manifest", vocab.manifest, "dataset manifest")->required();
  v->add_option("--splits", vocab.splits, "comma-separated splits to learn from");
  v->add_option("--size", vocab.size, "target vocabulary size");
  v->add_option("--min-frequency", vocab.min_frequency, "smallest pair count worth merging");

  auto stage_common = [](CLI::App* cmd, StageArgs& st, bool needs_checkpoint) {
    add_out(cmd, st.common);
    add_seed(cmd, st.common);
    add_config(cmd, st.common);
    cmd->add_option("--manifest", st.manifest, "dataset manifest")->required();
    cmd->add_option("--vocab", st.vocab, "vocabulary file")->required();
    if (needs_checkpoint) cmd->add_option("--checkpoint", st.checkpoint, "input checkpoint")->required();
    cmd->add_option("--splits", st.splits, "comma-separated splits to train on");
    add_train_flags(cmd, st.train);
  };

  StageArgs pre;
  pre.splits = "pretrain,train";
  auto* p = app.add_subcommand("pretrain", "language-model pretraining from scratch");
  stage_common(p, pre, false);
  add_model_flags(p, pre.model);

  StageArgs re;
  auto* r = app.add_subcommand("retrain", "quick retraining on header-shuffled task data");
  stage_common(r, re, true);
  re.copies_opt = r->add_option("--copies", re.copies, "shuffled variants per item");
  r->add_flag("--full-shuffle", re.full_shuffle, "permute all header fields instead of swapping two");

  StageArgs fine;
  auto* f = app.add_subcommand("finetune", "prompted finetuning on understanding or generation tasks");
  stage_common(f, fine, true);
  fine.task.add(f);
  f->add_flag("--allow-no-retrain", fine.allow_no_retrain, "finetune a checkpoint that skipped retrain");

  auto infer_common = [](CLI::App* cmd, InferArgs& ia) {
    add_out(cmd, ia.stage.common);
    add_config(cmd, ia.stage.common);
    cmd->add_option("--manifest", ia.stage.manifest, "dataset manifest")->required();
    cmd->add_option("--vocab", ia.stage.vocab, "vocabulary file")->required();
    cmd->add_option("--checkpoint", ia.stage.checkpoint, "finetuned checkpoint")->required();
    cmd->add_option("--split", ia.split, "split to run on");
    cmd->add_option("--max-seq-len", ia.max_seq_len, "token budget per prompt");
    ia.stage.task.add(cmd);
  };

  InferArgs gen;
  auto* g = app.add_subcommand("generate", "decode task answers for a split");
  infer_common(g, gen);
  gen.seed_opt = g->add_option("--seed", gen.stage.common.seed, "sampling seed (required for topk)");
  g->add_option("--mode", gen.mode, "greedy or topk")->check(CLI::IsMember({"greedy", "topk"}));
  g->add_option("--top-k", gen.top_k, "candidates for top-k sampling");

  InferArgs eval;
  auto* e = app.add_subcommand("evaluate", "score a checkpoint on a split");
  infer_common(e, eval);
  e->add_option("--seed", eval.stage.common.seed, "recorded with the metrics");
  e->add_option("--workers", eval.workers, "inference threads");
  e->add_option("--dr-mode", eval.dr_mode, "headline diversity mode")
      ->check(CLI::IsMember({"intersection", "strict"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    throw Error(ErrorCode::kConfig, err.what());
  }

  if (s->parsed()) cmd_synth(synth);
  if (in->parsed()) cmd_ingest(ingest);
  if (v->parsed()) cmd_build_vocab(vocab);
  if (p->parsed()) cmd_pretrain(pre);
  if (r->parsed()) cmd_retrain(re);
  if (f->parsed()) cmd_finetune(fine);
  if (g->parsed()) cmd_generate(gen);
  if (e->parsed()) cmd_evaluate(eval);
  return 0;
}

void report(ErrorCode code, const std::string& message) {
  std::string line = message;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error: code=" << to_string(code) << " message=" << line << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    report(e.code(), e.what());
    return exit_status(e.code());
  } catch (const fs::filesystem_error& e) {
    report(ErrorCode::kIo, e.what());
    return exit_status(ErrorCode::kIo);
  } catch (const std::exception& e) {
    report(ErrorCode::kData, e.what());
    return exit_status(ErrorCode::kData);
  }
}
