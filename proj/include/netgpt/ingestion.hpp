#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "netgpt/encoding.hpp"
#include "netgpt/error.hpp"
#include "netgpt/rng.hpp"
#include "netgpt/traffic_model.hpp"

namespace netgpt {

// ---------------------------------------------------------------------------
// Classic pcap

inline constexpr std::uint32_t kPcapMagicMicros = 0xa1b2c3d4;
inline constexpr std::uint32_t kPcapMagicNanos = 0xa1b23c4d;

struct CaptureRecord {
  RawPacket packet;
  std::size_t index = 0;
  std::uint64_t file_offset = 0;  // offset of the record header
};

struct Capture {
  LinkType link_type = LinkType::kEthernet;
  std::vector<CaptureRecord> records;
};

namespace detail {

inline std::uint32_t load_u32(const std::uint8_t* p, bool big_endian) {
  if (big_endian) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
           (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
  }
  return (std::uint32_t{p[3]} << 24) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[1]} << 8) | std::uint32_t{p[0]};
}

inline void store_u32le(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void store_u16le(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace detail

// Either byte order; microsecond or nanosecond timestamps (normalized to
// microseconds).
inline Capture read_capture_bytes(ByteView data) {
  if (data.size() < 24) throw Error(ErrorCode::kFormat, "file shorter than pcap global header");
  const std::uint32_t magic_le = detail::load_u32(data.data(), false);
  bool big_endian;
  bool nanos = false;
  if (magic_le == kPcapMagicMicros || magic_le == kPcapMagicNanos) {
    big_endian = false;
    nanos = magic_le == kPcapMagicNanos;
  } else {
    const std::uint32_t magic_be = detail::load_u32(data.data(), true);
    if (magic_be != kPcapMagicMicros && magic_be != kPcapMagicNanos) {
      throw Error(ErrorCode::kFormat, "bad pcap magic number");
    }
    big_endian = true;
    nanos = magic_be == kPcapMagicNanos;
  }
  Capture capture;
  capture.link_type = static_cast<LinkType>(detail::load_u32(data.data() + 20, big_endian));

  std::size_t pos = 24;
  std::size_t index = 0;
  while (pos < data.size()) {
    if (data.size() - pos < 16) throw TruncatedRecordError(index, "truncated record header");
    const std::uint8_t* h = data.data() + pos;
    const std::uint32_t sec = detail::load_u32(h, big_endian);
    const std::uint32_t frac = detail::load_u32(h + 4, big_endian);
    const std::uint32_t incl_len = detail::load_u32(h + 8, big_endian);
    if (data.size() - pos - 16 < incl_len) throw TruncatedRecordError(index, "truncated record data");
    if (incl_len == 0) throw Error(ErrorCode::kFormat, "record " + std::to_string(index) + " is empty");
    const std::int64_t micros = std::int64_t{sec} * 1'000'000 + (nanos ? frac / 1000 : frac);
    CaptureRecord record;
    record.index = index;
    record.file_offset = pos;
    record.packet = RawPacket::make(micros, Bytes(h + 16, h + 16 + incl_len));
    capture.records.push_back(std::move(record));
    pos += 16 + incl_len;
    ++index;
  }
  return capture;
}

inline Bytes read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Capture read_capture(const std::string& path) { return read_capture_bytes(read_file_bytes(path)); }

inline std::vector<RawPacket> parse_capture(const std::string& path) {
  std::vector<RawPacket> out;
  for (auto& r : read_capture(path).records) out.push_back(std::move(r.packet));
  return out;
}

// Little-endian, microsecond resolution.
inline Bytes encode_capture(LinkType link_type, std::span<const RawPacket> packets,
                            std::uint32_t snaplen = 65535) {
  Bytes out;
  detail::store_u32le(out, kPcapMagicMicros);
  detail::store_u16le(out, 2);
  detail::store_u16le(out, 4);
  detail::store_u32le(out, 0);
  detail::store_u32le(out, 0);
  detail::store_u32le(out, snaplen);
  detail::store_u32le(out, static_cast<std::uint32_t>(link_type));
  for (const auto& p : packets) {
    detail::store_u32le(out, static_cast<std::uint32_t>(p.capture_timestamp / 1'000'000));
    detail::store_u32le(out, static_cast<std::uint32_t>(p.capture_timestamp % 1'000'000));
    detail::store_u32le(out, static_cast<std::uint32_t>(p.link_bytes.size()));
    detail::store_u32le(out, static_cast<std::uint32_t>(p.capture_length));
    out.insert(out.end(), p.link_bytes.begin(), p.link_bytes.end());
  }
  return out;
}

inline void write_capture(const std::string& path, LinkType link_type,
                          std::span<const RawPacket> packets) {
  const Bytes bytes = encode_capture(link_type, packets);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Flows

// One flow per exact five-tuple, in first-appearance order; packets stably
// sorted by timestamp.
inline std::vector<Flow> assemble_flows(std::span<const Packet> packets) {
  std::vector<Flow> flows;
  std::unordered_map<FiveTuple, std::size_t, FiveTupleHash> index;
  for (const auto& p : packets) {
    auto [it, inserted] = index.try_emplace(p.five_tuple, flows.size());
    if (inserted) {
      flows.push_back(Flow{p.five_tuple, {}, false});
    }
    flows[it->second].packets.push_back(p);
  }
  for (auto& f : flows) {
    std::stable_sort(f.packets.begin(), f.packets.end(),
                     [](const Packet& a, const Packet& b) { return a.timestamp() < b.timestamp(); });
  }
  return flows;
}

inline constexpr std::size_t kHeavyFlowPacketLimit = 3;

// A flow whose assembled sequence would exceed max_tokens keeps only its
// first three packets (fewer if it has fewer) and is marked truncated.
inline Flow truncate_heavy(const Flow& flow, std::size_t max_tokens, const Vocabulary& vocab) {
  if (max_tokens == 0) throw Error(ErrorCode::kConfig, "max_tokens must be positive");
  if (flow_sequence_length(vocab, flow) <= max_tokens) return flow;
  Flow out;
  out.five_tuple = flow.five_tuple;
  const std::size_t keep = std::min(flow.packets.size(), kHeavyFlowPacketLimit);
  out.packets.assign(flow.packets.begin(), flow.packets.begin() + static_cast<std::ptrdiff_t>(keep));
  out.truncated = true;
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

using Traffic = std::variant<Packet, Flow>;

struct Example {
  std::string id;
  Traffic traffic;
  std::optional<std::string> label;
};

inline std::span<const Packet> packets_of(const Traffic& traffic) {
  if (const auto* p = std::get_if<Packet>(&traffic)) return std::span<const Packet>(p, 1);
  return std::get<Flow>(traffic).packets;
}

enum class ItemKind { kPacket, kFlow };
enum class Split { kPretrain, kTrain, kValidation, kTest };

inline constexpr std::string_view to_string(ItemKind kind) {
  return kind == ItemKind::kPacket ? "packet" : "flow";
}

inline constexpr std::string_view to_string(Split split) {
  switch (split) {
    case Split::kPretrain: return "pretrain";
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_string(std::string_view name) {
  if (name == "pretrain") return Split::kPretrain;
  if (name == "train") return Split::kTrain;
  if (name == "validation") return Split::kValidation;
  if (name == "test") return Split::kTest;
  throw Error(ErrorCode::kData, "unknown split " + std::string(name));
}

struct SourceRef {
  std::string file;
  std::vector<std::size_t> records;       // capture record indices
  std::vector<std::uint64_t> offsets;     // file offsets of those records

  bool operator==(const SourceRef&) const = default;
};

struct ManifestItem {
  std::string id;
  ItemKind kind = ItemKind::kFlow;
  std::optional<std::string> label;
  SourceRef source;

  bool operator==(const ManifestItem&) const = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestItem> items;
  std::map<std::string, Split> split;
  nlohmann::json metadata = nlohmann::json::object();

  std::vector<const ManifestItem*> items_in(std::initializer_list<Split> splits) const {
    std::vector<const ManifestItem*> out;
    for (const auto& item : items) {
      auto it = split.find(item.id);
      if (it != split.end() && std::find(splits.begin(), splits.end(), it->second) != splits.end()) {
        out.push_back(&item);
      }
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["items"] = nlohmann::json::array();
    for (const auto& item : items) {
      nlohmann::json ji;
      ji["id"] = item.id;
      ji["kind"] = to_string(item.kind);
      ji["label"] = item.label ? nlohmann::json(*item.label) : nlohmann::json(nullptr);
      ji["source"] = {{"file", item.source.file},
                      {"records", item.source.records},
                      {"offsets", item.source.offsets}};
      j["items"].push_back(std::move(ji));
    }
    j["split"] = nlohmann::json::object();
    for (const auto& [id, s] : split) j["split"][id] = to_string(s);
    if (!metadata.empty()) j["metadata"] = metadata;
    return j;
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
      m.name = j.at("name").get<std::string>();
      for (const auto& ji : j.at("items")) {
        ManifestItem item;
        item.id = ji.at("id").get<std::string>();
        const auto kind = ji.at("kind").get<std::string>();
        if (kind != "packet" && kind != "flow") throw Error(ErrorCode::kData, "bad item kind " + kind);
        item.kind = kind == "packet" ? ItemKind::kPacket : ItemKind::kFlow;
        if (ji.contains("label") && !ji["label"].is_null()) item.label = ji["label"].get<std::string>();
        const auto& src = ji.at("source");
        item.source.file = src.at("file").get<std::string>();
        item.source.records = src.at("records").get<std::vector<std::size_t>>();
        item.source.offsets = src.at("offsets").get<std::vector<std::uint64_t>>();
        m.items.push_back(std::move(item));
      }
      for (const auto& [id, s] : j.at("split").items()) m.split[id] = split_from_string(s.get<std::string>());
      if (j.contains("metadata")) m.metadata = j["metadata"];
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kData, std::string("malformed manifest: ") + e.what());
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
    out << to_json().dump(2) << '\n';
  }

  static DatasetManifest load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kData, std::string("malformed manifest: ") + e.what());
    }
    return from_json(j);
  }
};

// Seeded partition: validation_count items, then test_count items, the rest
// go to `remainder`.
inline DatasetManifest split_dataset(std::vector<ManifestItem> items, std::uint64_t seed,
                                     std::size_t validation_count, std::size_t test_count,
                                     Split remainder = Split::kTrain, std::string name = "dataset") {
  if (validation_count + test_count > items.size()) {
    throw Error(ErrorCode::kInsufficientItems,
                "need " + std::to_string(validation_count) + " validation + " +
                    std::to_string(test_count) + " test items but only " +
                    std::to_string(items.size()) + " exist");
  }
  std::set<std::string> seen;
  for (const auto& item : items) {
    if (!seen.insert(item.id).second) throw Error(ErrorCode::kData, "duplicate item id " + item.id);
  }
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  DatasetManifest manifest;
  manifest.name = std::move(name);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& id = items[order[rank]].id;
    Split s = remainder;
    if (rank < validation_count) {
      s = Split::kValidation;
    } else if (rank < validation_count + test_count) {
      s = Split::kTest;
    }
    manifest.split[id] = s;
  }
  manifest.items = std::move(items);
  return manifest;
}

// Rebuilds examples for the items of `splits` from their capture files
// (resolved against base_dir). Unparseable records are a data error naming
// the item.
inline std::vector<Example> load_examples(const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                                          std::initializer_list<Split> splits) {
  std::map<std::string, Capture> captures;
  std::vector<Example> out;
  for (const ManifestItem* item : manifest.items_in(splits)) {
    auto it = captures.find(item->source.file);
    if (it == captures.end()) {
      const auto path = base_dir / item->source.file;
      it = captures.emplace(item->source.file, read_capture(path.string())).first;
    }
    const Capture& capture = it->second;
    std::vector<Packet> packets;
    for (std::size_t r : item->source.records) {
      if (r >= capture.records.size()) {
        throw Error(ErrorCode::kData, "item " + item->id + " refers to missing record " + std::to_string(r));
      }
      try {
        packets.push_back(parse_packet(capture.records[r].packet, capture.link_type));
      } catch (const Error& e) {
        throw Error(ErrorCode::kData, "item " + item->id + " record " + std::to_string(r) + ": " + e.what());
      }
    }
    if (packets.empty()) throw Error(ErrorCode::kData, "item " + item->id + " has no records");
    Example ex{item->id, Packet{}, item->label};
    if (item->kind == ItemKind::kPacket) {
      ex.traffic = std::move(packets.front());
    } else {
      Flow flow{packets.front().five_tuple, std::move(packets), false};
      std::stable_sort(flow.packets.begin(), flow.packets.end(),
                       [](const Packet& a, const Packet& b) { return a.timestamp() < b.timestamp(); });
      ex.traffic = std::move(flow);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct HeaderValuePools {
  std::vector<std::array<std::uint8_t, 4>> src_ips;
  std::vector<std::array<std::uint8_t, 4>> dst_ips;
  std::vector<std::uint16_t> src_ports;
  std::vector<std::uint16_t> dst_ports;
  std::vector<std::uint16_t> lengths;  // IPv4 total length
  std::vector<std::uint8_t> ttls;
};

struct SyntheticSpec {
  std::string name = "synthetic";
  std::size_t class_count = 2;
  std::size_t flows_per_class = 50;
  std::size_t min_packets_per_flow = 1;
  std::size_t max_packets_per_flow = 3;
  std::vector<std::string> class_names;  // default "c0", "c1", ...
  std::vector<Bytes> payload_signatures;  // default two repeated bytes per class
  std::size_t signature_offset = 0;
  std::uint8_t transport = kIpProtoUdp;
  HeaderValuePools pools;
  std::size_t validation_count = 0;
  std::size_t test_count = 0;
  std::string capture_file = "capture.pcap";

  static HeaderValuePools default_pools() {
    HeaderValuePools p;
    for (std::uint8_t i = 1; i <= 4; ++i) p.src_ips.push_back({10, 0, 0, i});
    for (std::uint8_t i = 1; i <= 4; ++i) p.dst_ips.push_back({192, 168, 1, static_cast<std::uint8_t>(i * 10)});
    for (std::uint16_t i = 0; i < 16; ++i) p.src_ports.push_back(static_cast<std::uint16_t>(40000 + 7 * i));
    p.dst_ports = {53, 80, 443, 8080};
    p.lengths = {44, 48, 52, 56, 60, 64, 68, 72};
    p.ttls = {64, 128};
    return p;
  }

  SyntheticSpec() : pools(default_pools()) {}

  std::string class_name(std::size_t k) const {
    return k < class_names.size() ? class_names[k] : "c" + std::to_string(k);
  }

  Bytes signature(std::size_t k) const {
    if (k < payload_signatures.size()) return payload_signatures[k];
    const auto b = static_cast<std::uint8_t>((0xaa + 0x11 * k) & 0xff);
    return {b, b};
  }

  std::size_t transport_header_length() const { return transport == kIpProtoTcp ? 20 : 8; }

  void validate() const {
    if (class_count < 2) throw Error(ErrorCode::kConfig, "synthetic corpus needs at least 2 classes");
    if (flows_per_class < 1) throw Error(ErrorCode::kConfig, "flows_per_class must be at least 1");
    if (min_packets_per_flow < 1 || max_packets_per_flow < min_packets_per_flow) {
      throw Error(ErrorCode::kConfig, "bad flow length range");
    }
    if (transport != kIpProtoUdp && transport != kIpProtoTcp) {
      throw Error(ErrorCode::kConfig, "synthetic transport must be UDP or TCP");
    }
    if (pools.src_ips.empty() || pools.dst_ips.empty() || pools.src_ports.empty() ||
        pools.dst_ports.empty() || pools.lengths.empty() || pools.ttls.empty()) {
      throw Error(ErrorCode::kConfig, "header value pools must be non-empty");
    }
    std::size_t longest_signature = 0;
    for (std::size_t a = 0; a < class_count; ++a) {
      longest_signature = std::max(longest_signature, signature(a).size());
      for (std::size_t b = a + 1; b < class_count; ++b) {
        if (signature(a) == signature(b)) {
          throw Error(ErrorCode::kConfig, "classes " + std::to_string(a) + " and " +
                                              std::to_string(b) + " share a payload signature");
        }
      }
    }
    const std::size_t floor = 20 + transport_header_length() + signature_offset + longest_signature;
    for (auto len : pools.lengths) {
      if (len < floor) {
        throw Error(ErrorCode::kConfig, "length pool value " + std::to_string(len) +
                                            " cannot hold headers and signature");
      }
    }
    const std::size_t combos = pools.src_ips.size() * pools.dst_ips.size() *
                               pools.src_ports.size() * pools.dst_ports.size();
    if (combos < class_count * flows_per_class) {
      throw Error(ErrorCode::kConfig, "header pools too small for distinct five-tuples");
    }
  }
};

struct SyntheticCorpus {
  std::vector<Flow> flows;
  std::vector<std::string> labels;  // parallel to flows
  DatasetManifest manifest;
  LinkType link_type = LinkType::kEthernet;

  // Capture records in file order.
  std::vector<RawPacket> raw_packets() const {
    std::vector<RawPacket> out;
    for (const auto& f : flows) {
      for (const auto& p : f.packets) out.push_back(p.raw);
    }
    return out;
  }

  std::vector<Example> examples() const {
    std::vector<Example> out;
    for (std::size_t i = 0; i < flows.size(); ++i) {
      out.push_back({manifest.items[i].id, flows[i], labels[i]});
    }
    return out;
  }
};

namespace detail {

inline std::uint16_t ipv4_checksum(ByteView header) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i + 1 < header.size(); i += 2) sum += (header[i] << 8) | header[i + 1];
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

inline void put_be16(Bytes& b, std::size_t at, std::uint16_t v) {
  b[at] = static_cast<std::uint8_t>(v >> 8);
  b[at + 1] = static_cast<std::uint8_t>(v);
}

}  // namespace detail

// Ethernet + IPv4 + UDP/TCP frame with the given payload.
inline Bytes build_ethernet_frame(const FiveTuple& tuple, std::uint16_t ip_id, std::uint8_t ttl,
                                  ByteView payload, std::uint32_t tcp_seq = 0) {
  const bool tcp = tuple.protocol == kIpProtoTcp;
  const std::size_t transport_len = tcp ? 20 : 8;
  const std::size_t total = 20 + transport_len + payload.size();
  Bytes frame(14 + total, 0);
  const std::uint8_t dst_mac[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x02};
  const std::uint8_t src_mac[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x01};
  std::copy_n(dst_mac, 6, frame.begin());
  std::copy_n(src_mac, 6, frame.begin() + 6);
  detail::put_be16(frame, 12, 0x0800);
  const std::size_t ip = 14;
  frame[ip] = 0x45;
  detail::put_be16(frame, ip + 2, static_cast<std::uint16_t>(total));
  detail::put_be16(frame, ip + 4, ip_id);
  detail::put_be16(frame, ip + 6, 0x4000);
  frame[ip + 8] = ttl;
  frame[ip + 9] = tuple.protocol;
  std::copy(tuple.src_ip.begin(), tuple.src_ip.end(), frame.begin() + ip + 12);
  std::copy(tuple.dst_ip.begin(), tuple.dst_ip.end(), frame.begin() + ip + 16);
  detail::put_be16(frame, ip + 10, detail::ipv4_checksum(ByteView(frame).subspan(ip, 20)));
  const std::size_t tp = ip + 20;
  detail::put_be16(frame, tp, tuple.src_port);
  detail::put_be16(frame, tp + 2, tuple.dst_port);
  if (tcp) {
    for (int i = 0; i < 4; ++i) frame[tp + 4 + i] = static_cast<std::uint8_t>(tcp_seq >> (24 - 8 * i));
    detail::put_be16(frame, tp + 12, 0x5018);
    detail::put_be16(frame, tp + 14, 0xffff);
  } else {
    detail::put_be16(frame, tp + 4, static_cast<std::uint16_t>(8 + payload.size()));
  }
  std::copy(payload.begin(), payload.end(), frame.begin() + static_cast<std::ptrdiff_t>(tp + transport_len));
  return frame;
}

// Labeled flows whose class is carried by a payload signature; header fields
// come from the value pools. Flows are laid out one after another in capture
// order, so record indices in the manifest match write_capture's output.
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  SyntheticCorpus corpus;
  std::set<FiveTuple> used;
  std::vector<ManifestItem> items;
  const std::int64_t base_time = 1'600'000'000'000'000;
  std::size_t record = 0;
  std::uint64_t offset = 24;
  auto pick = [&rng](const auto& pool) { return pool[rng.uniform_index(pool.size())]; };

  const std::size_t total_flows = spec.class_count * spec.flows_per_class;
  for (std::size_t f = 0; f < total_flows; ++f) {
    const std::size_t cls = f % spec.class_count;
    FiveTuple tuple;
    do {
      tuple.src_ip = pick(spec.pools.src_ips);
      tuple.dst_ip = pick(spec.pools.dst_ips);
      tuple.src_port = pick(spec.pools.src_ports);
      tuple.dst_port = pick(spec.pools.dst_ports);
      tuple.protocol = spec.transport;
    } while (used.contains(tuple));
    used.insert(tuple);

    const std::size_t span = spec.max_packets_per_flow - spec.min_packets_per_flow + 1;
    const std::size_t n_packets = spec.min_packets_per_flow + rng.uniform_index(span);
    const std::uint8_t ttl = pick(spec.pools.ttls);
    Flow flow;
    flow.five_tuple = tuple;
    ManifestItem item;
    item.id = "flow-" + std::to_string(f);
    item.kind = ItemKind::kFlow;
    item.label = spec.class_name(cls);
    item.source.file = spec.capture_file;
    const Bytes signature = spec.signature(cls);
    for (std::size_t k = 0; k < n_packets; ++k) {
      const std::uint16_t total = pick(spec.pools.lengths);
      Bytes payload(total - 20 - spec.transport_header_length());
      for (auto& b : payload) b = static_cast<std::uint8_t>(rng.next());
      std::copy(signature.begin(), signature.end(),
                payload.begin() + static_cast<std::ptrdiff_t>(spec.signature_offset));
      const auto ip_id = static_cast<std::uint16_t>(rng.next());
      const auto seq = static_cast<std::uint32_t>(rng.next());
      Bytes frame = build_ethernet_frame(tuple, ip_id, ttl, payload, seq);
      const std::int64_t ts = base_time + static_cast<std::int64_t>(f) * 1'000'000 +
                              static_cast<std::int64_t>(k) * 1'000;
      const std::size_t frame_size = frame.size();
      flow.packets.push_back(parse_packet(RawPacket::make(ts, std::move(frame)), LinkType::kEthernet));
      item.source.records.push_back(record++);
      item.source.offsets.push_back(offset);
      offset += 16 + frame_size;
    }
    corpus.flows.push_back(std::move(flow));
    corpus.labels.push_back(spec.class_name(cls));
    items.push_back(std::move(item));
  }
  corpus.manifest = split_dataset(std::move(items), seed, spec.validation_count, spec.test_count,
                                  Split::kTrain, spec.name);
  return corpus;
}

}  // namespace netgpt
