#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "test_support.hpp"

using namespace netgpt;
using namespace netgpt::testing;

namespace {

// Hand-rolled pcap writer, independent of encode_capture.
void put32(Bytes& out, std::uint32_t v, bool big) {
  for (int i = 0; i < 4; ++i) {
    const int shift = big ? 24 - 8 * i : 8 * i;
    out.push_back(static_cast<std::uint8_t>(v >> shift));
  }
}

void put16(Bytes& out, std::uint16_t v, bool big) {
  if (big) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
  } else {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
}

Bytes pcap_file(bool big, const std::vector<std::pair<std::uint32_t, Bytes>>& records) {
  Bytes out;
  put32(out, 0xa1b2c3d4, big);
  put16(out, 2, big);
  put16(out, 4, big);
  put32(out, 0, big);
  put32(out, 0, big);
  put32(out, 65535, big);
  put32(out, 101, big);
  for (const auto& [sec, data] : records) {
    put32(out, sec, big);
    put32(out, 250, big);
    put32(out, static_cast<std::uint32_t>(data.size()), big);
    put32(out, static_cast<std::uint32_t>(data.size()), big);
    out.insert(out.end(), data.begin(), data.end());
  }
  return out;
}

std::vector<std::pair<std::uint32_t, Bytes>> two_records() {
  return {{100, ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, {0xaa}))},
          {101, ipv4_datagram(kIpProtoTcp, tcp_segment(3, 4, {0xbb, 0xcc}))}};
}


}  // namespace

TEST(Capture, TwoRecordsInOrder) {
  const auto file = pcap_file(false, two_records());
  const Capture c = read_capture_bytes(file);
  ASSERT_EQ(c.records.size(), 2u);
  EXPECT_EQ(c.link_type, LinkType::kRaw);
  EXPECT_EQ(c.records[0].packet.capture_timestamp, 100'000'250);
  EXPECT_EQ(c.records[1].packet.capture_timestamp, 101'000'250);
  EXPECT_EQ(c.records[0].packet.link_bytes, two_records()[0].second);
  EXPECT_EQ(c.records[1].packet.capture_length, two_records()[1].second.size());
  EXPECT_EQ(c.records[0].file_offset, 24u);
}

TEST(Capture, ByteSwappedMagicGivesIdenticalPackets) {
  const Capture le = read_capture_bytes(pcap_file(false, two_records()));
  const Capture be = read_capture_bytes(pcap_file(true, two_records()));
  ASSERT_EQ(le.records.size(), be.records.size());
  EXPECT_EQ(le.link_type, be.link_type);
  for (std::size_t i = 0; i < le.records.size(); ++i) EXPECT_EQ(le.records[i].packet, be.records[i].packet);
}

TEST(Capture, CutMidRecordNamesIndexOne) {
  Bytes file = pcap_file(false, two_records());
  file.resize(file.size() - 3);
  try {
    read_capture_bytes(file);
    FAIL();
  } catch (const TruncatedRecordError& e) {
    EXPECT_EQ(e.record_index(), 1u);
    EXPECT_EQ(e.code(), ErrorCode::kTruncatedRecord);
  }
  // Cut inside the second record header.
  file = pcap_file(false, two_records());
  file.resize(24 + 16 + two_records()[0].second.size() + 7);
  try {
    read_capture_bytes(file);
    FAIL();
  } catch (const TruncatedRecordError& e) {
    EXPECT_EQ(e.record_index(), 1u);
  }
}

TEST(Capture, BadMagicIsFormatError) {
  Bytes file = pcap_file(false, two_records());
  file[0] = 0x0a;
  file[1] = 0x0d;
  file[2] = 0x0d;
  file[3] = 0x0a;  // pcapng section header
  try {
    read_capture_bytes(file);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
}

TEST(Capture, EncodeMatchesHandWriterAndFileRoundTrip) {
  std::vector<RawPacket> raws;
  for (const auto& [sec, data] : two_records()) raws.push_back(RawPacket::make(std::int64_t{sec} * 1'000'000 + 250, data));
  EXPECT_EQ(encode_capture(LinkType::kRaw, raws), pcap_file(false, two_records()));
  TempDir dir;
  const auto path = (dir.path / "x.pcap").string();
  write_capture(path, LinkType::kRaw, raws);
  EXPECT_EQ(parse_capture(path), raws);
}

TEST(Flows, ThreePacketsTwoShareATuple) {
  const Packet a = parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, {1})), 10);
  const Packet b = parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(5, 6, {2})), 11);
  const Packet c = parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, {3})), 12);
  const std::vector<Packet> packets{a, b, c};
  const auto flows = assemble_flows(packets);
  ASSERT_EQ(flows.size(), 2u);
  EXPECT_EQ(flows[0].packets.size(), 2u);
  EXPECT_EQ(flows[1].packets.size(), 1u);
  EXPECT_EQ(flows[0].five_tuple, a.five_tuple);
}

TEST(Flows, EqualTimestampsKeepCaptureOrder) {
  std::vector<Packet> packets;
  for (std::uint8_t i = 0; i < 5; ++i) {
    packets.push_back(parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, {i})), i == 0 ? 50 : 7));
  }
  const auto flows = assemble_flows(packets);
  ASSERT_EQ(flows.size(), 1u);
  std::vector<std::uint8_t> order;
  for (const auto& p : flows[0].packets) order.push_back(p.payload_bytes()[0]);
  EXPECT_EQ(order, (std::vector<std::uint8_t>{1, 2, 3, 4, 0}));
}

TEST(Flows, EmptyInput) { EXPECT_TRUE(assemble_flows(std::vector<Packet>{}).empty()); }

TEST(Flows, MatchesBruteForceGrouping) {
  Rng rng(5);
  std::vector<Packet> packets;
  for (int i = 0; i < 1000; ++i) packets.push_back(random_packet(rng, static_cast<std::int64_t>(rng.uniform_index(50))));
  const auto flows = assemble_flows(packets);

  // Oracle: quadratic scan, groups keyed by input index.
  std::vector<std::vector<std::size_t>> groups;
  std::vector<bool> taken(packets.size(), false);
  for (std::size_t i = 0; i < packets.size(); ++i) {
    if (taken[i]) continue;
    std::vector<std::size_t> g;
    for (std::size_t j = i; j < packets.size(); ++j) {
      if (!taken[j] && packets[j].five_tuple == packets[i].five_tuple) {
        g.push_back(j);
        taken[j] = true;
      }
    }
    std::stable_sort(g.begin(), g.end(),
                     [&](std::size_t x, std::size_t y) { return packets[x].timestamp() < packets[y].timestamp(); });
    groups.push_back(g);
  }
  ASSERT_EQ(flows.size(), groups.size());
  for (std::size_t f = 0; f < flows.size(); ++f) {
    ASSERT_EQ(flows[f].packets.size(), groups[f].size());
    for (std::size_t k = 0; k < groups[f].size(); ++k) {
      EXPECT_EQ(flows[f].packets[k].raw, packets[groups[f][k]].raw);
      EXPECT_EQ(flows[f].packets[k].five_tuple, flows[f].five_tuple);
    }
  }
}

TEST(TruncateHeavy, Policy) {
  const Vocabulary vocab;
  Flow two;
  for (std::uint8_t i = 0; i < 2; ++i) two.packets.push_back(parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, Bytes(10, i))), i));
  two.five_tuple = two.packets[0].five_tuple;
  const std::size_t len = flow_sequence_length(vocab, two);
  EXPECT_EQ(len, 1u + 2u * (38u + 1u));

  const Flow under = truncate_heavy(two, 512, vocab);
  EXPECT_FALSE(under.truncated);
  EXPECT_EQ(under.packets.size(), 2u);

  const Flow over2 = truncate_heavy(two, len - 1, vocab);
  EXPECT_TRUE(over2.truncated);
  EXPECT_EQ(over2.packets.size(), 2u);

  Flow ten = two;
  while (ten.packets.size() < 10) ten.packets.push_back(two.packets[0]);
  const Flow over10 = truncate_heavy(ten, 100, vocab);
  EXPECT_TRUE(over10.truncated);
  ASSERT_EQ(over10.packets.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(over10.packets[k].raw, ten.packets[k].raw);

  // Idempotent.
  const Flow again = truncate_heavy(over10, 100, vocab);
  EXPECT_EQ(again.packets.size(), over10.packets.size());
  EXPECT_TRUE(again.truncated);
  EXPECT_THROW(truncate_heavy(two, 0, vocab), Error);
}

namespace {

std::vector<ManifestItem> numbered_items(std::size_t n) {
  std::vector<ManifestItem> items;
  for (std::size_t i = 0; i < n; ++i) items.push_back({"item-" + std::to_string(i), ItemKind::kPacket, "x", {"f", {i}, {0}}});
  return items;
}

}  // namespace

TEST(Split, DeterministicGivenSeed) {
  const auto a = split_dataset(numbered_items(100), 7, 10, 10);
  const auto b = split_dataset(numbered_items(100), 7, 10, 10);
  EXPECT_EQ(a.to_json(), b.to_json());
  const auto c = split_dataset(numbered_items(100), 8, 10, 10);
  EXPECT_NE(a.split, c.split);
}

TEST(Split, InsufficientItems) {
  try {
    split_dataset(numbered_items(15), 7, 10, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientItems);
    EXPECT_NE(std::string(e.what()).find("15"), std::string::npos);
  }
}

TEST(Split, PartitionAndDuplicates) {
  const auto m = split_dataset(numbered_items(100), 3, 10, 20);
  std::map<Split, int> counts;
  for (const auto& item : m.items) counts[m.split.at(item.id)]++;
  EXPECT_EQ(m.split.size(), 100u);
  EXPECT_EQ(counts[Split::kValidation], 10);
  EXPECT_EQ(counts[Split::kTest], 20);
  EXPECT_EQ(counts[Split::kTrain], 70);
  EXPECT_EQ(m.items_in({Split::kTrain, Split::kValidation, Split::kTest}).size(), 100u);
  auto dup = numbered_items(5);
  dup[3].id = dup[1].id;
  EXPECT_THROW(split_dataset(dup, 1, 1, 1), Error);
}

TEST(Manifest, JsonRoundTrip) {
  auto m = split_dataset(numbered_items(12), 4, 2, 2, Split::kPretrain, "demo");
  m.items[0].label.reset();
  m.metadata["note"] = "x";
  const auto back = DatasetManifest::from_json(m.to_json());
  EXPECT_EQ(back.items, m.items);
  EXPECT_EQ(back.split, m.split);
  EXPECT_EQ(back.name, "demo");
  EXPECT_EQ(back.metadata, m.metadata);
  EXPECT_THROW(DatasetManifest::from_json(nlohmann::json{{"name", "x"}}), Error);
}

TEST(Synthetic, BalancedAndDeterministic) {
  SyntheticSpec spec;
  spec.flows_per_class = 50;
  const auto a = generate_synthetic_corpus(spec, 1);
  const auto b = generate_synthetic_corpus(spec, 1);
  ASSERT_EQ(a.flows.size(), 100u);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), "c0"), 50);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), "c1"), 50);
  EXPECT_EQ(encode_capture(a.link_type, a.raw_packets()), encode_capture(b.link_type, b.raw_packets()));
  EXPECT_EQ(a.manifest.to_json(), b.manifest.to_json());
  const auto c = generate_synthetic_corpus(spec, 2);
  EXPECT_NE(encode_capture(a.link_type, a.raw_packets()), encode_capture(c.link_type, c.raw_packets()));
}

TEST(Synthetic, OneByteRuleSeparatesClasses) {
  SyntheticSpec spec;
  spec.flows_per_class = 50;
  spec.payload_signatures = {{0xaa, 0xaa}, {0xbb, 0xbb}};
  const auto corpus = generate_synthetic_corpus(spec, 3);
  std::size_t correct = 0, total = 0;
  for (std::size_t f = 0; f < corpus.flows.size(); ++f) {
    for (const auto& p : corpus.flows[f].packets) {
      const std::string rule = p.payload_bytes()[0] == 0xaa ? "c0" : "c1";
      correct += rule == corpus.labels[f];
      ++total;
    }
  }
  EXPECT_EQ(correct, total);
}

TEST(Synthetic, FlowsHaveDistinctTuplesAndValidHeaders) {
  SyntheticSpec spec;
  spec.transport = kIpProtoTcp;
  const auto corpus = generate_synthetic_corpus(spec, 9);
  std::set<FiveTuple> tuples;
  for (const auto& f : corpus.flows) {
    EXPECT_TRUE(tuples.insert(f.five_tuple).second);
    for (const auto& p : f.packets) {
      EXPECT_EQ(p.five_tuple, f.five_tuple);
      EXPECT_EQ(detail::ipv4_checksum(p.ip_header_bytes()), 0);  // checksum verifies
      const auto total = static_cast<std::uint16_t>((p.ip_header_bytes()[2] << 8) | p.ip_header_bytes()[3]);
      EXPECT_NE(std::find(spec.pools.lengths.begin(), spec.pools.lengths.end(), total), spec.pools.lengths.end());
    }
    EXPECT_GE(f.packets.size(), spec.min_packets_per_flow);
    EXPECT_LE(f.packets.size(), spec.max_packets_per_flow);
  }
}

TEST(Synthetic, SpecValidation) {
  SyntheticSpec spec;
  spec.class_count = 1;
  EXPECT_THROW(spec.validate(), Error);
  spec = SyntheticSpec{};
  spec.payload_signatures = {{1}, {1}};
  EXPECT_THROW(spec.validate(), Error);
  spec = SyntheticSpec{};
  spec.pools.lengths = {20};
  EXPECT_THROW(spec.validate(), Error);
  spec = SyntheticSpec{};
  spec.flows_per_class = 10000;
  EXPECT_THROW(spec.validate(), Error);
}

TEST(Synthetic, ManifestRecordsPointAtCaptureRecords) {
  SyntheticSpec spec;
  spec.flows_per_class = 10;
  spec.validation_count = 2;
  spec.test_count = 4;
  const auto corpus = generate_synthetic_corpus(spec, 12);
  TempDir dir;
  write_capture((dir.path / spec.capture_file).string(), corpus.link_type, corpus.raw_packets());
  corpus.manifest.save((dir.path / "manifest.json").string());

  const Capture capture = read_capture((dir.path / spec.capture_file).string());
  for (std::size_t f = 0; f < corpus.flows.size(); ++f) {
    const auto& src = corpus.manifest.items[f].source;
    ASSERT_EQ(src.records.size(), corpus.flows[f].packets.size());
    for (std::size_t k = 0; k < src.records.size(); ++k) {
      EXPECT_EQ(capture.records[src.records[k]].file_offset, src.offsets[k]);
      EXPECT_EQ(capture.records[src.records[k]].packet, corpus.flows[f].packets[k].raw);
    }
  }

  const auto manifest = DatasetManifest::load((dir.path / "manifest.json").string());
  const auto test = load_examples(manifest, dir.path, {Split::kTest});
  ASSERT_EQ(test.size(), 4u);
  for (const auto& ex : test) {
    const auto idx = std::stoul(ex.id.substr(5));
    EXPECT_EQ(ex.label, corpus.labels[idx]);
    const auto& flow = std::get<Flow>(ex.traffic);
    ASSERT_EQ(flow.packets.size(), corpus.flows[idx].packets.size());
    for (std::size_t k = 0; k < flow.packets.size(); ++k) EXPECT_EQ(flow.packets[k].raw, corpus.flows[idx].packets[k].raw);
  }
  EXPECT_EQ(load_examples(manifest, dir.path, {Split::kTrain, Split::kValidation}).size(), 16u);
}
