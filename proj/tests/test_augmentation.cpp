#include <gtest/gtest.h>

#include <map>

#include "test_support.hpp"

using namespace netgpt;
using namespace netgpt::testing;

namespace {

std::size_t unit_index(const Packet& p, std::string_view name) {
  for (std::size_t i = 0; i < p.shuffle_units.size(); ++i) {
    if (p.shuffle_units[i].name == name) return i;
  }
  throw std::runtime_error("no unit " + std::string(name));
}

std::multiset<std::pair<std::string, Bytes>> unit_contents(const Packet& p) {
  std::multiset<std::pair<std::string, Bytes>> out;
  for (const auto& u : p.shuffle_units) {
    const auto b = p.bytes(u.range);
    out.insert({u.name, Bytes(b.begin(), b.end())});
  }
  return out;
}

Packet sample_udp() {
  Bytes d = ipv4_datagram(kIpProtoUdp, udp_segment(5000, 53, {1, 2, 3}));
  d[8] = 0x40;  // ttl
  return parse_raw(d);
}

}  // namespace

TEST(Swap, TtlAndProtoExchangeOffsetsEightAndNine) {
  const Packet p = sample_udp();
  const auto s = swap_units(p, unit_index(p, "ip.ttl"), unit_index(p, "ip.proto"));
  const auto before = p.network_bytes();
  const auto after = s.packet.network_bytes();
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (i == 8) {
      EXPECT_EQ(after[i], before[9]);
    } else if (i == 9) {
      EXPECT_EQ(after[i], before[8]);
    } else {
      EXPECT_EQ(after[i], before[i]) << i;
    }
  }
  EXPECT_FALSE(s.degenerate);
}

TEST(Swap, LengthWithSourceKeepsHeaderLengthAndUnitMultiset) {
  const Packet p = sample_udp();
  const auto s = swap_units(p, unit_index(p, "ip.len"), unit_index(p, "ip.src"));
  EXPECT_EQ(s.packet.ip_header.length, 20u);
  EXPECT_EQ(unit_contents(s.packet), unit_contents(p));
  // src now sits where len was.
  EXPECT_EQ(s.packet.network_bytes()[2], 10);
  EXPECT_EQ(restore_original(s.packet, s.permutation), Bytes(p.network_bytes().begin(), p.network_bytes().end()));
  // Semantic values are untouched.
  EXPECT_EQ(s.packet.five_tuple, p.five_tuple);
}

TEST(Swap, AcrossHeadersOrSelfIsRejected) {
  const Packet p = sample_udp();
  EXPECT_THROW(swap_units(p, unit_index(p, "ip.ttl"), unit_index(p, "udp.sport")), Error);
  EXPECT_THROW(swap_units(p, 3, 3), Error);
}

TEST(Swap, OutputDiffersWheneverTwoUnitsDiffer) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const Packet p = random_packet(rng, i);
    Rng r(static_cast<std::uint64_t>(i));
    const auto s = swap_two_fields(p, r);
    ASSERT_FALSE(s.degenerate);
    EXPECT_NE(Bytes(s.packet.network_bytes().begin(), s.packet.network_bytes().end()),
              Bytes(p.network_bytes().begin(), p.network_bytes().end()));
  }
}

TEST(Swap, DegenerateWhenNoSwapChangesBytes) {
  // A real IPv4 header always has some swap that changes bytes, so strip the
  // unit list down to one.
  Packet p = sample_udp();
  p.shuffle_units.resize(1);
  Rng rng(3);
  const auto s = swap_two_fields(p, rng);
  EXPECT_TRUE(s.degenerate);
  EXPECT_EQ(s.packet.raw, p.raw);
}

TEST(Swap, EqualContentPairsAreNotCandidates) {
  // UDP with sport == dport and len == cksum: the only transport swaps that
  // change bytes mix the two groups.
  Bytes seg = udp_segment(0x0808, 0x0808, {});
  seg[6] = 0x00;
  seg[7] = 0x08;  // cksum == len == 8
  const Packet p = parse_raw(ipv4_datagram(kIpProtoUdp, seg));
  for (const auto& [i, j] : swappable_pairs(p)) {
    const auto a = p.bytes(p.shuffle_units[i].range);
    const auto b = p.bytes(p.shuffle_units[j].range);
    const bool equal_len = a.size() == b.size();
    if (equal_len) EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
  }
  const auto sport = unit_index(p, "udp.sport");
  const auto dport = unit_index(p, "udp.dport");
  for (const auto& pr : swappable_pairs(p)) EXPECT_NE(pr, std::make_pair(sport, dport));
}

TEST(Swap, DeterministicGivenRngState) {
  Rng rng(8);
  const Packet p = random_packet(rng, 0);
  Rng a(42), b(42);
  EXPECT_EQ(swap_two_fields(p, a).packet.raw, swap_two_fields(p, b).packet.raw);
}

TEST(Swap, InvariantsOnRandomPackets) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Packet p = random_packet(rng, i);
    const auto s = swap_two_fields(p, rng);
    EXPECT_EQ(s.packet.ip_header, p.ip_header);
    EXPECT_EQ(s.packet.transport_header, p.transport_header);
    EXPECT_EQ(unit_contents(s.packet), unit_contents(p));
    const auto pa = p.payload_bytes();
    const auto sa = s.packet.payload_bytes();
    EXPECT_TRUE(std::equal(pa.begin(), pa.end(), sa.begin(), sa.end()));
    EXPECT_EQ(restore_original(s.packet, s.permutation), Bytes(p.network_bytes().begin(), p.network_bytes().end()));
    // Unit ranges still tile each header in order.
    std::size_t cursor = p.ip_header.offset;
    for (const auto& u : s.packet.shuffle_units) {
      if (u.range.offset == p.transport_header.offset) cursor = p.transport_header.offset;
      EXPECT_EQ(u.range.offset, cursor);
      cursor = u.range.end();
    }
    // The semantic source port can be read back through the permutation.
    if (p.transport) {
      const auto& unit = field_unit(s.packet, HeaderField::kSrcPort);
      const auto b = s.packet.bytes(unit.range);
      EXPECT_EQ((b[0] << 8) | b[1], p.five_tuple.src_port);
    }
  }
}

TEST(Shuffle, FullPermutationKeepsInvariants) {
  Rng rng(4);
  for (int i = 0; i < 300; ++i) {
    const Packet p = random_packet(rng, i);
    const auto s = shuffle_all_fields(p, rng);
    EXPECT_EQ(unit_contents(s.packet), unit_contents(p));
    EXPECT_EQ(restore_original(s.packet, s.permutation), Bytes(p.network_bytes().begin(), p.network_bytes().end()));
  }
}

TEST(Expand, CountsAndIdentity) {
  Rng rng(5);
  std::vector<Example> data;
  for (int i = 0; i < 10; ++i) data.push_back({"p" + std::to_string(i), random_packet(rng, i), "x"});
  const auto one = expand_with_shuffles(data, 1, 9);
  EXPECT_EQ(one.size(), 20u);
  const auto zero = expand_with_shuffles(data, 0, 9);
  ASSERT_EQ(zero.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_TRUE(zero[i].original);
    EXPECT_EQ(std::get<Packet>(zero[i].example.traffic).raw, std::get<Packet>(data[i].traffic).raw);
  }
  const auto again = expand_with_shuffles(data, 1, 9);
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(std::get<Packet>(one[i].example.traffic).raw, std::get<Packet>(again[i].example.traffic).raw);
    EXPECT_EQ(one[i].example.label, "x");
  }
}

TEST(Expand, VariantsInvertToTheirSources) {
  SyntheticSpec spec;
  spec.flows_per_class = 20;
  spec.transport = kIpProtoTcp;
  const auto corpus = generate_synthetic_corpus(spec, 6);
  const auto data = corpus.examples();
  const auto expanded = expand_with_shuffles(data, 3, 11);
  ASSERT_EQ(expanded.size(), data.size() * 4);
  for (const auto& item : expanded) {
    const auto& src = std::get<Flow>(data[item.source_index].traffic);
    const auto& flow = std::get<Flow>(item.example.traffic);
    EXPECT_EQ(item.example.label, data[item.source_index].label);
    if (item.original) continue;
    ASSERT_EQ(item.permutations.size(), flow.packets.size());
    for (std::size_t k = 0; k < flow.packets.size(); ++k) {
      EXPECT_EQ(restore_original(flow.packets[k], item.permutations[k]),
                Bytes(src.packets[k].network_bytes().begin(), src.packets[k].network_bytes().end()));
    }
  }
}
