#include <gtest/gtest.h>
#include <iconv.h>

#include <cerrno>
#include <map>
#include <sstream>

#include "test_support.hpp"

using namespace netgpt;
using namespace netgpt::testing;

namespace {

// glibc's converter as an independent UTF-8 validity oracle.
bool iconv_accepts_utf8(const Bytes& bytes) {
  iconv_t cd = iconv_open("UTF-32LE", "UTF-8");
  if (cd == reinterpret_cast<iconv_t>(-1)) throw std::runtime_error("iconv_open failed");
  std::string in(bytes.begin(), bytes.end());
  std::string out(in.size() * 4 + 8, '\0');
  char* inp = in.data();
  char* outp = out.data();
  std::size_t inleft = in.size(), outleft = out.size();
  const std::size_t rc = iconv(cd, &inp, &inleft, &outp, &outleft);
  iconv_close(cd);
  return rc != static_cast<std::size_t>(-1) && inleft == 0;
}

TokenId byte_id(std::uint8_t b) { return b; }

// Straightforward re-implementation of the merge procedure over strings.
std::vector<std::string> brute_force_merges(const std::vector<std::string>& corpus, std::size_t target,
                                            std::size_t min_frequency) {
  std::vector<std::string> pieces = Vocabulary::base_pieces();
  std::map<std::string, std::size_t> id_of;
  for (std::size_t i = 0; i < pieces.size(); ++i) id_of[pieces[i]] = i;
  std::vector<std::vector<std::size_t>> words;
  for (const auto& hex : corpus) {
    std::vector<std::size_t> w;
    for (std::size_t i = 0; i < hex.size(); i += 2) w.push_back(id_of.at(hex.substr(i, 2)));
    words.push_back(w);
  }
  std::set<std::pair<std::size_t, std::size_t>> banned;
  while (pieces.size() < target) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.size(); ++i) counts[{w[i], w[i + 1]}]++;
    }
    std::optional<std::pair<std::size_t, std::size_t>> best;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count < min_frequency || banned.count(pair)) continue;
      const std::string merged = pieces[pair.first] + pieces[pair.second];
      const std::string best_merged = best ? pieces[best->first] + pieces[best->second] : "";
      if (!best || count > best_count || (count == best_count && merged < best_merged)) {
        best = pair;
        best_count = count;
      }
    }
    if (!best) break;
    const std::string merged = pieces[best->first] + pieces[best->second];
    bool is_marker = false;
    for (Marker m : kAllMarkers) is_marker = is_marker || merged == marker_hex(m);
    if (is_marker) {
      banned.insert(*best);
      continue;
    }
    std::size_t id;
    if (id_of.count(merged)) {
      id = id_of[merged];
    } else {
      id = pieces.size();
      pieces.push_back(merged);
      id_of[merged] = id;
    }
    for (auto& w : words) {
      std::vector<std::size_t> next;
      for (std::size_t i = 0; i < w.size();) {
        if (i + 1 < w.size() && w[i] == best->first && w[i + 1] == best->second) {
          next.push_back(id);
          i += 2;
        } else {
          next.push_back(w[i++]);
        }
      }
      w = next;
    }
  }
  return pieces;
}

Packet udp_packet(const Bytes& payload, std::uint16_t sport = 1000) {
  return parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(sport, 53, payload)));
}

}  // namespace

TEST(Hex, BytesToHex) {
  EXPECT_EQ(bytes_to_hex(Bytes{0x41}), "41");
  EXPECT_EQ(bytes_to_hex(Bytes{}), "");
  EXPECT_EQ(bytes_to_hex(Bytes{0x00, 0xff}), "00ff");
}

TEST(Hex, HexToText) {
  const auto hello = hex_to_text("48656c6c6f");
  EXPECT_EQ(hello.text, "Hello");
  EXPECT_FALSE(hello.replaced);
  for (int c = 0; c < 128; ++c) {
    const Bytes one{static_cast<std::uint8_t>(c)};
    const auto back = hex_to_text(bytes_to_hex(one));
    EXPECT_EQ(back.text, std::string(1, static_cast<char>(c)));
    EXPECT_FALSE(back.replaced);
  }
}

TEST(Hex, LoneFfIsReplacedAndFlagged) {
  EXPECT_FALSE(iconv_accepts_utf8({0xff}));
  const auto out = hex_to_text("ff");
  EXPECT_TRUE(out.replaced);
  EXPECT_EQ(out.text, std::string(kReplacementCharacter));
}

TEST(Hex, ReplacementFlagAgreesWithUtf8Oracle) {
  Rng rng(17);
  const std::vector<std::uint8_t> alphabet = {0x41, 0x7f, 0x80, 0xbf, 0xc2, 0xc0, 0xe0, 0xa0, 0xed,
                                              0x9f, 0xa5, 0xf0, 0x90, 0xf4, 0x8f, 0xf5, 0xff, 0x00};
  for (int i = 0; i < 5000; ++i) {
    Bytes b(1 + rng.uniform_index(6));
    for (auto& x : b) x = alphabet[rng.uniform_index(alphabet.size())];
    const auto decoded = bytes_to_text(b);
    const bool valid = iconv_accepts_utf8(b);
    ASSERT_EQ(decoded.replaced, !valid) << bytes_to_hex(b);
    if (valid) {
      EXPECT_EQ(decoded.text, std::string(b.begin(), b.end()));
    }
  }
}

TEST(Hex, ErrorsCarryOffsets) {
  try {
    hex_to_bytes("abc");
    FAIL();
  } catch (const EncodingError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEncoding);
  }
  try {
    hex_to_bytes("00zz");
    FAIL();
  } catch (const EncodingError& e) {
    EXPECT_EQ(e.offset(), 2u);
  }
  try {
    hex_to_bytes("000g");
    FAIL();
  } catch (const EncodingError& e) {
    EXPECT_EQ(e.offset(), 3u);
  }
}

TEST(Markers, HexRenderings) {
  EXPECT_EQ(marker_hex(Marker::kPck), "5b70636b5d");
  const Vocabulary v;
  EXPECT_EQ(v.size(), kMinVocabSize);
  EXPECT_EQ(v.marker_id(Marker::kCls), 256u);
  EXPECT_EQ(v.marker_id(Marker::kEos), 259u);
  EXPECT_TRUE(v.is_marker(257));
  EXPECT_FALSE(v.is_marker(0x5b));
}

TEST(BuildVocab, RepeatedPairMergesFirst) {
  const std::vector<std::string> corpus(10, "aabb");
  const Vocabulary v = build_vocab(corpus, 300);
  ASSERT_GT(v.size(), kMinVocabSize);
  EXPECT_EQ(v.piece(static_cast<TokenId>(kMinVocabSize)), "aabb");
  for (int b = 0; b < 256; ++b) EXPECT_EQ(v.piece(static_cast<TokenId>(b)), bytes_to_hex(Bytes{static_cast<std::uint8_t>(b)}));
  EXPECT_EQ(v.pieces(), brute_force_merges(corpus, 300, 2));
}

TEST(BuildVocab, MatchesBruteForceMerging) {
  Rng rng(23);
  for (int round = 0; round < 20; ++round) {
    std::vector<std::string> corpus;
    const std::size_t n = 1 + rng.uniform_index(12);
    for (std::size_t i = 0; i < n; ++i) {
      Bytes b(1 + rng.uniform_index(20));
      for (auto& x : b) x = static_cast<std::uint8_t>(0xa0 + rng.uniform_index(4));
      corpus.push_back(bytes_to_hex(b));
    }
    const std::size_t target = kMinVocabSize + rng.uniform_index(30);
    const std::size_t min_freq = 1 + rng.uniform_index(3);
    EXPECT_EQ(build_vocab(corpus, target, min_freq).pieces(), brute_force_merges(corpus, target, min_freq))
        << "round " << round;
  }
}

TEST(BuildVocab, MarkerRenderingIsNeverLearned) {
  const std::vector<std::string> corpus(20, marker_hex(Marker::kPck));
  const Vocabulary v = build_vocab(corpus, 400);
  int count = 0;
  for (const auto& p : v.pieces()) count += p == marker_hex(Marker::kPck);
  EXPECT_EQ(count, 1);
  EXPECT_EQ(v.pieces(), brute_force_merges(corpus, 400, 2));
}

TEST(BuildVocab, FloorDeterminismAndErrors) {
  const std::vector<std::string> corpus = {"0102030405", "0102030405", "0a0b"};
  EXPECT_EQ(build_vocab(corpus, kMinVocabSize).pieces(), Vocabulary::base_pieces());
  EXPECT_EQ(build_vocab(corpus, 600).pieces(), build_vocab(corpus, 600).pieces());
  EXPECT_THROW(build_vocab(corpus, kMinVocabSize - 1), Error);
  EXPECT_THROW(build_vocab(std::vector<std::string>{"abc"}, 300), EncodingError);
}

TEST(Tokenize, Examples) {
  const Vocabulary base;
  EXPECT_EQ(tokenize(base, "00ff"), (std::vector<TokenId>{byte_id(0x00), byte_id(0xff)}));

  auto pieces = Vocabulary::base_pieces();
  pieces.push_back("aabb");
  const Vocabulary v(pieces);
  EXPECT_EQ(tokenize(v, "aabbcc"), (std::vector<TokenId>{v.id("aabb"), byte_id(0xcc)}));
  EXPECT_EQ(detokenize(v, std::vector<TokenId>{byte_id(0xaa), byte_id(0xbb)}), "aabb");
}

TEST(Tokenize, MarkerTakesPriorityOverLongerDataPiece) {
  auto pieces = Vocabulary::base_pieces();
  pieces.push_back("5b70636b5d41");
  pieces.push_back("5b70");
  const Vocabulary v(pieces);
  const std::string hex = "5b70636b5d41";
  EXPECT_EQ(tokenize(v, hex), (std::vector<TokenId>{v.marker_id(Marker::kPck), byte_id(0x41)}));
  EXPECT_EQ(tokenize(v, hex, MarkerMatching::kDisabled), (std::vector<TokenId>{v.id("5b70636b5d41")}));
  EXPECT_EQ(detokenize(v, tokenize(v, hex)), hex);
}

TEST(Tokenize, UnknownIdIsAnError) {
  const Vocabulary v;
  try {
    detokenize(v, std::vector<TokenId>{999999});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownToken);
  }
}

TEST(Tokenize, RoundTripAndCompressionOnRandomStrings) {
  Rng rng(31);
  std::vector<std::string> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back(bytes_to_hex(random_packet(rng, i).network_bytes()));
  const Vocabulary learned = build_vocab(corpus, 700);
  const Vocabulary base;
  for (int i = 0; i < 1000; ++i) {
    Bytes b;
    if (i % 2) {
      b = random_bytes(rng, rng.uniform_index(300));
    } else {
      const Packet p = random_packet(rng, i);
      b.assign(p.network_bytes().begin(), p.network_bytes().end());
    }
    const std::string hex = bytes_to_hex(b);
    const auto ids = tokenize(learned, hex);
    ASSERT_EQ(detokenize(learned, ids), hex);
    const auto data_ids = tokenize(learned, hex, MarkerMatching::kDisabled);
    EXPECT_LE(data_ids.size(), tokenize(base, hex, MarkerMatching::kDisabled).size());
    for (TokenId id : data_ids) EXPECT_FALSE(learned.is_marker(id));
  }
}

TEST(VocabularyFile, SaveParseRoundTrip) {
  const std::vector<std::string> corpus(5, "deadbeefdeadbeef");
  const Vocabulary v = build_vocab(corpus, 300);
  const Vocabulary back = Vocabulary::parse(v.serialize());
  EXPECT_EQ(back.pieces(), v.pieces());
  EXPECT_EQ(back.hash(), v.hash());
  EXPECT_NE(v.hash(), Vocabulary().hash());
  // Apart from comment lines, line number is the id.
  std::istringstream lines(v.serialize());
  std::string line;
  std::vector<std::string> data_lines;
  while (std::getline(lines, line)) {
    if (!line.empty() && line[0] != '#') data_lines.push_back(line);
  }
  EXPECT_EQ(data_lines, v.pieces());
  auto pieces = Vocabulary::base_pieces();
  pieces.pop_back();
  EXPECT_THROW(Vocabulary{pieces}, Error);
}

TEST(Assembly, PacketSequence) {
  const Vocabulary v;
  const Packet p = parse_raw(ipv4_datagram(kIpProtoUdp, udp_segment(1, 2, {})));
  ASSERT_EQ(p.network_bytes().size(), 28u);
  const auto seq = assemble_packet_sequence(v, p, 512);
  ASSERT_EQ(seq.size(), 29u);
  EXPECT_EQ(seq.token_ids[0], v.marker_id(Marker::kCls));
  for (std::size_t k = 0; k < seq.size(); ++k) {
    EXPECT_EQ(seq.position_ids[k], k);
    EXPECT_EQ(seq.segment_ids[k], 0u);
    if (k > 0) {
      EXPECT_EQ(seq.token_ids[k], p.network_bytes()[k - 1]);
    }
  }
  EXPECT_EQ(assemble_packet_sequence(v, p, 10).size(), 10u);
  EXPECT_EQ(assemble_packet_sequence(v, p, 512), seq);
}

TEST(Assembly, FlowSequenceStructure) {
  const Vocabulary v;
  Flow flow;
  for (std::uint8_t i = 0; i < 3; ++i) flow.packets.push_back(udp_packet(Bytes(i + 1u, i)));
  const auto seq = assemble_flow_sequence(v, flow, 512);

  std::vector<TokenId> expected{v.marker_id(Marker::kCls)};
  std::vector<std::uint32_t> segments{0};
  for (std::size_t k = 0; k < 3; ++k) {
    const auto single = assemble_packet_sequence(v, flow.packets[k], 512);
    expected.insert(expected.end(), single.token_ids.begin() + 1, single.token_ids.end());
    expected.push_back(v.marker_id(Marker::kPck));
    segments.insert(segments.end(), single.size(), static_cast<std::uint32_t>(k));
  }
  EXPECT_EQ(seq.token_ids, expected);
  EXPECT_EQ(seq.segment_ids, segments);
  EXPECT_EQ(std::count(seq.token_ids.begin(), seq.token_ids.end(), v.marker_id(Marker::kPck)), 3);
  EXPECT_EQ(flow_sequence_length(v, flow), seq.size());

  Flow two{{}, {flow.packets[0], flow.packets[1]}, false};
  const auto s2 = assemble_flow_sequence(v, two, 512);
  EXPECT_EQ(std::count(s2.token_ids.begin(), s2.token_ids.end(), v.marker_id(Marker::kPck)), 2);
}

TEST(Assembly, FlowTruncationKeepsInvariants) {
  const Vocabulary v;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Flow flow;
    const std::size_t n = 1 + rng.uniform_index(5);
    for (std::size_t k = 0; k < n; ++k) flow.packets.push_back(random_packet(rng, static_cast<std::int64_t>(k)));
    const std::size_t max_len = 1 + rng.uniform_index(300);
    const auto seq = assemble_flow_sequence(v, flow, max_len);
    ASSERT_LE(seq.size(), max_len);
    EXPECT_TRUE(std::is_sorted(seq.segment_ids.begin(), seq.segment_ids.end()));
    // [pck] count equals the number of packets fully included.
    std::size_t full = 0, used = 1;
    for (const auto& p : flow.packets) {
      used += p.network_bytes().size() + 1;
      if (used <= max_len) ++full;
    }
    EXPECT_EQ(static_cast<std::size_t>(std::count(seq.token_ids.begin(), seq.token_ids.end(), v.marker_id(Marker::kPck))), full);
    EXPECT_LE(seq.segment_ids.back(), n - 1);
  }
}

TEST(Assembly, PromptedSequence) {
  const Vocabulary v;
  TokenSequence body;
  body.push(v.marker_id(Marker::kCls), 0);
  body.push(0x11, 1);
  body.push(0x22, 1);

  const auto ps = assemble_prompted_sequence(v, "vpn", body, std::string("1"), 64, 4);
  const std::vector<TokenId> expected = {0x76, 0x70, 0x6e, v.marker_id(Marker::kCls), 0x11, 0x22, 0x31,
                                         v.marker_id(Marker::kPad), v.marker_id(Marker::kPad),
                                         v.marker_id(Marker::kPad), v.marker_id(Marker::kEos)};
  EXPECT_EQ(ps.sequence.token_ids, expected);
  EXPECT_EQ(ps.prompt_length, 3u);
  EXPECT_EQ(ps.target_begin, 6u);
  EXPECT_EQ(ps.target_end, 11u);
  EXPECT_FALSE(ps.target_truncated);
  for (std::size_t k = 0; k < ps.sequence.size(); ++k) EXPECT_EQ(ps.sequence.position_ids[k], k);
  EXPECT_EQ(ps.sequence.segment_ids, (std::vector<std::uint32_t>{0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1}));

  const auto empty_prompt = assemble_prompted_sequence(v, "", body, std::string("1"), 64, 4);
  EXPECT_EQ(std::vector<TokenId>(empty_prompt.sequence.token_ids.begin(), empty_prompt.sequence.token_ids.end()),
            std::vector<TokenId>(expected.begin() + 3, expected.end()));

  const auto no_target = assemble_prompted_sequence(v, "vpn", body, std::nullopt, 64, 4);
  EXPECT_EQ(no_target.sequence.size(), 6u);

  EXPECT_TRUE(assemble_prompted_sequence(v, "x", body, std::string("123456"), 64, 4).target_truncated);
  try {
    assemble_prompted_sequence(v, "vpn", body, std::string("1"), 10, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBudget);
  }
  EXPECT_THROW(assemble_prompted_sequence(v, "vpn", body, std::string("1"), 64, 0), Error);
}

TEST(Assembly, PayloadThatSpellsAMarkerStaysData) {
  const Vocabulary v;
  const Bytes payload = hex_to_bytes(marker_hex(Marker::kPck));
  const Packet p = udp_packet(payload);
  const auto seq = assemble_packet_sequence(v, p, 512);
  for (std::size_t k = 1; k < seq.size(); ++k) EXPECT_FALSE(v.is_marker(seq.token_ids[k]));
}
