#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "netgpt/error.hpp"
#include "netgpt/hash.hpp"
#include "netgpt/traffic_model.hpp"

namespace netgpt {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Hex <-> bytes <-> text

inline std::string bytes_to_hex(ByteView data) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(data.size() * 2, '\0');
  for (std::size_t i = 0; i < data.size(); ++i) {
    out[2 * i] = kDigits[data[i] >> 4];
    out[2 * i + 1] = kDigits[data[i] & 0x0f];
  }
  return out;
}

inline std::string text_to_hex(std::string_view text) {
  return bytes_to_hex(
      ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace detail {

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace detail

inline Bytes hex_to_bytes(std::string_view hex) {
  if (hex.size() % 2 != 0) {
    throw EncodingError(hex.size(), "odd-length hex string");
  }
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int hi = detail::hex_digit(hex[2 * i]);
    const int lo = detail::hex_digit(hex[2 * i + 1]);
    if (hi < 0) throw EncodingError(2 * i, "invalid hex digit");
    if (lo < 0) throw EncodingError(2 * i + 1, "invalid hex digit");
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

struct DecodedText {
  std::string text;
  bool replaced = false;  // some bytes were not valid UTF-8
};

inline constexpr std::string_view kReplacementCharacter = "\xEF\xBF\xBD";

namespace detail {

// Length of the valid UTF-8 sequence starting at `at`, or 0 if invalid.
inline std::size_t utf8_sequence_length(ByteView b, std::size_t at) {
  const std::uint8_t lead = b[at];
  if (lead < 0x80) return 1;
  std::size_t need;
  std::uint8_t lo = 0x80, hi = 0xbf;
  if (lead >= 0xc2 && lead <= 0xdf) {
    need = 1;
  } else if (lead >= 0xe0 && lead <= 0xef) {
    need = 2;
    if (lead == 0xe0) lo = 0xa0;
    if (lead == 0xed) hi = 0x9f;
  } else if (lead >= 0xf0 && lead <= 0xf4) {
    need = 3;
    if (lead == 0xf0) lo = 0x90;
    if (lead == 0xf4) hi = 0x8f;
  } else {
    return 0;
  }
  if (at + need >= b.size()) return 0;
  for (std::size_t k = 1; k <= need; ++k) {
    const std::uint8_t c = b[at + k];
    const std::uint8_t min = k == 1 ? lo : 0x80;
    const std::uint8_t max = k == 1 ? hi : 0xbf;
    if (c < min || c > max) return 0;
  }
  return need + 1;
}

}  // namespace detail

// Invalid bytes each become U+FFFD and set `replaced`.
inline DecodedText bytes_to_text(ByteView bytes) {
  DecodedText out;
  std::size_t i = 0;
  while (i < bytes.size()) {
    const std::size_t n = detail::utf8_sequence_length(bytes, i);
    if (n == 0) {
      out.text += kReplacementCharacter;
      out.replaced = true;
      ++i;
    } else {
      out.text.append(reinterpret_cast<const char*>(bytes.data() + i), n);
      i += n;
    }
  }
  return out;
}

inline DecodedText hex_to_text(std::string_view hex) {
  const Bytes bytes = hex_to_bytes(hex);
  return bytes_to_text(bytes);
}

// ---------------------------------------------------------------------------
// Markers

enum class Marker : std::uint8_t { kCls, kPck, kPad, kEos };

inline constexpr std::array<Marker, 4> kAllMarkers = {
    Marker::kCls, Marker::kPck, Marker::kPad, Marker::kEos};

inline constexpr std::string_view marker_literal(Marker m) {
  switch (m) {
    case Marker::kCls: return "[cls]";
    case Marker::kPck: return "[pck]";
    case Marker::kPad: return "[pad]";
    case Marker::kEos: return "[eos]";
  }
  return "";
}

inline std::string marker_hex(Marker m) { return text_to_hex(marker_literal(m)); }

inline constexpr std::size_t kBasePieceCount = 256;
inline constexpr std::size_t kMarkerCount = kAllMarkers.size();
inline constexpr std::size_t kMinVocabSize = kBasePieceCount + kMarkerCount;

// ---------------------------------------------------------------------------
// Vocabulary

// Hex pieces with dense ids: the 256 byte pieces first, then the four markers,
// then learned merges. Data pieces are matched through a byte trie.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(base_pieces()) {}

  explicit Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    index();
  }

  std::size_t size() const { return pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  const std::string& piece(TokenId id) const {
    if (id >= pieces_.size()) {
      throw Error(ErrorCode::kUnknownToken, "unknown token id " + std::to_string(id));
    }
    return pieces_[id];
  }

  std::optional<TokenId> find(std::string_view piece) const {
    auto it = ids_.find(std::string(piece));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view piece) const {
    auto found = find(piece);
    if (!found) {
      throw Error(ErrorCode::kUnknownToken, "piece not in vocabulary: " + std::string(piece));
    }
    return *found;
  }

  TokenId marker_id(Marker m) const { return marker_ids_[static_cast<std::size_t>(m)]; }

  bool is_marker(TokenId id) const {
    return std::find(marker_ids_.begin(), marker_ids_.end(), id) != marker_ids_.end();
  }

  std::optional<Marker> marker_of(TokenId id) const {
    for (Marker m : kAllMarkers) {
      if (marker_id(m) == id) return m;
    }
    return std::nullopt;
  }

  // Fingerprint over the piece list (not the file's comment lines).
  std::string hash() const {
    Fnv1a h;
    for (const auto& p : pieces_) {
      h.update(p);
      h.update("\n");
    }
    return h.hex();
  }

  std::string serialize() const {
    std::ostringstream out;
    out << "# netgpt vocabulary v1\n";
    out << "# size " << pieces_.size() << " hash " << hash() << "\n";
    out << "# markers";
    for (Marker m : kAllMarkers) out << ' ' << marker_literal(m) << '=' << marker_id(m);
    out << "\n";
    for (const auto& p : pieces_) out << p << '\n';
    return out.str();
  }

  static Vocabulary parse(std::string_view text) {
    std::vector<std::string> pieces;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(pos, end - pos);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty() && line.front() != '#') pieces.emplace_back(line);
      pos = end + 1;
    }
    return Vocabulary(std::move(pieces));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
    out << serialize();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
  }

  static std::vector<std::string> base_pieces() {
    std::vector<std::string> pieces;
    pieces.reserve(kMinVocabSize);
    for (int b = 0; b < 256; ++b) {
      const std::uint8_t byte = static_cast<std::uint8_t>(b);
      pieces.push_back(bytes_to_hex(ByteView(&byte, 1)));
    }
    for (Marker m : kAllMarkers) pieces.push_back(marker_hex(m));
    return pieces;
  }

  // Longest data piece matching at the front of `bytes`: (id, byte length).
  std::pair<TokenId, std::size_t> longest_match(ByteView bytes) const {
    std::int32_t node = 0;
    TokenId best_id = 0;
    std::size_t best_len = 0;
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      node = trie_[static_cast<std::size_t>(node)].children[bytes[i]];
      if (node < 0) break;
      const auto terminal = trie_[static_cast<std::size_t>(node)].terminal;
      if (terminal >= 0) {
        best_id = static_cast<TokenId>(terminal);
        best_len = i + 1;
      }
    }
    return {best_id, best_len};
  }

  // Marker whose rendering starts `bytes`, if any.
  std::optional<Marker> marker_at(ByteView bytes) const {
    for (Marker m : kAllMarkers) {
      const auto literal = marker_literal(m);
      if (bytes.size() >= literal.size() &&
          std::equal(literal.begin(), literal.end(), bytes.begin(),
                     [](char c, std::uint8_t b) { return static_cast<std::uint8_t>(c) == b; })) {
        return m;
      }
    }
    return std::nullopt;
  }

 private:
  struct TrieNode {
    std::array<std::int32_t, 256> children;
    std::int32_t terminal = -1;
    TrieNode() { children.fill(-1); }
  };

  void index() {
    ids_.clear();
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      const auto& p = pieces_[i];
      if (p.empty() || p.size() % 2 != 0) {
        throw Error(ErrorCode::kEncoding, "piece " + std::to_string(i) + " is not even-length hex");
      }
      for (std::size_t k = 0; k < p.size(); ++k) {
        const char c = p[k];
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) {
          throw Error(ErrorCode::kEncoding, "piece " + std::to_string(i) + " is not lowercase hex");
        }
      }
      if (!ids_.emplace(p, static_cast<TokenId>(i)).second) {
        throw Error(ErrorCode::kEncoding, "duplicate piece " + p);
      }
    }
    for (Marker m : kAllMarkers) {
      auto it = ids_.find(marker_hex(m));
      if (it == ids_.end()) {
        throw Error(ErrorCode::kEncoding,
                    "vocabulary lacks marker " + std::string(marker_literal(m)));
      }
      marker_ids_[static_cast<std::size_t>(m)] = it->second;
    }
    trie_.assign(1, TrieNode{});
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (is_marker(static_cast<TokenId>(i))) continue;
      const Bytes bytes = hex_to_bytes(pieces_[i]);
      std::size_t node = 0;
      for (std::uint8_t b : bytes) {
        auto child = trie_[node].children[b];
        if (child < 0) {
          child = static_cast<std::int32_t>(trie_.size());
          trie_[node].children[b] = child;
          trie_.emplace_back();
        }
        node = static_cast<std::size_t>(child);
      }
      trie_[node].terminal = static_cast<std::int32_t>(i);
    }
    for (int b = 0; b < 256; ++b) {
      const auto child = trie_[0].children[static_cast<std::size_t>(b)];
      if (child < 0 || trie_[static_cast<std::size_t>(child)].terminal < 0) {
        throw Error(ErrorCode::kEncoding, "vocabulary lacks byte piece " + std::to_string(b));
      }
    }
  }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> ids_;
  std::array<TokenId, kMarkerCount> marker_ids_{};
  std::vector<TrieNode> trie_;
};

// Frequency-greedy pair merging over hex pieces. Each round merges the most
// frequent adjacent pair (ties: lexicographically smallest merged string, then
// the lower piece ids).
// Stops at target_size pieces or when no pair reaches min_frequency.
inline Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size,
                              std::size_t min_frequency = 2) {
  if (target_size < kMinVocabSize) {
    throw Error(ErrorCode::kConfig, "target vocabulary size " + std::to_string(target_size) +
                                        " below floor " + std::to_string(kMinVocabSize));
  }
  min_frequency = std::max<std::size_t>(min_frequency, 1);

  std::vector<std::string> pieces = Vocabulary::base_pieces();
  std::unordered_map<std::string, std::uint32_t> ids;
  for (std::size_t i = 0; i < pieces.size(); ++i) ids.emplace(pieces[i], static_cast<std::uint32_t>(i));
  std::unordered_set<std::string> marker_renderings;
  for (Marker m : kAllMarkers) marker_renderings.insert(marker_hex(m));

  // Identical corpus strings are merged with a weight.
  std::map<std::string, std::size_t> weights;
  for (const auto& hex : corpus) {
    hex_to_bytes(hex);  // validates
    if (!hex.empty()) ++weights[hex];
  }
  struct Word {
    std::vector<std::uint32_t> symbols;
    std::size_t weight;
  };
  std::vector<Word> words;
  words.reserve(weights.size());
  for (const auto& [hex, weight] : weights) {
    Word w{{}, weight};
    const Bytes bytes = hex_to_bytes(hex);
    w.symbols.assign(bytes.begin(), bytes.end());
    words.push_back(std::move(w));
  }

  auto pair_key = [](std::uint32_t a, std::uint32_t b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
  };
  std::unordered_set<std::uint64_t> banned;

  while (pieces.size() < target_size) {
    std::unordered_map<std::uint64_t, std::size_t> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        counts[pair_key(w.symbols[i], w.symbols[i + 1])] += w.weight;
      }
    }
    std::optional<std::uint64_t> best;
    std::size_t best_count = 0;
    std::string best_piece;
    for (const auto& [key, count] : counts) {
      if (count < min_frequency || banned.contains(key)) continue;
      if (best && count < best_count) continue;
      std::string merged = pieces[key >> 32] + pieces[key & 0xffffffffu];
      if (!best || count > best_count || merged < best_piece || (merged == best_piece && key < *best)) {
        best = key;
        best_count = count;
        best_piece = std::move(merged);
      }
    }
    if (!best) break;
    if (marker_renderings.contains(best_piece)) {
      banned.insert(*best);
      continue;
    }
    const auto a = static_cast<std::uint32_t>(*best >> 32);
    const auto b = static_cast<std::uint32_t>(*best & 0xffffffffu);
    std::uint32_t merged_id;
    if (auto it = ids.find(best_piece); it != ids.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<std::uint32_t>(pieces.size());
      pieces.push_back(best_piece);
      ids.emplace(best_piece, merged_id);
    }
    for (auto& w : words) {
      auto& s = w.symbols;
      std::size_t out = 0;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == a && s[i + 1] == b) {
          s[out++] = merged_id;
          i += 2;
        } else {
          s[out++] = s[i++];
        }
      }
      s.resize(out);
    }
  }
  return Vocabulary(std::move(pieces));
}

// ---------------------------------------------------------------------------
// Tokenization

enum class MarkerMatching { kEnabled, kDisabled };

namespace detail {

inline void tokenize_bytes(const Vocabulary& vocab, ByteView bytes, MarkerMatching markers,
                           std::vector<TokenId>& out) {
  std::size_t i = 0;
  while (i < bytes.size()) {
    const ByteView rest = bytes.subspan(i);
    if (markers == MarkerMatching::kEnabled) {
      if (auto m = vocab.marker_at(rest)) {
        out.push_back(vocab.marker_id(*m));
        i += marker_literal(*m).size();
        continue;
      }
    }
    const auto [id, len] = vocab.longest_match(rest);
    out.push_back(id);
    i += len;
  }
}

}  // namespace detail

// Greedy longest-prefix match. With marker matching enabled, a marker
// rendering is taken as one marker token ahead of any overlapping data piece;
// assembly uses kDisabled so that payload bytes never become markers.
inline std::vector<TokenId> tokenize(const Vocabulary& vocab, std::string_view hex,
                                     MarkerMatching markers = MarkerMatching::kEnabled) {
  const Bytes bytes = hex_to_bytes(hex);
  std::vector<TokenId> out;
  out.reserve(bytes.size());
  detail::tokenize_bytes(vocab, bytes, markers, out);
  return out;
}

inline std::vector<TokenId> tokenize_bytes(const Vocabulary& vocab, ByteView bytes,
                                           MarkerMatching markers = MarkerMatching::kDisabled) {
  std::vector<TokenId> out;
  out.reserve(bytes.size());
  detail::tokenize_bytes(vocab, bytes, markers, out);
  return out;
}

inline std::string detokenize(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) out += vocab.piece(id);
  return out;
}

// ---------------------------------------------------------------------------
// Sequence assembly

struct TokenSequence {
  std::vector<TokenId> token_ids;
  std::vector<std::uint32_t> position_ids;
  std::vector<std::uint32_t> segment_ids;

  std::size_t size() const { return token_ids.size(); }
  bool empty() const { return token_ids.empty(); }

  void push(TokenId token, std::uint32_t segment) {
    position_ids.push_back(static_cast<std::uint32_t>(token_ids.size()));
    token_ids.push_back(token);
    segment_ids.push_back(segment);
  }

  void truncate(std::size_t max_len) {
    if (token_ids.size() <= max_len) return;
    token_ids.resize(max_len);
    position_ids.resize(max_len);
    segment_ids.resize(max_len);
  }

  bool operator==(const TokenSequence&) const = default;
};

// Tokens for one packet's network-layer bytes (no markers).
inline std::vector<TokenId> packet_tokens(const Vocabulary& vocab, const Packet& packet) {
  return tokenize_bytes(vocab, packet.network_bytes(), MarkerMatching::kDisabled);
}

// [cls] ++ tokens(packet), segment 0, truncated to max_len.
inline TokenSequence assemble_packet_sequence(const Vocabulary& vocab, const Packet& packet,
                                              std::size_t max_len) {
  TokenSequence seq;
  seq.push(vocab.marker_id(Marker::kCls), 0);
  for (TokenId t : packet_tokens(vocab, packet)) {
    if (seq.size() >= max_len) break;
    seq.push(t, 0);
  }
  seq.truncate(max_len);
  return seq;
}

// [cls] ++ (tokens(p0) ++ [pck]) ++ (tokens(p1) ++ [pck]) ++ ...; packet k's
// tokens and its delimiter carry segment k.
inline TokenSequence assemble_flow_sequence(const Vocabulary& vocab, const Flow& flow,
                                            std::size_t max_len) {
  TokenSequence seq;
  seq.push(vocab.marker_id(Marker::kCls), 0);
  const TokenId pck = vocab.marker_id(Marker::kPck);
  for (std::size_t k = 0; k < flow.packets.size() && seq.size() < max_len; ++k) {
    const auto segment = static_cast<std::uint32_t>(k);
    for (TokenId t : packet_tokens(vocab, flow.packets[k])) {
      if (seq.size() >= max_len) break;
      seq.push(t, segment);
    }
    if (seq.size() < max_len) seq.push(pck, segment);
  }
  seq.truncate(max_len);
  return seq;
}

// [cls] ++ tokens(concatenated packet bytes): no delimiters, segment 0.
// Used for pretraining and shuffled retraining.
inline TokenSequence assemble_plain_sequence(const Vocabulary& vocab,
                                             std::span<const Packet> packets,
                                             std::size_t max_len) {
  TokenSequence seq;
  seq.push(vocab.marker_id(Marker::kCls), 0);
  Bytes joined;
  for (const auto& p : packets) {
    const auto b = p.network_bytes();
    joined.insert(joined.end(), b.begin(), b.end());
  }
  for (TokenId t : tokenize_bytes(vocab, joined, MarkerMatching::kDisabled)) {
    if (seq.size() >= max_len) break;
    seq.push(t, 0);
  }
  return seq;
}

// Untruncated flow sequence length, for the heavy-flow policy.
inline std::size_t flow_sequence_length(const Vocabulary& vocab, const Flow& flow) {
  std::size_t length = 1;
  for (const auto& p : flow.packets) length += packet_tokens(vocab, p).size() + 1;
  return length;
}

struct PromptedSequence {
  TokenSequence sequence;
  std::size_t prompt_length = 0;
  std::size_t target_begin = 0;  // first target slot; == size() when no target
  std::size_t target_end = 0;    // one past [eos]
  bool target_truncated = false;
};

// Target rendering: tokens of the UTF-8 text, cut or [pad]-filled to
// target_len slots, then [eos].
inline std::vector<TokenId> render_target(const Vocabulary& vocab, std::string_view text,
                                          std::size_t target_len, bool* truncated = nullptr) {
  std::vector<TokenId> tokens = tokenize(vocab, text_to_hex(text), MarkerMatching::kDisabled);
  if (truncated) *truncated = tokens.size() > target_len;
  tokens.resize(target_len, vocab.marker_id(Marker::kPad));
  tokens.push_back(vocab.marker_id(Marker::kEos));
  return tokens;
}

// prompt ++ body ++ [target region]. Prompt tokens take segment 0 and the
// leading positions; target tokens continue the positions and reuse the last
// body segment.
inline PromptedSequence assemble_prompted_sequence(const Vocabulary& vocab,
                                                   std::string_view prompt_text,
                                                   const TokenSequence& body,
                                                   const std::optional<std::string>& target_text,
                                                   std::size_t max_len, std::size_t target_len) {
  if (target_text && target_len == 0) {
    throw Error(ErrorCode::kConfig, "target length must be positive");
  }
  PromptedSequence out;
  const auto prompt = tokenize(vocab, text_to_hex(prompt_text), MarkerMatching::kDisabled);
  const std::size_t target_slots = target_text ? target_len + 1 : 0;
  const std::size_t total = prompt.size() + body.size() + target_slots;
  if (total > max_len) {
    throw Error(ErrorCode::kBudget, "prompted sequence of " + std::to_string(total) +
                                        " tokens exceeds budget " + std::to_string(max_len));
  }
  auto& seq = out.sequence;
  for (TokenId t : prompt) seq.push(t, 0);
  out.prompt_length = prompt.size();
  for (std::size_t i = 0; i < body.size(); ++i) seq.push(body.token_ids[i], body.segment_ids[i]);
  out.target_begin = seq.size();
  if (target_text) {
    const std::uint32_t segment = body.empty() ? 0 : body.segment_ids.back();
    for (TokenId t : render_target(vocab, *target_text, target_len, &out.target_truncated)) {
      seq.push(t, segment);
    }
  }
  out.target_end = seq.size();
  return out;
}

}  // namespace netgpt
