#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "netgpt/ingestion.hpp"
#include "netgpt/rng.hpp"
#include "netgpt/traffic_model.hpp"

namespace netgpt {

// permutation[i] is the original index (within network_bytes()) of the byte
// now at index i.
using Permutation = std::vector<std::size_t>;

struct ShuffledPacket {
  Packet packet;
  Permutation permutation;
  bool degenerate = false;  // nothing could be swapped
};

enum class ShuffleMode { kPairSwap, kFullPermutation };

namespace detail {

inline bool same_header(const Packet& p, const ShuffleUnit& a, const ShuffleUnit& b) {
  return (p.ip_header.contains(a.range) && p.ip_header.contains(b.range)) ||
         (p.transport_header.contains(a.range) && p.transport_header.contains(b.range));
}

inline Permutation identity_permutation(const Packet& p) {
  Permutation perm(p.network_bytes().size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  return perm;
}

// Rewrites the header region so units appear in `order` (a permutation of the
// unit indices of one header); returns the new packet and its permutation.
inline ShuffledPacket reorder_units(const Packet& p, const ShuffledPacket& base,
                                    std::span<const std::size_t> header_units,
                                    std::span<const std::size_t> order) {
  ShuffledPacket out = base;
  const std::size_t net = p.ip_header.offset;
  const std::size_t start = p.shuffle_units[header_units.front()].range.offset;
  std::size_t cursor = start;
  auto& bytes = out.packet.raw.link_bytes;
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const auto& unit = p.shuffle_units[header_units[order[slot]]];
    for (std::size_t k = 0; k < unit.range.length; ++k) {
      bytes[cursor + k] = p.raw.link_bytes[unit.range.offset + k];
      out.permutation[cursor + k - net] = base.permutation[unit.range.offset + k - net];
    }
    auto& moved = out.packet.shuffle_units[header_units[slot]];
    moved.name = unit.name;
    moved.range = {cursor, unit.range.length};
    cursor += unit.range.length;
  }
  return out;
}

inline std::vector<std::size_t> units_of_header(const Packet& p, const ByteRange& header) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < p.shuffle_units.size(); ++i) {
    if (header.length > 0 && header.contains(p.shuffle_units[i].range)) idx.push_back(i);
  }
  return idx;
}

}  // namespace detail

// Exchanges the byte ranges of units i and j (same header). Units between them
// shift when their lengths differ; shuffle_units keep positional order and the
// moved names follow their bytes. five_tuple keeps its semantic values.
inline ShuffledPacket swap_units(const Packet& packet, std::size_t i, std::size_t j) {
  if (i == j || i >= packet.shuffle_units.size() || j >= packet.shuffle_units.size() ||
      !detail::same_header(packet, packet.shuffle_units[i], packet.shuffle_units[j])) {
    throw Error(ErrorCode::kData, "swap requires two distinct units of one header");
  }
  if (i > j) std::swap(i, j);
  ShuffledPacket base{packet, detail::identity_permutation(packet), false};
  const ByteRange header = packet.ip_header.contains(packet.shuffle_units[i].range)
                               ? packet.ip_header
                               : packet.transport_header;
  const auto units = detail::units_of_header(packet, header);
  std::vector<std::size_t> order(units.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto pos_i = static_cast<std::size_t>(std::find(units.begin(), units.end(), i) - units.begin());
  const auto pos_j = static_cast<std::size_t>(std::find(units.begin(), units.end(), j) - units.begin());
  std::swap(order[pos_i], order[pos_j]);
  return detail::reorder_units(packet, base, units, order);
}

// All unit pairs, within one header, whose exchange changes the bytes.
inline std::vector<std::pair<std::size_t, std::size_t>> swappable_pairs(const Packet& packet) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const auto& units = packet.shuffle_units;
  for (std::size_t i = 0; i < units.size(); ++i) {
    for (std::size_t j = i + 1; j < units.size(); ++j) {
      if (!detail::same_header(packet, units[i], units[j])) continue;
      const auto a = packet.bytes(units[i].range);
      const auto mid = packet.bytes({units[i].range.end(), units[j].range.offset - units[i].range.end()});
      const auto b = packet.bytes(units[j].range);
      Bytes before, after;
      for (auto part : {a, mid, b}) before.insert(before.end(), part.begin(), part.end());
      for (auto part : {b, mid, a}) after.insert(after.end(), part.begin(), part.end());
      if (before != after) pairs.emplace_back(i, j);
    }
  }
  return pairs;
}

// Exchanges one uniformly chosen pair of distinct header units. Pairs whose
// exchange would leave the bytes unchanged are not candidates; with no
// candidate the packet is returned unchanged and flagged degenerate.
inline ShuffledPacket swap_two_fields(const Packet& packet, Rng& rng) {
  const auto pairs = swappable_pairs(packet);
  if (pairs.empty()) return {packet, detail::identity_permutation(packet), true};
  const auto [i, j] = pairs[rng.uniform_index(pairs.size())];
  return swap_units(packet, i, j);
}

// Random permutation of the units within each header independently.
inline ShuffledPacket shuffle_all_fields(const Packet& packet, Rng& rng) {
  ShuffledPacket current{packet, detail::identity_permutation(packet), true};
  for (const ByteRange& header : {packet.ip_header, packet.transport_header}) {
    const auto units = detail::units_of_header(packet, header);
    if (units.size() < 2) continue;
    std::vector<std::size_t> order(units.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    // Units of the other header are untouched, so reorder against the
    // current packet, whose layout for this header is still original.
    Packet source = current.packet;
    source.shuffle_units = packet.shuffle_units;
    source.raw = current.packet.raw;
    const bool degenerate = current.degenerate;
    current = detail::reorder_units(source, current, units, order);
    current.degenerate = degenerate && std::is_sorted(order.begin(), order.end());
  }
  return current;
}

// Original network-layer bytes recovered through the permutation record.
inline Bytes restore_original(const Packet& shuffled, const Permutation& permutation) {
  const auto bytes = shuffled.network_bytes();
  Bytes out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[permutation[i]] = bytes[i];
  return out;
}

struct AugmentedExample {
  Example example;
  std::size_t source_index = 0;
  bool original = true;
  std::vector<Permutation> permutations;  // one per packet; empty for originals
};

// Originals are kept; each item adds `copies_per_item` shuffled variants (each
// packet of a flow shuffled independently). Labels are copied. The random
// stream of item i is derived from (seed, i).
inline std::vector<AugmentedExample> expand_with_shuffles(std::span<const Example> dataset,
                                                          std::size_t copies_per_item,
                                                          std::uint64_t seed,
                                                          ShuffleMode mode = ShuffleMode::kPairSwap) {
  std::vector<AugmentedExample> out;
  out.reserve(dataset.size() * (1 + copies_per_item));
  auto shuffle = [mode](const Packet& p, Rng& rng) {
    return mode == ShuffleMode::kPairSwap ? swap_two_fields(p, rng) : shuffle_all_fields(p, rng);
  };
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out.push_back({dataset[i], i, true, {}});
    Rng rng = Rng::derive(seed, i);
    for (std::size_t c = 0; c < copies_per_item; ++c) {
      AugmentedExample variant{dataset[i], i, false, {}};
      variant.example.id = dataset[i].id + "#shuffle" + std::to_string(c);
      if (auto* p = std::get_if<Packet>(&variant.example.traffic)) {
        auto shuffled = shuffle(*p, rng);
        *p = std::move(shuffled.packet);
        variant.permutations.push_back(std::move(shuffled.permutation));
      } else {
        for (auto& packet : std::get<Flow>(variant.example.traffic).packets) {
          auto shuffled = shuffle(packet, rng);
          packet = std::move(shuffled.packet);
          variant.permutations.push_back(std::move(shuffled.permutation));
        }
      }
      out.push_back(std::move(variant));
    }
  }
  return out;
}

}  // namespace netgpt
