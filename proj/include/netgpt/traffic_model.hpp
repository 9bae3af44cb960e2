#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "netgpt/error.hpp"

namespace netgpt {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

enum class Protocol : std::uint8_t { kIPv4, kTCP, kUDP };

inline constexpr std::uint8_t kIpProtoTcp = 6;
inline constexpr std::uint8_t kIpProtoUdp = 17;

inline constexpr std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::kIPv4: return "ipv4";
    case Protocol::kTCP: return "tcp";
    case Protocol::kUDP: return "udp";
  }
  return "?";
}

// Link-layer header types as numbered in the pcap global header.
enum class LinkType : std::uint32_t {
  kNull = 0,
  kEthernet = 1,
  kRaw = 101,
  kLinuxSll = 113,
  kIPv4 = 228,
};

struct RawPacket {
  std::int64_t capture_timestamp = 0;  // microseconds since epoch
  Bytes link_bytes;
  std::size_t capture_length = 0;

  static RawPacket make(std::int64_t timestamp_us, Bytes bytes) {
    if (bytes.empty()) {
      throw ParseError(Layer::kCapture, "empty capture");
    }
    RawPacket raw;
    raw.capture_timestamp = timestamp_us;
    raw.capture_length = bytes.size();
    raw.link_bytes = std::move(bytes);
    return raw;
  }

  bool operator==(const RawPacket&) const = default;
};

struct FieldUnit {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct ProtocolLayout {
  Protocol protocol = Protocol::kIPv4;
  std::vector<FieldUnit> units;

  std::size_t header_length() const {
    std::size_t total = 0;
    for (const auto& u : units) total += u.length;
    return total;
  }

  const FieldUnit* find(std::string_view name) const {
    for (const auto& u : units) {
      if (u.name == name) return &u;
    }
    return nullptr;
  }
};

// Canonical fixed-header layouts. Fields that share a byte are one unit.
inline const ProtocolLayout& layout_for(Protocol protocol) {
  static const ProtocolLayout ipv4{
      Protocol::kIPv4,
      {{"ver_ihl", 0, 1},
       {"tos", 1, 1},
       {"len", 2, 2},
       {"id", 4, 2},
       {"flags_frag", 6, 2},
       {"ttl", 8, 1},
       {"proto", 9, 1},
       {"cksum", 10, 2},
       {"src", 12, 4},
       {"dst", 16, 4}}};
  // Data offset, reserved bits and flags occupy bytes 12-13 together.
  static const ProtocolLayout tcp{Protocol::kTCP,
                                  {{"sport", 0, 2},
                                   {"dport", 2, 2},
                                   {"seq", 4, 4},
                                   {"ack", 8, 4},
                                   {"off_flags", 12, 2},
                                   {"win", 14, 2},
                                   {"cksum", 16, 2},
                                   {"urg", 18, 2}}};
  static const ProtocolLayout udp{Protocol::kUDP,
                                  {{"sport", 0, 2},
                                   {"dport", 2, 2},
                                   {"len", 4, 2},
                                   {"cksum", 6, 2}}};
  switch (protocol) {
    case Protocol::kIPv4: return ipv4;
    case Protocol::kTCP: return tcp;
    case Protocol::kUDP: return udp;
  }
  throw Error(ErrorCode::kUnsupportedProtocol, "unsupported protocol");
}

inline const ProtocolLayout& layout_for(std::string_view name) {
  if (name == "ipv4") return layout_for(Protocol::kIPv4);
  if (name == "tcp") return layout_for(Protocol::kTCP);
  if (name == "udp") return layout_for(Protocol::kUDP);
  throw Error(ErrorCode::kUnsupportedProtocol,
              "unsupported protocol: " + std::string(name));
}

struct FiveTuple {
  std::array<std::uint8_t, 4> src_ip{};
  std::array<std::uint8_t, 4> dst_ip{};
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t protocol = 0;

  auto operator<=>(const FiveTuple&) const = default;
};

inline std::string format_ipv4(const std::array<std::uint8_t, 4>& ip) {
  return std::to_string(ip[0]) + "." + std::to_string(ip[1]) + "." +
         std::to_string(ip[2]) + "." + std::to_string(ip[3]);
}

struct FiveTupleHash {
  std::size_t operator()(const FiveTuple& t) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint8_t b) {
      h ^= b;
      h *= 0x100000001b3ULL;
    };
    for (auto b : t.src_ip) mix(b);
    for (auto b : t.dst_ip) mix(b);
    mix(static_cast<std::uint8_t>(t.src_port >> 8));
    mix(static_cast<std::uint8_t>(t.src_port));
    mix(static_cast<std::uint8_t>(t.dst_port >> 8));
    mix(static_cast<std::uint8_t>(t.dst_port));
    mix(t.protocol);
    return static_cast<std::size_t>(h);
  }
};

// Half-open byte range [offset, offset + length) into RawPacket::link_bytes.
struct ByteRange {
  std::size_t offset = 0;
  std::size_t length = 0;

  std::size_t end() const { return offset + length; }
  bool contains(const ByteRange& other) const {
    return other.offset >= offset && other.end() <= end();
  }
  bool operator==(const ByteRange&) const = default;
};

struct ShuffleUnit {
  ByteRange range;
  std::string name;  // "ip.<unit>" or "<transport>.<unit>"

  bool operator==(const ShuffleUnit&) const = default;
};

struct Packet {
  RawPacket raw;
  ByteRange ip_header;
  ByteRange transport_header;
  ByteRange payload;
  FiveTuple five_tuple;
  std::optional<Protocol> transport;  // empty for opaque transports
  std::vector<ShuffleUnit> shuffle_units;

  ByteView bytes(const ByteRange& r) const {
    return ByteView(raw.link_bytes).subspan(r.offset, r.length);
  }
  ByteView ip_header_bytes() const { return bytes(ip_header); }
  ByteView transport_header_bytes() const { return bytes(transport_header); }
  ByteView payload_bytes() const { return bytes(payload); }

  // ip_header ++ transport_header ++ payload.
  ByteView network_bytes() const {
    return bytes({ip_header.offset, payload.end() - ip_header.offset});
  }
  ByteRange headers() const {
    return {ip_header.offset, transport_header.end() - ip_header.offset};
  }
  std::int64_t timestamp() const { return raw.capture_timestamp; }
};

struct Flow {
  FiveTuple five_tuple;
  std::vector<Packet> packets;
  bool truncated = false;
};

namespace detail {

inline std::uint16_t read_be16(ByteView b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}

inline std::size_t link_header_length(ByteView bytes, LinkType link_type) {
  switch (link_type) {
    case LinkType::kRaw:
    case LinkType::kIPv4:
      return 0;
    case LinkType::kNull: {
      if (bytes.size() < 4) throw ParseError(Layer::kLink, "truncated header");
      // Address family is host-endian; 2 is AF_INET everywhere.
      const bool inet = (bytes[0] == 2 && bytes[1] == 0 && bytes[2] == 0 &&
                         bytes[3] == 0) ||
                        (bytes[3] == 2 && bytes[0] == 0 && bytes[1] == 0 &&
                         bytes[2] == 0);
      if (!inet) throw ParseError(Layer::kNetwork, "non-IPv4 network layer");
      return 4;
    }
    case LinkType::kEthernet: {
      if (bytes.size() < 14) throw ParseError(Layer::kLink, "truncated header");
      std::size_t offset = 12;
      std::uint16_t ether_type = read_be16(bytes, offset);
      while (ether_type == 0x8100 || ether_type == 0x88a8) {
        offset += 4;
        if (bytes.size() < offset + 2) {
          throw ParseError(Layer::kLink, "truncated header");
        }
        ether_type = read_be16(bytes, offset);
      }
      if (ether_type != 0x0800) {
        throw ParseError(Layer::kNetwork, "non-IPv4 network layer");
      }
      return offset + 2;
    }
    case LinkType::kLinuxSll: {
      if (bytes.size() < 16) throw ParseError(Layer::kLink, "truncated header");
      if (read_be16(bytes, 14) != 0x0800) {
        throw ParseError(Layer::kNetwork, "non-IPv4 network layer");
      }
      return 16;
    }
  }
  throw ParseError(Layer::kLink, "unsupported link type " +
                                     std::to_string(static_cast<std::uint32_t>(
                                         link_type)));
}

inline void append_units(std::vector<ShuffleUnit>& out,
                         const ProtocolLayout& layout, std::size_t base,
                         std::string_view prefix) {
  for (const auto& u : layout.units) {
    out.push_back({{base + u.offset, u.length},
                   std::string(prefix) + "." + u.name});
  }
}

}  // namespace detail

// Resolves header/payload spans, the five-tuple and shuffle units. Link
// headers are skipped. IPv4 (and TCP) options form one extra "options" unit.
inline Packet parse_packet(RawPacket raw, LinkType link_type) {
  const ByteView bytes(raw.link_bytes);
  const std::size_t ip_start = detail::link_header_length(bytes, link_type);
  if (bytes.size() < ip_start + 20) {
    throw ParseError(Layer::kNetwork, "truncated header");
  }
  const ByteView ip = bytes.subspan(ip_start);
  if ((ip[0] >> 4) != 4) {
    throw ParseError(Layer::kNetwork, "non-IPv4 network layer");
  }
  const std::size_t ihl = static_cast<std::size_t>(ip[0] & 0x0f) * 4;
  if (ihl < 20) throw ParseError(Layer::kNetwork, "invalid header length");
  if (ip.size() < ihl) throw ParseError(Layer::kNetwork, "truncated header");
  const std::size_t total_length = detail::read_be16(ip, 2);
  if (total_length < ihl) {
    throw ParseError(Layer::kNetwork, "total length below header length");
  }
  // Link-layer trailer padding beyond the datagram is not network data.
  const std::size_t network_end = ip_start + std::min(total_length, ip.size());

  Packet packet;
  packet.ip_header = {ip_start, ihl};
  detail::append_units(packet.shuffle_units, layout_for(Protocol::kIPv4),
                       ip_start, "ip");
  if (ihl > 20) {
    packet.shuffle_units.push_back({{ip_start + 20, ihl - 20}, "ip.options"});
  }
  std::copy_n(ip.begin() + 12, 4, packet.five_tuple.src_ip.begin());
  std::copy_n(ip.begin() + 16, 4, packet.five_tuple.dst_ip.begin());
  packet.five_tuple.protocol = ip[9];

  const std::size_t transport_start = ip_start + ihl;
  const bool later_fragment = (detail::read_be16(ip, 6) & 0x1fff) != 0;
  std::size_t transport_length = 0;
  if (!later_fragment && ip[9] == kIpProtoTcp) {
    if (network_end < transport_start + 20) {
      throw ParseError(Layer::kTransport, "truncated header");
    }
    const std::size_t data_offset =
        static_cast<std::size_t>(bytes[transport_start + 12] >> 4) * 4;
    if (data_offset < 20) {
      throw ParseError(Layer::kTransport, "invalid data offset");
    }
    if (network_end < transport_start + data_offset) {
      throw ParseError(Layer::kTransport, "truncated header");
    }
    transport_length = data_offset;
    packet.transport = Protocol::kTCP;
    detail::append_units(packet.shuffle_units, layout_for(Protocol::kTCP),
                         transport_start, "tcp");
    if (data_offset > 20) {
      packet.shuffle_units.push_back(
          {{transport_start + 20, data_offset - 20}, "tcp.options"});
    }
  } else if (!later_fragment && ip[9] == kIpProtoUdp) {
    if (network_end < transport_start + 8) {
      throw ParseError(Layer::kTransport, "truncated header");
    }
    transport_length = 8;
    packet.transport = Protocol::kUDP;
    detail::append_units(packet.shuffle_units, layout_for(Protocol::kUDP),
                         transport_start, "udp");
  }
  if (packet.transport) {
    packet.five_tuple.src_port = detail::read_be16(bytes, transport_start);
    packet.five_tuple.dst_port = detail::read_be16(bytes, transport_start + 2);
  }
  packet.transport_header = {transport_start, transport_length};
  packet.payload = {transport_start + transport_length,
                    network_end - transport_start - transport_length};
  packet.raw = std::move(raw);
  return packet;
}

}  // namespace netgpt
