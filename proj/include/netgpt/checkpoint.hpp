#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "netgpt/error.hpp"
#include "netgpt/model.hpp"

// Checkpoint container, all integers little-endian:
//   "NGCKPT\0\0"  u32 version
//   repeated sections: 4-byte tag, u64 payload length, payload
//     CONF  model config as JSON
//     META  free-form JSON (vocab path and hash, tool version, history)
//     TENS  u32 count, then per tensor: u32 name length, name, u32 rows,
//           u32 cols, rows*cols float32 in row-major order

namespace netgpt {

inline constexpr std::array<char, 8> kCheckpointMagic = {'N', 'G', 'C', 'K', 'P', 'T', 0, 0};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  nlohmann::json metadata = nlohmann::json::object();

  std::string vocab_hash() const { return metadata.value("vocab_hash", std::string()); }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_section(std::string& out, const char (&tag)[5], const std::string& payload) {
  out.append(tag, 4);
  put_u64(out, payload.size());
  out += payload;
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  bool done() const { return pos_ == data_.size(); }

  std::string_view take(std::size_t n) {
    if (n > data_.size() - pos_) throw Error(ErrorCode::kFormat, "checkpoint is truncated");
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint64_t uint(int bytes) {
    const auto raw = take(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(raw[static_cast<std::size_t>(i)]);
    return v;
  }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline float load_f32(std::string_view raw) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | static_cast<std::uint8_t>(raw[static_cast<std::size_t>(i)]);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& params, const nlohmann::json& metadata) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_section(out, "CONF", nlohmann::json(params.config).dump());
  detail::put_section(out, "META", metadata.dump());
  std::string tensors;
  std::uint32_t count = 0;
  params.for_each([&](const std::string& name, const Matrix<T>& m) {
    ++count;
    detail::put_u32(tensors, static_cast<std::uint32_t>(name.size()));
    tensors += name;
    detail::put_u32(tensors, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(tensors, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const float f = static_cast<float>(m.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(tensors, bits);
    }
  });
  std::string body;
  detail::put_u32(body, count);
  detail::put_section(out, "TENS", body + tensors);
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view data) {
  detail::Reader in(data);
  const auto magic = in.take(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw Error(ErrorCode::kFormat, "not a checkpoint (bad magic)");
  }
  const auto version = in.uint(4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kFormat, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  bool have_config = false, have_tensors = false;
  std::string_view tensors;
  while (!in.done()) {
    const std::string tag(in.take(4));
    const auto payload = in.take(in.uint(8));
    try {
      if (tag == "CONF") {
        const auto config = nlohmann::json::parse(payload).get<ModelConfig>();
        config.validate();
        ck.params = ModelParams<float>::zeros(config);
        have_config = true;
      } else if (tag == "META") {
        ck.metadata = nlohmann::json::parse(payload);
      } else if (tag == "TENS") {
        tensors = payload;
        have_tensors = true;
      }
      // unknown sections are skipped
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kFormat, "bad " + tag + " section: " + e.what());
    }
  }
  if (!have_config || !have_tensors) throw Error(ErrorCode::kFormat, "checkpoint lacks CONF or TENS section");

  detail::Reader t(tensors);
  const auto count = t.uint(4);
  std::map<std::string, Matrix<float>*> slots;
  ck.params.for_each([&slots](const std::string& name, Matrix<float>& m) { slots[name] = &m; });
  if (count != slots.size()) {
    throw Error(ErrorCode::kFormat, "checkpoint has " + std::to_string(count) + " tensors, config implies " +
                                        std::to_string(slots.size()));
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name(t.take(t.uint(4)));
    const auto rows = static_cast<Eigen::Index>(t.uint(4));
    const auto cols = static_cast<Eigen::Index>(t.uint(4));
    auto it = slots.find(name);
    if (it == slots.end()) throw Error(ErrorCode::kFormat, "unexpected tensor " + name);
    auto& m = *it->second;
    if (m.rows() != rows || m.cols() != cols) {
      throw Error(ErrorCode::kFormat, "tensor " + name + " has shape " + std::to_string(rows) + "x" +
                                          std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                                          std::to_string(m.cols()));
    }
    const auto raw = t.take(static_cast<std::size_t>(rows * cols) * 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::load_f32(raw.substr(static_cast<std::size_t>(i) * 4, 4));
    slots.erase(it);
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params, const nlohmann::json& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  const auto bytes = serialize_checkpoint(params, metadata);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace netgpt
