#include <gtest/gtest.h>

#include <cstring>

#include "test_support.hpp"

using namespace netgpt;
using namespace netgpt::testing;

namespace {

void expect_code(const std::string& data, ErrorCode code) {
  try {
    parse_checkpoint(data);
    FAIL() << "parsed";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Rebuilds a checkpoint from sections, for corrupt inputs.
std::string assemble(const std::vector<std::pair<std::string, std::string>>& sections) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  auto u = [&out](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  u(kCheckpointVersion, 4);
  for (const auto& [tag, payload] : sections) {
    out += tag;
    u(payload.size(), 8);
    out += payload;
  }
  return out;
}

// Splits a serialized checkpoint back into its sections.
std::vector<std::pair<std::string, std::string>> sections_of(const std::string& data) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t pos = 12;
  while (pos < data.size()) {
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<std::uint8_t>(data[pos + 4 + static_cast<std::size_t>(i)]);
    out.emplace_back(data.substr(pos, 4), data.substr(pos + 12, n));
    pos += 12 + n;
  }
  return out;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  auto c = tiny_config(2, 16);
  c.dropout_rate = 0.1;
  const auto params = init_model(c, 5);
  const nlohmann::json meta = {{"vocab_hash", "abc123"}, {"stage", "pretrain"}, {"step", 40}};
  TempDir dir;
  const auto path = (dir.path / "model.ckpt").string();
  save_checkpoint(path, params, meta);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.vocab_hash(), "abc123");
  EXPECT_EQ(back.metadata["step"], 40);
  EXPECT_EQ(back.params.config.dropout_rate, 0.1);
  EXPECT_EQ(back.params.parameter_count(), params.parameter_count());
  std::vector<const Matrix<float>*> a, b;
  params.for_each([&a](const std::string&, const Matrix<float>& m) { a.push_back(&m); });
  back.params.for_each([&b](const std::string&, const Matrix<float>& m) { b.push_back(&m); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i]->size(), b[i]->size());
    EXPECT_EQ(std::memcmp(a[i]->data(), b[i]->data(), sizeof(float) * static_cast<std::size_t>(a[i]->size())), 0);
  }
  // Serialization is a pure function of its inputs.
  EXPECT_EQ(serialize_checkpoint(params, meta), serialize_checkpoint(back.params, back.metadata));
}

TEST(Checkpoint, DoubleParamsStoreAsFloat) {
  const auto c = tiny_config(1, 8);
  const auto d = init_model<double>(c, 2);
  const auto back = parse_checkpoint(serialize_checkpoint(d, {}));
  EXPECT_EQ(back.params.token_embedding(3, 4), static_cast<float>(d.token_embedding(3, 4)));
}

TEST(Checkpoint, CorruptInputs) {
  const auto good = serialize_checkpoint(init_model(tiny_config(1, 8), 1), nlohmann::json{{"a", 1}});
  std::string bad = good;
  bad[0] = 'X';
  expect_code(bad, ErrorCode::kFormat);
  for (std::size_t cut : {std::size_t{4}, std::size_t{10}, std::size_t{30}, good.size() - 1}) {
    expect_code(good.substr(0, cut), ErrorCode::kFormat);
  }
  bad = good;
  bad[8] = 9;  // version
  expect_code(bad, ErrorCode::kFormat);

  const auto parts = sections_of(good);
  ASSERT_EQ(parts.size(), 3u);
  expect_code(assemble({parts[0], parts[1]}), ErrorCode::kFormat);  // no tensors
  expect_code(assemble({parts[1], parts[2]}), ErrorCode::kFormat);  // no config
  expect_code(assemble({{"CONF", "{not json"}, parts[2]}), ErrorCode::kFormat);
  // Unknown sections are skipped.
  EXPECT_NO_THROW(parse_checkpoint(assemble({parts[0], {"XTRA", "zz"}, parts[1], parts[2]})));

  // Tensors from a wider model do not fit this config.
  const auto wide = sections_of(serialize_checkpoint(init_model(tiny_config(1, 16), 1), {}));
  try {
    parse_checkpoint(assemble({parts[0], parts[1], wide[2]}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
  }
  // Tensor count from a deeper model.
  const auto deep = sections_of(serialize_checkpoint(init_model(tiny_config(2, 8), 1), {}));
  expect_code(assemble({parts[0], parts[1], deep[2]}), ErrorCode::kFormat);
}

TEST(Checkpoint, MissingFile) {
  try {
    load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}
