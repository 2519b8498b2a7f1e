#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "dkd/checkpoint.hpp"
#include "dkd/random.hpp"

using namespace dkd;

namespace {

const std::filesystem::path kGolden = std::filesystem::path(DKD_FIXTURE_DIR) / "golden.dkd";

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
  return v;
}

std::string message_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

EncoderConfig golden_config() {
  EncoderConfig c;
  c.conv_layers = {{2, 4, 2}};
  c.post_conv_dim = 4;
  c.num_transformer_layers = 1;
  c.attention_heads = 2;
  c.ffn_dim = 8;
  c.pos_conv = {2, 2};
  c.head_layers = {1};
  return c;
}

}  // namespace

TEST_CASE("golden fixture layout") {
  const auto bytes = read_file(kGolden);
  REQUIRE(bytes.size() == 4768);
  CHECK(std::memcmp(bytes.data(), "DKD1", 4) == 0);
  const std::uint64_t n = read_u64(bytes, 4);
  CHECK(n == 2649);
  const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(n));
  CHECK(header.at("format_version") == 1);
  CHECK(header.dump() == std::string(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(n)));
  const std::size_t payload = (12 + n + 63) / 64 * 64;
  CHECK(payload == 2688);
  for (std::size_t i = 12 + n; i < payload; ++i) CHECK(bytes[i] == 0);
  std::size_t last_end = 0;
  for (const auto& [name, e] : header.at("tensors").items()) {
    const std::size_t off = e.at("offset");
    CHECK(off % 64 == 0);
    CHECK(off >= last_end);
    last_end = off + e.at("length").get<std::size_t>();
  }
  CHECK(payload + last_end == bytes.size());
}

TEST_CASE("golden fixture loads and re-saves bytewise") {
  const auto bytes = read_file(kGolden);
  const Checkpoint ckpt = deserialize(bytes);
  CHECK(serialize(ckpt) == bytes);
  CHECK(checkpoint_digest(ckpt) == "1814e5c75003277f");
  CHECK(ckpt.encoder == golden_config());
  CHECK(ckpt.num_scalars() == 268);
  CHECK(ckpt.meta.at("role") == "fixture");
  // Values are the deterministic initialization for seed 7.
  CHECK(serialize(to_checkpoint(build(golden_config(), 7), {{"role", "fixture"}})) == bytes);
  const auto copy = std::filesystem::temp_directory_path() / "dkd_golden_copy.dkd";
  save_checkpoint(load_checkpoint(kGolden), copy);
  CHECK(read_file(copy) == bytes);
  std::filesystem::remove(copy);
}

TEST_CASE("corrupted magic is a format error") {
  auto bytes = read_file(kGolden);
  std::memcpy(bytes.data(), "XXXX", 4);
  CHECK_THROWS_AS(deserialize(bytes), FormatError);
}

TEST_CASE("truncation is an integrity error naming the tensor") {
  auto bytes = read_file(kGolden);
  bytes.pop_back();
  CHECK_THROWS_AS(deserialize(bytes), IntegrityError);
  CHECK(message_of(bytes).find("projection.weight") != std::string::npos);
  bytes.resize(8);
  CHECK_THROWS_AS(deserialize(bytes), IntegrityError);
}

TEST_CASE("unknown format version is a version error") {
  auto bytes = read_file(kGolden);
  std::string text(bytes.begin(), bytes.end());
  const auto at = text.find("\"format_version\":1");
  REQUIRE(at != std::string::npos);
  bytes[at + 17] = '7';
  CHECK_THROWS_AS(deserialize(bytes), VersionError);
}

TEST_CASE("malformed header is a format error") {
  auto bytes = read_file(kGolden);
  bytes[12] = '[';
  CHECK_THROWS_AS(deserialize(bytes), FormatError);
}

TEST_CASE("round-trip preserves every tensor and the config") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Encoder e = build(EncoderConfig::desk_student({2, 4}), seed);
    const Checkpoint a = to_checkpoint(e, {{"seed", seed}});
    const Checkpoint b = deserialize(serialize(a));
    CHECK(b.encoder == a.encoder);
    CHECK(b.tensors == a.tensors);
    CHECK(b.meta == a.meta);
    CHECK(parameter_digest(to_encoder(b)) == parameter_digest(e));
  }
}

TEST_CASE("missing files are data errors") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.dkd"), DataError);
}
