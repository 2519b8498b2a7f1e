#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dkd/model.hpp"
#include "json.hpp"

namespace dkd {

// On-disk layout (all integers little-endian):
//
//   offset 0   4 bytes   magic "DKD1"
//   offset 4   8 bytes   header length N (uint64)
//   offset 12  N bytes   header, compact UTF-8 JSON with sorted keys
//   ...        zero padding up to the next multiple of 64 -> payload start P
//   P + off    tensor buffers, IEEE-754 binary32, each at a 64-byte aligned
//              offset, zero padding between buffers, no trailing padding
//
// Header keys: "encoder" (EncoderConfig), "format_version" (1), "meta"
// (free-form object: distill spec, train config, log digest, role) and
// "tensors": name -> {"dtype": "f32", "shape": [...], "offset": off,
// "length": bytes}. Tensors are laid out in name order.
inline constexpr char kCheckpointMagic[4] = {'D', 'K', 'D', '1'};
inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

struct StoredTensor {
  Shape shape;
  std::vector<float> data;

  bool operator==(const StoredTensor&) const = default;
};

struct Checkpoint {
  EncoderConfig encoder;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;

  std::int64_t num_scalars() const;
};

Checkpoint to_checkpoint(const Encoder& encoder, nlohmann::json meta = nlohmann::json::object());
// Rebuilds an encoder; tensors are converted to `dtype`.
Encoder to_encoder(const Checkpoint& ckpt, Dtype dtype = Dtype::f32);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
// Throws FormatError (magic / header JSON), VersionError, IntegrityError
// (index or payload inconsistent; the message names the tensor).
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the serialized bytes, as 16 hex digits.
std::string checkpoint_digest(const Checkpoint& ckpt);
// FNV-1a over every parameter's bytes in name order.
std::string parameter_digest(const Encoder& encoder);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace dkd
