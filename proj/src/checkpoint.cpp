#include "dkd/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dkd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::size_t align_up(std::size_t n) { return (n + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment; }

std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

std::int64_t Checkpoint::num_scalars() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) {
    n += static_cast<std::int64_t>(t.data.size());
  }
  return n;
}

Checkpoint to_checkpoint(const Encoder& encoder, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.encoder = encoder.config();
  ckpt.meta = std::move(meta);
  for (const auto& [name, t] : encoder.parameters()) {
    StoredTensor st;
    st.shape = t.shape();
    const auto v = t.to_vector();
    st.data.assign(v.begin(), v.end());
    ckpt.tensors.emplace(name, std::move(st));
  }
  return ckpt;
}

Encoder to_encoder(const Checkpoint& ckpt, Dtype dtype) {
  ckpt.encoder.validate();
  ParameterMap params;
  for (const auto& [name, st] : ckpt.tensors) {
    Tensor t = Tensor::from(st.shape, std::span<const float>(st.data));
    params.emplace(name, dtype == Dtype::f32 ? t : t.to(dtype));
  }
  return Encoder(ckpt.encoder, std::move(params));
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  nlohmann::json index = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, st] : ckpt.tensors) {
    if (shape_numel(st.shape) != st.data.size()) {
      throw ShapeError("checkpoint: tensor " + name + " has " + std::to_string(st.data.size()) +
                       " values for shape " + shape_string(st.shape));
    }
    offset = align_up(offset);
    const std::size_t length = st.data.size() * sizeof(float);
    index[name] = {{"dtype", "f32"}, {"shape", st.shape}, {"offset", offset}, {"length", length}};
    offset += length;
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"encoder", to_json(ckpt.encoder)},
                           {"meta", ckpt.meta},
                           {"tensors", index}};
  const std::string text = header.dump();

  const std::size_t payload_start = align_up(12 + text.size());
  std::vector<std::uint8_t> out(payload_start + offset, 0);
  std::memcpy(out.data(), kCheckpointMagic, 4);
  const std::uint64_t n = text.size();
  std::memcpy(out.data() + 4, &n, 8);
  std::memcpy(out.data() + 12, text.data(), text.size());
  for (const auto& [name, st] : ckpt.tensors) {
    const std::size_t off = index[name]["offset"].get<std::size_t>();
    std::memcpy(out.data() + payload_start + off, st.data.data(), st.data.size() * sizeof(float));
  }
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic, expected \"DKD1\"");
  }
  if (bytes.size() < 12) {
    throw IntegrityError("checkpoint: truncated before header length");
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 4, 8);
  if (header_len > bytes.size() - 12) {
    throw IntegrityError("checkpoint: header length " + std::to_string(header_len) + " exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version")) {
    throw FormatError("checkpoint: header lacks format_version");
  }
  if (header["format_version"] != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported format version " + header["format_version"].dump());
  }
  if (!header.contains("encoder") || !header.contains("tensors") || !header["tensors"].is_object()) {
    throw FormatError("checkpoint: header lacks encoder or tensors");
  }

  Checkpoint ckpt;
  ckpt.encoder = encoder_config_from_json(header["encoder"]);
  ckpt.meta = header.value("meta", nlohmann::json::object());

  const std::size_t payload_start = align_up(12 + header_len);
  const std::size_t payload_size = bytes.size() > payload_start ? bytes.size() - payload_start : 0;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& [name, entry] : header["tensors"].items()) {
    StoredTensor st;
    std::size_t off = 0;
    std::size_t length = 0;
    try {
      if (entry.at("dtype") != "f32") {
        throw IntegrityError("checkpoint: tensor " + name + " has unsupported dtype " + entry.at("dtype").dump());
      }
      st.shape = entry.at("shape").get<Shape>();
      off = entry.at("offset").get<std::size_t>();
      length = entry.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError("checkpoint: malformed index entry for tensor " + name + ": " + e.what());
    }
    if (st.shape.empty() || length != shape_numel(st.shape) * sizeof(float)) {
      throw IntegrityError("checkpoint: tensor " + name + " length " + std::to_string(length) +
                           " does not match shape " + shape_string(st.shape));
    }
    if (off % kPayloadAlignment != 0) {
      throw IntegrityError("checkpoint: tensor " + name + " offset " + std::to_string(off) + " is not 64-byte aligned");
    }
    if (off > payload_size || length > payload_size - off) {
      throw IntegrityError("checkpoint: payload truncated inside tensor " + name + " (needs bytes [" +
                           std::to_string(off) + ", " + std::to_string(off + length) + "), payload has " +
                           std::to_string(payload_size) + ")");
    }
    st.data.resize(length / sizeof(float));
    std::memcpy(st.data.data(), bytes.data() + payload_start + off, length);
    spans.emplace_back(off, off + length);
    ckpt.tensors.emplace(name, std::move(st));
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw IntegrityError("checkpoint: overlapping tensor buffers at offset " + std::to_string(spans[i].first));
    }
  }
  return ckpt;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw DataError("write failed for " + path.string());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::string checkpoint_digest(const Checkpoint& ckpt) { return hex64(fnv1a(serialize(ckpt))); }

std::string parameter_digest(const Encoder& encoder) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& [name, t] : encoder.parameters()) {
    h = fnv1a({reinterpret_cast<const std::uint8_t*>(name.data()), name.size()}, h);
    detail::dispatch(t.dtype(), [&]<class T>(T) {
      const auto v = t.values<T>();
      h = fnv1a({reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(T)}, h);
    });
  }
  return hex64(h);
}

}  // namespace dkd
