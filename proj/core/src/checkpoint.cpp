#include "flowdistill/checkpoint.hpp"

#include <limits>

#include "flowdistill/binary_io.hpp"

namespace fd {

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& params) {
  ByteWriter w;
  w.bytes("FDCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("checkpoint: name too long");
    if (p.value.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("checkpoint: rank too large");
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name);
    w.u8(static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) w.f32(v);
  }
  return w.buffer();
}

ParameterSet<float> decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("FDCK");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParameterSet<float> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_numel(shape);
    if (n * 4 > r.remaining()) throw FormatError(what + ": payload for '" + name + "' exceeds file length");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    out.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  r.expect_end();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(params);
  w.bytes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  w.write_file(path);
}

ParameterSet<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

void load_checkpoint_into(const std::filesystem::path& path, ParameterSet<float>& params) {
  params.assign_from(load_checkpoint(path));
}

}  // namespace fd
