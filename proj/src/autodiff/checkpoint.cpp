#include "bonetrack/autodiff/checkpoint.hpp"

#include <fstream>

#include "../binary_io.hpp"

namespace bonetrack::ad {

namespace {
constexpr char kMagic[4] = {'B', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

const NamedArray& Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  fail(ErrorKind::Io, "checkpoint has no array named '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  using namespace binio;
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_string(os, ckpt.config_record);
  put_u32(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    if (a.values.size() != numel(a.shape))
      fail(ErrorKind::Shape, "checkpoint array '" + a.name + "' size does not match its shape");
    put_string(os, a.name);
    put_u32(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : a.values) put_f32(os, v);
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  using namespace binio;
  char magic[4];
  read_exact(is, magic, 4);
  if (!std::equal(magic, magic + 4, kMagic))
    fail(ErrorKind::Io, "'" + path.string() + "' is not a checkpoint");
  if (get_u32(is) != kVersion) fail(ErrorKind::Io, "unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.config_record = get_string(is);
  const std::uint32_t n = get_u32(is);
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedArray a;
    a.name = get_string(is, 4096);
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) fail(ErrorKind::Io, "corrupt checkpoint: rank " + std::to_string(rank));
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(get_u32(is));
    const std::size_t count = numel(a.shape);
    if (count > (std::size_t{1} << 28)) fail(ErrorKind::Io, "corrupt checkpoint: array too large");
    a.values.resize(count);
    for (auto& v : a.values) v = get_f32(is);
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

}  // namespace bonetrack::ad
