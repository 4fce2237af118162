#include "oatr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace oatr {

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

class Reader {
 public:
  Reader(std::istream& is, const std::filesystem::path& path) : is_(is), path_(path) {}

  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw ParseError("checkpoint " + path_.string() + ": truncated file");
    }
  }
  std::uint64_t u64() {
    unsigned char b[8];
    read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

 private:
  std::istream& is_;
  const std::filesystem::path& path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    put_u32(os, kCheckpointVersion);
    put_u64(os, arrays.size());
    for (const auto& a : arrays) {
      put_u64(os, a.name.size());
      os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      put_u64(os, a.extents.size());
      std::uint64_t count = 1;
      for (auto e : a.extents) {
        put_u64(os, e);
        count *= e;
      }
      if (count != a.values.size()) {
        throw DimensionError("checkpoint entry '" + a.name + "' has " +
                             std::to_string(a.values.size()) + " values for " +
                             std::to_string(count) + " elements");
      }
      for (float f : a.values) put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(is, path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ParseError("checkpoint " + path.string() + ": bad magic bytes");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint " + path.string() + ": unsupported version " +
                     std::to_string(version));
  }
  const auto count = r.u64();
  std::vector<NamedArray> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedArray a;
    const auto name_len = r.u64();
    if (name_len > (1u << 20)) throw ParseError("checkpoint " + path.string() + ": name too long");
    a.name.resize(static_cast<std::size_t>(name_len));
    r.read(a.name.data(), a.name.size());
    const auto rank = r.u64();
    if (rank > 16) throw ParseError("checkpoint " + path.string() + ": rank too large for '" + a.name + "'");
    std::uint64_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      a.extents.push_back(r.u64());
      n *= a.extents.back();
    }
    a.values.resize(static_cast<std::size_t>(n));
    for (auto& f : a.values) f = std::bit_cast<float>(r.u32());
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace oatr
