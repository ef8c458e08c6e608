#pragma once

// Binary checkpoint container: named f32 tensors plus a text config block,
// little-endian, CRC32-terminated.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "hpgn/errors.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

inline constexpr char kCheckpointMagic[4] = {'H', 'P', 'G', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config;  // INI text; the [state] section carries epoch bookkeeping
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor<float>& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
  void put(std::string name, Tensor<float> t) { tensors.emplace_back(std::move(name), std::move(t)); }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { buf_ += s; }
  const std::string& str() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw FormatError("checkpoint truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32(const char* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  w.bytes(ck.config);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw InvalidArgument("checkpoint tensor name too long");
    if (t.rank() > 0xff) throw InvalidArgument("checkpoint tensor rank too large");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(0);  // f32
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (float v : t.data()) w.f32(v);
  }
  std::string out = w.str();
  const std::uint32_t crc = detail::crc32(out.data(), out.size());
  detail::ByteWriter tail;
  tail.u32(crc);
  return out + tail.str();
}

inline Checkpoint decode_checkpoint(const std::string& buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  if (buf.size() < 16) throw FormatError("checkpoint truncated");
  const std::size_t body = buf.size() - 4;
  {
    detail::ByteReader crc_reader(buf.substr(body), 4);
    if (crc_reader.u32() != detail::crc32(buf.data(), body))
      throw FormatError("checkpoint checksum mismatch (truncated or corrupt)");
  }
  detail::ByteReader r(buf, body);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.config = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    if (r.u8() != 0) throw FormatError("checkpoint tensor '" + name + "' has unknown dtype");
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_size(shape);
    if (n > r.remaining() / 4) throw FormatError("checkpoint truncated");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    ck.put(std::move(name), Tensor<float>(shape, std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

// Writes through a temporary file and renames, so an interrupted save never
// clobbers the previous checkpoint.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace hpgn
