#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"

namespace lilora::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void matrix_values(const Matrix& m) {
    for (double v : m.values()) f64(v);
  }

  /// Append CRC32 of everything written so far.
  void seal() { u32(crc32(buf_.data(), buf_.size())); }

  const std::vector<std::uint8_t>& data() const noexcept { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; every read is bounds-checked and failures
/// report the offending byte offset.
class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::string bytes(std::size_t n) {
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw IntegrityError("zero-sized matrix", pos_);
    if (rows > remaining() / 8 / cols) throw IntegrityError("truncated data: matrix " + Matrix::shape_str(rows, cols), pos_);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = f64();
    return Matrix(rows, cols, std::move(v));
  }

  /// Verify the trailing CRC32 over all preceding bytes.
  void verify_crc() {
    if (buf_.size() < 4) throw IntegrityError("file too short for checksum", buf_.size());
    const std::size_t body = buf_.size() - 4;
    ByteReader tail(buf_);
    tail.pos_ = body;
    const std::uint32_t stored = tail.u32();
    const std::uint32_t actual = crc32(buf_.data(), body);
    if (stored != actual) throw IntegrityError("CRC32 mismatch", body);
  }

  /// After the payload, exactly the 4 checksum bytes may remain.
  void expect_trailer() {
    if (remaining() != 4) throw IntegrityError("unexpected trailing bytes before checksum", pos_);
  }

 private:
  void need(std::size_t n, const char* what) {
    if (n > remaining()) throw IntegrityError(std::string("truncated data reading ") + what, pos_);
  }
  template <class T>
  T get() {
    need(sizeof(T), "integer");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write to a sibling temp file, then rename over the destination, so
/// readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

// --- tensor container ("LLTC") ---------------------------------------------
//
//   magic "LLTC" | version u16 | entry count u32
//   per entry: name length u16 | UTF-8 name | rows u32 | cols u32 | f64 row-major
//   CRC32 u32 over all preceding bytes
//
// All integers and floats little-endian.

inline constexpr std::uint16_t kTensorContainerVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

inline std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors) {
  ByteWriter w;
  w.bytes("LLTC");
  w.u16(kTensorContainerVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    if (name.size() > 0xFFFF) throw ShapeError("tensor name too long: " + name.substr(0, 32) + "...");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    w.matrix_values(m);
  }
  w.seal();
  return w.take();
}

inline NamedTensors decode_tensors(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != "LLTC") throw IntegrityError("bad magic, expected LLTC", 0);
  r.verify_crc();
  const std::uint16_t version = r.u16();
  if (version != kTensorContainerVersion)
    throw IntegrityError("unsupported tensor container version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    std::string name = r.bytes(len);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    out.emplace_back(std::move(name), r.matrix(rows, cols));
  }
  r.expect_trailer();
  return out;
}

inline void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_atomic(path, encode_tensors(tensors));
}

inline NamedTensors load_tensors(const std::filesystem::path& path) { return decode_tensors(read_file(path)); }

inline const Matrix& find_tensor(const NamedTensors& t, const std::string& name) {
  for (const auto& [n, m] : t)
    if (n == name) return m;
  throw LookupError("tensor '" + name + "' not found in container");
}

inline const Matrix* try_find_tensor(const NamedTensors& t, const std::string& name) {
  for (const auto& [n, m] : t)
    if (n == name) return &m;
  return nullptr;
}

}  // namespace lilora::io
