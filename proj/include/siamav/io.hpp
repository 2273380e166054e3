#pragma once

// On-disk formats: the AVSM tensor container (little-endian, versioned) and a
// reader/writer for 16-bit PCM mono WAV.
//
// AVSM layout: "AVSM" | u32 version | u32 count | count x {u16 name length,
// name bytes, u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 dims, values}.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "siamav/tensor.hpp"

namespace siamav {

inline constexpr std::uint32_t kAvsmVersion = 1;

// A named tensor as stored on disk. Values are held in double, which carries
// f32 payloads exactly, so read/write is bit-preserving for both dtypes.
struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;

  bool operator==(const StoredTensor&) const = default;
};

template <Scalar T>
StoredTensor to_stored(std::string name, const Tensor<T>& t) {
  return {std::move(name), dtype_of<T>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

template <Scalar T>
Tensor<T> from_stored(const StoredTensor& s) {
  if (s.dtype != dtype_of<T>()) {
    throw ContractError("tensor '" + s.name + "' is stored as " + dtype_name(s.dtype) + ", expected " +
                        dtype_name(dtype_of<T>()));
  }
  return Tensor<T>(s.shape, std::vector<T>(s.values.begin(), s.values.end()));
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : b_(b) {}
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("truncated: need " + std::to_string(n) + " bytes", pos_);
  }

 private:
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline std::vector<char> encode_tensors(const std::vector<StoredTensor>& tensors) {
  detail::ByteWriter w;
  w.raw("AVSM");
  w.u32(kAvsmVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw ContractError("tensor name longer than 65535 bytes");
    if (t.shape.size() > 0xFF) throw ContractError("tensor '" + t.name + "' has rank above 255");
    if (shape_numel(t.shape) != t.values.size()) throw ContractError("tensor '" + t.name + "' shape/value mismatch");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (double v : t.values) {
      if (t.dtype == DType::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.bytes();
}

inline std::vector<StoredTensor> decode_tensors(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != "AVSM") throw FormatError("bad magic (expected AVSM)", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.u32();
  if (version != kAvsmVersion) throw FormatError("unsupported version " + std::to_string(version), version_at);
  const auto count = r.u32();
  std::vector<StoredTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const std::size_t start = r.offset();
    t.name = r.raw(r.u16());
    if (!seen.insert(t.name).second) throw FormatError("duplicate tensor name '" + t.name + "'", start);
    const std::size_t dtype_at = r.offset();
    const auto code = r.u8();
    if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
    t.dtype = static_cast<DType>(code);
    const auto rank = r.u8();
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    std::size_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::size_t dim_at = r.offset();
      const auto d = r.u64();
      if (d != 0 && numel > r.remaining() / d) throw FormatError("dimensions exceed the file size", dim_at);
      numel *= static_cast<std::size_t>(d);
      t.shape.push_back(static_cast<std::size_t>(d));
    }
    if (numel > r.remaining() / width) throw FormatError("truncated values for '" + t.name + "'", r.offset());
    t.values.resize(numel);
    for (auto& v : t.values) v = t.dtype == DType::f32 ? static_cast<double>(r.f32()) : r.f64();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor", r.offset());
  return out;
}

inline void write_tensors(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors) {
  write_file_atomic(path, encode_tensors(tensors));
}

inline std::vector<StoredTensor> read_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_file(path));
}

template <Scalar T>
void write_tensor(const std::filesystem::path& path, const std::string& name, const Tensor<T>& t) {
  write_tensors(path, {to_stored(name, t)});
}

template <Scalar T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  const auto all = read_tensors(path);
  if (all.size() != 1) throw FormatError("expected exactly one tensor, found " + std::to_string(all.size()), 8);
  return from_stored<T>(all.front());
}

struct WavData {
  std::uint32_t sample_rate = 0;
  std::vector<double> samples;  // in [-1, 1)
};

// RIFF/WAVE with a PCM fmt chunk, 16-bit, one channel.
inline WavData decode_wav(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4) != "RIFF") throw FormatError("not a RIFF file", 0);
  r.u32();
  if (r.raw(4) != "WAVE") throw FormatError("not a WAVE file", 8);
  WavData out;
  bool have_fmt = false;
  while (r.remaining() >= 8) {
    const std::size_t chunk_at = r.offset();
    const std::string id = r.raw(4);
    const std::uint32_t size = r.u32();
    r.need(size);
    if (id == "fmt ") {
      if (size < 16) throw FormatError("fmt chunk too small", chunk_at);
      const auto format = r.u16();
      const auto channels = r.u16();
      out.sample_rate = r.u32();
      r.u32();
      r.u16();
      const auto bits = r.u16();
      r.raw(size - 16);
      if (format != 1 || bits != 16) throw InputError("only 16-bit PCM WAV is supported");
      if (channels != 1) throw InputError("only mono WAV is supported, got " + std::to_string(channels) + " channels");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk", chunk_at);
      out.samples.resize(size / 2);
      for (auto& s : out.samples) s = static_cast<double>(static_cast<std::int16_t>(r.u16())) / 32768.0;
      if (size % 2) r.raw(1);
      return out;
    } else {
      r.raw(size);
    }
    if (size % 2 && r.remaining() > 0) r.raw(1);
  }
  throw FormatError("no data chunk", r.offset());
}

inline WavData read_wav(const std::filesystem::path& path) { return decode_wav(read_file(path)); }

inline std::vector<char> encode_wav(const std::vector<double>& samples, std::uint32_t sample_rate) {
  detail::ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  w.raw("RIFF");
  w.u32(36 + data_bytes);
  w.raw("WAVE");
  w.raw("fmt ");
  w.u32(16);
  w.u16(1);
  w.u16(1);
  w.u32(sample_rate);
  w.u32(sample_rate * 2);
  w.u16(2);
  w.u16(16);
  w.raw("data");
  w.u32(data_bytes);
  for (double s : samples) {
    const double c = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(c)));
  }
  return w.bytes();
}

inline void write_wav(const std::filesystem::path& path, const std::vector<double>& samples, std::uint32_t sample_rate) {
  write_file_atomic(path, encode_wav(samples, sample_rate));
}

}  // namespace siamav
