#pragma once

// Versioned binary container shared by checkpoints, feature caches and
// exported integer models:
//
//   magic      4 bytes
//   version    u16 little-endian
//   hdr_len    u32 little-endian
//   header     hdr_len bytes of JSON text; "tensors" lists every blob
//   blobs      little-endian payloads in the order declared in the header
//
// Byte layout is independent of host endianness.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fxqat/error.hpp"

namespace fxqat {

using json = nlohmann::json;

enum class DType { F32, I8, I16, I32 };

inline std::string to_string(DType d) {
  switch (d) {
    case DType::F32: return "f32";
    case DType::I8: return "i8";
    case DType::I16: return "i16";
    case DType::I32: return "i32";
  }
  return "f32";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "i8") return DType::I8;
  if (s == "i16") return DType::I16;
  if (s == "i32") return DType::I32;
  fail(ErrorCode::FormatError, "unknown dtype '" + s + "'");
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::I8: return 1;
    case DType::I16: return 2;
    case DType::I32: return 4;
  }
  return 4;
}

// Smallest integer dtype able to hold signed codes of `bits` width.
inline DType int_dtype_for_bits(int bits) {
  if (bits <= 8) return DType::I8;
  if (bits <= 16) return DType::I16;
  return DType::I32;
}

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

}  // namespace detail

struct TensorEntry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<int> shape;
  std::size_t offset = 0;  // relative to the start of the blob section
  std::size_t count = 0;
};

class ContainerWriter {
 public:
  ContainerWriter(std::array<char, 4> magic, std::uint16_t version) : magic_(magic), version_(version) {}

  void add_f32(const std::string& name, std::vector<int> shape, std::span<const float> values) {
    begin(name, DType::F32, std::move(shape), values.size());
    for (float f : values) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_le(blobs_, bits, 4);
    }
  }

  void add_int(const std::string& name, DType dtype, std::vector<int> shape, std::span<const std::int32_t> values) {
    require(dtype != DType::F32, ErrorCode::FormatError, "add_int with float dtype");
    begin(name, dtype, std::move(shape), values.size());
    const std::size_t width = dtype_size(dtype);
    const std::int64_t lo = -(std::int64_t{1} << (8 * width - 1));
    const std::int64_t hi = (std::int64_t{1} << (8 * width - 1)) - 1;
    for (std::int32_t v : values) {
      require(v >= lo && v <= hi, ErrorCode::FormatError, "value does not fit tensor dtype in '" + name + "'");
      detail::put_le(blobs_, static_cast<std::uint64_t>(static_cast<std::int64_t>(v)), width);
    }
  }

  std::vector<std::uint8_t> finish(json header) const {
    json tensors = json::array();
    for (const auto& e : entries_) {
      tensors.push_back({{"name", e.name},
                         {"dtype", to_string(e.dtype)},
                         {"shape", e.shape},
                         {"offset", e.offset},
                         {"count", e.count}});
    }
    header["tensors"] = tensors;
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(magic_.begin(), magic_.end());
    detail::put_le(out, version_, 2);
    detail::put_le(out, text.size(), 4);
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blobs_.begin(), blobs_.end());
    return out;
  }

  void write_file(const std::string& path, json header) const {
    const auto bytes = finish(std::move(header));
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), ErrorCode::IoError, "write failed for '" + path + "'");
  }

 private:
  TensorEntry& begin(const std::string& name, DType dtype, std::vector<int> shape, std::size_t count) {
    std::size_t expected = 1;
    for (int d : shape) expected *= static_cast<std::size_t>(d);
    require(expected == count, ErrorCode::ShapeError, "tensor '" + name + "' shape/count mismatch");
    entries_.push_back(TensorEntry{name, dtype, std::move(shape), blobs_.size(), count});
    return entries_.back();
  }

  std::array<char, 4> magic_;
  std::uint16_t version_;
  std::vector<TensorEntry> entries_;
  std::vector<std::uint8_t> blobs_;
};

class ContainerReader {
 public:
  ContainerReader(std::vector<std::uint8_t> bytes, std::array<char, 4> magic) : bytes_(std::move(bytes)) {
    require(bytes_.size() >= 10, ErrorCode::FormatError, "container truncated");
    require(std::equal(magic.begin(), magic.end(), bytes_.begin(),
                       [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; }),
            ErrorCode::FormatError, "bad magic bytes");
    version_ = static_cast<std::uint16_t>(detail::get_le(bytes_.data() + 4, 2));
    const std::size_t hlen = detail::get_le(bytes_.data() + 6, 4);
    require(bytes_.size() >= 10 + hlen, ErrorCode::FormatError, "container header truncated");
    try {
      header_ = json::parse(bytes_.begin() + 10, bytes_.begin() + 10 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
      fail(ErrorCode::FormatError, std::string("container header is not valid JSON: ") + e.what());
    }
    blob_start_ = 10 + hlen;
    require(header_.contains("tensors") && header_["tensors"].is_array(), ErrorCode::FormatError,
            "container header has no tensor table");
    for (const auto& t : header_["tensors"]) {
      TensorEntry e;
      try {
        e.name = t.at("name").get<std::string>();
        e.dtype = parse_dtype(t.at("dtype").get<std::string>());
        e.shape = t.at("shape").get<std::vector<int>>();
        e.offset = t.at("offset").get<std::size_t>();
        e.count = t.at("count").get<std::size_t>();
      } catch (const json::exception& ex) {
        fail(ErrorCode::FormatError, std::string("malformed tensor entry: ") + ex.what());
      }
      require(blob_start_ + e.offset + e.count * dtype_size(e.dtype) <= bytes_.size(), ErrorCode::FormatError,
              "tensor '" + e.name + "' runs past end of file");
      entries_.push_back(std::move(e));
    }
  }

  static ContainerReader from_file(const std::string& path, std::array<char, 4> magic) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return ContainerReader(std::move(bytes), magic);
  }

  std::uint16_t version() const { return version_; }
  const json& header() const { return header_; }

  const TensorEntry& entry(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    fail(ErrorCode::FormatError, "tensor '" + name + "' missing from container");
  }

  std::vector<float> f32(const std::string& name) const {
    const auto& e = entry(name);
    require(e.dtype == DType::F32, ErrorCode::FormatError, "tensor '" + name + "' is not f32");
    std::vector<float> out(e.count);
    const std::uint8_t* p = bytes_.data() + blob_start_ + e.offset;
    for (std::size_t i = 0; i < e.count; ++i) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(p + 4 * i, 4));
      std::memcpy(&out[i], &bits, sizeof bits);
    }
    return out;
  }

  std::vector<std::int32_t> ints(const std::string& name) const {
    const auto& e = entry(name);
    require(e.dtype != DType::F32, ErrorCode::FormatError, "tensor '" + name + "' is not an integer tensor");
    const std::size_t width = dtype_size(e.dtype);
    std::vector<std::int32_t> out(e.count);
    const std::uint8_t* p = bytes_.data() + blob_start_ + e.offset;
    for (std::size_t i = 0; i < e.count; ++i) {
      std::uint64_t raw = detail::get_le(p + width * i, width);
      // sign-extend
      const std::uint64_t sign = std::uint64_t{1} << (8 * width - 1);
      std::int64_t v = static_cast<std::int64_t>(raw ^ sign) - static_cast<std::int64_t>(sign);
      out[i] = static_cast<std::int32_t>(v);
    }
    return out;
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint16_t version_ = 0;
  json header_;
  std::size_t blob_start_ = 0;
  std::vector<TensorEntry> entries_;
};

}  // namespace fxqat
