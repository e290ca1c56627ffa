#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dfkd/common.hpp"
#include "dfkd/tensor.hpp"

// Checkpoint blob format: a flat set of named sections (float tensors,
// strings, scalars), length-prefixed, with a trailing CRC32 over the whole
// payload. Writes go through a temp file + rename so a crash cannot leave a
// truncated checkpoint in place.

namespace dfkd {

inline std::uint32_t crc32_bytes(const void* data, std::size_t n, std::uint32_t seed = 0) {
  return static_cast<std::uint32_t>(::crc32(seed, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

template <typename T>
std::uint32_t tensor_checksum(const Tensor<T>& t) {
  return crc32_bytes(t.data(), sizeof(T) * static_cast<std::size_t>(t.numel()));
}

class BlobWriter {
 public:
  void add_tensor(const std::string& name, const Tensor<float>& t) {
    begin_section(name, kTensorF32);
    append_u32(static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) append_u32(static_cast<std::uint32_t>(t.dim(i)));
    append_bytes(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
  }

  void add_string(const std::string& name, const std::string& s) {
    begin_section(name, kString);
    append_u64(s.size());
    append_bytes(s.data(), s.size());
  }

  void add_i64(const std::string& name, std::int64_t v) {
    begin_section(name, kI64);
    append_bytes(&v, sizeof(v));
  }

  void add_f64(const std::string& name, double v) {
    begin_section(name, kF64);
    append_bytes(&v, sizeof(v));
  }

  void write(const std::string& path) const {
    std::vector<char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    const std::uint32_t version = kVersion;
    append_raw(out, &version, sizeof(version));
    const std::uint64_t n = buf_.size();
    append_raw(out, &n, sizeof(n));
    out.insert(out.end(), buf_.begin(), buf_.end());
    const std::uint32_t crc = crc32_bytes(buf_.data(), buf_.size());
    append_raw(out, &crc, sizeof(crc));

    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      DFKD_REQUIRE(f.good(), "cannot open " << tmp << " for writing");
      f.write(out.data(), static_cast<std::streamsize>(out.size()));
      DFKD_REQUIRE(f.good(), "short write to " << tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static constexpr std::uint8_t kTensorF32 = 0;
  static constexpr std::uint8_t kString = 1;
  static constexpr std::uint8_t kI64 = 2;
  static constexpr std::uint8_t kF64 = 3;
  static constexpr const char* kMagic = "DFKDBLOB";
  static constexpr std::uint32_t kVersion = 1;

 private:
  static void append_raw(std::vector<char>& v, const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    v.insert(v.end(), c, c + n);
  }
  void append_bytes(const void* p, std::size_t n) { append_raw(buf_, p, n); }
  void append_u32(std::uint32_t v) { append_bytes(&v, sizeof(v)); }
  void append_u64(std::uint64_t v) { append_bytes(&v, sizeof(v)); }
  void begin_section(const std::string& name, std::uint8_t kind) {
    append_u32(static_cast<std::uint32_t>(name.size()));
    append_bytes(name.data(), name.size());
    append_bytes(&kind, 1);
  }

  std::vector<char> buf_;
};

class BlobReader {
 public:
  explicit BlobReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    DFKD_REQUIRE(f.good(), "cannot open checkpoint " << path);
    std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    DFKD_REQUIRE(raw.size() >= 8 + 4 + 8 + 4, "checkpoint " << path << " is truncated");
    DFKD_REQUIRE(std::memcmp(raw.data(), BlobWriter::kMagic, 8) == 0, "checkpoint " << path << ": bad magic");
    std::size_t off = 8;
    std::uint32_t version;
    std::memcpy(&version, raw.data() + off, 4);
    off += 4;
    DFKD_REQUIRE(version == BlobWriter::kVersion,
                 "checkpoint " << path << ": format_version " << version << " unsupported");
    std::uint64_t payload;
    std::memcpy(&payload, raw.data() + off, 8);
    off += 8;
    DFKD_REQUIRE(raw.size() == off + payload + 4, "checkpoint " << path << ": size mismatch");
    std::uint32_t crc_stored;
    std::memcpy(&crc_stored, raw.data() + off + payload, 4);
    DFKD_REQUIRE(crc32_bytes(raw.data() + off, payload) == crc_stored,
                 "checkpoint " << path << ": checksum failure");

    const char* p = raw.data() + off;
    const char* end = p + payload;
    while (p < end) {
      std::uint32_t name_len;
      std::memcpy(&name_len, p, 4);
      p += 4;
      std::string name(p, p + name_len);
      p += name_len;
      std::uint8_t kind = static_cast<std::uint8_t>(*p++);
      Section sec;
      sec.kind = kind;
      if (kind == BlobWriter::kTensorF32) {
        std::uint32_t rank;
        std::memcpy(&rank, p, 4);
        p += 4;
        std::int64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
          std::uint32_t d;
          std::memcpy(&d, p, 4);
          p += 4;
          sec.shape.push_back(static_cast<int>(d));
          numel *= d;
        }
        sec.bytes.assign(p, p + sizeof(float) * numel);
        p += sizeof(float) * numel;
      } else if (kind == BlobWriter::kString) {
        std::uint64_t len;
        std::memcpy(&len, p, 8);
        p += 8;
        sec.bytes.assign(p, p + len);
        p += len;
      } else {
        sec.bytes.assign(p, p + 8);
        p += 8;
      }
      sections_.emplace(std::move(name), std::move(sec));
    }
    DFKD_REQUIRE(p == end, "checkpoint " << path << ": trailing garbage");
  }

  bool has(const std::string& name) const { return sections_.count(name) > 0; }

  Tensor<float> tensor(const std::string& name) const {
    const Section& s = find(name, BlobWriter::kTensorF32);
    Tensor<float> t(s.shape);
    std::memcpy(t.data(), s.bytes.data(), s.bytes.size());
    return t;
  }

  std::string str(const std::string& name) const {
    const Section& s = find(name, BlobWriter::kString);
    return std::string(s.bytes.begin(), s.bytes.end());
  }

  std::int64_t i64(const std::string& name) const {
    const Section& s = find(name, BlobWriter::kI64);
    std::int64_t v;
    std::memcpy(&v, s.bytes.data(), 8);
    return v;
  }

  double f64(const std::string& name) const {
    const Section& s = find(name, BlobWriter::kF64);
    double v;
    std::memcpy(&v, s.bytes.data(), 8);
    return v;
  }

 private:
  struct Section {
    std::uint8_t kind;
    std::vector<int> shape;
    std::vector<char> bytes;
  };

  const Section& find(const std::string& name, std::uint8_t kind) const {
    auto it = sections_.find(name);
    DFKD_REQUIRE(it != sections_.end(), "checkpoint: missing section '" << name << "'");
    DFKD_REQUIRE(it->second.kind == kind, "checkpoint: section '" << name << "' has wrong type");
    return it->second;
  }

  std::map<std::string, Section> sections_;
};

}  // namespace dfkd
