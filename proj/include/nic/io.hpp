// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nic/data.hpp"
#include "nic/error.hpp"

namespace nic {

namespace io {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<char>& bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> bytes_;
};

/// Little-endian byte source over an in-memory buffer. Reads past the end
/// raise a truncation error.
class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw FormatError(FormatError::Kind::kTruncated, what_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const char> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span<const char>(text.data(), text.size()));
}

}  // namespace io

inline constexpr char kFeatureMagic[4] = {'N', 'I', 'C', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

// Feature file: "NICF", u32 version, u32 N, u32 D_f, u32 R, u32 D_a, then N
// records of u64 image_id, D_f f32, R*D_a f32. All little-endian.

inline std::vector<char> encode_features(const FeatureSet& fs) {
  io::ByteWriter w;
  w.raw(std::string_view(kFeatureMagic, 4));
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(fs.records.size()));
  w.u32(fs.feature_dim);
  w.u32(fs.region_count);
  w.u32(fs.region_dim);
  const std::size_t nreg = std::size_t{fs.region_count} * fs.region_dim;
  for (const auto& r : fs.records) {
    if (r.global.size() != fs.feature_dim || r.regions.size() != nreg) {
      throw DimensionError("feature record " + std::to_string(r.image_id) + " does not match set dims");
    }
    w.u64(r.image_id);
    for (float v : r.global) w.f32(v);
    for (float v : r.regions) w.f32(v);
  }
  return w.bytes();
}

inline FeatureSet decode_features(std::span<const char> bytes, const std::string& what = "feature file") {
  using K = FormatError::Kind;
  io::ByteReader rd(bytes, what);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw FormatError(K::kBadMagic, what + ": not a NICF feature file (bad magic)");
  }
  rd.raw(4);
  const std::uint32_t version = rd.u32();
  if (version != kFeatureVersion) {
    throw FormatError(K::kBadVersion, what + ": unsupported version " + std::to_string(version));
  }
  FeatureSet fs;
  const std::uint32_t n = rd.u32();
  fs.feature_dim = rd.u32();
  fs.region_count = rd.u32();
  fs.region_dim = rd.u32();
  if (fs.feature_dim == 0 || fs.region_count == 0 || fs.region_dim == 0) {
    throw FormatError(K::kDimMismatch, what + ": zero dimension in header");
  }
  const std::size_t nreg = std::size_t{fs.region_count} * fs.region_dim;
  const std::size_t record_bytes = 8 + 4 * (fs.feature_dim + nreg);
  const std::size_t expected = std::size_t{n} * record_bytes;
  if (rd.remaining() < expected) {
    throw FormatError(K::kTruncated, what + ": header promises " + std::to_string(expected) +
                                         " payload bytes, file has " + std::to_string(rd.remaining()));
  }
  if (rd.remaining() > expected) {
    throw FormatError(K::kDimMismatch, what + ": " + std::to_string(rd.remaining() - expected) +
                                           " bytes beyond the payload the header describes");
  }
  fs.records.resize(n);
  for (auto& r : fs.records) {
    r.image_id = rd.u64();
    r.global.resize(fs.feature_dim);
    for (auto& v : r.global) v = rd.f32();
    r.regions.resize(nreg);
    for (auto& v : r.regions) v = rd.f32();
    auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(r.global.begin(), r.global.end(), finite) ||
        !std::all_of(r.regions.begin(), r.regions.end(), finite)) {
      throw FormatError(K::kInvalidValue, what + ": non-finite value in image " + std::to_string(r.image_id));
    }
  }
  return fs;
}

inline void write_features(const std::filesystem::path& path, const FeatureSet& fs) {
  io::write_file(path, encode_features(fs));
}

inline FeatureSet read_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path), path.string());
}

// Caption file: one JSON object per line, {"image_id": n, "captions": [...]}.

inline std::string encode_captions_jsonl(std::span<const CaptionRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j{{"image_id", r.image_id}, {"captions", r.captions}};
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

inline std::vector<CaptionRecord> decode_captions_jsonl(std::string_view text, const std::string& what = "caption file") {
  std::vector<CaptionRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CaptionRecord r;
      r.image_id = j.at("image_id").get<std::uint64_t>();
      r.captions = j.at("captions").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::kSyntax, what + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_captions(const std::filesystem::path& path, std::span<const CaptionRecord> records) {
  io::write_text(path, encode_captions_jsonl(records));
}

inline std::vector<CaptionRecord> read_captions(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_captions_jsonl(std::string_view(bytes.data(), bytes.size()), path.string());
}

// Vocabulary file: {"tokens": [...], "min_count": k}.

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  return nlohmann::json{{"tokens", v.tokens()}, {"min_count", v.min_count()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  try {
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("min_count").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kSyntax, std::string("vocabulary: ") + e.what());
  }
}

inline void write_vocab(const std::filesystem::path& path, const Vocabulary& v) {
  io::write_text(path, vocab_to_json(v).dump() + "\n");
}

inline Vocabulary read_vocab(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kSyntax, path.string() + ": " + e.what());
  }
  return vocab_from_json(j);
}

}  // namespace nic
