#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wps/common.hpp"
#include "wps/datagen.hpp"

namespace wps {

// Shard layout (all little-endian):
//   magic   8 bytes  "WPSSHARD"
//   version u32
//   count   u32
//   classes u32
//   height  u32
//   width   u32
//   records count x { seed u64, weather u32, severity f32,
//                     clean 3*H*W f32, degraded 3*H*W f32, label H*W u8 }
// The file length is exactly derivable from the header.

static_assert(std::endian::native == std::endian::little,
              "shard format is little-endian; big-endian hosts are unsupported");

constexpr char kShardMagic[8] = {'W', 'P', 'S', 'S', 'H', 'A', 'R', 'D'};
constexpr uint32_t kShardVersion = 1;
constexpr size_t kShardHeaderBytes = 8 + 5 * sizeof(uint32_t);

inline size_t shard_record_bytes(int h, int w) {
  const size_t plane = static_cast<size_t>(h) * static_cast<size_t>(w);
  return sizeof(uint64_t) + sizeof(uint32_t) + sizeof(float) + 2 * 3 * plane * sizeof(float) +
         plane;
}

namespace detail {

template <typename T>
void put(std::string& buf, const T& v) {
  const size_t off = buf.size();
  buf.resize(off + sizeof(T));
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T take(const std::vector<char>& buf, size_t& off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline void write_shard(const std::vector<Scene>& scenes, const std::string& path) {
  check(!scenes.empty(), "write_shard: scene list is empty");
  const int h = scenes.front().clean.dim(1);
  const int w = scenes.front().clean.dim(2);
  const uint32_t classes = scenes.front().num_classes;
  for (const Scene& s : scenes) {
    check(s.clean.dim(1) == h && s.clean.dim(2) == w && s.degraded.same_shape(s.clean) &&
              s.label.h == h && s.label.w == w && s.num_classes == classes,
          "write_shard: scenes disagree on (C,H,W)");
  }

  std::string buf;
  buf.reserve(kShardHeaderBytes + scenes.size() * shard_record_bytes(h, w));
  buf.append(kShardMagic, sizeof(kShardMagic));
  detail::put(buf, kShardVersion);
  detail::put(buf, static_cast<uint32_t>(scenes.size()));
  detail::put(buf, classes);
  detail::put(buf, static_cast<uint32_t>(h));
  detail::put(buf, static_cast<uint32_t>(w));
  for (const Scene& s : scenes) {
    detail::put(buf, s.seed);
    detail::put(buf, static_cast<uint32_t>(s.weather));
    detail::put(buf, s.severity);
    const size_t plane_bytes = static_cast<size_t>(3) * h * w * sizeof(float);
    size_t off = buf.size();
    buf.resize(off + 2 * plane_bytes + static_cast<size_t>(h) * w);
    std::memcpy(buf.data() + off, s.clean.data(), plane_bytes);
    std::memcpy(buf.data() + off + plane_bytes, s.degraded.data(), plane_bytes);
    std::memcpy(buf.data() + off + 2 * plane_bytes, s.label.v.data(),
                static_cast<size_t>(h) * w);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_shard: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write_shard: short write to " + path);
}

inline std::vector<Scene> read_shard(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("read_shard: cannot open " + path);
  const size_t actual = static_cast<size_t>(in.tellg());
  in.seekg(0);
  if (actual < kShardHeaderBytes)
    throw IoError("read_shard: " + path + " truncated: header needs " +
                  std::to_string(kShardHeaderBytes) + " bytes, file has " +
                  std::to_string(actual));

  std::vector<char> buf(actual);
  in.read(buf.data(), static_cast<std::streamsize>(actual));
  if (!in) throw IoError("read_shard: short read from " + path);

  if (std::memcmp(buf.data(), kShardMagic, sizeof(kShardMagic)) != 0)
    throw IoError("read_shard: " + path + ": magic mismatch, not a WPSSHARD file");
  size_t off = sizeof(kShardMagic);
  const uint32_t version = detail::take<uint32_t>(buf, off);
  if (version != kShardVersion)
    throw IoError("read_shard: " + path + ": unsupported version " + std::to_string(version) +
                  " (expected " + std::to_string(kShardVersion) + ")");
  const uint32_t count = detail::take<uint32_t>(buf, off);
  const uint32_t classes = detail::take<uint32_t>(buf, off);
  const uint32_t h = detail::take<uint32_t>(buf, off);
  const uint32_t w = detail::take<uint32_t>(buf, off);
  if (count == 0 || classes < 2 || h < 1 || w < 1)
    throw IoError("read_shard: " + path + ": malformed header");

  const size_t expected =
      kShardHeaderBytes + static_cast<size_t>(count) * shard_record_bytes(static_cast<int>(h),
                                                                          static_cast<int>(w));
  if (actual != expected)
    throw IoError("read_shard: " + path + " truncated or padded at byte " +
                  std::to_string(actual) + ": expected " + std::to_string(expected) +
                  " bytes, got " + std::to_string(actual));

  std::vector<Scene> scenes(count);
  const size_t plane_bytes = static_cast<size_t>(3) * h * w * sizeof(float);
  for (uint32_t i = 0; i < count; ++i) {
    Scene& s = scenes[i];
    s.seed = detail::take<uint64_t>(buf, off);
    const uint32_t weather = detail::take<uint32_t>(buf, off);
    if (weather > 2)
      throw IoError("read_shard: " + path + ": record " + std::to_string(i) +
                    " has invalid weather id " + std::to_string(weather));
    s.weather = static_cast<WeatherKind>(weather);
    s.severity = detail::take<float>(buf, off);
    s.num_classes = classes;
    s.clean = Tensor<float>(3, static_cast<int>(h), static_cast<int>(w));
    s.degraded = Tensor<float>(3, static_cast<int>(h), static_cast<int>(w));
    s.label = LabelMask(static_cast<int>(h), static_cast<int>(w));
    std::memcpy(s.clean.data(), buf.data() + off, plane_bytes);
    off += plane_bytes;
    std::memcpy(s.degraded.data(), buf.data() + off, plane_bytes);
    off += plane_bytes;
    std::memcpy(s.label.v.data(), buf.data() + off, static_cast<size_t>(h) * w);
    off += static_cast<size_t>(h) * w;
  }
  return scenes;
}

}  // namespace wps
