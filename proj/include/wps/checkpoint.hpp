#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wps/common.hpp"
#include "wps/model.hpp"

namespace wps {

// Checkpoint layout (little-endian):
//   magic     8 bytes "WPSCKPT1"
//   version   u32
//   step      u64
//   epoch     u32
//   config    u32 length + UTF-8 JSON (the fully resolved run config)
//   directory u32 count, then per tensor:
//               u16 name length + name, u32 rank, u32 dims[rank],
//               u64 element offset into the payload, u64 element count
//   payload   raw f32
// Tensors are "student.*", "teacher.*" and "momentum.*" over the ParamSet
// names, always in ParamSet iteration order.

constexpr char kCkptMagic[8] = {'W', 'P', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCkptVersion = 1;

struct Checkpoint {
  uint64_t step = 0;
  uint32_t epoch = 0;
  std::string config_json;
  ParamSet<float> student, teacher, momentum;
};

namespace detail {

template <typename T>
void ck_put(std::string& buf, const T& v) {
  const size_t off = buf.size();
  buf.resize(off + sizeof(T));
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T ck_take(const std::vector<char>& buf, size_t& off, const std::string& path) {
  if (off + sizeof(T) > buf.size())
    throw IoError("load_checkpoint: " + path + " truncated at byte " + std::to_string(off) +
                  " (need " + std::to_string(sizeof(T)) + " more)");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, uint64_t step, uint32_t epoch,
                            const std::string& config_json, const ParamSet<float>& student,
                            const ParamSet<float>& teacher, const ParamSet<float>& momentum) {
  struct Entry {
    std::string name;
    const Tensor<float>* t;
  };
  std::vector<Entry> entries;
  auto collect = [&](const char* prefix, const ParamSet<float>& p) {
    p.for_each([&](std::string_view name, const Tensor<float>& t) {
      entries.push_back({std::string(prefix) + std::string(name), &t});
    });
  };
  collect("student.", student);
  collect("teacher.", teacher);
  collect("momentum.", momentum);

  std::string buf;
  buf.append(kCkptMagic, sizeof(kCkptMagic));
  detail::ck_put(buf, kCkptVersion);
  detail::ck_put(buf, step);
  detail::ck_put(buf, epoch);
  detail::ck_put(buf, static_cast<uint32_t>(config_json.size()));
  buf.append(config_json);
  detail::ck_put(buf, static_cast<uint32_t>(entries.size()));
  uint64_t offset = 0;
  for (const Entry& e : entries) {
    detail::ck_put(buf, static_cast<uint16_t>(e.name.size()));
    buf.append(e.name);
    detail::ck_put(buf, static_cast<uint32_t>(e.t->rank()));
    for (int d = 0; d < e.t->rank(); ++d)
      detail::ck_put(buf, static_cast<uint32_t>(e.t->dim(d)));
    detail::ck_put(buf, offset);
    detail::ck_put(buf, static_cast<uint64_t>(e.t->size()));
    offset += static_cast<uint64_t>(e.t->size());
  }
  for (const Entry& e : entries) {
    const size_t bytes = static_cast<size_t>(e.t->size()) * sizeof(float);
    const size_t off = buf.size();
    buf.resize(off + bytes);
    std::memcpy(buf.data() + off, e.t->data(), bytes);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  const size_t actual = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> buf(actual);
  in.read(buf.data(), static_cast<std::streamsize>(actual));
  if (!in) throw IoError("load_checkpoint: short read from " + path);

  if (actual < sizeof(kCkptMagic) || std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw IoError("load_checkpoint: " + path + ": magic mismatch, not a WPSCKPT1 file");
  size_t off = sizeof(kCkptMagic);
  const uint32_t version = detail::ck_take<uint32_t>(buf, off, path);
  if (version != kCkptVersion)
    throw IoError("load_checkpoint: " + path + ": unsupported version " +
                  std::to_string(version));

  Checkpoint ck;
  ck.step = detail::ck_take<uint64_t>(buf, off, path);
  ck.epoch = detail::ck_take<uint32_t>(buf, off, path);
  const uint32_t cfg_len = detail::ck_take<uint32_t>(buf, off, path);
  if (off + cfg_len > buf.size())
    throw IoError("load_checkpoint: " + path + " truncated inside config block");
  ck.config_json.assign(buf.data() + off, cfg_len);
  off += cfg_len;

  struct Meta {
    std::string name;
    std::vector<uint32_t> dims;
    uint64_t offset, count;
  };
  const uint32_t n_tensors = detail::ck_take<uint32_t>(buf, off, path);
  std::vector<Meta> metas(n_tensors);
  uint64_t total = 0;
  for (Meta& m : metas) {
    const uint16_t name_len = detail::ck_take<uint16_t>(buf, off, path);
    if (off + name_len > buf.size())
      throw IoError("load_checkpoint: " + path + " truncated inside tensor directory");
    m.name.assign(buf.data() + off, name_len);
    off += name_len;
    const uint32_t rank = detail::ck_take<uint32_t>(buf, off, path);
    if (rank < 1 || rank > 4)
      throw IoError("load_checkpoint: " + path + ": tensor " + m.name + " has bad rank " +
                    std::to_string(rank));
    uint64_t prod = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      m.dims.push_back(detail::ck_take<uint32_t>(buf, off, path));
      prod *= m.dims.back();
    }
    m.offset = detail::ck_take<uint64_t>(buf, off, path);
    m.count = detail::ck_take<uint64_t>(buf, off, path);
    if (m.count != prod)
      throw IoError("load_checkpoint: " + path + ": tensor " + m.name +
                    " directory count disagrees with dims");
    total = std::max(total, m.offset + m.count);
  }
  const size_t expected = off + static_cast<size_t>(total) * sizeof(float);
  if (actual != expected)
    throw IoError("load_checkpoint: " + path + " truncated or padded: expected " +
                  std::to_string(expected) + " bytes, got " + std::to_string(actual));

  // The directory must cover exactly the three ParamSets; classes come from
  // the decoder head shape.
  uint32_t num_classes = 0;
  for (const Meta& m : metas)
    if (m.name == "student.dec.conv2.b") num_classes = m.dims.at(0);
  if (num_classes < 2)
    throw IoError("load_checkpoint: " + path + ": missing student.dec.conv2.b tensor");

  ck.student = ParamSet<float>::zeros(static_cast<int>(num_classes));
  ck.teacher = ParamSet<float>::zeros(static_cast<int>(num_classes));
  ck.momentum = ParamSet<float>::zeros(static_cast<int>(num_classes));
  size_t used = 0;
  auto fill = [&](const char* prefix, ParamSet<float>& p) {
    p.for_each([&](std::string_view name, Tensor<float>& t) {
      const std::string full = std::string(prefix) + std::string(name);
      const Meta* meta = nullptr;
      for (const Meta& m : metas)
        if (m.name == full) meta = &m;
      if (!meta) throw IoError("load_checkpoint: " + path + ": missing tensor " + full);
      if (meta->count != static_cast<uint64_t>(t.size()))
        throw IoError("load_checkpoint: " + path + ": tensor " + full + " has " +
                      std::to_string(meta->count) + " elements, expected " +
                      std::to_string(t.size()));
      std::memcpy(t.data(), buf.data() + off + meta->offset * sizeof(float),
                  static_cast<size_t>(meta->count) * sizeof(float));
      ++used;
    });
  };
  fill("student.", ck.student);
  fill("teacher.", ck.teacher);
  fill("momentum.", ck.momentum);
  if (used != metas.size())
    throw IoError("load_checkpoint: " + path + ": directory holds " +
                  std::to_string(metas.size()) + " tensors, expected " + std::to_string(used));
  return ck;
}

}  // namespace wps
