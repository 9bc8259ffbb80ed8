#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "signforge/detector.hpp"
#include "signforge/tensor.hpp"

namespace signforge::cli {

// Flat little-endian binary formats with bit-exact round trips:
//   model "MDET": magic, u32 version, u32 S/B/C/input_size/arch,
//                 f64 score and NMS thresholds, B anchor pairs, u64 scalar
//                 count, weight tensors in declaration order.
//   delta "PERT": magic, u32 version, u32 H/W/C, f64 payload.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  put_u64(out, std::bit_cast<std::uint64_t>(d));
}

struct Reader {
  std::string bytes;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n)
      throw std::runtime_error(path + ": truncated while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
};

inline Reader open_reader(const std::string& path, const char* magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(std::string(magic) + ": cannot open " + path);
  Reader r;
  r.path = path;
  r.bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  r.need(4, "magic");
  if (r.bytes.compare(0, 4, magic) != 0)
    throw std::runtime_error(path + ": bad magic, expected " + magic);
  r.pos = 4;
  return r;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

inline void write_model(const det::DetectorModel& m, const std::string& path) {
  std::string out = "MDET";
  detail::put_u32(out, 1);  // version
  detail::put_u32(out, static_cast<std::uint32_t>(m.config.grid));
  detail::put_u32(out, static_cast<std::uint32_t>(m.config.boxes));
  detail::put_u32(out, static_cast<std::uint32_t>(m.config.classes));
  detail::put_u32(out, static_cast<std::uint32_t>(m.config.input_size));
  detail::put_u32(out, static_cast<std::uint32_t>(m.arch));
  detail::put_f64(out, m.config.score_threshold);
  detail::put_f64(out, m.config.nms_iou_threshold);
  for (const auto& a : m.config.anchors) {
    detail::put_f64(out, a[0]);
    detail::put_f64(out, a[1]);
  }
  detail::put_u64(out, m.weight_scalars());
  for (const auto& t : m.kernels)
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(out, t[i]);
  for (const auto& t : m.biases)
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(out, t[i]);
  detail::write_file(path, out);
}

inline det::DetectorModel read_model(const std::string& path) {
  detail::Reader r = detail::open_reader(path, "MDET");
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw std::runtime_error(path + ": unsupported model version " +
                             std::to_string(version));
  det::DetectorConfig cfg;
  cfg.grid = r.u32("grid");
  cfg.boxes = r.u32("boxes");
  cfg.classes = r.u32("classes");
  cfg.input_size = r.u32("input_size");
  auto arch_raw = r.u32("arch");
  if (arch_raw > 1) throw std::runtime_error(path + ": unknown architecture tag");
  cfg.score_threshold = r.f64("score_threshold");
  cfg.nms_iou_threshold = r.f64("nms_iou_threshold");
  cfg.anchors.clear();
  for (std::size_t b = 0; b < cfg.boxes; ++b) {
    double aw = r.f64("anchor w");
    double ah = r.f64("anchor h");
    cfg.anchors.push_back({aw, ah});
  }
  det::DetectorModel m = det::random_init(cfg, static_cast<det::Arch>(arch_raw), 0);
  std::uint64_t count = r.u64("weight count");
  if (count != m.weight_scalars())
    throw std::runtime_error(path + ": weight count " + std::to_string(count) +
                             " does not match architecture (" +
                             std::to_string(m.weight_scalars()) + ")");
  for (auto& t : m.kernels)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64("kernel");
  for (auto& t : m.biases)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64("bias");
  if (r.pos != r.bytes.size())
    throw std::runtime_error(path + ": trailing bytes after weights");
  return m;
}

inline void write_delta(const Tensor& delta, const std::string& path) {
  if (delta.rank() != 3)
    throw std::invalid_argument("write_delta: delta must be HxWxC");
  std::string out = "PERT";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(delta.dim(0)));
  detail::put_u32(out, static_cast<std::uint32_t>(delta.dim(1)));
  detail::put_u32(out, static_cast<std::uint32_t>(delta.dim(2)));
  for (std::size_t i = 0; i < delta.size(); ++i) detail::put_f64(out, delta[i]);
  detail::write_file(path, out);
}

inline Tensor read_delta(const std::string& path) {
  detail::Reader r = detail::open_reader(path, "PERT");
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw std::runtime_error(path + ": unsupported delta version " +
                             std::to_string(version));
  std::size_t h = r.u32("height"), w = r.u32("width"), c = r.u32("channels");
  Tensor t({h, w, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64("payload");
  if (r.pos != r.bytes.size())
    throw std::runtime_error(path + ": trailing bytes after payload");
  return t;
}

}  // namespace signforge::cli
