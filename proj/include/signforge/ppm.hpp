#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "signforge/tensor.hpp"

namespace signforge::cli {

// Binary PPM ("P6", maxval 255) image IO. Bytes map to [0,1] via v/255 on
// read and round(v*255) clamped on write, so a round trip moves any
// channel by at most 1/510.

class PpmError : public std::runtime_error {
 public:
  PpmError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

namespace detail {

inline void skip_ppm_space(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    char c = s[pos];
    if (c == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
}

inline unsigned long read_ppm_int(const std::string& s, std::size_t& pos,
                                  const char* what) {
  skip_ppm_space(s, pos);
  std::size_t start = pos;
  unsigned long v = 0;
  while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
    v = v * 10 + static_cast<unsigned long>(s[pos] - '0');
    ++pos;
  }
  if (pos == start) throw PpmError(std::string("expected ") + what, pos);
  return v;
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw PpmError("read_ppm: missing P6 magic in " + path, 0);
  pos = 2;
  unsigned long w = detail::read_ppm_int(bytes, pos, "width");
  unsigned long h = detail::read_ppm_int(bytes, pos, "height");
  unsigned long maxval = detail::read_ppm_int(bytes, pos, "maxval");
  if (w == 0 || h == 0) throw PpmError("read_ppm: zero dimension", pos);
  if (maxval != 255)
    throw PpmError("read_ppm: maxval must be 255, got " + std::to_string(maxval), pos);
  if (pos >= bytes.size() ||
      (bytes[pos] != '\n' && bytes[pos] != ' ' && bytes[pos] != '\t' && bytes[pos] != '\r'))
    throw PpmError("read_ppm: expected whitespace after maxval", pos);
  ++pos;
  std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - pos < need)
    throw PpmError("read_ppm: truncated payload, need " + std::to_string(need) +
                       " bytes, have " + std::to_string(bytes.size() - pos),
                   bytes.size());
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  for (std::size_t i = 0; i < need; ++i)
    img[i] = static_cast<double>(static_cast<unsigned char>(bytes[pos + i])) / 255.0;
  return img;
}

inline void write_ppm(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("write_ppm: image must be HxWx3, got " +
                                shape_string(image.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::string payload(image.size(), '\0');
  for (std::size_t i = 0; i < image.size(); ++i) {
    long v = std::lround(image[i] * 255.0);
    payload[i] = static_cast<char>(static_cast<unsigned char>(std::min(255L, std::max(0L, v))));
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out.good()) throw std::runtime_error("write_ppm: write failed for " + path);
}

// Grayscale convenience for masks: replicate one channel across RGB.
inline void write_ppm_gray(const Tensor& gray, const std::string& path) {
  if (gray.rank() != 2)
    throw std::invalid_argument("write_ppm_gray: expected HxW tensor");
  Tensor rgb({gray.dim(0), gray.dim(1), 3});
  for (std::size_t p = 0; p < gray.size(); ++p)
    for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = gray[p];
  write_ppm(rgb, path);
}

}  // namespace signforge::cli
