#pragma once

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "lldif/tensor.hpp"

namespace lldif {

// Flat array container: 8-byte magic, little-endian uint64 header length, a
// JSON header {"dtype","shape"}, then the raw float64 payload. Small enough
// to parse from any language in a few lines.

inline constexpr char kArrayMagic[8] = {'L', 'L', 'D', 'I', 'F', 'A', 'R', 'R'};

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void save_array(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "array: cannot open " + path + " for writing");
  nlohmann::json header{{"dtype", "float64"}, {"shape", t.shape()}};
  std::string h = header.dump();
  os.write(kArrayMagic, 8);
  write_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
  check(os.good(), "array: write failed for " + path);
}

inline Tensor load_array(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "array: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  check(is.good() && std::memcmp(magic, kArrayMagic, 8) == 0,
        "array: bad magic in " + path);
  uint64_t hlen = read_u64(is);
  check(is.good() && hlen < (1u << 20), "array: corrupt header length in " + path);
  std::string h(hlen, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(h);
  check(header.at("dtype") == "float64", "array: unsupported dtype in " + path);
  std::vector<int> shape = header.at("shape").get<std::vector<int>>();
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  check(is.good(), "array: truncated payload in " + path);
  return t;
}

}  // namespace lldif
