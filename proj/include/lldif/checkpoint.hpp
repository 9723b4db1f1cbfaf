#pragma once

#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "lldif/array_file.hpp"
#include "lldif/nn.hpp"
#include "lldif/tensor.hpp"

namespace lldif {

// Checkpoint container: a JSON header describing stage, config fingerprint,
// and the named arrays, followed by the raw float64 payloads in header order.

inline constexpr char kCheckpointMagic[8] = {'L', 'L', 'D', 'C', '0', '0', '0', '1'};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, nlohmann::json meta,
                            const ParamRegistry& reg) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, p] : reg.items())
    arr.push_back({{"name", name}, {"shape", p->value.shape()}});
  meta["arrays"] = std::move(arr);

  std::ofstream os(path, std::ios::binary);
  check(static_cast<bool>(os), "checkpoint: cannot open for writing: " + path);
  os.write(kCheckpointMagic, 8);
  std::string header = meta.dump();
  write_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, p] : reg.items())
    os.write(reinterpret_cast<const char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  check(static_cast<bool>(os), "checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(static_cast<bool>(is), "checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  check(is.gcount() == 8 && std::equal(magic, magic + 8, kCheckpointMagic),
        "checkpoint: bad magic in " + path);
  uint64_t hlen = read_u64(is);
  check(hlen > 0 && hlen < (1u << 24), "checkpoint: implausible header length");
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  check(is.gcount() == static_cast<std::streamsize>(hlen), "checkpoint: truncated header");

  Checkpoint ck;
  ck.meta = nlohmann::json::parse(header);
  check(ck.meta.contains("arrays"), "checkpoint: header lists no arrays");
  for (const auto& entry : ck.meta.at("arrays")) {
    std::string name = entry.at("name");
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    check(is.gcount() == static_cast<std::streamsize>(t.numel() * sizeof(double)),
          "checkpoint: truncated payload for " + name);
    ck.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

/// Copies checkpoint arrays into registry parameters by exact name. Every
/// registry entry must be present with a matching shape.
inline void load_into(const Checkpoint& ck, const ParamRegistry& reg) {
  for (const auto& [name, p] : reg.items()) {
    const Tensor* src = ck.find(name);
    check(src != nullptr, "checkpoint: missing array: " + name);
    check(src->same_shape(p->value), "checkpoint: shape mismatch for " + name + ": have " +
                                         src->shape_str() + ", want " + p->value.shape_str());
    std::copy(src->data(), src->data() + src->numel(), p->value.data());
  }
}

}  // namespace lldif
