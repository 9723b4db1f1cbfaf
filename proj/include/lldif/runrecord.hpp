#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lldif/tensor.hpp"

namespace lldif {

// Provenance trail: every CLI run appends one JSON line recording what ran,
// with which resolved config, and content hashes of its inputs.

inline std::string sha256_hex(const unsigned char* digest, unsigned len) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "hash: cannot read " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  check(ctx != nullptr && EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1,
        "hash: digest init failed");
  char buf[1 << 16];
  while (in.good()) {
    in.read(buf, sizeof buf);
    std::streamsize got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<size_t>(got));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  return sha256_hex(digest, len);
}

inline std::string sha256_string(const std::string& data) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  check(ctx != nullptr && EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1,
        "hash: digest init failed");
  EVP_DigestUpdate(ctx, data.data(), data.size());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  return sha256_hex(digest, len);
}

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunRecord {
  std::string subcommand;
  nlohmann::json config;
  unsigned long seed = 0;
  std::map<std::string, std::string> input_hashes;  // path -> sha256
  std::vector<std::string> outputs;
  std::string started_at;
  std::string finished_at;

  void hash_input(const std::string& path) { input_hashes[path] = sha256_file(path); }

  nlohmann::json to_json() const {
    return {{"subcommand", subcommand}, {"config", config},
            {"seed", seed},             {"inputs", input_hashes},
            {"outputs", outputs},       {"started_at", started_at},
            {"finished_at", finished_at}};
  }
};

inline void append_run_record(const std::string& path, const RunRecord& rec) {
  std::ofstream out(path, std::ios::app);
  check(out.good(), "run record: cannot open " + path);
  out << rec.to_json().dump() << "\n";
}

}  // namespace lldif
