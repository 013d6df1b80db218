#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "intervae/common.hpp"

namespace intervae {

// Run provenance: every command writes a manifest into its output directory
// recording the command line, seed, and content hashes of its inputs and
// outputs. Hashes cover file contents only — no timestamps — so reruns with
// identical flags produce identical manifests.

inline std::uint64_t fnv1a64(const char* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  char hex[32];
  std::snprintf(hex, sizeof(hex), "fnv1a:%016llx", static_cast<unsigned long long>(h));
  return hex;
}

struct RunManifest {
  std::string command;      // subcommand name
  std::string config;       // config path or preset name ("" if none)
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // path -> hash
  std::vector<std::pair<std::string, std::string>> outputs;  // path -> hash

  void add_input(const std::string& path) { inputs.emplace_back(path, file_content_hash(path)); }
  void add_output(const std::string& path) { outputs.emplace_back(path, file_content_hash(path)); }
};

inline void write_manifest(const std::string& dir, const RunManifest& m) {
  nlohmann::json doc;
  doc["command"] = m.command;
  doc["config"] = m.config;
  doc["seed"] = m.seed;
  doc["inputs"] = nlohmann::json::object();
  for (const auto& [path, hash] : m.inputs) doc["inputs"][path] = hash;
  doc["outputs"] = nlohmann::json::object();
  for (const auto& [path, hash] : m.outputs) doc["outputs"][path] = hash;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw DataError("cannot write manifest in: " + dir);
  out << doc.dump(2) << '\n';
}

}  // namespace intervae
