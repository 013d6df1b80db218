#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "intervae/common.hpp"
#include "intervae/params.hpp"

namespace intervae {

// Checkpoint layout: 8-byte magic, u32 header length, JSON header (metadata
// plus the entry table), then the raw little-endian float64 parameter block.

inline constexpr char kCheckpointMagic[8] = {'I', 'V', 'A', 'E', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const nlohmann::json& metadata) {
  nlohmann::json header;
  header["metadata"] = metadata;
  header["entries"] = nlohmann::json::array();
  for (const auto& e : store.entries())
    header["entries"].push_back({{"name", e.name}, {"shape", e.shape}});
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(store.values().data()),
            static_cast<std::streamsize>(store.size() * sizeof(double)));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

namespace detail {
inline nlohmann::json read_checkpoint_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw DataError("bad checkpoint magic: " + path);
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw DataError("truncated checkpoint header: " + path);
  return nlohmann::json::parse(hs);
}
}  // namespace detail

// Loads values into `store`, which must already have the same entry layout
// (same names, shapes, order) — i.e. be built from the same model config.
inline nlohmann::json load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  nlohmann::json header = detail::read_checkpoint_header(in, path);

  const auto& ents = header.at("entries");
  check(ents.size() == store.entries().size(), "checkpoint entry count mismatch");
  for (std::size_t i = 0; i < ents.size(); ++i) {
    const auto& e = store.entries()[i];
    check(ents[i].at("name").get<std::string>() == e.name,
          "checkpoint entry name mismatch: " + e.name);
    check(ents[i].at("shape").get<std::vector<Index>>() == e.shape,
          "checkpoint entry shape mismatch: " + e.name);
  }
  in.read(reinterpret_cast<char*>(store.values_mut().data()),
          static_cast<std::streamsize>(store.size() * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint values: " + path);
  return header.at("metadata");
}

// Reads only the metadata header (for eval/report tooling).
inline nlohmann::json read_checkpoint_metadata(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  return detail::read_checkpoint_header(in, path).at("metadata");
}

}  // namespace intervae
