#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "intervae/common.hpp"
#include "intervae/scm.hpp"

namespace intervae {

// Corpus container: length-prefixed binary records, one per instance.
// Header: magic, u32 {d, N, |I|, family}, u64 seed, f64 value list.
// Instance: u64 scm_id, u8 has_edges, obs matrix, u32 block count, then per
// block {u32 value_index, u64 target bitmask, matrix}. Matrices are stored as
// u32 rows, u32 cols, row-major 32-bit floats.

inline constexpr char kCorpusMagic[8] = {'I', 'V', 'A', 'E', 'C', 'R', 'P', '1'};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

inline void write_matrix_f32(std::ofstream& out, const Tensord& m) {
  check(m.rank() == 2, "corpus matrices are rank 2");
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim(0)));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim(1)));
  Tensorf f = m.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

inline Tensord read_matrix_f32(std::ifstream& in) {
  const Index rows = static_cast<Index>(read_pod<std::uint32_t>(in));
  const Index cols = static_cast<Index>(read_pod<std::uint32_t>(in));
  Tensorf f({rows, cols});
  in.read(reinterpret_cast<char*>(f.data.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  return f.cast<double>();
}

}  // namespace detail

inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open corpus for writing: " + path);
  const CorpusConfig& cfg = corpus.config;
  check(cfg.d <= 64, "corpus format carries targets as a 64-bit mask");
  out.write(kCorpusMagic, 8);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.d));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.samples_per_dataset));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.values.size()));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.family));
  detail::write_pod<std::uint64_t>(out, cfg.seed);
  for (double v : cfg.values) detail::write_pod<double>(out, v);

  detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(corpus.instances.size()));
  for (const auto& inst : corpus.instances) {
    detail::write_pod<std::uint64_t>(out, inst.scm_id);
    detail::write_pod<std::uint8_t>(out, inst.has_edges ? 1 : 0);
    detail::write_matrix_f32(out, inst.observational);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(inst.interventional.size()));
    for (const auto& block : inst.interventional) {
      detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(block.query.value_index));
      std::uint64_t mask = 0;
      for (Index j = 0; j < block.query.d(); ++j)
        if (block.query.targets[static_cast<std::size_t>(j)]) mask |= (1ull << j);
      detail::write_pod<std::uint64_t>(out, mask);
      detail::write_matrix_f32(out, block.data);
    }
  }
  if (!out) throw DataError("failed writing corpus: " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCorpusMagic, 8))
    throw DataError("bad corpus magic: " + path);

  Corpus corpus;
  CorpusConfig& cfg = corpus.config;
  cfg.d = static_cast<Index>(detail::read_pod<std::uint32_t>(in));
  cfg.samples_per_dataset = static_cast<Index>(detail::read_pod<std::uint32_t>(in));
  const Index n_values = static_cast<Index>(detail::read_pod<std::uint32_t>(in));
  cfg.family = static_cast<NoiseFamily>(detail::read_pod<std::uint32_t>(in));
  cfg.seed = detail::read_pod<std::uint64_t>(in);
  cfg.values.resize(static_cast<std::size_t>(n_values));
  for (double& v : cfg.values) v = detail::read_pod<double>(in);

  const std::uint64_t count = detail::read_pod<std::uint64_t>(in);
  cfg.count = static_cast<Index>(count);
  corpus.instances.resize(count);
  for (auto& inst : corpus.instances) {
    inst.scm_id = detail::read_pod<std::uint64_t>(in);
    inst.has_edges = detail::read_pod<std::uint8_t>(in) != 0;
    inst.observational = detail::read_matrix_f32(in);
    const std::uint32_t k = detail::read_pod<std::uint32_t>(in);
    inst.interventional.resize(k);
    for (auto& block : inst.interventional) {
      block.query.value_index = static_cast<Index>(detail::read_pod<std::uint32_t>(in));
      const std::uint64_t mask = detail::read_pod<std::uint64_t>(in);
      block.query.targets.assign(static_cast<std::size_t>(cfg.d), 0);
      for (Index j = 0; j < cfg.d; ++j)
        if (mask & (1ull << j)) block.query.targets[static_cast<std::size_t>(j)] = 1;
      block.data = detail::read_matrix_f32(in);
    }
  }
  if (!in) throw DataError("truncated corpus: " + path);
  return corpus;
}

// Split membership travels beside the binary as a small JSON manifest.
inline void save_split(const std::string& path, const Corpus& corpus) {
  nlohmann::json j;
  j["train"] = corpus.train_indices;
  j["test"] = corpus.test_indices;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open split manifest for writing: " + path);
  out << j.dump(2) << "\n";
}

inline void load_split(const std::string& path, Corpus& corpus) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split manifest: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  corpus.train_indices = j.at("train").get<std::vector<Index>>();
  corpus.test_indices = j.at("test").get<std::vector<Index>>();
  for (Index i : corpus.train_indices)
    check(i >= 0 && i < static_cast<Index>(corpus.instances.size()), "split index out of range");
  for (Index i : corpus.test_indices)
    check(i >= 0 && i < static_cast<Index>(corpus.instances.size()), "split index out of range");
}

}  // namespace intervae
