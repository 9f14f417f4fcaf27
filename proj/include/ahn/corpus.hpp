#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ahn/common.hpp"

namespace ahn {

struct CorpusShard {
  std::filesystem::path path;
  std::uint64_t bytes = 0;
  std::uint64_t hash = 0;
  std::string split;
};

// Byte-level corpus laid out as <root>/<split>/<files>. Splits are loaded
// whole into memory; shards within a split concatenate in sorted-path order.
class Corpus {
 public:
  static Corpus open(const std::filesystem::path& root);

  bool has_split(const std::string& split) const;
  const std::vector<CorpusShard>& shards(const std::string& split) const;
  std::uint64_t total_bytes(const std::string& split) const;

  // len consecutive bytes from a seeded random offset, values in [0, 255]
  std::vector<int> sample(const std::string& split, Rng& rng, int len) const;
  std::vector<int> slice(const std::string& split, std::uint64_t offset, int len) const;

 private:
  struct SplitData {
    std::vector<CorpusShard> shards;
    std::string data;
  };
  const SplitData& split_at(const std::string& split) const;
  std::map<std::string, SplitData> splits_;
};

// Deterministically partitions source files into train/heldout by seeded
// shuffle and copies them under out_root. Files, not spans, switch splits, so
// no byte sequence can appear in both.
void build_corpus_dir(const std::vector<std::filesystem::path>& sources,
                      const std::filesystem::path& out_root, double heldout_frac,
                      std::uint64_t seed);

// recursive scan for regular files with the given extension, skipping paths
// that contain any of the excluded substrings; sorted for determinism
std::vector<std::filesystem::path> collect_files(
    const std::filesystem::path& root, const std::string& extension,
    const std::vector<std::string>& exclude_substrings);

}  // namespace ahn
