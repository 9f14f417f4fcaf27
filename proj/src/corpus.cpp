#include "ahn/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "ahn/io.hpp"

namespace ahn {

namespace fs = std::filesystem;

Corpus Corpus::open(const fs::path& root) {
  if (!fs::is_directory(root))
    throw CorpusError("corpus root '" + root.string() + "' is not a directory");
  Corpus c;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::string split = entry.path().filename().string();
    SplitData sd;
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(entry.path()))
      if (f.is_regular_file()) files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      std::string bytes = read_file(p);
      if (bytes.empty()) continue;
      CorpusShard shard;
      shard.path = p;
      shard.bytes = bytes.size();
      shard.hash = fnv1a64(bytes);
      shard.split = split;
      sd.shards.push_back(std::move(shard));
      sd.data += bytes;
    }
    if (!sd.shards.empty()) c.splits_[split] = std::move(sd);
  }
  if (c.splits_.empty())
    throw CorpusError("corpus root '" + root.string() + "' has no split directories");

  std::set<std::uint64_t> seen;
  for (const auto& [split, sd] : c.splits_) {
    for (const auto& shard : sd.shards) {
      if (!seen.insert(shard.hash).second)
        throw CorpusError("shard '" + shard.path.string() +
                          "' duplicates content present in another split");
    }
  }
  return c;
}

bool Corpus::has_split(const std::string& split) const {
  return splits_.count(split) > 0;
}

const Corpus::SplitData& Corpus::split_at(const std::string& split) const {
  auto it = splits_.find(split);
  if (it == splits_.end()) throw CorpusError("corpus has no split '" + split + "'");
  return it->second;
}

const std::vector<CorpusShard>& Corpus::shards(const std::string& split) const {
  return split_at(split).shards;
}

std::uint64_t Corpus::total_bytes(const std::string& split) const {
  return split_at(split).data.size();
}

std::vector<int> Corpus::slice(const std::string& split, std::uint64_t offset,
                               int len) const {
  const SplitData& sd = split_at(split);
  if (len <= 0) throw CorpusError("corpus slice length must be positive");
  if (offset + static_cast<std::uint64_t>(len) > sd.data.size())
    throw CorpusError("corpus slice [" + std::to_string(offset) + ", +" +
                      std::to_string(len) + ") exceeds split of " +
                      std::to_string(sd.data.size()) + " bytes");
  std::vector<int> out(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(sd.data[offset + static_cast<std::uint64_t>(i)]);
  return out;
}

std::vector<int> Corpus::sample(const std::string& split, Rng& rng, int len) const {
  const SplitData& sd = split_at(split);
  if (len <= 0) throw CorpusError("corpus sample length must be positive");
  if (sd.data.size() < static_cast<std::uint64_t>(len))
    throw CorpusError("split '" + split + "' holds " + std::to_string(sd.data.size()) +
                      " bytes, cannot sample " + std::to_string(len));
  const std::uint64_t max_off = sd.data.size() - static_cast<std::uint64_t>(len);
  const std::uint64_t off =
      static_cast<std::uint64_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_off)));
  return slice(split, off, len);
}

void build_corpus_dir(const std::vector<fs::path>& sources, const fs::path& out_root,
                      double heldout_frac, std::uint64_t seed) {
  if (sources.empty()) throw CorpusError("corpus build: no source files");
  if (heldout_frac <= 0.0 || heldout_frac >= 1.0)
    throw CorpusError("corpus build: heldout fraction must be inside (0, 1)");

  std::vector<fs::path> files = sources;
  std::sort(files.begin(), files.end());
  Rng rng = Rng::derive(seed, "corpus_split");
  std::shuffle(files.begin(), files.end(), rng.engine());

  std::uint64_t total = 0;
  std::vector<std::uint64_t> sizes;
  sizes.reserve(files.size());
  for (const auto& p : files) {
    std::uint64_t n = fs::is_regular_file(p) ? fs::file_size(p) : 0;
    sizes.push_back(n);
    total += n;
  }
  if (total == 0) throw CorpusError("corpus build: sources are empty");

  const auto target = static_cast<std::uint64_t>(heldout_frac * static_cast<double>(total));
  fs::create_directories(out_root / "train");
  fs::create_directories(out_root / "heldout");
  std::uint64_t held = 0;
  int index = 0;
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (sizes[i] == 0) continue;
    std::string bytes = read_file(files[i]);
    if (!seen.insert(fnv1a64(bytes)).second) continue;  // drop duplicate contents
    const bool to_heldout = held < target;
    if (to_heldout) held += bytes.size();
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.txt", index++);
    atomic_write_file(out_root / (to_heldout ? "heldout" : "train") / name, bytes);
  }
  if (held == 0) throw CorpusError("corpus build: heldout split came out empty");
}

std::vector<fs::path> collect_files(const fs::path& root, const std::string& extension,
                                    const std::vector<std::string>& exclude_substrings) {
  if (!fs::is_directory(root))
    throw CorpusError("collect_files: '" + root.string() + "' is not a directory");
  std::vector<fs::path> out;
  for (auto it = fs::recursive_directory_iterator(
           root, fs::directory_options::skip_permission_denied);
       it != fs::recursive_directory_iterator(); ++it) {
    if (!it->is_regular_file()) continue;
    const fs::path& p = it->path();
    if (p.extension() != extension) continue;
    const std::string s = p.string();
    bool skip = false;
    for (const auto& ex : exclude_substrings)
      if (s.find(ex) != std::string::npos) {
        skip = true;
        break;
      }
    if (!skip) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace ahn
