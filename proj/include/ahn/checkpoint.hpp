#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "ahn/io.hpp"
#include "ahn/model.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

// Single-file binary snapshot: magic, version, architecture hash, embedded
// config text, free-form extra text (trainer state), then named arrays with
// raw little-endian payloads. Arrays keep an ahn_owned flag so the memory
// module can be spliced onto a matching base model.
inline constexpr char kCkptMagic[8] = {'A', 'H', 'N', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline constexpr std::uint8_t kArrAhnOwned = 1;
inline constexpr std::uint8_t kArrOptimizer = 2;

template <typename S>
struct CheckpointData {
  std::uint64_t arch_hash = 0;
  std::string config_text;
  std::string extra_text;
  struct Arr {
    std::string name;
    Mat<S> mat;
    std::uint8_t flags = 0;
  };
  std::vector<Arr> arrays;

  const Arr* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void put_raw(std::string& out, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take_raw(const std::string& in, std::size_t& off) {
  if (off + sizeof(T) > in.size()) throw FormatError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

inline std::string take_bytes(const std::string& in, std::size_t& off, std::size_t n) {
  if (off + n > in.size()) throw FormatError("checkpoint: truncated file");
  std::string s = in.substr(off, n);
  off += n;
  return s;
}

}  // namespace detail

template <typename S>
void save_checkpoint_file(const std::filesystem::path& path,
                          const CheckpointData<S>& data) {
  std::string out;
  out.append(kCkptMagic, sizeof(kCkptMagic));
  detail::put_raw(out, kCkptVersion);
  detail::put_raw(out, data.arch_hash);
  detail::put_raw(out, static_cast<std::uint32_t>(sizeof(S)));
  detail::put_raw(out, static_cast<std::uint64_t>(data.config_text.size()));
  out += data.config_text;
  detail::put_raw(out, static_cast<std::uint64_t>(data.extra_text.size()));
  out += data.extra_text;
  detail::put_raw(out, static_cast<std::uint32_t>(data.arrays.size()));
  for (const auto& a : data.arrays) {
    detail::put_raw(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_raw(out, a.flags);
    detail::put_raw(out, static_cast<std::uint64_t>(a.mat.rows()));
    detail::put_raw(out, static_cast<std::uint64_t>(a.mat.cols()));
    const std::size_t bytes = static_cast<std::size_t>(a.mat.size()) * sizeof(S);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    if (bytes > 0) std::memcpy(out.data() + at, a.mat.data(), bytes);
  }
  atomic_write_file(path, out);
}

template <typename S>
CheckpointData<S> load_checkpoint_file(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  std::size_t off = 0;
  if (in.size() < sizeof(kCkptMagic) ||
      std::memcmp(in.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw FormatError("checkpoint: bad magic in " + path.string());
  off = sizeof(kCkptMagic);
  const auto version = detail::take_raw<std::uint32_t>(in, off);
  if (version != kCkptVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) +
                      " unsupported");
  CheckpointData<S> data;
  data.arch_hash = detail::take_raw<std::uint64_t>(in, off);
  const auto width = detail::take_raw<std::uint32_t>(in, off);
  if (width != sizeof(S))
    throw FormatError("checkpoint: scalar width " + std::to_string(width) +
                      " does not match requested " + std::to_string(sizeof(S)));
  const auto cfg_len = detail::take_raw<std::uint64_t>(in, off);
  data.config_text = detail::take_bytes(in, off, static_cast<std::size_t>(cfg_len));
  const auto extra_len = detail::take_raw<std::uint64_t>(in, off);
  data.extra_text = detail::take_bytes(in, off, static_cast<std::size_t>(extra_len));
  const auto n_arrays = detail::take_raw<std::uint32_t>(in, off);
  data.arrays.reserve(n_arrays);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    typename CheckpointData<S>::Arr a;
    const auto name_len = detail::take_raw<std::uint32_t>(in, off);
    a.name = detail::take_bytes(in, off, name_len);
    a.flags = detail::take_raw<std::uint8_t>(in, off);
    const auto rows = detail::take_raw<std::uint64_t>(in, off);
    const auto cols = detail::take_raw<std::uint64_t>(in, off);
    a.mat.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const std::size_t bytes = static_cast<std::size_t>(a.mat.size()) * sizeof(S);
    const std::string payload = detail::take_bytes(in, off, bytes);
    if (bytes > 0) std::memcpy(a.mat.data(), payload.data(), bytes);
    data.arrays.push_back(std::move(a));
  }
  if (off != in.size()) throw FormatError("checkpoint: trailing bytes in " + path.string());
  return data;
}

template <typename S>
CheckpointData<S> snapshot_model(Model<S>& model, std::string extra_text = "") {
  CheckpointData<S> data;
  data.arch_hash = model.config().arch_hash();
  data.config_text = model.config().to_text();
  data.extra_text = std::move(extra_text);
  for (const auto& a : model.arrays())
    data.arrays.push_back({a.name, *a.mat,
                           static_cast<std::uint8_t>(a.ahn_owned ? kArrAhnOwned : 0)});
  return data;
}

template <typename S>
void save_model(Model<S>& model, const std::filesystem::path& path,
                std::string extra_text = "") {
  save_checkpoint_file(path, snapshot_model(model, std::move(extra_text)));
}

// Loads parameters into an already-built model after an architecture-hash
// check. ahn_only splices just the memory-module arrays, leaving the rest of
// the model untouched.
template <typename S>
void load_model(Model<S>& model, const CheckpointData<S>& data,
                bool ahn_only = false) {
  if (data.arch_hash != model.config().arch_hash())
    throw FormatError("checkpoint: architecture hash mismatch");
  for (auto& a : model.arrays()) {
    if (ahn_only && !a.ahn_owned) continue;
    const auto* src = data.find(a.name);
    if (src == nullptr)
      throw FormatError("checkpoint: missing array " + a.name);
    if (src->mat.rows() != a.mat->rows() || src->mat.cols() != a.mat->cols())
      throw FormatError("checkpoint: shape mismatch for " + a.name);
    *a.mat = src->mat;
  }
}

template <typename S>
void load_model(Model<S>& model, const std::filesystem::path& path,
                bool ahn_only = false) {
  load_model(model, load_checkpoint_file<S>(path), ahn_only);
}

// Builds the model from the config text embedded in the file.
template <typename S>
Model<S> load_model_new(const std::filesystem::path& path) {
  const CheckpointData<S> data = load_checkpoint_file<S>(path);
  Model<S> model(ModelConfig::from_text(data.config_text));
  load_model(model, data, false);
  return model;
}

}  // namespace ahn
