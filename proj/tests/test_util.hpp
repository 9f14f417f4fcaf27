#pragma once

#include <filesystem>
#include <string>

#include "ahn/common.hpp"
#include "ahn/tensor.hpp"

namespace ahn_test {

template <typename S>
ahn::Mat<S> randm(ahn::Rng& rng, Eigen::Index r, Eigen::Index c, double stddev = 1.0) {
  ahn::Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("ahn_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ahn_test
