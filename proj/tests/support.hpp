#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lilora/backbone.hpp"
#include "lilora/linalg.hpp"

namespace lilora::fixtures {

/// Triple-loop product, independent of the library's loop order.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < a.cols(); ++l) s += a(i, l) * b(l, j);
      c(i, j) = s;
    }
  return c;
}

/// Small frozen random backbone.
inline Backbone tiny_backbone(std::uint64_t seed, std::vector<std::size_t> widths) {
  Rng rng(seed);
  std::vector<Linear> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers.push_back({gaussian_matrix(rng, widths[i + 1], widths[i], 0.5), gaussian_matrix(rng, widths[i + 1], 1, 0.1)});
  return Backbone::from_layers(std::move(layers), true);
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("lilora_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  const auto b = io::read_file(p);
  return std::string(b.begin(), b.end());
}

}  // namespace lilora::fixtures
