#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lilora/errors.hpp"

namespace lilora {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix dimensions must be positive, got " + shape_str(rows, cols));
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix dimensions must be positive, got " + shape_str(rows, cols));
    if (data_.size() != rows * cols)
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " + shape_str(rows, cols));
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be non-empty");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  double item() const {
    if (rows_ != 1 || cols_ != 1) throw ShapeError("item() requires a 1x1 matrix, got " + shape());
    return data_[0];
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_str(rows_, cols_); }

  // Bitwise equality (shape and every entry).
  friend bool operator==(const Matrix& a, const Matrix& b) = default;

  static std::string shape_str(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

/// Standard product. Accumulation runs left to right over the inner index,
/// so results are bit-reproducible for fixed inputs.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out(i, 0);
    for (std::size_t l = 0; l < m; ++l) {
      const double av = a(i, l);
      const double* brow = &b(l, 0);
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

inline double frobenius_inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_inner");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double frobenius_norm_sq(const Matrix& a) { return frobenius_inner(a, a); }
inline double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Matrix& a) {
  for (double v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

/// xoshiro256** 1.0 (Blackman & Vigna), state seeded through splitmix64.
/// Pure integer arithmetic, so the uniform stream is identical on every
/// platform. Normals come from the Marsaglia polar method.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
    has_spare_ = false;
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift with rejection.
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  /// Derive an independent child stream; the parent advances by one draw.
  Rng fork() noexcept { return Rng(next_u64()); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// i.i.d. N(0, std^2) entries, filled row-major; consumes rows*cols normals.
inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  if (!(std_dev > 0.0)) throw ShapeError("gaussian_matrix: std must be positive");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = std_dev * rng.normal();
  return m;
}

/// Random orthogonal matrix: Householder QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q (Haar distributed).
inline Matrix random_orthogonal(Rng& rng, std::size_t n) {
  Matrix a = gaussian_matrix(rng, n, n, 1.0);
  Matrix q = Matrix::identity(n);
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += a(i, k) * a(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = a(k, k) > 0 ? -norm : norm;
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = k; i < n; ++i) v[i] = a(i, k);
    v[k] -= alpha;
    double vnorm = 0.0;
    for (std::size_t i = k; i < n; ++i) vnorm += v[i] * v[i];
    if (vnorm == 0.0) continue;
    // a <- H a, q <- q H with H = I - 2 v v^T / (v^T v)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * a(i, j);
      const double f = 2.0 * dot / vnorm;
      for (std::size_t i = k; i < n; ++i) a(i, j) -= f * v[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = k; j < n; ++j) dot += q(i, j) * v[j];
      const double f = 2.0 * dot / vnorm;
      for (std::size_t j = k; j < n; ++j) q(i, j) -= f * v[j];
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    if (a(j, j) < 0)
      for (std::size_t i = 0; i < n; ++i) q(i, j) = -q(i, j);
  return q;
}

}  // namespace lilora
