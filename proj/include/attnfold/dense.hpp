// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <vector>

#include "attnfold/errors.hpp"

namespace attnfold {

// Dense row-major matrix. Double precision is the working type for all
// simulator numerics; other element types are used by the transpose helpers.
template <typename T>
class Mat {
 public:
  Mat() = default;
  Mat(std::int64_t rows, std::int64_t cols, T fill = T{})
      : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows * cols), fill) {
    assert(rows >= 0 && cols >= 0);
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Mat m(static_cast<std::int64_t>(rows.size()),
          rows.size() ? static_cast<std::int64_t>(rows.begin()->size()) : 0);
    std::int64_t r = 0;
    for (const auto& row : rows) {
      std::int64_t c = 0;
      for (const T& x : row) m(r, c++) = x;
      ++r;
    }
    return m;
  }

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  std::int64_t size() const { return rows_ * cols_; }

  T& operator()(std::int64_t r, std::int64_t c) {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return v_[static_cast<std::size_t>(r * cols_ + c)];
  }
  const T& operator()(std::int64_t r, std::int64_t c) const {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return v_[static_cast<std::size_t>(r * cols_ + c)];
  }

  const T* data() const { return v_.data(); }
  T* data() { return v_.data(); }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<T> v_;
};

using Matrix = Mat<double>;

// c = a (m,k) * b (k,n)
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimensions do not match");
  Matrix c(a.rows(), b.cols());
  for (std::int64_t i = 0; i < a.rows(); ++i)
    for (std::int64_t t = 0; t < a.cols(); ++t) {
      const double av = a(i, t);
      for (std::int64_t j = 0; j < b.cols(); ++j) c(i, j) += av * b(t, j);
    }
  return c;
}

// c = a (m,k) * b^T where b is (n,k). Accumulation order is fixed (t inner)
// so tiled and dense callers produce identical roundings on identical data.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimensions do not match");
  Matrix c(a.rows(), b.rows());
  for (std::int64_t i = 0; i < a.rows(); ++i)
    for (std::int64_t j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < a.cols(); ++t) acc += a(i, t) * b(j, t);
      c(i, j) = acc;
    }
  return c;
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> t(a.cols(), a.rows());
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ValidationError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Deterministic, platform-independent RNG. std:: distributions are
// implementation-defined, which would break byte-identical reports.
struct SplitMix64 {
  std::uint64_t state = 0;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [-1, 1).
  double uniform() {
    const double u = static_cast<double>(next() >> 11) * 0x1.0p-53;  // [0,1)
    return 2.0 * u - 1.0;
  }
};

inline void fill_uniform(Matrix& m, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
}

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace attnfold
