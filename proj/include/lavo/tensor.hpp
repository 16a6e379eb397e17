#pragma once

// Dense row-major matrices plus the small set of numeric kernels everything
// else is built from. All routines are pure (inputs untouched, fresh output)
// and deterministic: one build, one seed, one answer, bitwise.
//
// double is the working precision for correctness and gradients; float
// instantiations exist for the benchmark path only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "lavo/error.hpp"

#if defined(LAVO_HAVE_EIGEN)
#include <Eigen/Core>
#endif

namespace lavo {

template <class T>
class Mat {
 public:
  Mat() = default;
  Mat(long rows, long cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0)
      throw DimError("Mat: negative dimensions " + std::to_string(rows) + "x" +
                     std::to_string(cols));
    data_.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), T(0));
  }

  static Mat filled(long rows, long cols, T v) {
    Mat m(rows, cols);
    std::fill(m.data_.begin(), m.data_.end(), v);
    return m;
  }

  static Mat eye(long n) {
    Mat m(n, n);
    for (long i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  // Row-major literal, handy in tests: Mat<double>::of(2, 2, {1, 2, 3, 4}).
  static Mat of(long rows, long cols, std::initializer_list<T> vals) {
    Mat m(rows, cols);
    if (static_cast<long>(vals.size()) != rows * cols)
      throw DimError("Mat::of: " + std::to_string(vals.size()) +
                     " values for shape " + m.shape_str());
    std::copy(vals.begin(), vals.end(), m.data_.begin());
    return m;
  }

  long rows() const { return rows_; }
  long cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* row(long i) { return data_.data() + static_cast<size_t>(i) * cols_; }
  const T* row(long i) const { return data_.data() + static_cast<size_t>(i) * cols_; }

  T& operator()(long i, long j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
  T operator()(long i, long j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  long rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

using Tensor2D = Mat<double>;

// Attention masks: nonzero marks an entry as blocked (treated as -inf score).
using Mask = Mat<std::uint8_t>;

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimError(msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops

template <class T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> out(a.cols(), a.rows());
  for (long i = 0; i < a.rows(); ++i)
    for (long j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
  detail::require(a.same_shape(b), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Mat<T> out(a.rows(), a.cols());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <class T>
Mat<T> sub(const Mat<T>& a, const Mat<T>& b) {
  detail::require(a.same_shape(b), "sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Mat<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

template <class T>
Mat<T> scale(const Mat<T>& a, T c) {
  Mat<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  return out;
}

// out[i, :] = a[i, :] * h[i]; h must be rows x 1.
template <class T>
Mat<T> row_scale(const Mat<T>& a, const Mat<T>& h) {
  detail::require(h.cols() == 1 && h.rows() == a.rows(),
                  "row_scale: scaling vector " + h.shape_str() + " does not fit " + a.shape_str());
  Mat<T> out(a.rows(), a.cols());
  for (long i = 0; i < a.rows(); ++i) {
    const T hi = h(i, 0);
    const T* src = a.row(i);
    T* dst = out.row(i);
    for (long j = 0; j < a.cols(); ++j) dst[j] = src[j] * hi;
  }
  return out;
}

template <class T>
Mat<T> sum_rows(const Mat<T>& a) {
  detail::require(a.rows() >= 1, "sum_rows: empty input");
  Mat<T> out(1, a.cols());
  for (long i = 0; i < a.rows(); ++i) {
    const T* src = a.row(i);
    for (long j = 0; j < a.cols(); ++j) out(0, j) += src[j];
  }
  return out;
}

template <class T>
Mat<T> mean_rows(const Mat<T>& a) {
  Mat<T> out = sum_rows(a);
  const T inv = T(1) / static_cast<T>(a.rows());
  for (long j = 0; j < a.cols(); ++j) out(0, j) *= inv;
  return out;
}

template <class T>
Mat<T> copy_rows(const Mat<T>& a, long r0, long n) {
  detail::require(r0 >= 0 && n >= 0 && r0 + n <= a.rows(),
                  "copy_rows: range [" + std::to_string(r0) + ", " + std::to_string(r0 + n) +
                      ") out of " + a.shape_str());
  Mat<T> out(n, a.cols());
  for (long i = 0; i < n; ++i)
    std::copy(a.row(r0 + i), a.row(r0 + i) + a.cols(), out.row(i));
  return out;
}

template <class T>
Mat<T> copy_cols(const Mat<T>& a, long c0, long n) {
  detail::require(c0 >= 0 && n >= 0 && c0 + n <= a.cols(),
                  "copy_cols: range [" + std::to_string(c0) + ", " + std::to_string(c0 + n) +
                      ") out of " + a.shape_str());
  Mat<T> out(a.rows(), n);
  for (long i = 0; i < a.rows(); ++i)
    std::copy(a.row(i) + c0, a.row(i) + c0 + n, out.row(i));
  return out;
}

template <class T>
void paste_rows(Mat<T>& dst, const Mat<T>& src, long r0) {
  detail::require(src.cols() == dst.cols() && r0 >= 0 && r0 + src.rows() <= dst.rows(),
                  "paste_rows: " + src.shape_str() + " at row " + std::to_string(r0) +
                      " into " + dst.shape_str());
  for (long i = 0; i < src.rows(); ++i)
    std::copy(src.row(i), src.row(i) + src.cols(), dst.row(r0 + i));
}

template <class T>
void paste_cols(Mat<T>& dst, const Mat<T>& src, long c0) {
  detail::require(src.rows() == dst.rows() && c0 >= 0 && c0 + src.cols() <= dst.cols(),
                  "paste_cols: " + src.shape_str() + " at col " + std::to_string(c0) +
                      " into " + dst.shape_str());
  for (long i = 0; i < src.rows(); ++i)
    std::copy(src.row(i), src.row(i) + src.cols(), dst.row(i) + c0);
}

template <class T>
T max_abs(const Mat<T>& a) {
  T m = T(0);
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i]));
  return m;
}

template <class T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  detail::require(a.same_shape(b),
                  "max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  T m = T(0);
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

template <class T>
bool all_finite(const Mat<T>& a) {
  for (size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(static_cast<double>(a.data()[i]))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// matmul

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  detail::require(a.cols() == b.rows(),
                  "matmul: inner dimensions differ: " + a.shape_str() + " * " + b.shape_str());
  Mat<T> out(a.rows(), b.cols());
#if defined(LAVO_HAVE_EIGEN)
  using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const EMat> am(a.data(), a.rows(), a.cols());
  Eigen::Map<const EMat> bm(b.data(), b.rows(), b.cols());
  Eigen::Map<EMat> om(out.data(), out.rows(), out.cols());
  om.noalias() = am * bm;
#else
  const long m = a.rows(), k = a.cols(), n = b.cols();
  for (long i = 0; i < m; ++i) {
    T* ci = out.row(i);
    const T* ai = a.row(i);
    for (long p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b.row(p);
      for (long j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
#endif
  return out;
}

// ---------------------------------------------------------------------------
// softmax over rows, with optional additive bias and blocking mask.
//
// The row maximum (over live entries, bias included) is subtracted before
// exponentiation, so large scores cannot overflow. Masked entries come out
// exactly zero. A row with nothing live is an error, not a NaN.

template <class T>
Mat<T> softmax_rows(const Mat<T>& scores, const Mat<T>* bias = nullptr,
                    const Mask* mask = nullptr) {
  if (bias)
    detail::require(bias->same_shape(scores), "softmax_rows: bias shape " + bias->shape_str() +
                                                  " vs scores " + scores.shape_str());
  if (mask)
    detail::require(mask->rows() == scores.rows() && mask->cols() == scores.cols(),
                    "softmax_rows: mask shape " + mask->shape_str() + " vs scores " +
                        scores.shape_str());
  Mat<T> out(scores.rows(), scores.cols());
  std::vector<T> z(static_cast<size_t>(scores.cols()));
  for (long i = 0; i < scores.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (long j = 0; j < scores.cols(); ++j) {
      if (mask && (*mask)(i, j)) continue;
      z[j] = scores(i, j) + (bias ? (*bias)(i, j) : T(0));
      mx = std::max(mx, z[j]);
      any = true;
    }
    if (!any)
      throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                               " has every entry masked");
    T denom = T(0);
    for (long j = 0; j < scores.cols(); ++j) {
      if (mask && (*mask)(i, j)) {
        out(i, j) = T(0);
        continue;
      }
      const T e = std::exp(z[j] - mx);
      out(i, j) = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (long j = 0; j < scores.cols(); ++j) out(i, j) *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// RngState: splitmix64-expanded seed driving xoshiro256++. Uniform doubles
// take the top 53 bits; gaussians come from a Box-Muller pair (the spare is
// cached). The exact stream is part of this library's interface: the same
// seed must reproduce the same draws on every platform, which is why none of
// the <random> distributions are used here.

class RngState {
 public:
  explicit RngState(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 lands in (0, 1] so the log stays finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_double();
    const double m = std::sqrt(-2.0 * std::log(u1));
    const double a = kTwoPi * u2;
    spare_ = m * std::sin(a);
    have_spare_ = true;
    return m * std::cos(a);
  }

  // Derives an independent stream from the original seed and a stream id;
  // the parent's position does not matter.
  RngState fork(std::uint64_t stream) const {
    std::uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
    return RngState(splitmix64(x));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static constexpr double kTwoPi = 6.283185307179586476925286766559;

  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

template <class T>
Mat<T> gaussian_matrix(RngState& rng, long rows, long cols) {
  Mat<T> out(rows, cols);
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<T>(rng.next_gaussian());
  return out;
}

// ---------------------------------------------------------------------------
// orthogonal_basis: r orthonormal rows in dimension d, from a Householder QR
// of a seeded gaussian draw. The R diagonal is forced positive afterwards,
// which pins down the factorization; together with the fixed draw order this
// makes the basis a pure function of (r, d, seed).

inline Tensor2D orthogonal_basis(long r, long d, std::uint64_t seed) {
  if (r < 1 || d < 1)
    throw DimError("orthogonal_basis: need r >= 1 and d >= 1, got r=" + std::to_string(r) +
                   " d=" + std::to_string(d));
  if (r > d)
    throw DimError("orthogonal_basis: cannot fit " + std::to_string(r) +
                   " orthonormal rows in dimension " + std::to_string(d));

  RngState rng(seed);
  Tensor2D g = gaussian_matrix<double>(rng, d, r);  // tall, QR gives a thin Q

  std::vector<double> rdiag(static_cast<size_t>(r));
  for (long k = 0; k < r; ++k) {
    double norm = 0.0;
    for (long i = k; i < d; ++i) norm += g(i, k) * g(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0)
      throw DataError("orthogonal_basis: rank-deficient draw at column " + std::to_string(k));
    const double alpha = g(k, k) >= 0.0 ? -norm : norm;
    rdiag[static_cast<size_t>(k)] = alpha;
    g(k, k) -= alpha;  // reflector vector now lives in column k, rows k..d-1
    double vtv = 0.0;
    for (long i = k; i < d; ++i) vtv += g(i, k) * g(i, k);
    for (long j = k + 1; j < r; ++j) {
      double dot = 0.0;
      for (long i = k; i < d; ++i) dot += g(i, k) * g(i, j);
      const double f = 2.0 * dot / vtv;
      for (long i = k; i < d; ++i) g(i, j) -= f * g(i, k);
    }
  }

  // Accumulate the thin Q by applying reflectors to I(d, r), last first.
  Tensor2D q(d, r);
  for (long k = 0; k < r; ++k) q(k, k) = 1.0;
  for (long k = r - 1; k >= 0; --k) {
    double vtv = 0.0;
    for (long i = k; i < d; ++i) vtv += g(i, k) * g(i, k);
    for (long j = 0; j < r; ++j) {
      double dot = 0.0;
      for (long i = k; i < d; ++i) dot += g(i, k) * q(i, j);
      const double f = 2.0 * dot / vtv;
      for (long i = k; i < d; ++i) q(i, j) -= f * g(i, k);
    }
  }

  for (long k = 0; k < r; ++k)
    if (rdiag[static_cast<size_t>(k)] < 0.0)
      for (long i = 0; i < d; ++i) q(i, k) = -q(i, k);

  Tensor2D b(r, d);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < d; ++j) b(i, j) = q(j, i);
  return b;
}

template <class T>
Mat<T> cast_mat(const Tensor2D& a) {
  Mat<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = static_cast<T>(a.data()[i]);
  return out;
}

}  // namespace lavo
