#pragma once

// Context compression into a fixed-size orthogonal memory.
//
// A basis B (r x d, orthonormal rows) turns a context X (n x d) into
//
//   H = mean over rows t of B x_t          (r x 1)
//   compressed = row i of B scaled by H_i  (r x d)
//
// Because H is a running mean, the same memory can be built one token at a
// time: keep the running sum of B x_t and the count, divide on read. That
// recurrence is exact, not an approximation, and the equivalence is tested.

#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo {

// Carrier for a basis produced by orthogonal_basis. frozen means the matrix
// is treated as a constant during training; training it is possible but
// nothing re-orthonormalizes it, so drift degrades the compression (see
// README notes).
struct OrthogonalBasis {
  Tensor2D b;  // r x d, orthonormal rows
  bool frozen = true;

  long num_bases() const { return b.rows(); }
  long dim() const { return b.cols(); }

  // Max deviation of B B^T from the identity.
  double orthonormality_error() const {
    Tensor2D gram = matmul(b, transpose(b));
    return max_abs_diff(gram, Tensor2D::eye(b.rows()));
  }
};

inline OrthogonalBasis make_basis(long r, long d, std::uint64_t seed) {
  return OrthogonalBasis{orthogonal_basis(r, d, seed), true};
}

// ---------------------------------------------------------------------------
// one-shot compression

template <class T>
Mat<T> compress(const Mat<T>& x, const Mat<T>& basis) {
  if (x.rows() < 1) throw DataError("compress: empty context");
  if (x.cols() != basis.cols())
    throw DimError("compress: context " + x.shape_str() + " vs basis " + basis.shape_str());
  // H = B * colmean(x); one projected row at a time keeps the summation order
  // identical to the recurrent path.
  Mat<T> h(basis.rows(), 1);
  for (long t = 0; t < x.rows(); ++t) {
    const T* xt = x.row(t);
    for (long i = 0; i < basis.rows(); ++i) {
      const T* bi = basis.row(i);
      T dot = T(0);
      for (long j = 0; j < basis.cols(); ++j) dot += bi[j] * xt[j];
      h(i, 0) += dot;
    }
  }
  const T inv = T(1) / static_cast<T>(x.rows());
  for (long i = 0; i < basis.rows(); ++i) h(i, 0) *= inv;
  return row_scale(basis, h);
}

inline Tensor2D compress(const Tensor2D& x, const OrthogonalBasis& basis) {
  return compress<double>(x, basis.b);
}

// ---------------------------------------------------------------------------
// recurrent state: running sum of projected rows plus a count. Footprint is
// r values and one counter no matter how much context has been absorbed.

template <class T>
struct OrthoMemoryStateT {
  Mat<T> running_sum;  // r x 1
  long long count = 0;

  OrthoMemoryStateT() = default;
  explicit OrthoMemoryStateT(long r) : running_sum(r, 1) {
    if (r < 1) throw DimError("OrthoMemoryState: need r >= 1, got " + std::to_string(r));
  }

  long num_bases() const { return running_sum.rows(); }

  // Absorb one row (a pointer into caller storage, d entries).
  void update(const Mat<T>& basis, const T* x_row, long d) {
    if (basis.rows() != running_sum.rows() || basis.cols() != d)
      throw DimError("state_update: basis " + basis.shape_str() + " vs state r=" +
                     std::to_string(running_sum.rows()) + ", d=" + std::to_string(d));
    for (long i = 0; i < basis.rows(); ++i) {
      const T* bi = basis.row(i);
      T dot = T(0);
      for (long j = 0; j < d; ++j) dot += bi[j] * x_row[j];
      running_sum(i, 0) += dot;
    }
    ++count;
  }

  // Absorb a block of rows, in row order; identical to updating one by one.
  // An empty block is a no-op.
  void update_block(const Mat<T>& basis, const Mat<T>& block) {
    for (long t = 0; t < block.rows(); ++t) update(basis, block.row(t), block.cols());
  }

  // Materialize the compressed memory, or nothing if no context has been
  // absorbed yet. Callers must branch on the empty case.
  std::optional<Mat<T>> read(const Mat<T>& basis) const {
    if (count == 0) return std::nullopt;
    if (basis.rows() != running_sum.rows())
      throw DimError("state_read: basis " + basis.shape_str() + " vs state r=" +
                     std::to_string(running_sum.rows()));
    Mat<T> h(running_sum.rows(), 1);
    const T inv = T(1) / static_cast<T>(count);
    for (long i = 0; i < h.rows(); ++i) h(i, 0) = running_sum(i, 0) * inv;
    return row_scale(basis, h);
  }

  // Fixed-width byte image: count then the running sum. Size is independent
  // of how many rows have been absorbed.
  void serialize(std::vector<std::uint8_t>& out) const {
    const std::int64_t c = count;
    const std::uint8_t* p = reinterpret_cast<const std::uint8_t*>(&c);
    out.insert(out.end(), p, p + sizeof(c));
    const std::uint8_t* q = reinterpret_cast<const std::uint8_t*>(running_sum.data());
    out.insert(out.end(), q, q + running_sum.size() * sizeof(T));
  }

  size_t serialized_size() const {
    return sizeof(std::int64_t) + running_sum.size() * sizeof(T);
  }
};

using OrthoMemoryState = OrthoMemoryStateT<double>;

inline void state_update(OrthoMemoryState& st, const OrthogonalBasis& basis,
                         const Tensor2D& x_row) {
  if (x_row.rows() != 1)
    throw DimError("state_update: expected a single row, got " + x_row.shape_str());
  st.update(basis.b, x_row.row(0), x_row.cols());
}

inline void state_update_block(OrthoMemoryState& st, const OrthogonalBasis& basis,
                               const Tensor2D& block) {
  st.update_block(basis.b, block);
}

inline std::optional<Tensor2D> state_read(const OrthoMemoryState& st,
                                          const OrthogonalBasis& basis) {
  return st.read(basis.b);
}

// ---------------------------------------------------------------------------
// attention over a compressed memory: softmax(q mem^T * scale) mem.
// q is k x d (any number of query rows), mem is r x d.

template <class T>
Mat<T> attend_memory(const Mat<T>& q, const Mat<T>& mem, T scale_factor) {
  if (mem.rows() < 1) throw ContractError("attend_memory: empty memory");
  if (q.cols() != mem.cols())
    throw DimError("attend_memory: query " + q.shape_str() + " vs memory " + mem.shape_str());
  Mat<T> scores = matmul(q, transpose(mem));
  if (scale_factor != T(1)) scores = scale(scores, scale_factor);
  Mat<T> weights = softmax_rows(scores);
  return matmul(weights, mem);
}

// Default logit scale for a given key width.
inline double attn_scale(long d, bool use_scale) {
  return use_scale ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
}

}  // namespace lavo
