#pragma once

// Configuration and raw weight carriers for the attention layer. These live
// apart from the layer implementation so that reference implementations
// (oracles, benchmarks) can share the types without sharing any code path.

#include <cstdint>
#include <string>
#include <vector>

#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo {

struct LavoConfig {
  long d_model = 64;
  long heads = 2;
  long num_bases = 16;  // rows of each per-head memory basis
  long window = 16;     // local attention span
  bool use_epe = true;         // learned relative-position bias in the local path
  bool use_dissection = true;  // window the context; off keeps a plain local path
                               // plus a whole-prefix memory
  bool causal = true;
  bool use_scale = true;  // 1/sqrt(head_dim) on attention logits
  bool train_bases = false;
  std::uint64_t seed = 42;

  long head_dim() const { return d_model / heads; }

  void check() const {
    if (d_model < 1 || heads < 1)
      throw DimError("LavoConfig: d_model and heads must be positive, got d_model=" +
                     std::to_string(d_model) + " heads=" + std::to_string(heads));
    if (d_model % heads != 0)
      throw DimError("LavoConfig: d_model " + std::to_string(d_model) +
                     " not divisible by heads " + std::to_string(heads));
    if (num_bases < 1 || num_bases > d_model / heads)
      throw DimError("LavoConfig: num_bases " + std::to_string(num_bases) +
                     " outside [1, head_dim=" + std::to_string(d_model / heads) + "]");
    if (window < 1)
      throw DimError("LavoConfig: window must be >= 1, got " + std::to_string(window));
  }
};

// Plain matrices, no gradient machinery. The double-precision layer API wraps
// these in Parameters; the benchmark instantiates the float variant directly.
template <class T>
struct LavoWeights {
  Mat<T> w_q, w_k, w_v, w_o;   // d_model x d_model each
  std::vector<Mat<T>> basis;   // per head, num_bases x head_dim, orthonormal rows
  std::vector<Mat<T>> pos;     // per head, (2*window - 1) x 1 relative bias table

  void check(const LavoConfig& cfg) const {
    const long d = cfg.d_model;
    auto square = [&](const Mat<T>& m, const char* which) {
      if (m.rows() != d || m.cols() != d)
        throw DimError(std::string("LavoWeights: ") + which + " is " + m.shape_str() +
                       ", want " + std::to_string(d) + "x" + std::to_string(d));
    };
    square(w_q, "w_q");
    square(w_k, "w_k");
    square(w_v, "w_v");
    square(w_o, "w_o");
    if (static_cast<long>(basis.size()) != cfg.heads ||
        static_cast<long>(pos.size()) != cfg.heads)
      throw DimError("LavoWeights: expected " + std::to_string(cfg.heads) +
                     " per-head basis/pos entries");
    for (long h = 0; h < cfg.heads; ++h) {
      if (basis[h].rows() != cfg.num_bases || basis[h].cols() != cfg.head_dim())
        throw DimError("LavoWeights: basis[" + std::to_string(h) + "] is " +
                       basis[h].shape_str());
      if (pos[h].rows() != 2 * cfg.window - 1 || pos[h].cols() != 1)
        throw DimError("LavoWeights: pos[" + std::to_string(h) + "] is " +
                       pos[h].shape_str() + ", want " + std::to_string(2 * cfg.window - 1) +
                       "x1");
    }
  }
};

template <class T>
LavoWeights<T> cast_weights(const LavoWeights<double>& w) {
  LavoWeights<T> out;
  out.w_q = cast_mat<T>(w.w_q);
  out.w_k = cast_mat<T>(w.w_k);
  out.w_v = cast_mat<T>(w.w_v);
  out.w_o = cast_mat<T>(w.w_o);
  for (const auto& b : w.basis) out.basis.push_back(cast_mat<T>(b));
  for (const auto& p : w.pos) out.pos.push_back(cast_mat<T>(p));
  return out;
}

}  // namespace lavo
