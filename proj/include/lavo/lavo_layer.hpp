#pragma once

// The attention layer itself. One forward pass mixes two features per head:
//
//   F_local  - windowed attention over nearby tokens, optionally with a learned
//              relative-position bias read from a (2w-1)-entry table;
//   F_global - attention over a compressed memory built by projecting earlier
//              window outputs onto a small orthonormal basis and rescaling the
//              basis rows by the running mean of those projections.
//
// The two are averaged; while the memory is still empty (first window of a
// causal pass) the local feature passes through alone. With dissection off the
// local path becomes a plain lookback-w window per token and the memory absorbs
// the raw per-head input up to and including the current token.
//
// Everything here is templated on the scalar so the benchmark can run the same
// code in float; the trainable API below (LavoParams / forward_train) is
// double-only.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

#include "lavo/autodiff.hpp"
#include "lavo/code_memory.hpp"
#include "lavo/config.hpp"
#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo {

// Windowed attention for a block of queries against a block of keys/values.
// q_pos0 / k_pos0 are the absolute positions of the first query and first key
// row; the bias table, when given, is indexed by key_pos - query_pos + w - 1.
// Visibility beyond what the caller encodes in `mask` is not applied here.
template <class T>
Mat<T> local_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                       const Mat<T>* pos, const Mask* mask, long q_pos0,
                       long k_pos0, long window, T scale_factor) {
  if (k.rows() != v.rows())
    throw DimError("local_attention: keys " + k.shape_str() + " vs values " +
                   v.shape_str());
  if (q.cols() != k.cols())
    throw DimError("local_attention: query dim " + q.shape_str() + " vs key dim " +
                   k.shape_str());
  if (pos != nullptr && (pos->rows() != 2 * window - 1 || pos->cols() != 1))
    throw DimError("local_attention: bias table is " + pos->shape_str() + ", want " +
                   std::to_string(2 * window - 1) + "x1");
  Mat<T> scores = matmul(q, transpose(k));
  if (scale_factor != T(1)) scores = scale(scores, scale_factor);
  if (pos == nullptr)
    return matmul(softmax_rows(scores, static_cast<const Mat<T>*>(nullptr), mask), v);
  Mat<T> bias(q.rows(), k.rows());
  for (long i = 0; i < q.rows(); ++i) {
    for (long j = 0; j < k.rows(); ++j) {
      if (mask != nullptr && (*mask)(i, j) != 0) continue;  // never read
      const long idx = (k_pos0 + j) - (q_pos0 + i) + window - 1;
      if (idx < 0 || idx >= 2 * window - 1)
        throw ContractError("local_attention: visible pair at offset " +
                            std::to_string((k_pos0 + j) - (q_pos0 + i)) +
                            " has no bias entry");
      bias(i, j) = (*pos)(idx, 0);
    }
  }
  return matmul(softmax_rows(scores, &bias, mask), v);
}

namespace detail {

// One head's pass over the full sequence. q/k/v/x_head are n x head_dim.
template <class T>
Mat<T> head_forward(const Mat<T>& qh, const Mat<T>& kh, const Mat<T>& vh,
                    const Mat<T>& xh, const Mat<T>& basis, const Mat<T>* pos,
                    const LavoConfig& cfg, T sc) {
  const long n = qh.rows();
  const long w = cfg.window;
  const long dh = cfg.head_dim();
  Mat<T> outh(n, dh);
  if (cfg.use_dissection) {
    // Window-by-window local outputs. Causal queries see the trailing w
    // positions up to themselves; noncausal queries see the w most recent
    // positions of their window (dipping into the previous one only when the
    // final window is short). Both keep the relative offset within
    // [-(w-1), w-1], so one bias table serves the two directions.
    Mat<T> locs(n, dh);
    OrthoMemoryStateT<T> mem(cfg.num_bases);
    for (long s0 = 0; s0 < n; s0 += w) {
      const long e = std::min(n, s0 + w);
      const long k0 = std::max<long>(0, s0 - w);
      Mat<T> qw = copy_rows(qh, s0, e - s0);
      Mat<T> kw = copy_rows(kh, k0, e - k0);
      Mat<T> vw = copy_rows(vh, k0, e - k0);
      Mask msk(e - s0, e - k0);
      if (cfg.causal) {
        for (long i = 0; i < e - s0; ++i) {
          const long qi = s0 + i;
          for (long j = 0; j < e - k0; ++j) {
            const long kj = k0 + j;
            msk(i, j) = (kj > qi || kj < qi - w + 1) ? 1 : 0;
          }
        }
      } else {
        const long lo = std::max(k0, e - w);
        for (long i = 0; i < e - s0; ++i)
          for (long j = 0; j < e - k0; ++j) msk(i, j) = (k0 + j < lo) ? 1 : 0;
      }
      Mat<T> floc = local_attention(qw, kw, vw, pos, &msk, s0, k0, w, sc);
      if (cfg.causal) {
        auto memmat = mem.read(basis);
        if (memmat.has_value()) {
          Mat<T> fglob = attend_memory(qw, *memmat, sc);
          paste_rows(outh, scale(add(floc, fglob), T(0.5)), s0);
        } else {
          paste_rows(outh, floc, s0);
        }
        if (e - s0 == w) mem.update_block(basis, floc);  // only full windows feed
      } else {
        paste_rows(locs, floc, s0);
      }
    }
    if (!cfg.causal) {
      // Memory over every window's local output, read by every query.
      mem.update_block(basis, locs);
      Mat<T> fglob = attend_memory(qh, *mem.read(basis), sc);
      outh = scale(add(locs, fglob), T(0.5));
    }
  } else {
    // No dissection: plain lookback-w local attention per token, and the
    // memory absorbs the raw head input instead of window outputs.
    auto lookback = [&](long i) {
      const long lo = std::max<long>(0, i - w + 1);
      Mat<T> qi = copy_rows(qh, i, 1);
      Mat<T> kw = copy_rows(kh, lo, i - lo + 1);
      Mat<T> vw = copy_rows(vh, lo, i - lo + 1);
      return local_attention(qi, kw, vw, pos, nullptr, i, lo, w, sc);
    };
    OrthoMemoryStateT<T> mem(cfg.num_bases);
    if (cfg.causal) {
      for (long i = 0; i < n; ++i) {
        mem.update(basis, xh.row(i), dh);  // the current token is visible to itself
        Mat<T> floc = lookback(i);
        Mat<T> fglob = attend_memory(copy_rows(qh, i, 1), *mem.read(basis), sc);
        paste_rows(outh, scale(add(floc, fglob), T(0.5)), i);
      }
    } else {
      mem.update_block(basis, xh);
      Mat<T> memmat = *mem.read(basis);
      for (long i = 0; i < n; ++i) paste_rows(outh, lookback(i), i);
      Mat<T> fglob = attend_memory(qh, memmat, sc);
      outh = scale(add(outh, fglob), T(0.5));
    }
  }
  return outh;
}

}  // namespace detail

// Full layer forward: project, run each head, concatenate, project out.
template <class T>
Mat<T> forward(const Mat<T>& x, const LavoWeights<T>& wts, const LavoConfig& cfg) {
  cfg.check();
  wts.check(cfg);
  if (x.rows() < 1) throw DataError("forward: empty input");
  if (x.cols() != cfg.d_model)
    throw DimError("forward: input " + x.shape_str() + " vs d_model " +
                   std::to_string(cfg.d_model));
  const long dh = cfg.head_dim();
  const T sc = static_cast<T>(attn_scale(dh, cfg.use_scale));
  Mat<T> q = matmul(x, wts.w_q);
  Mat<T> k = matmul(x, wts.w_k);
  Mat<T> v = matmul(x, wts.w_v);
  Mat<T> fused(x.rows(), cfg.d_model);
  for (long h = 0; h < cfg.heads; ++h) {
    Mat<T> qh = copy_cols(q, h * dh, dh);
    Mat<T> kh = copy_cols(k, h * dh, dh);
    Mat<T> vh = copy_cols(v, h * dh, dh);
    Mat<T> xh = copy_cols(x, h * dh, dh);
    const Mat<T>* pos = cfg.use_epe ? &wts.pos[h] : nullptr;
    paste_cols(fused, detail::head_forward(qh, kh, vh, xh, wts.basis[h], pos, cfg, sc),
               h * dh);
  }
  return matmul(fused, wts.w_o);
}

// Streaming state for causal decoding. Holds, per head, the compression state
// plus rings of the last w keys, values, and (with dissection) pending local
// outputs waiting for their window to complete. Size is fixed by the config;
// it does not grow with the number of steps taken.
template <class T>
struct CausalCacheT {
  struct Head {
    OrthoMemoryStateT<T> mem{1};
    Mat<T> k_ring, v_ring;  // window x head_dim, slot = position mod window
    Mat<T> out_ring;        // pending local outputs (dissection only)
  };

  LavoConfig cfg;
  long long t = 0;  // tokens consumed so far
  std::vector<Head> heads;

  std::size_t serialized_size() const {
    const std::size_t ring = static_cast<std::size_t>(cfg.window) * cfg.head_dim() *
                             sizeof(T);
    const std::size_t per_head = sizeof(std::int64_t) +
                                 static_cast<std::size_t>(cfg.num_bases) * sizeof(T) +
                                 ring * (cfg.use_dissection ? 3 : 2);
    return sizeof(std::int64_t) + per_head * static_cast<std::size_t>(cfg.heads);
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    out.reserve(serialized_size());
    auto raw = [&out](const void* p, std::size_t len) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + len);
    };
    const std::int64_t tt = t;
    raw(&tt, sizeof(tt));
    for (const auto& h : heads) {
      h.mem.serialize(out);
      raw(h.k_ring.data(), h.k_ring.size() * sizeof(T));
      raw(h.v_ring.data(), h.v_ring.size() * sizeof(T));
      if (cfg.use_dissection) raw(h.out_ring.data(), h.out_ring.size() * sizeof(T));
    }
    return out;
  }
};

using CausalCache = CausalCacheT<double>;

template <class T>
CausalCacheT<T> make_cache(const LavoConfig& cfg) {
  cfg.check();
  if (!cfg.causal) throw ContractError("make_cache: decoding cache is causal only");
  CausalCacheT<T> c;
  c.cfg = cfg;
  c.heads.resize(cfg.heads);
  for (auto& h : c.heads) {
    h.mem = OrthoMemoryStateT<T>(cfg.num_bases);
    h.k_ring = Mat<T>(cfg.window, cfg.head_dim());
    h.v_ring = Mat<T>(cfg.window, cfg.head_dim());
    if (cfg.use_dissection) h.out_ring = Mat<T>(cfg.window, cfg.head_dim());
  }
  return c;
}

// Consume one token, return the layer output for it. Matches forward() on the
// same prefix exactly: same kernels, same summation order, same flush points.
template <class T>
Mat<T> step(CausalCacheT<T>& cache, const Mat<T>& x_row, const LavoWeights<T>& wts) {
  const LavoConfig& cfg = cache.cfg;
  wts.check(cfg);
  if (x_row.rows() != 1 || x_row.cols() != cfg.d_model)
    throw DimError("step: input " + x_row.shape_str() + ", want 1x" +
                   std::to_string(cfg.d_model));
  const long dh = cfg.head_dim();
  const long w = cfg.window;
  const T sc = static_cast<T>(attn_scale(dh, cfg.use_scale));
  const long long t = cache.t;
  const long slot = static_cast<long>(t % w);
  const long long lo = std::max<long long>(0, t - w + 1);
  const long cnt = static_cast<long>(t - lo + 1);
  Mat<T> q = matmul(x_row, wts.w_q);
  Mat<T> k = matmul(x_row, wts.w_k);
  Mat<T> v = matmul(x_row, wts.w_v);
  Mat<T> fused(1, cfg.d_model);
  for (long h = 0; h < cfg.heads; ++h) {
    auto& hs = cache.heads[h];
    std::memcpy(hs.k_ring.row(slot), k.row(0) + h * dh, sizeof(T) * dh);
    std::memcpy(hs.v_ring.row(slot), v.row(0) + h * dh, sizeof(T) * dh);
    if (!cfg.use_dissection) hs.mem.update(wts.basis[h], x_row.row(0) + h * dh, dh);
    Mat<T> qh(1, dh);
    std::memcpy(qh.row(0), q.row(0) + h * dh, sizeof(T) * dh);
    Mat<T> kw(cnt, dh), vw(cnt, dh);
    for (long j = 0; j < cnt; ++j) {
      const long sl = static_cast<long>((lo + j) % w);
      std::memcpy(kw.row(j), hs.k_ring.row(sl), sizeof(T) * dh);
      std::memcpy(vw.row(j), hs.v_ring.row(sl), sizeof(T) * dh);
    }
    const Mat<T>* pos = cfg.use_epe ? &wts.pos[h] : nullptr;
    Mat<T> floc = local_attention(qh, kw, vw, pos, nullptr, static_cast<long>(t),
                                  static_cast<long>(lo), w, sc);
    Mat<T> out(1, dh);
    auto memmat = hs.mem.read(wts.basis[h]);
    if (memmat.has_value()) {
      Mat<T> fglob = attend_memory(qh, *memmat, sc);
      out = scale(add(floc, fglob), T(0.5));
    } else {
      out = floc;
    }
    if (cfg.use_dissection) {
      std::memcpy(hs.out_ring.row(slot), floc.row(0), sizeof(T) * dh);
      // Window complete: fold its w local outputs into the memory. The ring is
      // window-aligned, so rows 0..w-1 are already in position order.
      if ((t + 1) % w == 0) hs.mem.update_block(wts.basis[h], hs.out_ring);
    }
    std::memcpy(fused.row(0) + h * dh, out.row(0), sizeof(T) * dh);
  }
  cache.t = t + 1;
  return matmul(fused, wts.w_o);
}

// Multiply count for one forward pass under this config; no timing involved.
// Counts the projections, the local scores and value mixes, the optional bias
// adds, the memory on its build/materialize/attend legs, and the final fuse.
// num_bases = 0 is accepted here (it describes a layer with the global path
// removed, the degenerate case where window = n makes the count quadratic).
inline long long complexity_audit(const LavoConfig& cfg, long n) {
  if (cfg.d_model < 1 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0 ||
      cfg.window < 1 || cfg.num_bases < 0 || cfg.num_bases > cfg.head_dim())
    throw DimError("complexity_audit: bad config");
  if (n < 1) throw DataError("complexity_audit: need n >= 1");
  const long long nn = n, d = cfg.d_model, w = cfg.window, r = cfg.num_bases;
  const long long windows = (nn + w - 1) / w;
  long long ops = 4 * nn * d * d;  // q, k, v, output projections
  ops += 2 * nn * w * d;           // local scores + weighted values
  if (cfg.use_epe) ops += nn * w;  // bias added onto each live score
  if (r > 0) {
    if (cfg.use_dissection) {
      ops += nn * r * d;       // window outputs projected onto the bases
      ops += windows * r * d;  // memory materialized once per window
    } else {
      ops += nn * r * d;  // every token absorbed
      ops += nn * r * d;  // memory materialized per query
    }
    ops += 2 * nn * r * d;  // scores against memory rows + value mix
  }
  ops += nn * d;  // averaging the local and global features
  return ops;
}

// ---------------------------------------------------------------------------
// Trainable API (double precision).

struct LavoParams {
  ad::Parameter w_q, w_k, w_v, w_o;
  std::vector<ad::Parameter> basis;
  std::vector<ad::Parameter> pos;

  // Projections ~ N(0, weight_std^2); bases orthonormal (frozen unless
  // cfg.train_bases); bias tables start at zero. All draws derive from
  // cfg.seed, so equal configs give bitwise equal parameters.
  static LavoParams init(const LavoConfig& cfg, double weight_std);

  LavoWeights<double> weights() const;
  std::vector<ad::Parameter*> all();
};

// Tape-recorded forward pass for training. Causal configurations only; the
// arithmetic mirrors forward() (the one deviation: the memory accumulates each
// window's projection as a single block sum, which reassociates the addition).
ad::Value forward_train(ad::Tape& tp, ad::Value x, LavoParams& params,
                        const LavoConfig& cfg);

// Convenience wrappers over the Parameter-based weights.
Tensor2D forward(const Tensor2D& x, const LavoParams& params, const LavoConfig& cfg);
Tensor2D step(CausalCache& cache, const Tensor2D& x_row, const LavoParams& params);

}  // namespace lavo
