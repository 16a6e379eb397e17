#pragma once

// Reference implementations used to pin down the layer's numerics and as
// benchmark baselines. Deliberately quadratic and deliberately independent:
// apart from the matrix type and matmul/softmax on the vanilla path, nothing
// here shares code with the layer. The naive oracle rebuilds the whole
// pipeline from scratch for every query position with bare scalar loops.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "lavo/config.hpp"
#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo::oracles {

// Plain full attention, the quadratic baseline.
template <class T>
Mat<T> vanilla_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                         bool causal, T scale_factor) {
  if (k.rows() != v.rows() || q.cols() != k.cols())
    throw DimError("vanilla_attention: q " + q.shape_str() + ", k " + k.shape_str() +
                   ", v " + v.shape_str());
  Mat<T> scores = matmul(q, transpose(k));
  if (scale_factor != T(1)) scores = scale(scores, scale_factor);
  if (!causal) return matmul(softmax_rows(scores), v);
  Mask msk(q.rows(), k.rows());
  for (long i = 0; i < q.rows(); ++i)
    for (long j = 0; j < k.rows(); ++j) msk(i, j) = (j > i) ? 1 : 0;
  return matmul(softmax_rows(scores, static_cast<const Mat<T>*>(nullptr), &msk), v);
}

namespace detail {

// Local attention output for one position and head, written into out[0..dh).
// sbuf must hold at least w entries.
template <class T>
void local_row(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const Mat<T>* pos,
               long h, long dh, long w, T sc, long p, T* out, T* sbuf) {
  const long lo = std::max<long>(0, p - w + 1);
  const long cnt = p - lo + 1;
  const T* qr = q.row(p) + h * dh;
  T mx = -std::numeric_limits<T>::infinity();
  for (long j = 0; j < cnt; ++j) {
    const T* kr = k.row(lo + j) + h * dh;
    T s = 0;
    for (long c = 0; c < dh; ++c) s += qr[c] * kr[c];
    s *= sc;
    if (pos != nullptr) s += (*pos)((lo + j) - p + w - 1, 0);
    sbuf[j] = s;
    if (s > mx) mx = s;
  }
  T z = 0;
  for (long j = 0; j < cnt; ++j) {
    sbuf[j] = std::exp(sbuf[j] - mx);
    z += sbuf[j];
  }
  for (long c = 0; c < dh; ++c) out[c] = 0;
  for (long j = 0; j < cnt; ++j) {
    const T wj = sbuf[j] / z;
    const T* vr = v.row(lo + j) + h * dh;
    for (long c = 0; c < dh; ++c) out[c] += wj * vr[c];
  }
}

}  // namespace detail

// The full layer recomputed from first principles for every query position:
// for token t it rebuilds all earlier window outputs, re-projects them onto
// the bases, re-materializes the memory, and only then answers the query.
// O(n^2 * w * d) on purpose.
template <class T>
Mat<T> naive_causal_lavo(const Mat<T>& x, const LavoWeights<T>& wts,
                         const LavoConfig& cfg) {
  cfg.check();
  wts.check(cfg);
  if (!cfg.causal) throw ContractError("naive_causal_lavo: causal only");
  if (x.rows() < 1) throw DataError("naive_causal_lavo: empty input");
  if (x.cols() != cfg.d_model)
    throw DimError("naive_causal_lavo: input " + x.shape_str());
  const long n = x.rows();
  const long d = cfg.d_model;
  const long dh = cfg.head_dim();
  const long w = cfg.window;
  const long r = cfg.num_bases;
  const T sc = static_cast<T>(attn_scale(dh, cfg.use_scale));
  const Mat<T> q = matmul(x, wts.w_q);
  const Mat<T> k = matmul(x, wts.w_k);
  const Mat<T> v = matmul(x, wts.w_v);
  Mat<T> fused(n, d);
  std::vector<T> sbuf(static_cast<std::size_t>(w));
  std::vector<T> tmp(static_cast<std::size_t>(dh));
  std::vector<T> floc(static_cast<std::size_t>(dh));
  std::vector<T> hsum(static_cast<std::size_t>(r));
  std::vector<T> gbuf(static_cast<std::size_t>(r));
  for (long t = 0; t < n; ++t) {
    for (long h = 0; h < cfg.heads; ++h) {
      const Mat<T>* pos = cfg.use_epe ? &wts.pos[h] : nullptr;
      const Mat<T>& basis = wts.basis[h];
      detail::local_row(q, k, v, pos, h, dh, w, sc, t, floc.data(), sbuf.data());
      long long cnt = 0;
      std::fill(hsum.begin(), hsum.end(), T(0));
      if (cfg.use_dissection) {
        const long done = (t / w) * w;  // tokens whose window has completed
        for (long p = 0; p < done; ++p) {
          detail::local_row(q, k, v, pos, h, dh, w, sc, p, tmp.data(), sbuf.data());
          for (long i = 0; i < r; ++i) {
            T s = 0;
            for (long c = 0; c < dh; ++c) s += basis(i, c) * tmp[c];
            hsum[i] += s;
          }
        }
        cnt = done;
      } else {
        for (long p = 0; p <= t; ++p) {
          const T* xr = x.row(p) + h * dh;
          for (long i = 0; i < r; ++i) {
            T s = 0;
            for (long c = 0; c < dh; ++c) s += basis(i, c) * xr[c];
            hsum[i] += s;
          }
        }
        cnt = t + 1;
      }
      T* dst = fused.row(t) + h * dh;
      if (cnt == 0) {
        for (long c = 0; c < dh; ++c) dst[c] = floc[c];
        continue;
      }
      // memory row i is basis row i scaled by mean projection; attend to it
      const T* qr = q.row(t) + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (long i = 0; i < r; ++i) {
        const T hi = hsum[i] / static_cast<T>(cnt);
        T s = 0;
        for (long c = 0; c < dh; ++c) s += qr[c] * basis(i, c) * hi;
        s *= sc;
        gbuf[i] = s;
        if (s > mx) mx = s;
      }
      T z = 0;
      for (long i = 0; i < r; ++i) {
        gbuf[i] = std::exp(gbuf[i] - mx);
        z += gbuf[i];
      }
      for (long c = 0; c < dh; ++c) {
        T acc = 0;
        for (long i = 0; i < r; ++i)
          acc += (gbuf[i] / z) * basis(i, c) * (hsum[i] / static_cast<T>(cnt));
        dst[c] = T(0.5) * (floc[c] + acc);
      }
    }
  }
  return matmul(fused, wts.w_o);
}

// Just the local path (with the output projection): the ablation baseline that
// shows what the memory adds.
template <class T>
Mat<T> local_only(const Mat<T>& x, const LavoWeights<T>& wts, const LavoConfig& cfg) {
  cfg.check();
  wts.check(cfg);
  if (!cfg.causal) throw ContractError("local_only: causal only");
  if (x.rows() < 1) throw DataError("local_only: empty input");
  if (x.cols() != cfg.d_model) throw DimError("local_only: input " + x.shape_str());
  const long n = x.rows();
  const long dh = cfg.head_dim();
  const long w = cfg.window;
  const T sc = static_cast<T>(attn_scale(dh, cfg.use_scale));
  const Mat<T> q = matmul(x, wts.w_q);
  const Mat<T> k = matmul(x, wts.w_k);
  const Mat<T> v = matmul(x, wts.w_v);
  Mat<T> fused(n, cfg.d_model);
  std::vector<T> sbuf(static_cast<std::size_t>(w));
  for (long t = 0; t < n; ++t)
    for (long h = 0; h < cfg.heads; ++h) {
      const Mat<T>* pos = cfg.use_epe ? &wts.pos[h] : nullptr;
      detail::local_row(q, k, v, pos, h, dh, w, sc, t, fused.row(t) + h * dh,
                        sbuf.data());
    }
  return matmul(fused, wts.w_o);
}

}  // namespace lavo::oracles
