#include "lavo/lavo_layer.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace lavo {

// Seed streams: 0-3 projections, 8+h the per-head bases. Bias tables start at
// zero, so they claim no stream.
LavoParams LavoParams::init(const LavoConfig& cfg, double weight_std) {
  cfg.check();
  RngState root(cfg.seed);
  auto proj = [&](std::uint64_t stream, const char* name) {
    RngState r = root.fork(stream);
    return ad::Parameter(scale(gaussian_matrix<double>(r, cfg.d_model, cfg.d_model),
                               weight_std),
                         true, name);
  };
  LavoParams p{proj(0, "w_q"), proj(1, "w_k"), proj(2, "w_v"), proj(3, "w_o"), {}, {}};
  for (long h = 0; h < cfg.heads; ++h) {
    p.basis.emplace_back(orthogonal_basis(cfg.num_bases, cfg.head_dim(),
                                          root.fork(8 + static_cast<std::uint64_t>(h))
                                              .seed()),
                         cfg.train_bases, "basis" + std::to_string(h));
    p.pos.emplace_back(Tensor2D(2 * cfg.window - 1, 1), true,
                       "pos" + std::to_string(h));
  }
  return p;
}

LavoWeights<double> LavoParams::weights() const {
  LavoWeights<double> w;
  w.w_q = w_q.value;
  w.w_k = w_k.value;
  w.w_v = w_v.value;
  w.w_o = w_o.value;
  for (const auto& b : basis) w.basis.push_back(b.value);
  for (const auto& p : pos) w.pos.push_back(p.value);
  return w;
}

std::vector<ad::Parameter*> LavoParams::all() {
  std::vector<ad::Parameter*> out{&w_q, &w_k, &w_v, &w_o};
  for (auto& b : basis) out.push_back(&b);
  for (auto& p : pos) out.push_back(&p);
  return out;
}

Tensor2D forward(const Tensor2D& x, const LavoParams& params, const LavoConfig& cfg) {
  return forward(x, params.weights(), cfg);
}

Tensor2D step(CausalCache& cache, const Tensor2D& x_row, const LavoParams& params) {
  return step(cache, x_row, params.weights());
}

namespace {

// Bias matrix for a window of queries/keys, as a gather out of the (2w-1)x1
// table so the table collects gradient. Masked slots read entry 0; their
// attention weight is exactly zero, so nothing flows back through them.
ad::Value epe_bias(ad::Tape& tp, ad::Value table, const Mask& msk, long q_pos0,
                   long k_pos0, long window) {
  std::vector<long> idx;
  idx.reserve(static_cast<std::size_t>(msk.rows()) * msk.cols());
  for (long i = 0; i < msk.rows(); ++i) {
    for (long j = 0; j < msk.cols(); ++j) {
      if (msk(i, j) != 0) {
        idx.push_back(0);
        continue;
      }
      const long off = (k_pos0 + j) - (q_pos0 + i) + window - 1;
      if (off < 0 || off >= 2 * window - 1)
        throw ContractError("forward_train: visible pair without a bias entry");
      idx.push_back(off);
    }
  }
  return tp.reshape(tp.gather_rows(table, std::move(idx)), msk.rows(), msk.cols());
}

}  // namespace

ad::Value forward_train(ad::Tape& tp, ad::Value x, LavoParams& params,
                        const LavoConfig& cfg) {
  cfg.check();
  if (!cfg.causal)
    throw ContractError("forward_train: only causal configurations are trainable");
  const long n = x.rows();
  if (n < 1) throw DataError("forward_train: empty input");
  if (x.cols() != cfg.d_model)
    throw DimError("forward_train: input cols " + std::to_string(x.cols()) +
                   " vs d_model " + std::to_string(cfg.d_model));
  const long dh = cfg.head_dim();
  const long w = cfg.window;
  const double sc = attn_scale(dh, cfg.use_scale);
  ad::Value q = tp.matmul(x, tp.param(params.w_q));
  ad::Value k = tp.matmul(x, tp.param(params.w_k));
  ad::Value v = tp.matmul(x, tp.param(params.w_v));
  std::vector<ad::Value> head_outs;
  for (long h = 0; h < cfg.heads; ++h) {
    ad::Value qh = tp.slice_cols(q, h * dh, dh);
    ad::Value kh = tp.slice_cols(k, h * dh, dh);
    ad::Value vh = tp.slice_cols(v, h * dh, dh);
    ad::Value basis = tp.param(params.basis[h]);
    std::optional<ad::Value> table;
    if (cfg.use_epe) table = tp.param(params.pos[h]);

    auto attend_mem = [&](ad::Value queries, ad::Value memmat) {
      ad::Value s = tp.scale(tp.matmul(queries, tp.transpose(memmat)), sc);
      return tp.matmul(tp.softmax_rows(s), memmat);
    };

    if (cfg.use_dissection) {
      std::optional<ad::Value> running;  // sum of basis-projected window outputs
      long long absorbed = 0;
      std::vector<ad::Value> win_outs;
      for (long s0 = 0; s0 < n; s0 += w) {
        const long e = std::min(n, s0 + w);
        const long k0 = std::max<long>(0, s0 - w);
        ad::Value qw = tp.slice_rows(qh, s0, e - s0);
        ad::Value kw = tp.slice_rows(kh, k0, e - k0);
        ad::Value vw = tp.slice_rows(vh, k0, e - k0);
        Mask msk(e - s0, e - k0);
        for (long i = 0; i < e - s0; ++i) {
          const long qi = s0 + i;
          for (long j = 0; j < e - k0; ++j) {
            const long kj = k0 + j;
            msk(i, j) = (kj > qi || kj < qi - w + 1) ? 1 : 0;
          }
        }
        ad::Value scores = tp.scale(tp.matmul(qw, tp.transpose(kw)), sc);
        std::optional<ad::Value> bias;
        if (table.has_value()) bias = epe_bias(tp, *table, msk, s0, k0, w);
        ad::Value floc = tp.matmul(tp.softmax_rows(scores, bias, &msk), vw);
        ad::Value outw = floc;
        if (absorbed > 0) {
          ad::Value mean = tp.scale(*running, 1.0 / static_cast<double>(absorbed));
          ad::Value memmat = tp.row_scale(basis, mean);
          outw = tp.scale(tp.add(floc, attend_mem(qw, memmat)), 0.5);
        }
        win_outs.push_back(outw);
        if (e - s0 == w) {
          ad::Value proj = tp.matmul(basis, tp.transpose(tp.sum_rows(floc)));
          running = running.has_value() ? tp.add(*running, proj) : proj;
          absorbed += w;
        }
      }
      head_outs.push_back(win_outs.size() == 1 ? win_outs[0]
                                               : tp.concat_rows(win_outs));
    } else {
      ad::Value xh = tp.slice_cols(x, h * dh, dh);
      std::optional<ad::Value> running;
      std::vector<ad::Value> outs;
      for (long i = 0; i < n; ++i) {
        ad::Value proj = tp.matmul(basis, tp.transpose(tp.slice_rows(xh, i, 1)));
        running = running.has_value() ? tp.add(*running, proj) : proj;
        ad::Value mean = tp.scale(*running, 1.0 / static_cast<double>(i + 1));
        ad::Value memmat = tp.row_scale(basis, mean);
        const long lo = std::max<long>(0, i - w + 1);
        ad::Value qi = tp.slice_rows(qh, i, 1);
        ad::Value kw = tp.slice_rows(kh, lo, i - lo + 1);
        ad::Value vw = tp.slice_rows(vh, lo, i - lo + 1);
        ad::Value scores = tp.scale(tp.matmul(qi, tp.transpose(kw)), sc);
        std::optional<ad::Value> bias;
        Mask open(1, i - lo + 1);  // all visible
        if (table.has_value()) bias = epe_bias(tp, *table, open, i, lo, w);
        ad::Value floc = tp.matmul(tp.softmax_rows(scores, bias, nullptr), vw);
        outs.push_back(tp.scale(tp.add(floc, attend_mem(qi, memmat)), 0.5));
      }
      head_outs.push_back(outs.size() == 1 ? outs[0] : tp.concat_rows(outs));
    }
  }
  ad::Value fused =
      head_outs.size() == 1 ? head_outs[0] : tp.concat_cols(head_outs);
  return tp.matmul(fused, tp.param(params.w_o));
}

}  // namespace lavo
