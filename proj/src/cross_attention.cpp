#include "lavo/cross_attention.hpp"

#include <cmath>

namespace lavo {

void CrossParams::check() const {
  if (d_model < 1 || heads < 1 || d_model % heads != 0)
    throw DimError("CrossParams: d_model " + std::to_string(d_model) +
                   " not divisible by heads " + std::to_string(heads));
  if (num_bases < 1 || num_bases > head_dim())
    throw DimError("CrossParams: num_bases " + std::to_string(num_bases) +
                   " outside [1, head_dim]");
  if (w_q.value.rows() != d_model || w_q.value.cols() != d_model)
    throw DimError("CrossParams: w_q is " + w_q.value.shape_str());
  if (heads > 1 && !w_o.has_value())
    throw DimError("CrossParams: multi-head setup needs w_o");
  if (static_cast<long>(basis.size()) != heads)
    throw DimError("CrossParams: expected " + std::to_string(heads) + " bases");
}

CrossParams CrossParams::init(long d_model, long heads, long num_bases,
                              bool use_scale, std::uint64_t seed) {
  CrossParams p{d_model,
                heads,
                num_bases,
                use_scale,
                ad::Parameter(Tensor2D(d_model, d_model), true, "w_q"),
                std::nullopt,
                {}};
  RngState root(seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(d_model));
  {
    RngState r = root.fork(0);
    p.w_q.value = scale(gaussian_matrix<double>(r, d_model, d_model), std);
  }
  if (heads > 1) {
    RngState r = root.fork(3);
    p.w_o.emplace(scale(gaussian_matrix<double>(r, d_model, d_model), std), true,
                  "w_o");
  }
  for (long h = 0; h < heads; ++h)
    p.basis.emplace_back(orthogonal_basis(num_bases, d_model / heads,
                                          root.fork(8 + static_cast<std::uint64_t>(h))
                                              .seed()),
                         false, "basis" + std::to_string(h));
  p.check();
  return p;
}

std::vector<ad::Parameter*> CrossParams::all() {
  std::vector<ad::Parameter*> out{&w_q};
  if (w_o.has_value()) out.push_back(&*w_o);
  for (auto& b : basis) out.push_back(&b);
  return out;
}

CrossMemory encode_source(const Tensor2D& source, const CrossParams& params) {
  params.check();
  if (source.rows() < 1) throw DataError("encode_source: empty source");
  if (source.cols() != params.d_model)
    throw DimError("encode_source: source " + source.shape_str() + " vs d_model " +
                   std::to_string(params.d_model));
  const long dh = params.head_dim();
  CrossMemory mem{params.d_model, params.heads, params.num_bases, source.rows(), {}};
  for (long h = 0; h < params.heads; ++h)
    mem.per_head.push_back(
        compress(copy_cols(source, h * dh, dh), params.basis[h].value));
  return mem;
}

namespace {

void check_compat(const CrossMemory& mem, const CrossParams& params) {
  if (mem.d_model != params.d_model || mem.heads != params.heads ||
      mem.num_bases != params.num_bases ||
      static_cast<long>(mem.per_head.size()) != params.heads)
    throw ContractError("forward_cross: memory encoded under a different setup");
}

}  // namespace

Tensor2D forward_cross(const Tensor2D& y, const CrossMemory& memory,
                       const CrossParams& params) {
  params.check();
  check_compat(memory, params);
  if (y.rows() < 1) throw DataError("forward_cross: empty query batch");
  if (y.cols() != params.d_model)
    throw DimError("forward_cross: queries " + y.shape_str() + " vs d_model " +
                   std::to_string(params.d_model));
  const long dh = params.head_dim();
  const double sc = attn_scale(dh, params.use_scale);
  Tensor2D q = matmul(y, params.w_q.value);
  Tensor2D fused(y.rows(), params.d_model);
  for (long h = 0; h < params.heads; ++h)
    paste_cols(fused, attend_memory(copy_cols(q, h * dh, dh), memory.per_head[h], sc),
               h * dh);
  return params.w_o.has_value() ? matmul(fused, params.w_o->value) : fused;
}

ad::Value forward_cross_train(ad::Tape& tp, ad::Value y, const CrossMemory& memory,
                              CrossParams& params) {
  params.check();
  check_compat(memory, params);
  if (y.cols() != params.d_model)
    throw DimError("forward_cross_train: queries have " + std::to_string(y.cols()) +
                   " cols vs d_model " + std::to_string(params.d_model));
  const long dh = params.head_dim();
  const double sc = attn_scale(dh, params.use_scale);
  ad::Value q = tp.matmul(y, tp.param(params.w_q));
  std::vector<ad::Value> parts;
  for (long h = 0; h < params.heads; ++h) {
    ad::Value memmat = tp.leaf(memory.per_head[h]);
    ad::Value qh = tp.slice_cols(q, h * dh, dh);
    ad::Value s = tp.scale(tp.matmul(qh, tp.transpose(memmat)), sc);
    parts.push_back(tp.matmul(tp.softmax_rows(s), memmat));
  }
  ad::Value fused = parts.size() == 1 ? parts[0] : tp.concat_cols(parts);
  return params.w_o.has_value() ? tp.matmul(fused, tp.param(*params.w_o)) : fused;
}

long long cross_complexity_audit(long d_model, long heads, long num_bases, long n,
                                 long m) {
  if (d_model < 1 || heads < 1 || d_model % heads != 0 || num_bases < 1 ||
      num_bases > d_model / heads)
    throw DimError("cross_complexity_audit: bad setup");
  if (n < 1 || m < 1) throw DataError("cross_complexity_audit: need n, m >= 1");
  const long long d = d_model, r = num_bases, nn = n, mm = m;
  long long ops = nn * r * d;       // projecting every source token, all heads
  ops += r * d;                     // rescaling the basis rows once
  ops += mm * d * d;                // query projection
  ops += 2 * mm * r * d;            // scores against memory rows + value mix
  if (heads > 1) ops += mm * d * d;  // output projection
  return ops;
}

}  // namespace lavo
