#pragma once

// Cross attention against a compressed source. The source sequence is folded
// once into a tiny per-head memory (num_bases rows); decoder queries then
// attend over those rows instead of the raw source. Re-encoding is never
// needed between queries, so a fixed source costs O(1) per query batch in the
// source length. There is no local path and no position bias here: the memory
// rows carry no order.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lavo/autodiff.hpp"
#include "lavo/code_memory.hpp"
#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo {

struct CrossParams {
  long d_model = 64;
  long heads = 2;
  long num_bases = 16;
  bool use_scale = true;

  ad::Parameter w_q;                   // d_model x d_model
  std::optional<ad::Parameter> w_o;    // present only with heads > 1
  std::vector<ad::Parameter> basis;    // per head, num_bases x head_dim

  long head_dim() const { return d_model / heads; }
  void check() const;

  static CrossParams init(long d_model, long heads, long num_bases, bool use_scale,
                          std::uint64_t seed);
  std::vector<ad::Parameter*> all();
};

// Frozen summary of one source sequence.
struct CrossMemory {
  long d_model = 0;
  long heads = 0;
  long num_bases = 0;
  long source_len = 0;
  std::vector<Tensor2D> per_head;  // num_bases x head_dim each
};

CrossMemory encode_source(const Tensor2D& source, const CrossParams& params);

Tensor2D forward_cross(const Tensor2D& y, const CrossMemory& memory,
                       const CrossParams& params);

// Tape-recorded variant; the memory stays a constant (sources are encoded
// outside the trained graph).
ad::Value forward_cross_train(ad::Tape& tp, ad::Value y, const CrossMemory& memory,
                              CrossParams& params);

// Multiply count for encoding an n-token source once plus answering m queries.
// Affine in n and in m separately.
long long cross_complexity_audit(long d_model, long heads, long num_bases, long n,
                                 long m);

}  // namespace lavo
