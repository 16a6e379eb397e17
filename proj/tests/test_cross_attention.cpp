#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "lavo/cross_attention.hpp"

using namespace lavo;

namespace {

Tensor2D randm(std::uint64_t seed, long r, long c) {
  RngState rng(seed);
  return gaussian_matrix<double>(rng, r, c);
}

}  // namespace

TEST_SUITE_BEGIN("cross_attention");

TEST_CASE("source order does not change the memory") {
  CrossParams p = CrossParams::init(16, 2, 4, true, 7);
  const Tensor2D src = randm(70, 31, 16);
  Tensor2D shuffled(31, 16);
  std::vector<long> perm(31);
  std::iota(perm.begin(), perm.end(), 0L);
  RngState rng(71);
  for (long i = 30; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.next_double() * (i + 1))]);
  for (long i = 0; i < 31; ++i)
    for (long j = 0; j < 16; ++j)
      shuffled(i, j) = src(perm[static_cast<std::size_t>(i)], j);
  const CrossMemory a = encode_source(src, p);
  const CrossMemory b = encode_source(shuffled, p);
  for (long h = 0; h < 2; ++h)
    CHECK(max_abs_diff(a.per_head[static_cast<std::size_t>(h)],
                       b.per_head[static_cast<std::size_t>(h)]) < 1e-12);
}

TEST_CASE("memory shape is fixed by the setup, not the source length") {
  CrossParams p = CrossParams::init(16, 2, 4, true, 7);
  for (long n : {1L, 9L, 400L}) {
    const CrossMemory m = encode_source(randm(72, n, 16), p);
    CHECK(m.per_head[0].rows() == 4);
    CHECK(m.per_head[0].cols() == 8);
    CHECK(m.source_len == n);
  }
}

TEST_CASE("one encode serves many query batches identically") {
  CrossParams p = CrossParams::init(16, 2, 4, true, 8);
  const Tensor2D src = randm(73, 50, 16);
  const CrossMemory once = encode_source(src, p);
  for (int i = 0; i < 3; ++i) {
    const Tensor2D y = randm(static_cast<std::uint64_t>(80 + i), 5, 16);
    const Tensor2D via_reuse = forward_cross(y, once, p);
    const CrossMemory fresh = encode_source(src, p);
    CHECK(max_abs_diff(via_reuse, forward_cross(y, fresh, p)) == 0.0);
  }
}

TEST_CASE("single head skips the output projection") {
  CrossParams p = CrossParams::init(8, 1, 3, true, 9);
  CHECK(!p.w_o.has_value());
  const CrossMemory m = encode_source(randm(74, 12, 8), p);
  const Tensor2D y = randm(75, 2, 8);
  const Tensor2D out = forward_cross(y, m, p);
  const Tensor2D expect =
      attend_memory(matmul(y, p.w_q.value), m.per_head[0], attn_scale(8, true));
  CHECK(max_abs_diff(out, expect) == 0.0);
}

TEST_CASE("mismatched memory and params refuse to combine") {
  CrossParams p = CrossParams::init(16, 2, 4, true, 10);
  CrossParams other = CrossParams::init(16, 2, 8, true, 10);
  const CrossMemory m = encode_source(randm(76, 20, 16), other);
  CHECK_THROWS_AS(forward_cross(randm(77, 3, 16), m, p), ContractError);
}

TEST_CASE("input validation") {
  CrossParams p = CrossParams::init(16, 2, 4, true, 11);
  CHECK_THROWS_AS(encode_source(Tensor2D(0, 16), p), DataError);
  CHECK_THROWS_AS(encode_source(Tensor2D(5, 8), p), DimError);
  const CrossMemory m = encode_source(randm(78, 6, 16), p);
  CHECK_THROWS_AS(forward_cross(Tensor2D(0, 16), m, p), DataError);
  CHECK_THROWS_AS(forward_cross(Tensor2D(2, 8), m, p), DimError);
  CHECK_THROWS_AS(CrossParams::init(15, 2, 4, true, 1), DimError);
  CHECK_THROWS_AS(CrossParams::init(16, 2, 9, true, 1), DimError);
}

TEST_CASE("recorded cross pass matches the plain one and checks out on fd") {
  CrossParams p = CrossParams::init(8, 2, 2, true, 12);
  const CrossMemory m = encode_source(randm(79, 9, 8), p);
  const Tensor2D y = randm(80, 3, 8);
  const Tensor2D w = randm(81, 3, 8);
  ad::Tape tp0;
  const Tensor2D rec = forward_cross_train(tp0, tp0.leaf(y), m, p).val();
  CHECK(max_abs_diff(rec, forward_cross(y, m, p)) < 1e-12);

  auto loss = [&](ad::Tape& tp) {
    return tp.sum_all(tp.mul_const(forward_cross_train(tp, tp.leaf(y), m, p), w));
  };
  for (ad::Parameter* prm : {&p.w_q, &*p.w_o}) {
    ad::zero_grad({prm});
    ad::Tape tp;
    tp.backward(loss(tp));
    const Tensor2D analytic = prm->grad;
    const double h = 1e-5;
    double worst = 0;
    for (std::size_t i = 0; i < prm->value.size(); ++i) {
      const double keep = prm->value.data()[i];
      prm->value.data()[i] = keep + h;
      ad::Tape t1;
      const double up = loss(t1).val()(0, 0);
      prm->value.data()[i] = keep - h;
      ad::Tape t2;
      const double dn = loss(t2).val()(0, 0);
      prm->value.data()[i] = keep;
      const double fd = (up - dn) / (2 * h);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - fd) /
                                  std::max({std::abs(a), std::abs(fd), 1e-8}));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("audit is affine in n and in m") {
  const auto f = [](long n, long m) {
    return cross_complexity_audit(64, 2, 16, n, m);
  };
  CHECK(f(200, 10) - f(100, 10) == f(300, 10) - f(200, 10));
  CHECK(f(100, 20) - f(100, 10) == f(100, 30) - f(100, 20));
  CHECK(f(200, 10) > f(100, 10));
  CHECK(f(100, 20) > f(100, 10));
  CHECK_THROWS_AS(cross_complexity_audit(15, 2, 4, 10, 10), DimError);
  CHECK_THROWS_AS(cross_complexity_audit(64, 2, 16, 0, 10), DataError);
}

TEST_SUITE_END();
