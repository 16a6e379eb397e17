#include <cmath>

#include "doctest.h"
#include "lavo/tensor.hpp"

using namespace lavo;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul pins the hand-computed product") {
  const Tensor2D a = Tensor2D::of(2, 2, {1, 2, 3, 4});
  const Tensor2D b = Tensor2D::of(2, 1, {1, 1});
  const Tensor2D c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(3).epsilon(1e-14));
  CHECK(c(1, 0) == doctest::Approx(7).epsilon(1e-14));
}

TEST_CASE("matmul rejects mismatched inner dims with a shape-naming message") {
  const Tensor2D a(2, 3), b(4, 2);
  try {
    matmul(a, b);
    FAIL("expected DimError");
  } catch (const DimError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
}

TEST_CASE("elementwise helpers") {
  const Tensor2D a = Tensor2D::of(2, 2, {1, -2, 3, -4});
  const Tensor2D b = Tensor2D::of(2, 2, {0.5, 0.5, 0.5, 0.5});
  CHECK(add(a, b)(1, 1) == -3.5);
  CHECK(sub(a, b)(0, 0) == 0.5);
  CHECK(scale(a, -2.0)(1, 0) == -6.0);
  CHECK(max_abs(a) == 4.0);
  CHECK(max_abs_diff(a, b) == 4.5);
  CHECK(transpose(a)(0, 1) == 3.0);
  CHECK(all_finite(a));
  Tensor2D c = a;
  c(0, 1) = std::nan("");
  CHECK(!all_finite(c));
}

TEST_CASE("row_scale multiplies each row by its own factor") {
  const Tensor2D eye = Tensor2D::eye(2);
  const Tensor2D h = Tensor2D::of(2, 1, {2, 3});
  const Tensor2D out = row_scale(eye, h);
  CHECK(out(0, 0) == 2.0);
  CHECK(out(1, 1) == 3.0);
  CHECK(out(0, 1) == 0.0);
  CHECK_THROWS_AS(row_scale(eye, Tensor2D(3, 1)), DimError);
}

TEST_CASE("row and column block helpers") {
  const Tensor2D a = Tensor2D::of(3, 2, {1, 2, 3, 4, 5, 6});
  const Tensor2D r = copy_rows(a, 1, 2);
  CHECK(r.rows() == 2);
  CHECK(r(0, 0) == 3.0);
  const Tensor2D c = copy_cols(a, 1, 1);
  CHECK(c(2, 0) == 6.0);
  Tensor2D dst(3, 2);
  paste_rows(dst, r, 0);
  CHECK(dst(1, 1) == 6.0);
  paste_cols(dst, c, 0);
  CHECK(dst(2, 0) == 6.0);
  CHECK_THROWS_AS(copy_rows(a, 2, 2), DimError);
  CHECK_THROWS_AS(copy_cols(a, 0, 3), DimError);
  const Tensor2D s = sum_rows(a);
  CHECK(s(0, 0) == 9.0);
  CHECK(s(0, 1) == 12.0);
  CHECK(mean_rows(a)(0, 1) == 4.0);
}

TEST_CASE("softmax pins [0, ln 2] -> [1/3, 2/3]") {
  const Tensor2D s = Tensor2D::of(1, 2, {0.0, std::log(2.0)});
  const Tensor2D p = softmax_rows(s);
  CHECK(p(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax is shift invariant and mask-exact") {
  RngState rng(3);
  Tensor2D s = gaussian_matrix<double>(rng, 4, 5);
  const Tensor2D p1 = softmax_rows(s);
  const Tensor2D p2 = softmax_rows(add(s, Tensor2D::filled(4, 5, 1000.0)));
  CHECK(max_abs_diff(p1, p2) < 1e-12);
  for (long i = 0; i < 4; ++i) {
    double z = 0;
    for (long j = 0; j < 5; ++j) z += p1(i, j);
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
  Mask m(4, 5);
  m(0, 3) = 1;
  m(2, 0) = 1;
  const Tensor2D pm = softmax_rows(s, static_cast<const Tensor2D*>(nullptr), &m);
  CHECK(pm(0, 3) == 0.0);  // exactly zero, not merely small
  CHECK(pm(2, 0) == 0.0);
}

TEST_CASE("softmax bias shifts scores before normalizing") {
  const Tensor2D s = Tensor2D::of(1, 2, {0.0, 0.0});
  const Tensor2D b = Tensor2D::of(1, 2, {0.0, std::log(2.0)});
  const Tensor2D p = softmax_rows(s, &b, nullptr);
  CHECK(p(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("a fully masked row is an error, not a NaN") {
  const Tensor2D s(2, 2);
  Mask m(2, 2);
  m(1, 0) = m(1, 1) = 1;
  CHECK_THROWS_AS(softmax_rows(s, static_cast<const Tensor2D*>(nullptr), &m),
                  DegenerateRowError);
}

TEST_CASE("rng streams are deterministic and fork-independent") {
  RngState a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngState f1 = RngState(99).fork(7);
  RngState f2 = RngState(99).fork(7);
  RngState f3 = RngState(99).fork(8);
  CHECK(f1.next_u64() == f2.next_u64());
  CHECK(f1.next_u64() != f3.next_u64());
  // forking never disturbs the parent stream
  RngState p1(5), p2(5);
  (void)p1.fork(3);
  CHECK(p1.next_u64() == p2.next_u64());
}

TEST_CASE("gaussian draws have sane moments") {
  RngState rng(7);
  const Tensor2D g = gaussian_matrix<double>(rng, 200, 200);
  double mean = 0;
  for (std::size_t i = 0; i < g.size(); ++i) mean += g.data()[i];
  mean /= static_cast<double>(g.size());
  double var = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = g.data()[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(g.size());
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == doctest::Approx(1.0).epsilon(0.02));
  CHECK(all_finite(g));
}

TEST_CASE("orthogonal_basis rows are orthonormal") {
  for (auto [r, d] : {std::pair<long, long>{4, 8}, {1, 1}, {8, 8}, {16, 64},
                      {3, 5}, {32, 32}}) {
    const Tensor2D b = orthogonal_basis(r, d, 7);
    const Tensor2D gram = matmul(b, transpose(b));
    CHECK(max_abs_diff(gram, Tensor2D::eye(r)) < 1e-10);
  }
}

TEST_CASE("orthogonal_basis is deterministic in the seed") {
  const Tensor2D a = orthogonal_basis(4, 8, 123);
  const Tensor2D b = orthogonal_basis(4, 8, 123);
  const Tensor2D c = orthogonal_basis(4, 8, 124);
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("orthogonal_basis rejects impossible shapes") {
  CHECK_THROWS_AS(orthogonal_basis(5, 4, 1), DimError);
  CHECK_THROWS_AS(orthogonal_basis(0, 4, 1), DimError);
  CHECK_THROWS_AS(orthogonal_basis(1, 0, 1), DimError);
}

TEST_SUITE_END();
