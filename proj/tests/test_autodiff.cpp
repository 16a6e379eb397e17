#include <cmath>
#include <functional>

#include "doctest.h"
#include "lavo/autodiff.hpp"

using namespace lavo;
using ad::Parameter;
using ad::Tape;
using ad::Value;

namespace {

// Analytic gradient of loss(p) against central finite differences, where
// build records the loss for the parameter's current value. The tape is
// rebuilt from scratch around every probe.
void gradcheck(Parameter& p, const std::function<Value(Tape&)>& build,
               double rtol = 1e-6, double atol = 1e-8) {
  Tape tp;
  ad::zero_grad({&p});
  tp.backward(build(tp));
  const Tensor2D analytic = p.grad;
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double keep = p.value.data()[i];
    p.value.data()[i] = keep + h;
    Tape tp1;
    const double up = build(tp1).val()(0, 0);
    p.value.data()[i] = keep - h;
    Tape tp2;
    const double dn = build(tp2).val()(0, 0);
    p.value.data()[i] = keep;
    const double fd = (up - dn) / (2 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - fd);
    const double bound = atol + rtol * std::max(std::abs(a), std::abs(fd));
    INFO("element ", i, ": analytic ", a, " vs fd ", fd);
    CHECK(err <= bound);
  }
}

Tensor2D randm(std::uint64_t seed, long r, long c) {
  RngState rng(seed);
  return gaussian_matrix<double>(rng, r, c);
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("sum(A B) pins grad_A = ones * B^T") {
  Parameter a(randm(1, 2, 3), true, "a");
  const Tensor2D b = randm(2, 3, 2);
  Tape tp;
  tp.backward(tp.sum_all(tp.matmul(tp.param(a), tp.leaf(b))));
  const Tensor2D expect = matmul(Tensor2D::filled(2, 2, 1.0), transpose(b));
  CHECK(max_abs_diff(a.grad, expect) < 1e-12);
}

TEST_CASE("matmul, add, sub, scale, transpose") {
  Parameter a(randm(3, 3, 4), true, "a");
  const Tensor2D b = randm(4, 4, 3);
  const Tensor2D c = randm(4, 3, 4);
  const Tensor2D w = randm(5, 3, 3);
  gradcheck(a, [&](Tape& tp) {
    Value va = tp.param(a);
    Value m = tp.matmul(va, tp.leaf(b));
    Value n = tp.matmul(tp.leaf(c), tp.transpose(va));
    Value s = tp.sub(tp.add(m, m), tp.scale(n, 0.7));
    return tp.sum_all(tp.mul_const(s, w));
  });
}

TEST_CASE("row_scale both inputs") {
  Parameter a(randm(6, 4, 3), true, "a");
  Parameter h(randm(7, 4, 1), true, "h");
  const Tensor2D w = randm(8, 4, 3);
  auto build = [&](Tape& tp) {
    return tp.sum_all(tp.mul_const(tp.row_scale(tp.param(a), tp.param(h)), w));
  };
  gradcheck(a, build);
  gradcheck(h, build);
}

TEST_CASE("softmax with bias and mask") {
  Parameter s(randm(9, 3, 4), true, "s");
  Parameter b(randm(10, 3, 4), true, "b");
  Mask m(3, 4);
  m(0, 1) = 1;
  m(2, 3) = 1;
  const Tensor2D w = randm(11, 3, 4);
  auto build = [&](Tape& tp) {
    return tp.sum_all(
        tp.mul_const(tp.softmax_rows(tp.param(s), tp.param(b), &m), w));
  };
  gradcheck(s, build);
  gradcheck(b, build);
}

TEST_CASE("masked softmax entries give the bias zero gradient") {
  Parameter s(randm(12, 2, 3), true, "s");
  Parameter b(Tensor2D(2, 3), true, "b");
  Mask m(2, 3);
  m(1, 2) = 1;
  Tape tp;
  tp.backward(tp.sum_all(tp.softmax_rows(tp.param(s), tp.param(b), &m)));
  CHECK(b.grad(1, 2) == 0.0);
  CHECK(s.grad(1, 2) == 0.0);
}

TEST_CASE("slices and concats") {
  Parameter a(randm(13, 4, 6), true, "a");
  const Tensor2D w = randm(14, 4, 6);
  gradcheck(a, [&](Tape& tp) {
    Value va = tp.param(a);
    Value top = tp.slice_rows(va, 0, 2);
    Value bot = tp.slice_rows(va, 2, 2);
    Value rows = tp.concat_rows({top, bot});
    Value left = tp.slice_cols(rows, 0, 3);
    Value right = tp.slice_cols(rows, 3, 3);
    return tp.sum_all(tp.mul_const(tp.concat_cols({left, right}), w));
  });
}

TEST_CASE("sum_rows, mean_rows, add_row") {
  Parameter a(randm(15, 5, 3), true, "a");
  Parameter r(randm(16, 1, 3), true, "r");
  const Tensor2D w = randm(17, 5, 3);
  auto build = [&](Tape& tp) {
    Value va = tp.param(a);
    Value both = tp.add_row(va, tp.add(tp.sum_rows(va), tp.mean_rows(va)));
    return tp.sum_all(tp.mul_const(tp.add_row(both, tp.param(r)), w));
  };
  gradcheck(a, build);
  gradcheck(r, build);
}

TEST_CASE("gather_rows and reshape") {
  Parameter a(randm(18, 5, 2), true, "a");
  const Tensor2D w = randm(19, 2, 4);
  gradcheck(a, [&](Tape& tp) {
    Value g = tp.gather_rows(tp.param(a), {4, 0, 0, 2});  // repeats accumulate
    return tp.sum_all(tp.mul_const(tp.reshape(g, 2, 4), w));
  });
  Tape tp;
  CHECK_THROWS_AS(tp.gather_rows(tp.param(a), {5}), DimError);
  CHECK_THROWS_AS(tp.reshape(tp.param(a), 3, 4), DimError);
}

TEST_CASE("layer_norm all three inputs") {
  Parameter x(randm(20, 3, 6), true, "x");
  Parameter g(randm(21, 1, 6), true, "g");
  Parameter b(randm(22, 1, 6), true, "b");
  const Tensor2D w = randm(23, 3, 6);
  auto build = [&](Tape& tp) {
    return tp.sum_all(
        tp.mul_const(tp.layer_norm(tp.param(x), tp.param(g), tp.param(b)), w));
  };
  gradcheck(x, build, 1e-5, 1e-7);
  gradcheck(g, build);
  gradcheck(b, build);
}

TEST_CASE("gelu") {
  Parameter x(randm(24, 3, 5), true, "x");
  const Tensor2D w = randm(25, 3, 5);
  gradcheck(x, [&](Tape& tp) {
    return tp.sum_all(tp.mul_const(tp.gelu(tp.param(x)), w));
  });
}

TEST_CASE("cross_entropy_rows") {
  Parameter logits(randm(26, 4, 7), true, "l");
  const std::vector<int> targets{0, 6, 3, 3};
  gradcheck(logits, [&](Tape& tp) {
    return tp.cross_entropy_rows(tp.param(logits), targets);
  });
}

TEST_CASE("uniform logits score exactly ln(vocab)") {
  Tape tp;
  const Value ce = tp.cross_entropy_rows(tp.leaf(Tensor2D(3, 257)), {5, 0, 256});
  CHECK(ce.val()(0, 0) == doctest::Approx(std::log(257.0)).epsilon(1e-15));
}

TEST_CASE("detach blocks gradient flow") {
  Parameter a(randm(27, 2, 2), true, "a");
  Tape tp;
  tp.backward(tp.sum_all(tp.detach(tp.param(a))));
  CHECK(max_abs(a.grad) == 0.0);
}

TEST_CASE("frozen parameters collect no gradient") {
  Parameter a(randm(28, 2, 2), false, "a");
  Tape tp;
  tp.backward(tp.sum_all(tp.param(a)));
  CHECK(max_abs(a.grad) == 0.0);
}

TEST_CASE("backward demands a scalar loss") {
  Tape tp;
  const Value v = tp.leaf(Tensor2D(2, 2));
  CHECK_THROWS_AS(tp.backward(v), ContractError);
}

TEST_CASE("values from different tapes do not mix") {
  Tape t1, t2;
  const Value a = t1.leaf(Tensor2D(1, 1));
  const Value b = t2.leaf(Tensor2D(1, 1));
  CHECK_THROWS_AS(t1.add(a, b), ContractError);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  Parameter a(randm(29, 2, 2), true, "a");
  Tape tp;
  const Value loss = tp.sum_all(tp.param(a));
  tp.backward(loss);
  const Tensor2D once = a.grad;
  tp.backward(loss);
  CHECK(max_abs_diff(a.grad, scale(once, 2.0)) < 1e-14);
  ad::zero_grad({&a});
  tp.backward(loss);
  CHECK(max_abs_diff(a.grad, once) < 1e-14);
}

TEST_CASE("one parameter used twice gets both contributions") {
  Parameter a(randm(30, 3, 3), true, "a");
  const Tensor2D w = randm(31, 3, 3);
  gradcheck(a, [&](Tape& tp) {
    Value va = tp.param(a);
    return tp.sum_all(tp.mul_const(tp.matmul(va, tp.transpose(va)), w));
  });
}

TEST_CASE("adam first step is the closed form") {
  // With fresh moments, step 1 moves each coordinate by lr * g / (|g| + eps)
  // regardless of the gradient's size.
  Parameter a(Tensor2D::of(1, 2, {1.0, -2.0}), true, "a");
  ad::AdamConfig cfg;
  cfg.lr = 0.1;
  ad::Adam opt({&a}, cfg);
  a.grad(0, 0) = 0.5;
  a.grad(0, 1) = -3.0;
  opt.step();
  CHECK(a.value(0, 0) ==
        doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + cfg.eps)).epsilon(1e-12));
  CHECK(a.value(0, 1) ==
        doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + cfg.eps)).epsilon(1e-12));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adam skips frozen parameters and keeps moments per parameter") {
  Parameter a(Tensor2D::filled(1, 1, 1.0), true, "a");
  Parameter f(Tensor2D::filled(1, 1, 1.0), false, "f");
  ad::Adam opt({&a, &f});
  a.grad(0, 0) = 1.0;
  f.grad(0, 0) = 1.0;
  opt.step();
  CHECK(f.value(0, 0) == 1.0);
  CHECK(a.value(0, 0) < 1.0);
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Parameter a(randm(32, 2, 3), true, "a");
  a.grad = Tensor2D::filled(2, 3, 5.0);
  ad::zero_grad({&a});
  CHECK(max_abs(a.grad) == 0.0);
}

TEST_SUITE_END();
