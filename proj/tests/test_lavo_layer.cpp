#include <cmath>

#include "doctest.h"
#include "lavo/lavo_layer.hpp"
#include "lavo/oracles.hpp"

using namespace lavo;

namespace {

LavoConfig base_config() {
  LavoConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 4;
  return cfg;
}

Tensor2D randm(std::uint64_t seed, long r, long c) {
  RngState rng(seed);
  return gaussian_matrix<double>(rng, r, c);
}

}  // namespace

TEST_SUITE_BEGIN("lavo_layer");

TEST_CASE("config invariants") {
  LavoConfig cfg = base_config();
  CHECK_NOTHROW(cfg.check());
  cfg.d_model = 15;
  CHECK_THROWS_AS(cfg.check(), DimError);  // not divisible by heads
  cfg = base_config();
  cfg.num_bases = 9;  // exceeds head_dim = 8
  CHECK_THROWS_AS(cfg.check(), DimError);
  cfg = base_config();
  cfg.window = 0;
  CHECK_THROWS_AS(cfg.check(), DimError);
  cfg = base_config();
  cfg.num_bases = 0;
  CHECK_THROWS_AS(cfg.check(), DimError);
}

TEST_CASE("init is deterministic and weights validate") {
  const LavoConfig cfg = base_config();
  LavoParams a = LavoParams::init(cfg, 0.25);
  LavoParams b = LavoParams::init(cfg, 0.25);
  CHECK(max_abs_diff(a.w_q.value, b.w_q.value) == 0.0);
  CHECK(max_abs_diff(a.basis[1].value, b.basis[1].value) == 0.0);
  CHECK(max_abs(a.pos[0].value) == 0.0);
  CHECK(!a.basis[0].trainable);  // frozen by default
  CHECK(a.pos[0].value.rows() == 2 * cfg.window - 1);
  const LavoWeights<double> w = a.weights();
  CHECK_NOTHROW(w.check(cfg));
  LavoWeights<double> bad = w;
  bad.basis[0] = Tensor2D(3, 8);
  CHECK_THROWS_AS(bad.check(cfg), DimError);
}

TEST_CASE("per-head bases differ") {
  const LavoParams p = LavoParams::init(base_config(), 0.25);
  CHECK(max_abs_diff(p.basis[0].value, p.basis[1].value) > 1e-3);
}

TEST_CASE("forward validates input") {
  const LavoConfig cfg = base_config();
  const LavoParams p = LavoParams::init(cfg, 0.25);
  CHECK_THROWS_AS(forward(Tensor2D(0, 16), p, cfg), DataError);
  CHECK_THROWS_AS(forward(Tensor2D(4, 15), p, cfg), DimError);
}

TEST_CASE("first window has no global feature yet") {
  // While the memory is empty the output must be the local path alone, which
  // for n <= window equals the plain local-only reference.
  LavoConfig cfg = base_config();
  const LavoParams p = LavoParams::init(cfg, 0.25);
  const Tensor2D x = randm(40, cfg.window, cfg.d_model);
  const Tensor2D y = forward(x, p, cfg);
  const Tensor2D loc = oracles::local_only(x, p.weights(), cfg);
  CHECK(max_abs_diff(y, loc) < 1e-12);
}

TEST_CASE("causal outputs ignore future edits in every mode") {
  RngState rng(41);
  double worst = 0;
  for (bool dissect : {true, false})
    for (bool epe : {true, false}) {
      LavoConfig cfg = base_config();
      cfg.use_dissection = dissect;
      cfg.use_epe = epe;
      const long n = 4 * cfg.window + 2;
      const LavoParams p = LavoParams::init(cfg, 0.25);
      Tensor2D x = randm(42, n, cfg.d_model);
      const Tensor2D y = forward(x, p, cfg);
      const long t = 2 * cfg.window + 1;
      for (long i = t + 1; i < n; ++i)
        for (long j = 0; j < cfg.d_model; ++j) x(i, j) = rng.next_gaussian();
      const Tensor2D y2 = forward(x, p, cfg);
      worst = std::max(
          worst, max_abs_diff(copy_rows(y, 0, t + 1), copy_rows(y2, 0, t + 1)));
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("noncausal outputs react to future context") {
  LavoConfig cfg = base_config();
  cfg.causal = false;
  const long n = 3 * cfg.window;
  const LavoParams p = LavoParams::init(cfg, 0.25);
  Tensor2D x = randm(43, n, cfg.d_model);
  const Tensor2D y = forward(x, p, cfg);
  x(n - 1, 0) += 1.0;
  const Tensor2D y2 = forward(x, p, cfg);
  CHECK(max_abs_diff(copy_rows(y, 0, 1), copy_rows(y2, 0, 1)) > 1e-9);
}

TEST_CASE("noncausal attends the window span even for partial tails") {
  // n not divisible by w: the last window's queries extend left so every
  // query still sees exactly w keys. Sanity: runs clean, stays finite.
  LavoConfig cfg = base_config();
  cfg.causal = false;
  for (long n : {cfg.window - 1, 2 * cfg.window + 3, 3 * cfg.window + 1}) {
    const LavoParams p = LavoParams::init(cfg, 0.25);
    const Tensor2D y = forward(randm(44, n, cfg.d_model), p, cfg);
    CHECK(all_finite(y));
    CHECK(y.rows() == n);
  }
}

TEST_CASE("causal bias reads only backward offsets") {
  // Entries for future offsets (indices window-1+1 .. 2w-2) must never be
  // read causally: poking them cannot move any output.
  LavoConfig cfg = base_config();
  const long n = 3 * cfg.window + 2;
  LavoParams p = LavoParams::init(cfg, 0.25);
  for (long h = 0; h < cfg.heads; ++h)
    for (long i = 0; i < 2 * cfg.window - 1; ++i)
      p.pos[h].value(i, 0) = 0.01 * static_cast<double>(i + h);
  const Tensor2D x = randm(45, n, cfg.d_model);
  const Tensor2D y = forward(x, p, cfg);
  for (long h = 0; h < cfg.heads; ++h)
    for (long i = cfg.window; i < 2 * cfg.window - 1; ++i)
      p.pos[h].value(i, 0) += 7.5;
  const Tensor2D y2 = forward(x, p, cfg);
  CHECK(max_abs_diff(y, y2) == 0.0);
  // while backward offsets do matter
  p.pos[0].value(0, 0) += 1.0;
  const Tensor2D y3 = forward(x, p, cfg);
  CHECK(max_abs_diff(y, y3) > 1e-9);
}

TEST_CASE("noncausal bias does read forward offsets") {
  LavoConfig cfg = base_config();
  cfg.causal = false;
  const long n = 2 * cfg.window;
  LavoParams p = LavoParams::init(cfg, 0.25);
  const Tensor2D x = randm(46, n, cfg.d_model);
  const Tensor2D y = forward(x, p, cfg);
  p.pos[0].value(2 * cfg.window - 2, 0) += 1.0;  // most-forward entry
  const Tensor2D y2 = forward(x, p, cfg);
  CHECK(max_abs_diff(y, y2) > 1e-9);
}

TEST_CASE("disabling the bias equals a zero table, bitwise") {
  LavoConfig with = base_config();
  with.use_epe = true;
  LavoConfig without = base_config();
  without.use_epe = false;
  for (bool dissect : {true, false}) {
    with.use_dissection = dissect;
    without.use_dissection = dissect;
    const LavoParams p = LavoParams::init(with, 0.25);  // pos tables start at 0
    const Tensor2D x = randm(47, 3 * with.window + 1, with.d_model);
    CHECK(max_abs_diff(forward(x, p, with), forward(x, p, without)) == 0.0);
  }
}

TEST_CASE("streaming step equals forward on every prefix") {
  RngState rng(48);
  double worst = 0;
  for (bool dissect : {true, false})
    for (bool epe : {true, false}) {
      LavoConfig cfg = base_config();
      cfg.use_dissection = dissect;
      cfg.use_epe = epe;
      const long n = 3 * cfg.window + 2;  // deliberately not window-aligned
      LavoParams p = LavoParams::init(cfg, 0.25);
      for (long h = 0; h < cfg.heads; ++h)
        for (long i = 0; i < 2 * cfg.window - 1; ++i)
          p.pos[h].value(i, 0) = 0.05 * rng.next_gaussian();
      const Tensor2D x = randm(49, n, cfg.d_model);
      const Tensor2D whole = forward(x, p, cfg);
      CausalCache cache = make_cache<double>(cfg);
      for (long t = 0; t < n; ++t) {
        const Tensor2D out = step(cache, copy_rows(x, t, 1), p);
        worst = std::max(worst, max_abs_diff(out, copy_rows(whole, t, 1)));
      }
      CHECK(cache.t == n);
    }
  CHECK(worst < 1e-8);
}

TEST_CASE("cache serialization size never grows with t") {
  LavoConfig cfg = base_config();
  const LavoParams p = LavoParams::init(cfg, 0.25);
  CausalCache cache = make_cache<double>(cfg);
  const std::size_t fresh = cache.serialize().size();
  CHECK(fresh == cache.serialized_size());
  RngState rng(50);
  for (long t = 0; t < 10 * cfg.window; ++t) {
    Tensor2D row(1, cfg.d_model);
    for (long j = 0; j < cfg.d_model; ++j) row(0, j) = rng.next_gaussian();
    step(cache, row, p);
    CHECK(cache.serialize().size() == fresh);
  }
}

TEST_CASE("cache refuses noncausal configs and bad rows") {
  LavoConfig cfg = base_config();
  cfg.causal = false;
  CHECK_THROWS_AS(make_cache<double>(cfg), ContractError);
  cfg.causal = true;
  CausalCache cache = make_cache<double>(cfg);
  const LavoParams p = LavoParams::init(cfg, 0.25);
  CHECK_THROWS_AS(step(cache, Tensor2D(2, cfg.d_model), p), DimError);
  CHECK_THROWS_AS(step(cache, Tensor2D(1, cfg.d_model + 1), p), DimError);
}

TEST_CASE("first step equals x W_v W_o") {
  // Token 0 attends only to itself: softmax over one key is 1, there is no
  // memory yet, so the layer collapses to the value/output projections.
  LavoConfig cfg = base_config();
  const LavoParams p = LavoParams::init(cfg, 0.25);
  CausalCache cache = make_cache<double>(cfg);
  const Tensor2D x0 = randm(51, 1, cfg.d_model);
  const Tensor2D out = step(cache, x0, p);
  const Tensor2D expect = matmul(matmul(x0, p.w_v.value), p.w_o.value);
  CHECK(max_abs_diff(out, expect) < 1e-12);
}

TEST_CASE("recorded forward matches the plain forward") {
  RngState rng(52);
  double worst = 0;
  for (bool dissect : {true, false}) {
    LavoConfig cfg = base_config();
    cfg.use_dissection = dissect;
    const long n = 3 * cfg.window + 2;
    LavoParams p = LavoParams::init(cfg, 0.25);
    for (long h = 0; h < cfg.heads; ++h)
      for (long i = 0; i < 2 * cfg.window - 1; ++i)
        p.pos[h].value(i, 0) = 0.05 * rng.next_gaussian();
    const Tensor2D x = randm(53, n, cfg.d_model);
    ad::Tape tp;
    const Tensor2D rec = forward_train(tp, tp.leaf(x), p, cfg).val();
    worst = std::max(worst, max_abs_diff(rec, forward(x, p, cfg)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("recorded forward rejects noncausal configs") {
  LavoConfig cfg = base_config();
  cfg.causal = false;
  LavoParams p = LavoParams::init(cfg, 0.25);
  ad::Tape tp;
  const ad::Value x = tp.leaf(Tensor2D(4, cfg.d_model));
  CHECK_THROWS_AS(forward_train(tp, x, p, cfg), ContractError);
}

TEST_CASE("complexity audit scales the way the design says") {
  LavoConfig cfg = base_config();
  cfg.d_model = 64;
  cfg.heads = 2;
  cfg.num_bases = 16;
  cfg.window = 16;
  const long n = 512;
  const long long c1 = complexity_audit(cfg, n);
  // doubling n (window-aligned) exactly doubles the count
  CHECK(complexity_audit(cfg, 2 * n) == 2 * c1);
  // widening the window raises only the local term, by n*w*d per extra... the
  // delta between w and 2w is the local term itself plus the halved
  // per-window materialization
  LavoConfig wide = cfg;
  wide.window = 32;
  const long long local_term = 2LL * n * cfg.window * cfg.d_model + n * cfg.window;
  const long long dc = complexity_audit(wide, n) - c1;
  CHECK(dc >= local_term / 2);
  CHECK(dc <= 2 * local_term);
  // r = 0 with window = n collapses to the quadratic count
  LavoConfig quad = cfg;
  quad.num_bases = 0;
  quad.window = n;
  quad.use_epe = false;
  const long long q = complexity_audit(quad, n);
  const long long quadratic = 2LL * n * n * cfg.d_model;
  CHECK(q >= quadratic);
  CHECK(q - quadratic == 4LL * n * cfg.d_model * cfg.d_model + n * cfg.d_model);
  CHECK_THROWS_AS(complexity_audit(cfg, 0), DataError);
}

TEST_CASE("audit grows linearly in n at fixed w and r") {
  const LavoConfig cfg = base_config();
  const long long a = complexity_audit(cfg, 100 * cfg.window);
  const long long b = complexity_audit(cfg, 200 * cfg.window);
  const long long c = complexity_audit(cfg, 300 * cfg.window);
  CHECK(b - a == c - b);
}

TEST_SUITE_END();
