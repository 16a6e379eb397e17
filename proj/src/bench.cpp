#include "lavo/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <stdexcept>

#include "lavo/error.hpp"
#include "lavo/lavo_layer.hpp"
#include "lavo/oracles.hpp"

namespace lavo::bench {

const char* const kCsvHeader =
    "mechanism,mode,n,d_model,heads,num_bases,window,seed,wall_ns,peak_bytes";

namespace alloctrack {
namespace {
std::atomic<bool> g_active{false};
std::atomic<long long> g_current{0};
std::atomic<long long> g_peak{0};
}  // namespace

bool active() { return g_active.load(std::memory_order_relaxed); }
void mark_active() { g_active.store(true, std::memory_order_relaxed); }

// Peak restarts from the currently live total, so a measurement window sees
// the true high-water mark of live heap bytes, preexisting blocks included.
void reset() { g_peak.store(g_current.load()); }

std::size_t peak() {
  const long long p = g_peak.load();
  return p > 0 ? static_cast<std::size_t>(p) : 0;
}

void on_alloc(std::size_t bytes) {
  const long long cur =
      g_current.fetch_add(static_cast<long long>(bytes)) + static_cast<long long>(bytes);
  long long pk = g_peak.load();
  while (cur > pk && !g_peak.compare_exchange_weak(pk, cur)) {
  }
}

void on_free(std::size_t bytes) { g_current.fetch_sub(static_cast<long long>(bytes)); }
}  // namespace alloctrack

namespace {

using MatF = Mat<float>;

LavoConfig grid_config(const BenchConfig& bc) {
  LavoConfig c;
  c.d_model = bc.d_model;
  c.heads = bc.heads;
  c.num_bases = bc.num_bases;
  c.window = bc.window;
  c.seed = bc.seed;
  c.check();
  return c;
}

// Same stream layout as the trainable initializer, drawn straight to float.
LavoWeights<float> make_weights(const LavoConfig& cfg) {
  RngState root(cfg.seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  auto proj = [&](std::uint64_t stream) {
    RngState r = root.fork(stream);
    return scale(gaussian_matrix<float>(r, cfg.d_model, cfg.d_model),
                 static_cast<float>(std));
  };
  LavoWeights<float> w;
  w.w_q = proj(0);
  w.w_k = proj(1);
  w.w_v = proj(2);
  w.w_o = proj(3);
  for (long h = 0; h < cfg.heads; ++h) {
    w.basis.push_back(cast_mat<float>(orthogonal_basis(
        cfg.num_bases, cfg.head_dim(), root.fork(8 + static_cast<std::uint64_t>(h)).seed())));
    w.pos.emplace_back(2 * cfg.window - 1, 1);
  }
  return w;
}

MatF bench_input(std::uint64_t seed, long n, long d) {
  RngState r = RngState(seed).fork(0x100000u + static_cast<std::uint64_t>(n));
  return gaussian_matrix<float>(r, n, d);
}

double run_lavo_forward(const MatF& x, const LavoWeights<float>& w,
                        const LavoConfig& cfg) {
  MatF out = lavo::forward(x, w, cfg);
  return out(out.rows() - 1, 0);
}

double run_lavo_decode(const MatF& x, const LavoWeights<float>& w,
                       const LavoConfig& cfg) {
  auto cache = make_cache<float>(cfg);
  MatF row(1, x.cols());
  double acc = 0;
  for (long t = 0; t < x.rows(); ++t) {
    std::memcpy(row.row(0), x.row(t), sizeof(float) * x.cols());
    acc += step(cache, row, w)(0, 0);
  }
  return acc;
}

double run_vanilla_forward(const MatF& x, const LavoWeights<float>& w,
                           const LavoConfig& cfg) {
  const long dh = cfg.head_dim();
  const auto sc = static_cast<float>(attn_scale(dh, cfg.use_scale));
  MatF q = matmul(x, w.w_q);
  MatF k = matmul(x, w.w_k);
  MatF v = matmul(x, w.w_v);
  MatF fused(x.rows(), cfg.d_model);
  for (long h = 0; h < cfg.heads; ++h) {
    MatF outh = oracles::vanilla_attention(
        copy_cols(q, h * dh, dh), copy_cols(k, h * dh, dh), copy_cols(v, h * dh, dh),
        true, sc);
    paste_cols(fused, outh, h * dh);
  }
  MatF out = matmul(fused, w.w_o);
  return out(out.rows() - 1, 0);
}

// Streaming full attention: grow a key/value buffer, rescan the whole prefix
// for every new token.
double run_vanilla_decode(const MatF& x, const LavoWeights<float>& w,
                          const LavoConfig& cfg) {
  const long n = x.rows();
  const long d = cfg.d_model;
  const long dh = cfg.head_dim();
  const auto sc = static_cast<float>(attn_scale(dh, cfg.use_scale));
  MatF kbuf(n, d), vbuf(n, d);
  MatF row(1, d), fused(1, d);
  std::vector<float> sbuf(static_cast<std::size_t>(n));
  double acc = 0;
  for (long t = 0; t < n; ++t) {
    std::memcpy(row.row(0), x.row(t), sizeof(float) * d);
    MatF q = matmul(row, w.w_q);
    MatF kt = matmul(row, w.w_k);
    MatF vt = matmul(row, w.w_v);
    std::memcpy(kbuf.row(t), kt.row(0), sizeof(float) * d);
    std::memcpy(vbuf.row(t), vt.row(0), sizeof(float) * d);
    for (long h = 0; h < cfg.heads; ++h) {
      const float* qr = q.row(0) + h * dh;
      float mx = -std::numeric_limits<float>::infinity();
      for (long j = 0; j <= t; ++j) {
        const float* kr = kbuf.row(j) + h * dh;
        float s = 0;
        for (long c = 0; c < dh; ++c) s += qr[c] * kr[c];
        s *= sc;
        sbuf[j] = s;
        mx = std::max(mx, s);
      }
      float z = 0;
      for (long j = 0; j <= t; ++j) {
        sbuf[j] = std::exp(sbuf[j] - mx);
        z += sbuf[j];
      }
      float* dst = fused.row(0) + h * dh;
      for (long c = 0; c < dh; ++c) dst[c] = 0;
      for (long j = 0; j <= t; ++j) {
        const float wj = sbuf[j] / z;
        const float* vr = vbuf.row(j) + h * dh;
        for (long c = 0; c < dh; ++c) dst[c] += wj * vr[c];
      }
    }
    acc += matmul(fused, w.w_o)(0, 0);
  }
  return acc;
}

double run_naive(const MatF& x, const LavoWeights<float>& w, const LavoConfig& cfg) {
  MatF out = oracles::naive_causal_lavo(x, w, cfg);
  return out(out.rows() - 1, 0);
}

double run_local(const MatF& x, const LavoWeights<float>& w, const LavoConfig& cfg) {
  MatF out = oracles::local_only(x, w, cfg);
  return out(out.rows() - 1, 0);
}

// Rough closed-form live-bytes model, used only when the shim is not linked.
std::size_t estimate_peak_bytes(const std::string& mech, const std::string& mode,
                                long n, const LavoConfig& cfg) {
  const auto nn = static_cast<std::size_t>(n);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto w = static_cast<std::size_t>(cfg.window);
  const auto r = static_cast<std::size_t>(cfg.num_bases);
  std::size_t floats = 0;
  if (mech == "vanilla") {
    floats = (mode == "decode") ? 3 * nn * d + 8 * d : 2 * nn * nn + 6 * nn * d;
  } else if (mech == "lavo") {
    floats = (mode == "decode") ? nn * d + 4 * w * d + r * d + 8 * d
                                : 6 * nn * d + 6 * w * d + 2 * r * d;
  } else {  // naive, local: flat buffers plus per-row scratch
    floats = 5 * nn * d + 2 * w * d;
  }
  return floats * sizeof(float);
}

using Runner = double (*)(const MatF&, const LavoWeights<float>&, const LavoConfig&);

Runner pick_runner(const std::string& mech, const std::string& mode) {
  if (mech == "lavo") return mode == "decode" ? run_lavo_decode : run_lavo_forward;
  if (mech == "vanilla")
    return mode == "decode" ? run_vanilla_decode : run_vanilla_forward;
  if (mech == "naive") return run_naive;  // recomputes per token either way
  if (mech == "local") return run_local;
  throw DataError("run_bench: unknown mechanism '" + mech + "'");
}

volatile double g_sink = 0;  // keeps the optimizer from dropping the work

}  // namespace

std::vector<BenchRecord> run_bench(const BenchConfig& bc) {
  if (bc.mechanisms.empty()) throw DataError("run_bench: no mechanisms selected");
  if (bc.lengths.empty()) throw DataError("run_bench: no sequence lengths given");
  if (bc.mode != "forward" && bc.mode != "decode")
    throw DataError("run_bench: mode must be forward or decode, got '" + bc.mode + "'");
  if (bc.reps < 1) throw DataError("run_bench: reps must be >= 1");
  const std::set<std::string> known{"lavo", "vanilla", "naive", "local"};
  for (const auto& m : bc.mechanisms)
    if (known.count(m) == 0) throw DataError("run_bench: unknown mechanism '" + m + "'");
  for (long n : bc.lengths)
    if (n < 1) throw DataError("run_bench: sequence length must be >= 1");

  const LavoConfig cfg = grid_config(bc);
  const LavoWeights<float> weights = make_weights(cfg);
  std::vector<BenchRecord> records;
  for (const auto& mech : bc.mechanisms) {
    Runner runner = pick_runner(mech, bc.mode);
    for (long n : bc.lengths) {
      BenchRecord rec;
      rec.mechanism = mech;
      rec.mode = bc.mode;
      rec.n = n;
      rec.d_model = cfg.d_model;
      rec.heads = cfg.heads;
      rec.num_bases = cfg.num_bases;
      rec.window = cfg.window;
      rec.seed = bc.seed;
      try {
        MatF x = bench_input(bc.seed, n, cfg.d_model);
        for (int i = 0; i < bc.warmup; ++i) g_sink = runner(x, weights, cfg);
        alloctrack::reset();
        std::vector<long long> times;
        times.reserve(static_cast<std::size_t>(bc.reps));
        for (int i = 0; i < bc.reps; ++i) {
          const auto t0 = std::chrono::steady_clock::now();
          g_sink = runner(x, weights, cfg);
          const auto t1 = std::chrono::steady_clock::now();
          times.push_back(
              std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        const std::size_t m = times.size() / 2;
        rec.wall_ns = (times.size() % 2 == 1) ? times[m] : (times[m - 1] + times[m]) / 2;
        rec.peak_bytes = alloctrack::active()
                             ? std::to_string(alloctrack::peak())
                             : "est:" + std::to_string(
                                            estimate_peak_bytes(mech, bc.mode, n, cfg));
      } catch (const std::bad_alloc&) {
        rec.failed = true;
        rec.wall_ns = 0;
        rec.peak_bytes = "oom";
      } catch (const std::length_error&) {
        rec.failed = true;
        rec.wall_ns = 0;
        rec.peak_bytes = "oom";
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

double fit_loglog_slope(const std::vector<std::pair<double, double>>& n_vs_t) {
  if (n_vs_t.size() < 3)
    throw DataError("fit_loglog_slope: need at least 3 points, got " +
                    std::to_string(n_vs_t.size()));
  double mx = 0, my = 0;
  for (const auto& [n, t] : n_vs_t) {
    if (n <= 0 || t <= 0)
      throw DataError("fit_loglog_slope: points must be positive");
    mx += std::log(n);
    my += std::log(t);
  }
  mx /= static_cast<double>(n_vs_t.size());
  my /= static_cast<double>(n_vs_t.size());
  double sxx = 0, sxy = 0;
  for (const auto& [n, t] : n_vs_t) {
    const double dx = std::log(n) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(t) - my);
  }
  if (sxx == 0) throw DataError("fit_loglog_slope: all n values identical");
  return sxy / sxx;
}

void write_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
  os << kCsvHeader << '\n';
  for (const auto& r : records) {
    os << r.mechanism << ',' << r.mode << ',' << r.n << ',' << r.d_model << ','
       << r.heads << ',' << r.num_bases << ',' << r.window << ',' << r.seed << ','
       << r.wall_ns << ',' << r.peak_bytes << '\n';
  }
}

}  // namespace lavo::bench
