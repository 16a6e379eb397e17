#pragma once

// Scaling benchmark over the layer and its quadratic baselines. Runs in
// single precision, times with steady_clock, reports the median over reps
// after a warmup pass, and writes one fixed-format CSV row per (mechanism, n).
//
// peak_bytes is a real measurement when the allocation shim (alloc_shim.cpp)
// is linked into the binary; otherwise it falls back to an "est:"-prefixed
// closed-form estimate. Out-of-memory runs produce a row with failed=true,
// wall_ns=0 and peak_bytes="oom" instead of aborting the grid.

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace lavo::bench {

struct BenchConfig {
  std::vector<std::string> mechanisms;  // lavo | vanilla | naive | local
  std::string mode = "forward";         // forward | decode
  std::vector<long> lengths;
  long d_model = 64;
  long heads = 2;
  long num_bases = 16;
  long window = 16;
  int reps = 5;
  int warmup = 1;
  std::uint64_t seed = 42;
};

struct BenchRecord {
  std::string mechanism;
  std::string mode;
  long n = 0;
  long d_model = 0;
  long heads = 0;
  long num_bases = 0;
  long window = 0;
  std::uint64_t seed = 0;
  long long wall_ns = 0;
  std::string peak_bytes;
  bool failed = false;
};

std::vector<BenchRecord> run_bench(const BenchConfig& cfg);

// Least-squares slope of log(t) against log(n). Throws DataError with fewer
// than three points or any nonpositive coordinate.
double fit_loglog_slope(const std::vector<std::pair<double, double>>& n_vs_t);

extern const char* const kCsvHeader;
void write_csv(std::ostream& os, const std::vector<BenchRecord>& records);

// Hooks the operator-new shim reports into. Without the shim linked in,
// active() stays false and peaks fall back to the estimate.
namespace alloctrack {
bool active();
void mark_active();
void reset();
std::size_t peak();
void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);
}  // namespace alloctrack

}  // namespace lavo::bench
