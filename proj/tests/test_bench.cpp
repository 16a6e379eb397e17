#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "lavo/bench.hpp"
#include "lavo/error.hpp"

using namespace lavo;
using namespace lavo::bench;

TEST_SUITE_BEGIN("bench");

TEST_CASE("csv header is the pinned contract") {
  CHECK(std::string(kCsvHeader) ==
        "mechanism,mode,n,d_model,heads,num_bases,window,seed,wall_ns,peak_bytes");
}

TEST_CASE("slope fit recovers exact power laws") {
  std::vector<std::pair<double, double>> quad, lin;
  for (double v : {256.0, 512.0, 1024.0, 2048.0}) {
    quad.emplace_back(v, 3.5 * v * v);
    lin.emplace_back(v, 0.25 * v);
  }
  CHECK(std::abs(fit_loglog_slope(quad) - 2.0) < 1e-9);
  CHECK(std::abs(fit_loglog_slope(lin) - 1.0) < 1e-9);
}

TEST_CASE("slope fit rejects unusable inputs") {
  CHECK_THROWS_AS(fit_loglog_slope({{128, 1.0}, {256, 2.0}}), DataError);
  CHECK_THROWS_AS(fit_loglog_slope({{128, 1.0}, {256, 0.0}, {512, 2.0}}), DataError);
  CHECK_THROWS_AS(fit_loglog_slope({{-128, 1.0}, {256, 2.0}, {512, 3.0}}), DataError);
  CHECK_THROWS_AS(fit_loglog_slope({{128, 1.0}, {128, 2.0}, {128, 3.0}}), DataError);
}

TEST_CASE("bench run produces one record per mechanism and length") {
  BenchConfig cfg;
  cfg.mechanisms = {"lavo", "local"};
  cfg.lengths = {32, 64};
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 8;
  cfg.reps = 1;
  cfg.warmup = 0;
  const std::vector<BenchRecord> recs = run_bench(cfg);
  REQUIRE(recs.size() == 4);
  CHECK(recs[0].mechanism == "lavo");
  CHECK(recs[0].n == 32);
  CHECK(recs[1].mechanism == "lavo");
  CHECK(recs[1].n == 64);
  CHECK(recs[2].mechanism == "local");
  CHECK(recs[3].mechanism == "local");
  for (const BenchRecord& r : recs) {
    CHECK(!r.failed);
    CHECK(r.wall_ns > 0);
    CHECK(r.mode == "forward");
    CHECK(r.d_model == 16);
    CHECK(r.window == 8);
    CHECK(r.seed == 42);
    CHECK(!r.peak_bytes.empty());
  }
}

TEST_CASE("decode mode runs the streaming path") {
  BenchConfig cfg;
  cfg.mechanisms = {"lavo"};
  cfg.mode = "decode";
  cfg.lengths = {48};
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 8;
  cfg.reps = 1;
  cfg.warmup = 0;
  const std::vector<BenchRecord> recs = run_bench(cfg);
  REQUIRE(recs.size() == 1);
  CHECK(!recs[0].failed);
  CHECK(recs[0].mode == "decode");
  CHECK(recs[0].wall_ns > 0);
}

TEST_CASE("bad bench setups are refused") {
  BenchConfig cfg;
  cfg.lengths = {32};
  cfg.d_model = 16;
  cfg.num_bases = 4;
  cfg.window = 8;
  cfg.mechanisms = {"warp_drive"};
  CHECK_THROWS_AS(run_bench(cfg), DataError);
  cfg.mechanisms = {"lavo"};
  cfg.mode = "sideways";
  CHECK_THROWS_AS(run_bench(cfg), DataError);
  cfg.mode = "forward";
  cfg.lengths = {};
  CHECK_THROWS_AS(run_bench(cfg), DataError);
  cfg.lengths = {32};
  cfg.reps = 0;
  CHECK_THROWS_AS(run_bench(cfg), DataError);
  cfg.reps = 1;
  cfg.mechanisms = {};
  CHECK_THROWS_AS(run_bench(cfg), DataError);
  cfg.mechanisms = {"lavo"};
  cfg.lengths = {0};
  CHECK_THROWS_AS(run_bench(cfg), DataError);
}

TEST_CASE("static record fields are reproducible across runs") {
  BenchConfig cfg;
  cfg.mechanisms = {"lavo"};
  cfg.lengths = {32, 64};
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 8;
  cfg.reps = 1;
  cfg.warmup = 0;
  const auto a = run_bench(cfg);
  const auto b = run_bench(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mechanism == b[i].mechanism);
    CHECK(a[i].n == b[i].n);
    CHECK(a[i].seed == b[i].seed);
    CHECK(a[i].failed == b[i].failed);
  }
}

TEST_CASE("csv writer emits the header and one comma-separated row per record") {
  BenchRecord r;
  r.mechanism = "lavo";
  r.mode = "forward";
  r.n = 128;
  r.d_model = 16;
  r.heads = 2;
  r.num_bases = 4;
  r.window = 8;
  r.seed = 42;
  r.wall_ns = 1234567;
  r.peak_bytes = "4096";
  std::ostringstream os;
  write_csv(os, {r});
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == std::string(kCsvHeader));
  std::getline(in, line);
  CHECK(line == "lavo,forward,128,16,2,4,8,42,1234567,4096");
  CHECK(!std::getline(in, line));
}

TEST_SUITE_END();
