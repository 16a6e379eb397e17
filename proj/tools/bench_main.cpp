// Scaling benchmark CLI. Writes one CSV row per (mechanism, n) and prints the
// fitted log-log slope per mechanism when at least three lengths are given.

#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "lavo/bench.hpp"
#include "lavo/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"scaling benchmark for the attention mechanisms"};
  lavo::bench::BenchConfig cfg;
  cfg.mechanisms = {"lavo", "vanilla"};
  cfg.lengths = {256, 512, 1024};
  std::string out_path = "bench.csv";
  bool strict = false;

  app.add_option("--mechanisms", cfg.mechanisms,
                 "comma-separated subset of lavo,vanilla,naive,local")
      ->delimiter(',');
  app.add_option("--mode", cfg.mode, "forward or decode")
      ->check(CLI::IsMember({"forward", "decode"}));
  app.add_option("--lengths", cfg.lengths, "comma-separated sequence lengths")
      ->delimiter(',');
  app.add_option("--d-model", cfg.d_model, "model width");
  app.add_option("--heads", cfg.heads, "attention heads");
  app.add_option("--num-bases", cfg.num_bases, "memory rows per head");
  app.add_option("--window", cfg.window, "local attention span");
  app.add_option("--reps", cfg.reps, "timed repetitions per cell (median)");
  app.add_option("--warmup", cfg.warmup, "untimed warmup passes per cell");
  app.add_option("--seed", cfg.seed, "seed for weights and inputs");
  app.add_option("--out", out_path, "CSV output path");
  app.add_flag("--strict", strict, "exit nonzero if any cell failed (e.g. oom)");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto records = lavo::bench::run_bench(cfg);
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw lavo::IoError("cannot open " + out_path + " for writing");
    lavo::bench::write_csv(f, records);
    f.flush();
    if (!f) throw lavo::IoError("short write to " + out_path);

    std::map<std::string, std::vector<std::pair<double, double>>> by_mech;
    bool any_failed = false;
    for (const auto& r : records) {
      if (r.failed) {
        any_failed = true;
        std::cout << r.mechanism << " n=" << r.n << " failed (" << r.peak_bytes
                  << ")\n";
        continue;
      }
      std::cout << r.mechanism << " n=" << r.n << " " << r.wall_ns / 1e6
                << " ms, peak " << r.peak_bytes << " bytes\n";
      by_mech[r.mechanism].emplace_back(static_cast<double>(r.n),
                                        static_cast<double>(r.wall_ns));
    }
    for (const auto& [mech, pts] : by_mech) {
      if (pts.size() < 3) continue;
      std::cout << mech << " log-log slope "
                << lavo::bench::fit_loglog_slope(pts) << "\n";
    }
    std::cout << "wrote " << out_path << "\n";
    if (strict && any_failed) {
      std::cerr << "strict mode: at least one cell failed\n";
      return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "bench: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
