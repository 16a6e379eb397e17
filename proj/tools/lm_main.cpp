// Byte-level language model CLI: train on a corpus, evaluate perplexity from a
// checkpoint, or run the built-in selftest battery.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lavo/error.hpp"
#include "lavo/lm.hpp"
#include "lavo/oracles.hpp"

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw lavo::IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> load_corpus(const std::string& path, long synthetic_kb,
                                      std::uint64_t seed) {
  if (!path.empty()) return read_file(path);
  if (synthetic_kb <= 0)
    throw lavo::DataError("no corpus: pass --corpus or --synthetic-kb");
  return lavo::lm::make_synthetic_corpus(seed,
                                         static_cast<std::size_t>(synthetic_kb) * 1024);
}

// --- selftest -------------------------------------------------------------

struct SelfTest {
  int failures = 0;

  void check(bool ok, const std::string& name, const std::string& detail = "") {
    if (ok) {
      std::cout << "ok " << name << "\n";
    } else {
      ++failures;
      std::cout << "FAIL " << name << (detail.empty() ? "" : " (" + detail + ")")
                << "\n";
    }
  }
};

void selftest_compression(SelfTest& st) {
  lavo::RngState rng(11);
  double worst = 0;
  for (int c = 0; c < 10; ++c) {
    const long d = 4 + static_cast<long>(rng.next_double() * 12);
    const long r = 1 + static_cast<long>(rng.next_double() * d);
    const long n = 1 + static_cast<long>(rng.next_double() * 40);
    const lavo::Tensor2D basis = lavo::orthogonal_basis(std::min(r, d), d, 100 + c);
    lavo::RngState xr = rng.fork(static_cast<std::uint64_t>(c));
    const lavo::Tensor2D x = lavo::gaussian_matrix<double>(xr, n, d);
    const lavo::Tensor2D batch = lavo::compress(x, basis);
    lavo::OrthoMemoryState state(std::min(r, d));
    for (long i = 0; i < n; ++i) state.update(basis, x.row(i), d);
    worst = std::max(worst, lavo::max_abs_diff(batch, *state.read(basis)));
  }
  st.check(worst < 1e-10, "compression batch == recurrent",
           "diff " + std::to_string(worst));
}

void selftest_orthonormal(SelfTest& st) {
  double worst = 0;
  for (auto [r, d] : {std::pair<long, long>{1, 1}, {4, 8}, {16, 16}, {8, 64}}) {
    lavo::OrthogonalBasis b = lavo::make_basis(r, d, 7);
    worst = std::max(worst, b.orthonormality_error());
  }
  st.check(worst < 1e-10, "bases orthonormal", "err " + std::to_string(worst));
}

lavo::LavoConfig small_config(lavo::RngState& rng) {
  lavo::LavoConfig cfg;
  cfg.heads = rng.next_double() < 0.5 ? 1 : 2;
  cfg.d_model = cfg.heads * (4 + 4 * static_cast<long>(rng.next_double() * 3));
  cfg.num_bases = 1 + static_cast<long>(rng.next_double() * (cfg.head_dim() - 1));
  cfg.window = 1 + static_cast<long>(rng.next_double() * 5);
  cfg.use_epe = rng.next_double() < 0.7;
  cfg.use_dissection = rng.next_double() < 0.7;
  cfg.seed = rng.next_u64();
  return cfg;
}

void selftest_causality(SelfTest& st) {
  lavo::RngState rng(21);
  double worst = 0;
  for (int c = 0; c < 4; ++c) {
    lavo::LavoConfig cfg = small_config(rng);
    const long n = 4 * cfg.window + 3;
    lavo::LavoParams params = lavo::LavoParams::init(cfg, 0.3);
    lavo::RngState xr = rng.fork(static_cast<std::uint64_t>(900 + c));
    lavo::Tensor2D x = lavo::gaussian_matrix<double>(xr, n, cfg.d_model);
    const lavo::Tensor2D y = lavo::forward(x, params, cfg);
    const long t = static_cast<long>(rng.next_double() * (n - 1));
    for (long i = t + 1; i < n; ++i)
      for (long j = 0; j < cfg.d_model; ++j) x(i, j) = xr.next_gaussian();
    const lavo::Tensor2D y2 = lavo::forward(x, params, cfg);
    worst = std::max(worst, lavo::max_abs_diff(lavo::copy_rows(y, 0, t + 1),
                                               lavo::copy_rows(y2, 0, t + 1)));
  }
  st.check(worst < 1e-12, "future edits never reach the past",
           "diff " + std::to_string(worst));
}

void selftest_oracle(SelfTest& st) {
  lavo::RngState rng(31);
  double worst = 0;
  for (int c = 0; c < 4; ++c) {
    lavo::LavoConfig cfg = small_config(rng);
    const long n = 3 * cfg.window + 1;
    lavo::LavoParams params = lavo::LavoParams::init(cfg, 0.3);
    lavo::RngState xr = rng.fork(static_cast<std::uint64_t>(700 + c));
    const lavo::Tensor2D x = lavo::gaussian_matrix<double>(xr, n, cfg.d_model);
    worst = std::max(worst,
                     lavo::max_abs_diff(lavo::forward(x, params, cfg),
                                        lavo::oracles::naive_causal_lavo(
                                            x, params.weights(), cfg)));
  }
  st.check(worst < 1e-8, "forward matches the naive oracle",
           "diff " + std::to_string(worst));
}

void selftest_step(SelfTest& st) {
  lavo::RngState rng(41);
  double worst = 0;
  for (int c = 0; c < 2; ++c) {
    lavo::LavoConfig cfg = small_config(rng);
    const long n = 3 * cfg.window + 2;
    lavo::LavoParams params = lavo::LavoParams::init(cfg, 0.3);
    lavo::RngState xr = rng.fork(static_cast<std::uint64_t>(500 + c));
    const lavo::Tensor2D x = lavo::gaussian_matrix<double>(xr, n, cfg.d_model);
    const lavo::Tensor2D whole = lavo::forward(x, params, cfg);
    lavo::CausalCache cache = lavo::make_cache<double>(cfg);
    for (long t = 0; t < n; ++t) {
      const lavo::Tensor2D out = lavo::step(cache, lavo::copy_rows(x, t, 1), params);
      worst = std::max(worst, lavo::max_abs_diff(out, lavo::copy_rows(whole, t, 1)));
    }
  }
  st.check(worst < 1e-8, "streaming step matches forward",
           "diff " + std::to_string(worst));
}

void selftest_checkpoint(SelfTest& st) {
  lavo::lm::LmConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 4;
  cfg.ctx = 16;
  cfg.seed = 5;
  lavo::lm::LmModel m = lavo::lm::LmModel::init(cfg);
  const std::string p1 = "selftest_a.lavo";
  const std::string p2 = "selftest_b.lavo";
  lavo::lm::save_checkpoint(p1, m);
  lavo::lm::LmModel m2 = lavo::lm::load_checkpoint(p1);
  lavo::lm::save_checkpoint(p2, m2);
  const bool same = read_file(p1) == read_file(p2);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  st.check(same, "checkpoint round trip is bitwise stable");
}

void selftest_train(SelfTest& st) {
  lavo::lm::LmConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.num_bases = 4;
  cfg.window = 4;
  cfg.ctx = 32;
  cfg.batch = 2;
  cfg.steps = 3;
  cfg.seed = 5;
  lavo::lm::LmModel m = lavo::lm::LmModel::init(cfg);
  const auto corpus = lavo::lm::make_synthetic_corpus(9, 4096);
  const auto res = lavo::lm::train(m, corpus, nullptr);
  const double first = res.loss.front();
  st.check(std::abs(first - std::log(257.0)) < 1e-9 &&
               std::isfinite(res.loss.back()),
           "fresh model starts exactly uniform and trains",
           "first loss " + std::to_string(first));
}

int run_selftest() {
  SelfTest st;
  selftest_compression(st);
  selftest_orthonormal(st);
  selftest_causality(st);
  selftest_oracle(st);
  selftest_step(st);
  selftest_checkpoint(st);
  selftest_train(st);
  std::cout << (st.failures == 0 ? "selftest passed" : "selftest FAILED") << "\n";
  return st.failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiny byte-level language model"};
  app.require_subcommand(1);

  lavo::lm::LmConfig cfg;
  std::string corpus_path;
  long synthetic_kb = 0;
  std::string model_path = "model.lavo";
  bool no_epe = false, no_dissect = false;

  CLI::App* tr = app.add_subcommand("train", "train from scratch and save");
  tr->add_option("--corpus", corpus_path, "path to a byte corpus");
  tr->add_option("--synthetic-kb", synthetic_kb,
                 "generate this many KiB of deterministic filler text instead");
  tr->add_option("--out", model_path, "checkpoint output path");
  tr->add_option("--d-model", cfg.d_model);
  tr->add_option("--layers", cfg.layers);
  tr->add_option("--heads", cfg.heads);
  tr->add_option("--num-bases", cfg.num_bases);
  tr->add_option("--window", cfg.window);
  tr->add_option("--ctx", cfg.ctx);
  tr->add_option("--lr", cfg.lr);
  tr->add_option("--batch", cfg.batch);
  tr->add_option("--steps", cfg.steps);
  tr->add_option("--seed", cfg.seed);
  tr->add_flag("--no-epe", no_epe, "drop the relative position bias");
  tr->add_flag("--no-dissect", no_dissect,
               "plain sliding window plus whole-prefix memory");

  std::vector<long> eval_lens{256};
  std::string slice = "heldout";
  long max_windows = 0;
  CLI::App* ev = app.add_subcommand("eval", "perplexity of a saved model");
  ev->add_option("--model", model_path, "checkpoint path")->required();
  ev->add_option("--corpus", corpus_path, "path to a byte corpus");
  ev->add_option("--synthetic-kb", synthetic_kb,
                 "evaluate on deterministic filler text instead");
  ev->add_option("--eval-lens", eval_lens, "comma-separated window lengths")
      ->delimiter(',');
  ev->add_option("--slice", slice, "heldout, train, or all")
      ->check(CLI::IsMember({"heldout", "train", "all"}));
  ev->add_option("--max-windows", max_windows, "cap on windows per length, 0 = all");
  ev->add_option("--seed", cfg.seed, "seed for --synthetic-kb");

  CLI::App* se = app.add_subcommand("selftest", "run the invariant battery");

  CLI11_PARSE(app, argc, argv);

  try {
    if (se->parsed()) return run_selftest();

    if (tr->parsed()) {
      cfg.use_epe = !no_epe;
      cfg.use_dissection = !no_dissect;
      const auto corpus = load_corpus(corpus_path, synthetic_kb, cfg.seed);
      lavo::lm::LmModel model = lavo::lm::LmModel::init(cfg);
      std::cout << "parameters: " << model.parameter_count() << ", corpus: "
                << corpus.size() << " bytes\n";
      const auto res = lavo::lm::train(model, corpus, &std::cout);
      lavo::lm::save_checkpoint(model_path, model);
      std::cout << "final loss " << res.loss.back() << ", saved " << model_path
                << "\n";
      return 0;
    }

    // eval
    lavo::lm::LmModel model = lavo::lm::load_checkpoint(model_path);
    const auto corpus = load_corpus(corpus_path, synthetic_kb, cfg.seed);
    std::size_t off = 0, len = corpus.size();
    if (slice == "heldout") {
      std::tie(off, len) = lavo::lm::heldout_slice(corpus.size());
    } else if (slice == "train") {
      std::tie(off, len) = lavo::lm::train_slice(corpus.size());
    }
    for (long L : eval_lens) {
      const double ppl =
          lavo::lm::eval_ppl(model, corpus.data() + off, len, L, max_windows);
      std::cout << "eval_len " << L << " ppl " << ppl << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "lm: " << e.what() << "\n";
    return 2;
  }
}
