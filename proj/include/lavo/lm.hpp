#pragma once

// A tiny byte-level causal language model over the layer: tied input/output
// embedding, pre-norm residual blocks (attention, then a 4x GELU feed-forward),
// and a final layer norm whose gain starts at zero. With the head tied to the
// embedding, the zero gain is what makes the untrained model exactly uniform
// over the vocabulary: the first loss of any run is ln(257).
//
// Everything is deterministic: parameter draws, batch sampling, and decoding
// all derive from the config seed, single-threaded.

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "lavo/autodiff.hpp"
#include "lavo/lavo_layer.hpp"

namespace lavo::lm {

inline constexpr long kVocab = 257;  // 256 byte values + one spare id

struct LmConfig {
  long d_model = 64;
  long layers = 2;
  long heads = 2;
  long num_bases = 16;
  long window = 16;
  long ctx = 256;
  bool use_epe = true;
  bool use_dissection = true;
  double lr = 3e-4;
  long batch = 8;
  long steps = 2000;
  std::uint64_t seed = 42;

  void check() const;
  LavoConfig layer_config(long layer) const;  // per-layer seed derived from ours
};

struct Block {
  ad::Parameter ln1_g, ln1_b;
  LavoParams attn;
  ad::Parameter ln2_g, ln2_b;
  ad::Parameter ffn_w1, ffn_b1;  // d -> 4d
  ad::Parameter ffn_w2, ffn_b2;  // 4d -> d
};

struct LmModel {
  LmConfig cfg;
  ad::Parameter embed;          // kVocab x d_model, also the output head
  std::vector<Block> blocks;
  ad::Parameter lnf_g, lnf_b;   // final norm; gain zero-initialized

  static LmModel init(const LmConfig& cfg);

  // Fixed order; names double as the checkpoint tensor names.
  std::vector<std::pair<std::string, ad::Parameter*>> named_parameters();
  std::vector<ad::Parameter*> parameters();
  long long parameter_count();

  // Mean next-byte cross entropy of one (input, target) pair, recorded on tp.
  ad::Value sequence_loss(ad::Tape& tp, const std::uint8_t* inp,
                          const std::uint8_t* tgt, long len);

  // Streaming evaluation state: per-layer decode caches plus weights
  // materialized once. Memory use is fixed by the config, not by position.
  struct DecodeState {
    std::vector<CausalCache> caches;
    std::vector<LavoWeights<double>> wts;
    Tensor2D head_t;  // d_model x kVocab, the tied head pre-transposed
  };
  DecodeState begin_decode() const;
  Tensor2D decode_step(DecodeState& st, std::uint8_t byte) const;  // 1 x kVocab logits
};

// Deterministic sampler of training pairs out of a byte buffer.
class CorpusStream {
 public:
  CorpusStream(const std::uint8_t* data, std::size_t size, long ctx,
               std::uint64_t seed);
  void next(std::uint8_t* inp, std::uint8_t* tgt);  // each ctx bytes long

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  long ctx_;
  RngState rng_;
};

// First 90% of the corpus trains, the last 10% is held out.
std::pair<std::size_t, std::size_t> train_slice(std::size_t corpus_size);
std::pair<std::size_t, std::size_t> heldout_slice(std::size_t corpus_size);

struct TrainResult {
  std::vector<double> loss;  // one entry per step
};

// Adam on everything trainable; throws DataError on a corpus shorter than
// 10 * ctx or on a non-finite loss (naming the step).
TrainResult train(LmModel& model, const std::vector<std::uint8_t>& corpus,
                  std::ostream* log);

// exp(mean next-byte cross entropy) over non-overlapping windows of eval_len,
// running the streaming decode path. max_windows = 0 means all full windows.
double eval_ppl(LmModel& model, const std::uint8_t* data, std::size_t size,
                long eval_len, long max_windows = 0);

// Checkpoint file: "LAVO" magic, u32 version, u64 header length, a JSON header
// (config + tensor table), then all tensors as little-endian f32 row-major.
void save_checkpoint(const std::string& path, LmModel& model);
LmModel load_checkpoint(const std::string& path);

// Deterministic English-shaped filler text, for tests and the selftest.
std::vector<std::uint8_t> make_synthetic_corpus(std::uint64_t seed,
                                                std::size_t bytes);

}  // namespace lavo::lm
