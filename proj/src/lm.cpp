#include "lavo/lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>

#include "json.hpp"

namespace lavo::lm {

void LmConfig::check() const {
  if (layers < 1) throw DimError("LmConfig: layers must be >= 1");
  if (ctx < 2) throw DimError("LmConfig: ctx must be >= 2");
  if (batch < 1) throw DimError("LmConfig: batch must be >= 1");
  if (steps < 1) throw DimError("LmConfig: steps must be >= 1");
  if (!(lr > 0)) throw DimError("LmConfig: lr must be positive");
  layer_config(0).check();
}

LavoConfig LmConfig::layer_config(long layer) const {
  LavoConfig c;
  c.d_model = d_model;
  c.heads = heads;
  c.num_bases = num_bases;
  c.window = window;
  c.use_epe = use_epe;
  c.use_dissection = use_dissection;
  c.causal = true;
  c.use_scale = true;
  c.train_bases = false;
  c.seed = RngState(seed).fork(0x4C00u + static_cast<std::uint64_t>(layer)).seed();
  return c;
}

// Seed streams inside the model: 1 embedding, 0x100 + 4*layer the two
// feed-forward mats of each block. Attention layers draw from their own
// per-layer seed (see layer_config); norms start at constants.
LmModel LmModel::init(const LmConfig& cfg) {
  cfg.check();
  RngState root(cfg.seed);
  const double wstd = 0.02;
  auto gauss = [&](std::uint64_t stream, long rows, long cols) {
    RngState r = root.fork(stream);
    return scale(gaussian_matrix<double>(r, rows, cols), wstd);
  };
  LmModel m{cfg,
            ad::Parameter(gauss(1, kVocab, cfg.d_model), true, "embed"),
            {},
            ad::Parameter(Tensor2D(1, cfg.d_model), true, "ln_f.g"),
            ad::Parameter(Tensor2D(1, cfg.d_model), true, "ln_f.b")};
  for (long l = 0; l < cfg.layers; ++l) {
    const auto base = 0x100u + 4 * static_cast<std::uint64_t>(l);
    m.blocks.push_back(Block{
        ad::Parameter(Tensor2D::filled(1, cfg.d_model, 1.0), true, "ln1.g"),
        ad::Parameter(Tensor2D(1, cfg.d_model), true, "ln1.b"),
        LavoParams::init(cfg.layer_config(l), wstd),
        ad::Parameter(Tensor2D::filled(1, cfg.d_model, 1.0), true, "ln2.g"),
        ad::Parameter(Tensor2D(1, cfg.d_model), true, "ln2.b"),
        ad::Parameter(gauss(base, cfg.d_model, 4 * cfg.d_model), true, "ffn.w1"),
        ad::Parameter(Tensor2D(1, 4 * cfg.d_model), true, "ffn.b1"),
        ad::Parameter(gauss(base + 1, 4 * cfg.d_model, cfg.d_model), true, "ffn.w2"),
        ad::Parameter(Tensor2D(1, cfg.d_model), true, "ffn.b2")});
  }
  return m;
}

std::vector<std::pair<std::string, ad::Parameter*>> LmModel::named_parameters() {
  std::vector<std::pair<std::string, ad::Parameter*>> out;
  out.emplace_back("embed", &embed);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block& b = blocks[l];
    out.emplace_back(p + "ln1.g", &b.ln1_g);
    out.emplace_back(p + "ln1.b", &b.ln1_b);
    for (ad::Parameter* q : b.attn.all()) out.emplace_back(p + "attn." + q->name, q);
    out.emplace_back(p + "ln2.g", &b.ln2_g);
    out.emplace_back(p + "ln2.b", &b.ln2_b);
    out.emplace_back(p + "ffn.w1", &b.ffn_w1);
    out.emplace_back(p + "ffn.b1", &b.ffn_b1);
    out.emplace_back(p + "ffn.w2", &b.ffn_w2);
    out.emplace_back(p + "ffn.b2", &b.ffn_b2);
  }
  out.emplace_back("ln_f.g", &lnf_g);
  out.emplace_back("ln_f.b", &lnf_b);
  return out;
}

std::vector<ad::Parameter*> LmModel::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

long long LmModel::parameter_count() {
  long long n = 0;
  for (ad::Parameter* p : parameters()) n += static_cast<long long>(p->value.size());
  return n;
}

ad::Value LmModel::sequence_loss(ad::Tape& tp, const std::uint8_t* inp,
                                 const std::uint8_t* tgt, long len) {
  if (len < 1) throw DataError("sequence_loss: empty sequence");
  ad::Value table = tp.param(embed);
  std::vector<long> idx(inp, inp + len);
  ad::Value x = tp.gather_rows(table, std::move(idx));
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    Block& b = blocks[l];
    ad::Value h = tp.layer_norm(x, tp.param(b.ln1_g), tp.param(b.ln1_b));
    x = tp.add(x, forward_train(tp, h, b.attn, cfg.layer_config(static_cast<long>(l))));
    ad::Value h2 = tp.layer_norm(x, tp.param(b.ln2_g), tp.param(b.ln2_b));
    ad::Value f = tp.gelu(
        tp.add_row(tp.matmul(h2, tp.param(b.ffn_w1)), tp.param(b.ffn_b1)));
    f = tp.add_row(tp.matmul(f, tp.param(b.ffn_w2)), tp.param(b.ffn_b2));
    x = tp.add(x, f);
  }
  x = tp.layer_norm(x, tp.param(lnf_g), tp.param(lnf_b));
  ad::Value logits = tp.matmul(x, tp.transpose(table));
  return tp.cross_entropy_rows(logits, std::vector<int>(tgt, tgt + len));
}

namespace {

// Plain (tape-free) mirrors of the block math, for the decode path. Same
// population-variance norm and erf-exact gelu as the recorded ops.
Tensor2D layer_norm_plain(const Tensor2D& x, const Tensor2D& g, const Tensor2D& b,
                          double eps = 1e-5) {
  Tensor2D out(x.rows(), x.cols());
  const long c = x.cols();
  for (long i = 0; i < x.rows(); ++i) {
    double mean = 0;
    for (long j = 0; j < c; ++j) mean += x(i, j);
    mean /= static_cast<double>(c);
    double var = 0;
    for (long j = 0; j < c; ++j) {
      const double d = x(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (long j = 0; j < c; ++j) out(i, j) = (x(i, j) - mean) * inv * g(0, j) + b(0, j);
  }
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

Tensor2D gelu_plain(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return out;
}

Tensor2D add_row_plain(const Tensor2D& x, const Tensor2D& row) {
  Tensor2D out = x;
  for (long i = 0; i < x.rows(); ++i)
    for (long j = 0; j < x.cols(); ++j) out(i, j) += row(0, j);
  return out;
}

}  // namespace

LmModel::DecodeState LmModel::begin_decode() const {
  DecodeState st;
  for (long l = 0; l < cfg.layers; ++l) {
    st.caches.push_back(make_cache<double>(cfg.layer_config(l)));
    st.wts.push_back(blocks[static_cast<std::size_t>(l)].attn.weights());
  }
  st.head_t = transpose(embed.value);
  return st;
}

Tensor2D LmModel::decode_step(DecodeState& st, std::uint8_t byte) const {
  const long d = cfg.d_model;
  Tensor2D x(1, d);
  std::memcpy(x.row(0), embed.value.row(byte), sizeof(double) * d);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    Tensor2D h = layer_norm_plain(x, b.ln1_g.value, b.ln1_b.value);
    x = add(x, step(st.caches[l], h, st.wts[l]));
    Tensor2D f = gelu_plain(
        add_row_plain(matmul(layer_norm_plain(x, b.ln2_g.value, b.ln2_b.value),
                             b.ffn_w1.value),
                      b.ffn_b1.value));
    f = add_row_plain(matmul(f, b.ffn_w2.value), b.ffn_b2.value);
    x = add(x, f);
  }
  return matmul(layer_norm_plain(x, lnf_g.value, lnf_b.value), st.head_t);
}

CorpusStream::CorpusStream(const std::uint8_t* data, std::size_t size, long ctx,
                           std::uint64_t seed)
    : data_(data), size_(size), ctx_(ctx), rng_(seed) {
  if (size_ < static_cast<std::size_t>(ctx_) + 1)
    throw DataError("CorpusStream: " + std::to_string(size_) +
                    " bytes cannot fit a context of " + std::to_string(ctx_));
}

void CorpusStream::next(std::uint8_t* inp, std::uint8_t* tgt) {
  const std::size_t span = size_ - static_cast<std::size_t>(ctx_) - 1;
  const auto start =
      static_cast<std::size_t>(rng_.next_double() * static_cast<double>(span + 1));
  std::memcpy(inp, data_ + start, static_cast<std::size_t>(ctx_));
  std::memcpy(tgt, data_ + start + 1, static_cast<std::size_t>(ctx_));
}

std::pair<std::size_t, std::size_t> train_slice(std::size_t corpus_size) {
  return {0, corpus_size * 9 / 10};
}

std::pair<std::size_t, std::size_t> heldout_slice(std::size_t corpus_size) {
  const std::size_t t = corpus_size * 9 / 10;
  return {t, corpus_size - t};
}

TrainResult train(LmModel& model, const std::vector<std::uint8_t>& corpus,
                  std::ostream* log) {
  const LmConfig& cfg = model.cfg;
  cfg.check();
  if (corpus.size() < 10 * static_cast<std::size_t>(cfg.ctx))
    throw DataError("train: corpus of " + std::to_string(corpus.size()) +
                    " bytes is below the minimum of 10*ctx = " +
                    std::to_string(10 * cfg.ctx));
  const auto [t0, tn] = train_slice(corpus.size());
  std::vector<ad::Parameter*> params = model.parameters();
  ad::Adam opt(params, ad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  CorpusStream stream(corpus.data() + t0, tn, cfg.ctx,
                      RngState(cfg.seed).fork(0xBA7C4).seed());
  std::vector<std::uint8_t> inp(static_cast<std::size_t>(cfg.ctx));
  std::vector<std::uint8_t> tgt(static_cast<std::size_t>(cfg.ctx));
  ad::Tape tape;
  TrainResult res;
  res.loss.reserve(static_cast<std::size_t>(cfg.steps));
  for (long s = 0; s < cfg.steps; ++s) {
    tape.clear();
    ad::zero_grad(params);
    std::optional<ad::Value> total;
    for (long b = 0; b < cfg.batch; ++b) {
      stream.next(inp.data(), tgt.data());
      ad::Value l = model.sequence_loss(tape, inp.data(), tgt.data(), cfg.ctx);
      total = total.has_value() ? tape.add(*total, l) : l;
    }
    ad::Value loss = tape.scale(*total, 1.0 / static_cast<double>(cfg.batch));
    const double lv = loss.val()(0, 0);
    if (!std::isfinite(lv))
      throw DataError("train: loss became non-finite at step " + std::to_string(s));
    res.loss.push_back(lv);
    tape.backward(loss);
    opt.step();
    if (log != nullptr && (s % 100 == 0 || s == cfg.steps - 1))
      (*log) << "step " << s << " loss " << lv << std::endl;
  }
  return res;
}

double eval_ppl(LmModel& model, const std::uint8_t* data, std::size_t size,
                long eval_len, long max_windows) {
  if (eval_len < 2) throw DataError("eval_ppl: eval_len must be >= 2");
  const long nwin = static_cast<long>(size / static_cast<std::size_t>(eval_len));
  if (nwin < 1)
    throw DataError("eval_ppl: slice of " + std::to_string(size) +
                    " bytes has no complete window of " + std::to_string(eval_len));
  const long use = max_windows > 0 ? std::min(nwin, max_windows) : nwin;
  double ce = 0;
  long long cnt = 0;
  for (long widx = 0; widx < use; ++widx) {
    auto st = model.begin_decode();
    const std::uint8_t* seq = data + static_cast<std::size_t>(widx) * eval_len;
    for (long i = 0; i + 1 < eval_len; ++i) {
      Tensor2D logits = model.decode_step(st, seq[i]);
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(0, j));
      double z = 0;
      for (long j = 0; j < logits.cols(); ++j) z += std::exp(logits(0, j) - mx);
      ce += -(logits(0, seq[i + 1]) - mx - std::log(z));
      ++cnt;
    }
  }
  return std::exp(ce / static_cast<double>(cnt));
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::uint8_t* p, int nbytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

nlohmann::json config_json(const LmConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},
                        {"layers", c.layers},
                        {"heads", c.heads},
                        {"num_bases", c.num_bases},
                        {"window", c.window},
                        {"ctx", c.ctx},
                        {"use_epe", c.use_epe},
                        {"use_dissection", c.use_dissection},
                        {"lr", c.lr},
                        {"batch", c.batch},
                        {"steps", c.steps},
                        {"seed", c.seed}};
}

LmConfig config_from_json(const nlohmann::json& c) {
  LmConfig out;
  out.d_model = c.at("d_model").get<long>();
  out.layers = c.at("layers").get<long>();
  out.heads = c.at("heads").get<long>();
  out.num_bases = c.at("num_bases").get<long>();
  out.window = c.at("window").get<long>();
  out.ctx = c.at("ctx").get<long>();
  out.use_epe = c.at("use_epe").get<bool>();
  out.use_dissection = c.at("use_dissection").get<bool>();
  out.lr = c.at("lr").get<double>();
  out.batch = c.at("batch").get<long>();
  out.steps = c.at("steps").get<long>();
  out.seed = c.at("seed").get<std::uint64_t>();
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, LmModel& model) {
  auto named = model.named_parameters();
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t off = 0;
  for (auto& [name, p] : named) {
    tensors[name] = nlohmann::json{
        {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"offset", off}};
    off += static_cast<std::uint64_t>(p->value.size()) * 4;
  }
  const nlohmann::json header_json{{"config", config_json(model.cfg)},
                                   {"tensors", tensors}};
  const std::string header = header_json.dump();
  std::string out;
  out.reserve(16 + header.size() + off);
  out.append("LAVO", 4);
  put_u32(out, 1);
  put_u64(out, header.size());
  out.append(header);
  for (auto& [name, p] : named) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const auto f = static_cast<float>(p->value.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw IoError("save_checkpoint: short write to " + path);
}

LmModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  using Kind = CheckpointError::Kind;
  if (buf.size() < 16)
    throw CheckpointError(Kind::corrupt, "load_checkpoint: file too short");
  if (std::memcmp(buf.data(), "LAVO", 4) != 0)
    throw CheckpointError(Kind::format, "load_checkpoint: bad magic, not a checkpoint");
  const auto version = static_cast<std::uint32_t>(get_le(buf.data() + 4, 4));
  if (version != 1)
    throw CheckpointError(Kind::version, "load_checkpoint: unsupported version " +
                                             std::to_string(version));
  const std::uint64_t hlen = get_le(buf.data() + 8, 8);
  if (16 + hlen > buf.size())
    throw CheckpointError(Kind::corrupt, "load_checkpoint: header runs past the file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::corrupt,
                          std::string("load_checkpoint: header is not JSON: ") +
                              e.what());
  }
  LmConfig cfg;
  try {
    cfg = config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::corrupt,
                          std::string("load_checkpoint: config incomplete: ") +
                              e.what());
  }
  try {
    cfg.check();
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::corrupt,
                          std::string("load_checkpoint: config invalid: ") + e.what());
  }
  LmModel model = LmModel::init(cfg);
  const std::size_t base = 16 + hlen;
  if (!j.contains("tensors") || !j.at("tensors").is_object())
    throw CheckpointError(Kind::corrupt, "load_checkpoint: tensor table missing");
  const auto& tens = j.at("tensors");
  for (auto& [name, p] : model.named_parameters()) {
    if (!tens.contains(name))
      throw CheckpointError(Kind::corrupt, "load_checkpoint: missing tensor " + name);
    const auto& t = tens.at(name);
    long rows = 0, cols = 0;
    std::uint64_t off = 0;
    try {
      rows = t.at("rows").get<long>();
      cols = t.at("cols").get<long>();
      off = t.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(Kind::corrupt, "load_checkpoint: bad entry for " + name +
                                               ": " + e.what());
    }
    if (rows != p->value.rows() || cols != p->value.cols())
      throw CheckpointError(Kind::corrupt,
                            "load_checkpoint: tensor " + name + " is " +
                                std::to_string(rows) + "x" + std::to_string(cols) +
                                ", model wants " + p->value.shape_str());
    const std::uint64_t need = static_cast<std::uint64_t>(p->value.size()) * 4;
    if (base + off + need > buf.size())
      throw CheckpointError(Kind::corrupt,
                            "load_checkpoint: payload truncated at " + name);
    const std::uint8_t* src = buf.data() + base + off;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const auto bits = static_cast<std::uint32_t>(get_le(src + 4 * i, 4));
      float fv;
      std::memcpy(&fv, &bits, 4);
      p->value.data()[i] = static_cast<double>(fv);
    }
  }
  return model;
}

std::vector<std::uint8_t> make_synthetic_corpus(std::uint64_t seed,
                                                std::size_t bytes) {
  static const char* const kWords[] = {
      "the",     "of",      "and",    "to",      "a",       "in",     "that",
      "is",      "was",     "he",     "for",     "it",      "with",   "as",
      "his",     "on",      "be",     "at",      "by",      "had",    "not",
      "are",     "but",     "from",   "or",      "have",    "an",     "they",
      "which",   "one",     "you",    "were",    "her",     "all",    "she",
      "there",   "would",   "their",  "we",      "him",     "been",   "has",
      "when",    "who",     "will",   "more",    "no",      "if",     "out",
      "so",      "said",    "what",   "up",      "its",     "about",  "into",
      "than",    "them",    "can",    "only",    "other",   "new",    "some",
      "could",   "time",    "these",  "two",     "may",     "then",   "do",
      "first",   "any",     "my",     "now",     "such",    "like",   "our",
      "over",    "man",     "me",     "even",    "most",    "made",   "after",
      "also",    "did",     "many",   "before",  "must",    "through", "back",
      "years",   "where",   "much",   "your",    "way",     "well",   "down",
      "should",  "because", "each",   "just",    "those",   "people", "how",
      "too",     "little",  "state",  "good",    "very",    "make",   "world",
      "still",   "own",     "see",    "men",     "work",    "long",   "get",
      "here",    "between", "both",   "life",    "being",   "under",  "never",
      "day",     "same",    "another", "know",   "while",   "last",   "might",
      "us",      "great",   "old",    "year",    "off",     "come",   "since",
      "against", "go",      "came",   "right",   "used",    "take",   "three"};
  constexpr long kNumWords = static_cast<long>(std::size(kWords));
  std::vector<double> cum(kNumWords);
  double total = 0;
  for (long i = 0; i < kNumWords; ++i) {
    total += 1.0 / static_cast<double>(i + 2);  // zipf-flavored frequencies
    cum[static_cast<std::size_t>(i)] = total;
  }
  RngState rng(seed);
  auto draw = [&]() {
    const double u = rng.next_double() * total;
    const auto it = std::lower_bound(cum.begin(), cum.end(), u);
    return kWords[std::min<long>(kNumWords - 1, it - cum.begin())];
  };
  std::string out;
  out.reserve(bytes + 80);
  while (out.size() < bytes) {
    const long len = 4 + static_cast<long>(rng.next_double() * 8.0);
    for (long i = 0; i < len; ++i) {
      std::string word = draw();
      if (i == 0) word[0] = static_cast<char>(std::toupper(word[0]));
      out += word;
      if (i + 1 < len) out += (rng.next_double() < 0.06) ? ", " : " ";
    }
    out += '.';
    out += (rng.next_double() < 0.1) ? '\n' : ' ';
  }
  out.resize(bytes);
  return {out.begin(), out.end()};
}

}  // namespace lavo::lm
