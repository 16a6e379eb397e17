#include "lavo/autodiff.hpp"

#include <cmath>

namespace lavo::ad {

const Tensor2D& Value::val() const {
  if (!tape) throw ContractError("Value: unbound handle");
  return tape->value(id);
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    if (!p) continue;
    std::fill(p->grad.data(), p->grad.data() + p->grad.size(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// tape plumbing

Value Tape::push(Tensor2D val, bool needs, std::function<void(Tape&)> back, Parameter* bound) {
  Node n;
  n.val = std::move(val);
  n.back = std::move(back);
  n.needs = needs;
  n.bound = bound;
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor2D& Tape::value(int id) const { return nodes_[static_cast<size_t>(id)].val; }

Tensor2D& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty() && n.val.size() > 0) n.grad = Tensor2D(n.val.rows(), n.val.cols());
  return n.grad;
}

bool Tape::has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

Tensor2D Tape::grad_of(Value v) const {
  check_same_tape(v);
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.empty()) return Tensor2D(n.val.rows(), n.val.cols());
  return n.grad;
}

void Tape::check_same_tape(Value v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw ContractError("Tape: value belongs to a different tape");
}

void Tape::clear() { nodes_.clear(); }

void Tape::backward(Value loss) {
  check_same_tape(loss);
  const Tensor2D& lv = loss.val();
  if (lv.rows() != 1 || lv.cols() != 1)
    throw ContractError("backward: loss must be 1x1, got " + lv.shape_str());
  for (Node& n : nodes_) n.grad = Tensor2D();
  grad_ref(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs || n.grad.empty()) continue;
    if (n.back) n.back(*this);
    if (n.bound) {
      Tensor2D& g = n.bound->grad;
      for (size_t i = 0; i < g.size(); ++i) g.data()[i] += n.grad.data()[i];
    }
  }
}

// ---------------------------------------------------------------------------
// leaves

Value Tape::leaf(Tensor2D v) { return push(std::move(v), false, nullptr); }

Value Tape::param(Parameter& p) {
  if (!p.trainable) return push(p.value, false, nullptr);
  return push(p.value, true, nullptr, &p);
}

// ---------------------------------------------------------------------------
// arithmetic

Value Tape::add(Value a, Value b) {
  check_same_tape(a);
  check_same_tape(b);
  Tensor2D out = lavo::add(a.val(), b.val());
  const int ia = a.id, ib = b.id;
  bool needs = nodes_[ia].needs || nodes_[ib].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, ib, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    if (t.nodes_[ia].needs) {
      Tensor2D& ga = t.grad_ref(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
    }
    if (t.nodes_[ib].needs) {
      Tensor2D& gb = t.grad_ref(ib);
      for (size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i];
    }
  });
}

Value Tape::sub(Value a, Value b) {
  check_same_tape(a);
  check_same_tape(b);
  Tensor2D out = lavo::sub(a.val(), b.val());
  const int ia = a.id, ib = b.id;
  bool needs = nodes_[ia].needs || nodes_[ib].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, ib, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    if (t.nodes_[ia].needs) {
      Tensor2D& ga = t.grad_ref(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
    }
    if (t.nodes_[ib].needs) {
      Tensor2D& gb = t.grad_ref(ib);
      for (size_t i = 0; i < g.size(); ++i) gb.data()[i] -= g.data()[i];
    }
  });
}

Value Tape::scale(Value a, double c) {
  check_same_tape(a);
  Tensor2D out = lavo::scale(a.val(), c);
  const int ia = a.id;
  bool needs = nodes_[ia].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, c, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * c;
  });
}

Value Tape::matmul(Value a, Value b) {
  check_same_tape(a);
  check_same_tape(b);
  Tensor2D out = lavo::matmul(a.val(), b.val());
  const int ia = a.id, ib = b.id;
  bool needs = nodes_[ia].needs || nodes_[ib].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, ib, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    if (t.nodes_[ia].needs) {
      Tensor2D da = lavo::matmul(g, lavo::transpose(t.value(ib)));
      Tensor2D& ga = t.grad_ref(ia);
      for (size_t i = 0; i < da.size(); ++i) ga.data()[i] += da.data()[i];
    }
    if (t.nodes_[ib].needs) {
      Tensor2D db = lavo::matmul(lavo::transpose(t.value(ia)), g);
      Tensor2D& gb = t.grad_ref(ib);
      for (size_t i = 0; i < db.size(); ++i) gb.data()[i] += db.data()[i];
    }
  });
}

Value Tape::transpose(Value a) {
  check_same_tape(a);
  Tensor2D out = lavo::transpose(a.val());
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    Tensor2D gt = lavo::transpose(t.nodes_[self].grad);
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < gt.size(); ++i) ga.data()[i] += gt.data()[i];
  });
}

Value Tape::row_scale(Value a, Value h) {
  check_same_tape(a);
  check_same_tape(h);
  Tensor2D out = lavo::row_scale(a.val(), h.val());
  const int ia = a.id, ih = h.id;
  bool needs = nodes_[ia].needs || nodes_[ih].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, ih, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    const Tensor2D& av = t.value(ia);
    const Tensor2D& hv = t.value(ih);
    if (t.nodes_[ia].needs) {
      Tensor2D& ga = t.grad_ref(ia);
      for (long i = 0; i < av.rows(); ++i) {
        const double hi = hv(i, 0);
        for (long j = 0; j < av.cols(); ++j) ga(i, j) += g(i, j) * hi;
      }
    }
    if (t.nodes_[ih].needs) {
      Tensor2D& gh = t.grad_ref(ih);
      for (long i = 0; i < av.rows(); ++i) {
        double dot = 0.0;
        for (long j = 0; j < av.cols(); ++j) dot += g(i, j) * av(i, j);
        gh(i, 0) += dot;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax

Value Tape::softmax_rows(Value scores) { return softmax_rows(scores, std::nullopt, nullptr); }

Value Tape::softmax_rows(Value scores, std::optional<Value> bias, const Mask* mask) {
  check_same_tape(scores);
  if (bias) check_same_tape(*bias);
  const Tensor2D* bv = bias ? &bias->val() : nullptr;
  Tensor2D out = lavo::softmax_rows(scores.val(), bv, mask);
  const int is = scores.id;
  const int ib = bias ? bias->id : -1;
  bool needs = nodes_[is].needs || (ib >= 0 && nodes_[ib].needs);
  int self = static_cast<int>(nodes_.size());
  // For each row, d score_j = s_j * (g_j - sum_k g_k s_k). Masked entries have
  // s_j = 0, so they drop out on their own. The bias enters the scores
  // additively and gets the same gradient.
  return push(std::move(out), needs, [is, ib, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    const Tensor2D& s = t.nodes_[self].val;
    Tensor2D ds(s.rows(), s.cols());
    for (long i = 0; i < s.rows(); ++i) {
      double dot = 0.0;
      for (long j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
      for (long j = 0; j < s.cols(); ++j) ds(i, j) = s(i, j) * (g(i, j) - dot);
    }
    if (t.nodes_[is].needs) {
      Tensor2D& gs = t.grad_ref(is);
      for (size_t i = 0; i < ds.size(); ++i) gs.data()[i] += ds.data()[i];
    }
    if (ib >= 0 && t.nodes_[ib].needs) {
      Tensor2D& gb = t.grad_ref(ib);
      for (size_t i = 0; i < ds.size(); ++i) gb.data()[i] += ds.data()[i];
    }
  });
}

// ---------------------------------------------------------------------------
// slicing and concatenation

Value Tape::slice_rows(Value a, long r0, long nrows) {
  check_same_tape(a);
  Tensor2D out = lavo::copy_rows(a.val(), r0, nrows);
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, r0, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (long i = 0; i < g.rows(); ++i)
      for (long j = 0; j < g.cols(); ++j) ga(r0 + i, j) += g(i, j);
  });
}

Value Tape::slice_cols(Value a, long c0, long ncols) {
  check_same_tape(a);
  Tensor2D out = lavo::copy_cols(a.val(), c0, ncols);
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, c0, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (long i = 0; i < g.rows(); ++i)
      for (long j = 0; j < g.cols(); ++j) ga(i, c0 + j) += g(i, j);
  });
}

Value Tape::concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  long rows = 0;
  const long cols = parts[0].val().cols();
  bool needs = false;
  std::vector<int> ids;
  for (const Value& p : parts) {
    check_same_tape(p);
    detail::require(p.val().cols() == cols, "concat_rows: column mismatch");
    rows += p.val().rows();
    needs = needs || nodes_[p.id].needs;
    ids.push_back(p.id);
  }
  Tensor2D out(rows, cols);
  long at = 0;
  for (const Value& p : parts) {
    paste_rows(out, p.val(), at);
    at += p.val().rows();
  }
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ids, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    long at = 0;
    for (int id : ids) {
      const long n = t.value(id).rows();
      if (t.nodes_[id].needs) {
        Tensor2D& gp = t.grad_ref(id);
        for (long i = 0; i < n; ++i)
          for (long j = 0; j < g.cols(); ++j) gp(i, j) += g(at + i, j);
      }
      at += n;
    }
  });
}

Value Tape::concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  long cols = 0;
  const long rows = parts[0].val().rows();
  bool needs = false;
  std::vector<int> ids;
  for (const Value& p : parts) {
    check_same_tape(p);
    detail::require(p.val().rows() == rows, "concat_cols: row mismatch");
    cols += p.val().cols();
    needs = needs || nodes_[p.id].needs;
    ids.push_back(p.id);
  }
  Tensor2D out(rows, cols);
  long at = 0;
  for (const Value& p : parts) {
    paste_cols(out, p.val(), at);
    at += p.val().cols();
  }
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ids, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    long at = 0;
    for (int id : ids) {
      const long n = t.value(id).cols();
      if (t.nodes_[id].needs) {
        Tensor2D& gp = t.grad_ref(id);
        for (long i = 0; i < g.rows(); ++i)
          for (long j = 0; j < n; ++j) gp(i, j) += g(i, at + j);
      }
      at += n;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Value Tape::sum_rows(Value a) {
  check_same_tape(a);
  Tensor2D out = lavo::sum_rows(a.val());
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (long i = 0; i < ga.rows(); ++i)
      for (long j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j);
  });
}

Value Tape::mean_rows(Value a) {
  check_same_tape(a);
  Tensor2D out = lavo::mean_rows(a.val());
  const int ia = a.id;
  const double inv = 1.0 / static_cast<double>(a.val().rows());
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, inv, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (long i = 0; i < ga.rows(); ++i)
      for (long j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
  });
}

Value Tape::sum_all(Value a) {
  check_same_tape(a);
  Tensor2D out(1, 1);
  const Tensor2D& av = a.val();
  for (size_t i = 0; i < av.size(); ++i) out(0, 0) += av.data()[i];
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const double g = t.nodes_[self].grad(0, 0);
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < ga.size(); ++i) ga.data()[i] += g;
  });
}

Value Tape::gather_rows(Value a, std::vector<long> idx) {
  check_same_tape(a);
  const Tensor2D& av = a.val();
  Tensor2D out(static_cast<long>(idx.size()), av.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= av.rows())
      throw DimError("gather_rows: index " + std::to_string(idx[i]) + " out of " +
                     av.shape_str());
    std::copy(av.row(idx[i]), av.row(idx[i]) + av.cols(), out.row(static_cast<long>(i)));
  }
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, idx = std::move(idx), self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < idx.size(); ++i)
      for (long j = 0; j < g.cols(); ++j) ga(idx[i], j) += g(static_cast<long>(i), j);
  });
}

Value Tape::reshape(Value a, long rows, long cols) {
  check_same_tape(a);
  const Tensor2D& av = a.val();
  if (rows * cols != static_cast<long>(av.size()))
    throw DimError("reshape: " + av.shape_str() + " to " + std::to_string(rows) + "x" +
                   std::to_string(cols));
  Tensor2D out(rows, cols);
  std::copy(av.data(), av.data() + av.size(), out.data());
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
  });
}

Value Tape::mul_const(Value a, Tensor2D weights) {
  check_same_tape(a);
  detail::require(weights.same_shape(a.val()), "mul_const: weight shape " + weights.shape_str() +
                                                   " vs " + a.val().shape_str());
  Tensor2D out(weights.rows(), weights.cols());
  const Tensor2D& av = a.val();
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] * weights.data()[i];
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs,
              [ia, w = std::move(weights), self](Tape& t) {
                if (!t.nodes_[ia].needs) return;
                const Tensor2D& g = t.nodes_[self].grad;
                Tensor2D& ga = t.grad_ref(ia);
                for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * w.data()[i];
              });
}

Value Tape::add_row(Value a, Value row) {
  check_same_tape(a);
  check_same_tape(row);
  const Tensor2D& av = a.val();
  const Tensor2D& rv = row.val();
  detail::require(rv.rows() == 1 && rv.cols() == av.cols(),
                  "add_row: row " + rv.shape_str() + " vs " + av.shape_str());
  Tensor2D out(av.rows(), av.cols());
  for (long i = 0; i < av.rows(); ++i)
    for (long j = 0; j < av.cols(); ++j) out(i, j) = av(i, j) + rv(0, j);
  const int ia = a.id, ir = row.id;
  bool needs = nodes_[ia].needs || nodes_[ir].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs, [ia, ir, self](Tape& t) {
    const Tensor2D& g = t.nodes_[self].grad;
    if (t.nodes_[ia].needs) {
      Tensor2D& ga = t.grad_ref(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
    }
    if (t.nodes_[ir].needs) {
      Tensor2D& gr = t.grad_ref(ir);
      for (long i = 0; i < g.rows(); ++i)
        for (long j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// layer norm, gelu, cross entropy

Value Tape::layer_norm(Value x, Value gain, Value bias, double eps) {
  check_same_tape(x);
  check_same_tape(gain);
  check_same_tape(bias);
  const Tensor2D& xv = x.val();
  const Tensor2D& gv = gain.val();
  const Tensor2D& bv = bias.val();
  detail::require(gv.rows() == 1 && gv.cols() == xv.cols() && bv.rows() == 1 &&
                      bv.cols() == xv.cols(),
                  "layer_norm: gain/bias must be 1x" + std::to_string(xv.cols()));
  const long n = xv.rows(), d = xv.cols();
  Tensor2D xhat(n, d);
  Tensor2D inv_std(n, 1);
  Tensor2D out(n, d);
  for (long i = 0; i < n; ++i) {
    double mu = 0.0;
    for (long j = 0; j < d; ++j) mu += xv(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      const double c = xv(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(i, 0) = is;
    for (long j = 0; j < d; ++j) {
      xhat(i, j) = (xv(i, j) - mu) * is;
      out(i, j) = xhat(i, j) * gv(0, j) + bv(0, j);
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id;
  bool needs = nodes_[ix].needs || nodes_[ig].needs || nodes_[ib].needs;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs,
              [ix, ig, ib, xh = std::move(xhat), is = std::move(inv_std), self](Tape& t) {
                const Tensor2D& g = t.nodes_[self].grad;
                const Tensor2D& gv = t.value(ig);
                const long n = g.rows(), d = g.cols();
                if (t.nodes_[ig].needs) {
                  Tensor2D& gg = t.grad_ref(ig);
                  for (long i = 0; i < n; ++i)
                    for (long j = 0; j < d; ++j) gg(0, j) += g(i, j) * xh(i, j);
                }
                if (t.nodes_[ib].needs) {
                  Tensor2D& gb = t.grad_ref(ib);
                  for (long i = 0; i < n; ++i)
                    for (long j = 0; j < d; ++j) gb(0, j) += g(i, j);
                }
                if (t.nodes_[ix].needs) {
                  Tensor2D& gx = t.grad_ref(ix);
                  for (long i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (long j = 0; j < d; ++j) {
                      const double gy = g(i, j) * gv(0, j);
                      m1 += gy;
                      m2 += gy * xh(i, j);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (long j = 0; j < d; ++j) {
                      const double gy = g(i, j) * gv(0, j);
                      gx(i, j) += is(i, 0) * (gy - m1 - xh(i, j) * m2);
                    }
                  }
                }
              });
}

Value Tape::gelu(Value a) {
  check_same_tape(a);
  const Tensor2D& av = a.val();
  Tensor2D out(av.rows(), av.cols());
  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  for (size_t i = 0; i < av.size(); ++i) {
    const double x = av.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  const int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[ia].needs, [ia, self](Tape& t) {
    if (!t.nodes_[ia].needs) return;
    const Tensor2D& g = t.nodes_[self].grad;
    const Tensor2D& av = t.value(ia);
    Tensor2D& ga = t.grad_ref(ia);
    for (size_t i = 0; i < av.size(); ++i) {
      const double x = av.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga.data()[i] += g.data()[i] * (cdf + x * pdf);
    }
  });
}

Value Tape::cross_entropy_rows(Value logits, std::vector<int> targets) {
  check_same_tape(logits);
  const Tensor2D& lv = logits.val();
  if (static_cast<long>(targets.size()) != lv.rows())
    throw DimError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                   lv.shape_str());
  const long n = lv.rows(), v = lv.cols();
  Tensor2D probs(n, v);
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    const int y = targets[static_cast<size_t>(i)];
    if (y < 0 || y >= v)
      throw DimError("cross_entropy_rows: target " + std::to_string(y) + " outside vocab " +
                     std::to_string(v));
    double mx = lv(i, 0);
    for (long j = 1; j < v; ++j) mx = std::max(mx, lv(i, j));
    double denom = 0.0;
    for (long j = 0; j < v; ++j) denom += std::exp(lv(i, j) - mx);
    const double lse = mx + std::log(denom);
    total += lse - lv(i, y);
    const double inv = 1.0 / denom;
    for (long j = 0; j < v; ++j) probs(i, j) = std::exp(lv(i, j) - mx) * inv;
  }
  Tensor2D out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  const int il = logits.id;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(out), nodes_[il].needs,
              [il, p = std::move(probs), ts = std::move(targets), self](Tape& t) {
                if (!t.nodes_[il].needs) return;
                const double g = t.nodes_[self].grad(0, 0) / static_cast<double>(p.rows());
                Tensor2D& gl = t.grad_ref(il);
                for (long i = 0; i < p.rows(); ++i) {
                  for (long j = 0; j < p.cols(); ++j) gl(i, j) += g * p(i, j);
                  gl(i, ts[static_cast<size_t>(i)]) -= g;
                }
              });
}

Value Tape::detach(Value a) {
  check_same_tape(a);
  return leaf(a.val());
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : ps_(std::move(params)), cfg_(cfg) {
  m_.reserve(ps_.size());
  v_.reserve(ps_.size());
  for (Parameter* p : ps_) {
    m_.emplace_back(p->value.rows(), p->value.cols());
    v_.emplace_back(p->value.rows(), p->value.cols());
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < ps_.size(); ++k) {
    Parameter* p = ps_[k];
    if (!p->trainable) continue;
    Tensor2D& m = m_[k];
    Tensor2D& v = v_[k];
    for (size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad.data()[i];
      m.data()[i] = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * g;
      v.data()[i] = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m.data()[i] / bc1;
      const double vhat = v.data()[i] / bc2;
      p->value.data()[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace lavo::ad
