#pragma once

// Reverse-mode automatic differentiation over Tensor2D, define-by-run style:
// ops record themselves on a Tape as they execute, and backward() replays the
// recording in reverse. The windowed attention layers have data-dependent
// structure (ragged windows, per-window memory reads), which is why the graph
// is rebuilt each call instead of compiled once.
//
// Everything here is double precision and single-threaded.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lavo/error.hpp"
#include "lavo/tensor.hpp"

namespace lavo::ad {

// A trainable (or frozen) tensor plus its gradient accumulator. Gradients
// are summed across backward calls until zero_grad.
struct Parameter {
  Tensor2D value;
  Tensor2D grad;
  bool trainable = true;
  std::string name;

  Parameter() = default;
  explicit Parameter(Tensor2D v, bool trainable_ = true, std::string name_ = "")
      : value(std::move(v)),
        grad(value.rows(), value.cols()),
        trainable(trainable_),
        name(std::move(name_)) {}
};

void zero_grad(const std::vector<Parameter*>& params);

class Tape;

// Cheap handle to a tape node.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor2D& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. leaf() is a constant; param() participates in backward when the
  // parameter is trainable and is skipped entirely when it is frozen.
  Value leaf(Tensor2D v);
  Value param(Parameter& p);

  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value scale(Value a, double c);
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value row_scale(Value a, Value h);
  Value softmax_rows(Value scores);
  Value softmax_rows(Value scores, std::optional<Value> bias, const Mask* mask);
  Value slice_rows(Value a, long r0, long nrows);
  Value slice_cols(Value a, long c0, long ncols);
  Value concat_rows(const std::vector<Value>& parts);
  Value concat_cols(const std::vector<Value>& parts);
  Value sum_rows(Value a);   // 1 x c
  Value mean_rows(Value a);  // 1 x c
  Value sum_all(Value a);    // 1 x 1
  Value gather_rows(Value a, std::vector<long> idx);
  Value reshape(Value a, long rows, long cols);
  Value mul_const(Value a, Tensor2D weights);  // elementwise, constant factor
  Value add_row(Value a, Value row);           // broadcast a 1 x c row over rows
  Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
  Value gelu(Value a);
  // Mean cross entropy of rows of logits against integer targets.
  Value cross_entropy_rows(Value logits, std::vector<int> targets);
  Value detach(Value a);

  // Backpropagate from a scalar (1 x 1) loss. Node gradients are reset first,
  // so calling backward twice on the same tape gives the same result; each
  // call adds into Parameter::grad.
  void backward(Value loss);

  size_t size() const { return nodes_.size(); }
  void clear();

  const Tensor2D& value(int id) const;
  // Gradient held at a node after backward; zeros if the node was not touched.
  Tensor2D grad_of(Value v) const;

 private:
  struct Node {
    Tensor2D val;
    Tensor2D grad;  // allocated lazily during backward
    std::function<void(Tape&)> back;
    bool needs = false;
    Parameter* bound = nullptr;
  };

  friend struct Value;

  Value push(Tensor2D val, bool needs, std::function<void(Tape&)> back,
             Parameter* bound = nullptr);
  Tensor2D& grad_ref(int id);
  bool has_grad(int id) const;
  void check_same_tape(Value v) const;

  std::vector<Node> nodes_;
};

// Adam with bias correction. Moment buffers live here and persist across
// steps; frozen parameters are skipped entirely.
struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamConfig cfg = {});

  void step();
  void set_lr(double lr) { cfg_.lr = lr; }
  long long steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> ps_;
  std::vector<Tensor2D> m_, v_;
  AdamConfig cfg_;
  long long t_ = 0;
};

}  // namespace lavo::ad
