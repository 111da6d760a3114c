#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cflow/linalg.hpp"
#include "cflow/tensor.hpp"

namespace cflow {

// A named trainable tensor. Gradients live on the tape that evaluated it.
struct Parameter {
  std::string name;
  Tensor value;
};

enum class OpKind {
  kConstant,
  kVariable,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kExp,
  kLog,
  kSigmoid,
  kLogSigmoid,
  kRelu,
  kScale,
  kAddScalar,
  kMatmul,
  kTranspose,
  kConv2d,
  kReshape,
  kSliceChannels,
  kConcatChannels,
  kSqueeze,
  kUnsqueeze,
  kSum,
  kSumSquares,
  kLogAbsDet,
  kCustom,  // recorded by callers of Tape::record
};

const char* op_name(OpKind kind);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation record. Single-threaded; one per evaluation.
class Tape {
 public:
  // Accumulates the node's output gradient into its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  Var variable(Tensor t);
  // Binding is memoized: the same Parameter always maps to one leaf.
  Var parameter(const Parameter& p);

  void backward(Var loss);

  // Gradient of the last backward() w.r.t. v; zeros if v was unreachable.
  Tensor grad(Var v) const;
  const Tensor* parameter_grad(const Parameter& p) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(Var v) const { return nodes_[v.id()].kind; }
  const std::vector<std::size_t>& parents(Var v) const { return nodes_[v.id()].parents; }

  // Op implementation interface.
  Var record(Tensor value, OpKind kind, std::vector<std::size_t> parents, BackwardFn fn);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Zero-initialized on first access.
  Tensor& grad_ref(std::size_t id);

 private:
  struct Node {
    Tensor value;
    OpKind kind;
    std::vector<std::size_t> parents;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor grad;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bindings_;
};

// Elementwise ops. Binary ops accept b of shape [c] or [1 x c] broadcast over
// a's leading axes when a's last axis is c.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var exp(Var a);
Var log(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var relu(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var conv2d(Var input, Var kernel, const Conv2dGeometry& g);

Var reshape(Var a, Shape shape);
Var slice_channels(Var a, std::size_t begin, std::size_t end);
Var concat_channels(Var a, Var b);
Var squeeze2x2(Var a);
Var unsqueeze2x2(Var a);

Var sum(Var a);
Var sum_squares(Var a);
// log|det W| for square W; gradient (W^-1)^T.
Var logabsdet(Var w);

}  // namespace cflow
