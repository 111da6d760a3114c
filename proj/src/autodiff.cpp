#include "cflow/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace cflow {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kVariable: return "variable";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLogSigmoid: return "log_sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSliceChannels: return "slice_channels";
    case OpKind::kConcatChannels: return "concat_channels";
    case OpKind::kSqueeze: return "squeeze";
    case OpKind::kUnsqueeze: return "unsqueeze";
    case OpKind::kSum: return "sum";
    case OpKind::kSumSquares: return "sum_squares";
    case OpKind::kLogAbsDet: return "logabsdet";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor t) { return record(std::move(t), OpKind::kConstant, {}, nullptr); }

Var Tape::variable(Tensor t) {
  Var v = record(std::move(t), OpKind::kVariable, {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = bindings_.find(&p); it != bindings_.end()) return Var(this, it->second);
  Var v = record(p.value, OpKind::kParameter, {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  bindings_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, OpKind kind, std::vector<std::size_t> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  node.kind = kind;
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_[p].requires_grad; });
  node.parents = std::move(parents);
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_ref(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

const Tensor* Tape::parameter_grad(const Parameter& p) const {
  auto it = bindings_.find(&p);
  if (it == bindings_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.empty() ? nullptr : &n.grad;
}

namespace {

enum class Bcast { kSame, kChannel };

Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::kSame;
  const bool channel_vector = (b.size() == 1 || (b.size() == 2 && b[0] == 1)) &&
                              b.back() == a.back() && a.size() >= 2;
  if (channel_vector) return Bcast::kChannel;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
}

// b's gradient under channel broadcast: sum over leading rows.
void reduce_into(const Tensor& g, Tensor& target, Bcast kind) {
  if (kind == Bcast::kSame) {
    for (std::size_t i = 0; i < g.size(); ++i) target[i] += g[i];
    return;
  }
  const std::size_t c = target.size();
  for (std::size_t i = 0; i < g.size(); ++i) target[i % c] += g[i];
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast bc = broadcast_kind(av.shape(), bv.shape(), "add");
  const std::size_t c = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bc == Bcast::kSame ? bv[i] : bv[i % c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), OpKind::kAdd, {ia, ib},
                         [ia, ib, bc](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           if (t.requires_grad(ia)) reduce_into(g, t.grad_ref(ia), Bcast::kSame);
                           if (t.requires_grad(ib)) reduce_into(g, t.grad_ref(ib), bc);
                         });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast bc = broadcast_kind(av.shape(), bv.shape(), "sub");
  const std::size_t c = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bc == Bcast::kSame ? bv[i] : bv[i % c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), OpKind::kSub, {ia, ib},
                         [ia, ib, bc](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           if (t.requires_grad(ia)) reduce_into(g, t.grad_ref(ia), Bcast::kSame);
                           if (t.requires_grad(ib)) {
                             Tensor neg = g;
                             for (auto& v : neg.data()) v = -v;
                             reduce_into(neg, t.grad_ref(ib), bc);
                           }
                         });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast bc = broadcast_kind(av.shape(), bv.shape(), "mul");
  const std::size_t c = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bc == Bcast::kSame ? bv[i] : bv[i % c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), OpKind::kMul, {ia, ib}, [ia, ib, bc](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        const std::size_t c = bv.size();
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_ref(ia);
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * (bc == Bcast::kSame ? bv[i] : bv[i % c]);
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_ref(ib);
          for (std::size_t i = 0; i < g.size(); ++i)
            gb[bc == Bcast::kSame ? i : i % c] += g[i] * av[i];
        }
      });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast bc = broadcast_kind(av.shape(), bv.shape(), "div");
  for (double v : bv.data()) {
    if (v == 0.0) throw NumericError("div: division by exact zero");
  }
  const std::size_t c = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bc == Bcast::kSame ? bv[i] : bv[i % c];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), OpKind::kDiv, {ia, ib}, [ia, ib, bc](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        const std::size_t c = bv.size();
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_ref(ia);
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] / (bc == Bcast::kSame ? bv[i] : bv[i % c]);
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_ref(ib);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t j = bc == Bcast::kSame ? i : i % c;
            gb[j] -= g[i] * av[i] / (bv[j] * bv[j]);
          }
        }
      });
}

namespace {

// Unary op whose derivative is expressed through (input, output).
template <typename Fwd, typename Deriv>
Var unary(Var a, OpKind kind, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), kind, {ia}, [ia, deriv](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var exp(Var a) {
  Var out = unary(
      a, OpKind::kExp, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
  if (!out.value().all_finite()) throw NumericError("exp: overflow to non-finite value");
  return out;
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive argument " + std::to_string(v));
  }
  return unary(
      a, OpKind::kLog, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var sigmoid(Var a) {
  return unary(a, OpKind::kSigmoid, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Var log_sigmoid(Var a) {
  // log sigmoid(x) = -softplus(-x); derivative sigmoid(-x).
  return unary(
      a, OpKind::kLogSigmoid,
      [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Var relu(Var a) {
  return unary(
      a, OpKind::kRelu, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var scale(Var a, double c) {
  return unary(
      a, OpKind::kScale, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, OpKind::kAddScalar, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(cflow::matmul(a.value(), b.value()), OpKind::kMatmul, {ia, ib},
                         [ia, ib](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           if (t.requires_grad(ia)) {
                             const Tensor d = cflow::matmul(g, cflow::transpose(t.value(ib)));
                             reduce_into(d, t.grad_ref(ia), Bcast::kSame);
                           }
                           if (t.requires_grad(ib)) {
                             const Tensor d = cflow::matmul(cflow::transpose(t.value(ia)), g);
                             reduce_into(d, t.grad_ref(ib), Bcast::kSame);
                           }
                         });
}

Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(cflow::transpose(a.value()), OpKind::kTranspose, {ia},
                         [ia](Tape& t, std::size_t self) {
                           reduce_into(cflow::transpose(t.out_grad(self)), t.grad_ref(ia),
                                       Bcast::kSame);
                         });
}

Var conv2d(Var input, Var kernel, const Conv2dGeometry& g) {
  require_same_tape(input, kernel);
  const std::size_t ii = input.id(), ik = kernel.id();
  return input.tape().record(
      cflow::conv2d(input.value(), kernel.value(), g), OpKind::kConv2d, {ii, ik},
      [ii, ik, g](Tape& t, std::size_t self) {
        Tensor* gi = t.requires_grad(ii) ? &t.grad_ref(ii) : nullptr;
        Tensor* gk = t.requires_grad(ik) ? &t.grad_ref(ik) : nullptr;
        conv2d_backward(t.value(ii), t.value(ik), g, t.out_grad(self), gi, gk);
      });
}

Var reshape(Var a, Shape shape) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().reshaped(std::move(shape)), OpKind::kReshape, {ia},
                         [ia](Tape& t, std::size_t self) {
                           reduce_into(t.out_grad(self), t.grad_ref(ia), Bcast::kSame);
                         });
}

Var slice_channels(Var a, std::size_t begin, std::size_t end) {
  const std::size_t ia = a.id();
  return a.tape().record(cflow::slice_channels(a.value(), begin, end), OpKind::kSliceChannels,
                         {ia}, [ia, begin, end](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(ia);
                           const std::size_t c = ga.channels(), n = end - begin;
                           const std::size_t pixels = ga.height() * ga.width();
                           for (std::size_t p = 0; p < pixels; ++p)
                             for (std::size_t k = 0; k < n; ++k) ga[p * c + begin + k] += g[p * n + k];
                         });
}

Var concat_channels(Var a, Var b) {
  require_same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      cflow::concat_channels(a.value(), b.value()), OpKind::kConcatChannels, {ia, ib},
      [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const std::size_t c = g.channels();
        const std::size_t ca = t.value(ia).channels();
        if (t.requires_grad(ia))
          reduce_into(cflow::slice_channels(g, 0, ca), t.grad_ref(ia), Bcast::kSame);
        if (t.requires_grad(ib))
          reduce_into(cflow::slice_channels(g, ca, c), t.grad_ref(ib), Bcast::kSame);
      });
}

Var squeeze2x2(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(cflow::squeeze2x2(a.value()), OpKind::kSqueeze, {ia},
                         [ia](Tape& t, std::size_t self) {
                           reduce_into(cflow::unsqueeze2x2(t.out_grad(self)), t.grad_ref(ia),
                                       Bcast::kSame);
                         });
}

Var unsqueeze2x2(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(cflow::unsqueeze2x2(a.value()), OpKind::kUnsqueeze, {ia},
                         [ia](Tape& t, std::size_t self) {
                           reduce_into(cflow::squeeze2x2(t.out_grad(self)), t.grad_ref(ia),
                                       Bcast::kSame);
                         });
}

Var sum(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(cflow::sum(a.value())), OpKind::kSum, {ia},
                         [ia](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0];
                           for (auto& v : t.grad_ref(ia).data()) v += g;
                         });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), OpKind::kSumSquares, {ia},
                         [ia](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0];
                           const Tensor& x = t.value(ia);
                           Tensor& ga = t.grad_ref(ia);
                           for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g * x[i];
                         });
}

Var logabsdet(Var w) {
  const Slogdet sd = slogdet_lu(w.value());
  const std::size_t iw = w.id();
  return w.tape().record(Tensor::scalar(sd.logabsdet), OpKind::kLogAbsDet, {iw},
                         [iw](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0];
                           const Tensor inv_t = cflow::transpose(mat_inverse(t.value(iw)));
                           Tensor& gw = t.grad_ref(iw);
                           for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g * inv_t[i];
                         });
}

}  // namespace cflow
