#include "cflow/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "cflow/checkpoint.hpp"

namespace cflow {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("train.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("train.beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("adam epsilon must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train.batch must be >= 1");
}

Tensor dequantize(const Tensor& y_discrete, std::size_t bins, Rng& rng) {
  Tensor out = y_discrete;
  const double b = static_cast<double>(bins);
  for (auto& v : out.data()) {
    if (!(v >= 0.0 && v <= b - 1.0) || v != std::floor(v)) {
      throw std::invalid_argument("dequantize: value " + std::to_string(v) + " outside {0,...," +
                                  std::to_string(bins - 1) + "}");
    }
    v = (v + rng.uniform()) / b - 0.5;
  }
  return out;
}

Tensor prepare_target(const Tensor& y, const Preprocessor& pre, Rng& rng) {
  if (pre.kind == Preprocessor::Kind::kDequantize) return dequantize(y, pre.bins, rng);
  return pre.normalize(y);
}

NllValue nll_loss(Tape& tape, std::span<const FlowExample> batch, const ConditionalFlow& model) {
  if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
  Var total;
  for (const auto& ex : batch) {
    Var lp = model.log_likelihood(tape, *ex.x, tape.constant(ex.y_cont));
    total = total.valid() ? add(total, lp) : lp;
  }
  Var loss = scale(total, -1.0 / static_cast<double>(batch.size()));
  const double d = static_cast<double>(numel(model.output_shape()));
  return {loss, loss.value().item() / d};
}

AdamState AdamState::zeros_like(const ParameterStore& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

void adam_step(ParameterStore& params, std::span<const Tensor> grads, AdamState& state,
               const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter / gradient / state count mismatch");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + params[i].name);
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

std::vector<Tensor> parameter_gradients(const Tape& tape, const ParameterStore& params) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    const Tensor* g = tape.parameter_grad(p);
    grads.push_back(g ? *g : Tensor(p.value.shape()));
  }
  return grads;
}

std::vector<CurvePoint> train_loop(TrainState& state, std::span<const Example> dataset,
                                   const TrainConfig& cfg, std::size_t iterations,
                                   const std::function<void(const CurvePoint&)>& on_step) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train_loop: empty dataset");
  std::vector<CurvePoint> curve;
  curve.reserve(iterations);
  const Preprocessor& pre = state.model.preprocessor();
  for (std::size_t i = 0; i < iterations; ++i) {
    std::vector<FlowExample> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Example& ex = dataset[state.rng.index(dataset.size())];
      batch.push_back({&ex.x, prepare_target(ex.y, pre, state.rng)});
    }
    Tape tape;
    NllValue nll;
    try {
      nll = nll_loss(tape, batch, state.model);
    } catch (const NumericError& e) {
      if (!cfg.outdir.empty()) save_checkpoint(cfg.outdir / "emergency.cfck", state);
      throw NumericError("iteration " + std::to_string(state.iteration + 1) + ": " + e.what());
    }
    if (!std::isfinite(nll.nats_per_dim)) {
      if (!cfg.outdir.empty()) save_checkpoint(cfg.outdir / "emergency.cfck", state);
      throw NumericError("iteration " + std::to_string(state.iteration + 1) +
                         ": non-finite loss");
    }
    tape.backward(nll.loss);
    const auto grads = parameter_gradients(tape, state.model.parameters());
    adam_step(state.model.parameters(), grads, state.adam, cfg);
    ++state.iteration;
    const CurvePoint pt{state.iteration, nll.nats_per_dim};
    curve.push_back(pt);
    if (on_step) on_step(pt);
    if (cfg.checkpoint_interval && !cfg.outdir.empty() &&
        state.iteration % cfg.checkpoint_interval == 0) {
      save_checkpoint(cfg.outdir / "checkpoint.cfck", state);
    }
  }
  return curve;
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "iteration,nll_nats_per_dim\n" << std::setprecision(17);
  for (const auto& p : curve) os << p.iteration << ',' << p.nll_nats_per_dim << '\n';
}

}  // namespace cflow
