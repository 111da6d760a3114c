#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "cflow/flow.hpp"

namespace cflow {

struct TrainConfig {
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 2;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // 0 disables periodic checkpoints
  std::filesystem::path outdir;         // empty disables file output

  void validate() const;
};

struct Example {
  Tensor x;
  Tensor y;  // task units
};

// y_cont = (y + u) / bins - 0.5 with u ~ U[0,1)^d.
Tensor dequantize(const Tensor& y_discrete, std::size_t bins, Rng& rng);

// Maps a task-space target into flow space: dequantized for discrete
// preprocessing, deterministic otherwise.
Tensor prepare_target(const Tensor& y, const Preprocessor& pre, Rng& rng);

struct NllValue {
  Var loss;               // mean of -log p over the batch, nats
  double nats_per_dim;    // loss / output dimension
};

struct FlowExample {
  const Tensor* x;
  Tensor y_cont;
};

NllValue nll_loss(Tape& tape, std::span<const FlowExample> batch, const ConditionalFlow& model);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ParameterStore& params);
};

// Bias-corrected Adam; t is incremented before the correction.
void adam_step(ParameterStore& params, std::span<const Tensor> grads, AdamState& state,
               const TrainConfig& cfg);

struct CurvePoint {
  std::uint64_t iteration;
  double nll_nats_per_dim;
};

struct TrainState {
  FlowModel model;
  AdamState adam;
  std::uint64_t iteration = 0;
  Rng rng;

  TrainState(FlowModel m, std::uint64_t seed)
      : model(std::move(m)), adam(AdamState::zeros_like(model.parameters())), rng(seed) {}
};

// Gradients of the mean batch NLL for every parameter (zeros if unreached).
std::vector<Tensor> parameter_gradients(const Tape& tape, const ParameterStore& params);

// Runs `iterations` optimizer steps from the state's current iteration.
// Checkpoints go to cfg.outdir / "checkpoint.cfck"; a non-finite loss writes
// "emergency.cfck" and throws NumericError.
std::vector<CurvePoint> train_loop(TrainState& state, std::span<const Example> dataset,
                                   const TrainConfig& cfg, std::size_t iterations,
                                   const std::function<void(const CurvePoint&)>& on_step = {});

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve);

}  // namespace cflow
