#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cflow/autodiff.hpp"
#include "cflow/conditioning.hpp"
#include "cflow/layers.hpp"
#include "cflow/rng.hpp"

namespace cflow {

// Maps task-space outputs to the flow's continuous space and back.
//   kDequantize: y_cont = (y + u) / bins - 0.5, logdet -d log(bins). The
//                inverse returns lattice units, y + u - 0.5.
//   kAffine:     y_cont = (y - shift) * scale, logdet d log(scale).
struct Preprocessor {
  enum class Kind { kIdentity, kDequantize, kAffine };

  Kind kind = Kind::kIdentity;
  std::size_t bins = 2;
  double scale = 1.0;
  double shift = 0.0;

  static Preprocessor identity() { return {}; }
  static Preprocessor dequantize(std::size_t bins);
  static Preprocessor affine(double scale, double shift);

  // log|det| of task space -> flow space for d output entries.
  double logdet(std::size_t d) const;
  // Deterministic for kAffine / kIdentity; kDequantize needs noise (see training).
  Tensor normalize(const Tensor& y) const;
  Tensor denormalize(const Tensor& y_cont) const;
};

// Latent parts in emission order: one per split, then the final level.
struct LatentStack {
  std::vector<Tensor> parts;

  std::size_t element_count() const;
};

// Anything that defines p(y | x) through an invertible map of y.
class ConditionalFlow {
 public:
  virtual ~ConditionalFlow() = default;

  virtual std::vector<Shape> latent_shapes() const = 0;
  virtual const Shape& output_shape() const = 0;
  virtual const Preprocessor& preprocessor() const = 0;
  // log p(y | x) in task units, with y_cont already normalized.
  virtual Var log_likelihood(Tape& tape, const Tensor& x, Var y_cont) const = 0;
  // y_cont = g_x(z).
  virtual Tensor inverse(const LatentStack& z, const Tensor& x) const = 0;

  double log_likelihood(const Tensor& x, const Tensor& y_cont) const;
};

struct ModelConfig {
  std::size_t levels = 1;  // L
  std::size_t steps = 1;   // K
  ArchitectureWidths widths;
  Shape x_shape;  // h x w x c
  Shape y_shape;  // h x w x c, spatial dims divisible by 2^L
};

struct FlowStep {
  std::size_t level = 0;
  std::size_t step = 0;
  std::size_t channels = 0;
  CNParams actnorm;
  CNParams conv;
  CNParams features;
  CNParams coupling;
};

struct LayerReport {
  std::size_t level;
  std::size_t step;
  std::string kind;
  double logdet;
};

struct ForwardResult {
  std::vector<Var> latents;
  Var total_logdet;
  std::vector<LayerReport> layers;
};

// L levels of (squeeze, K x [actnorm -> 1x1 conv -> coupling], split), with
// no split after the last level. Every layer weight is generated from x.
class FlowModel : public ConditionalFlow {
 public:
  FlowModel(ModelConfig config, Preprocessor pre, Rng& rng);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  const std::vector<FlowStep>& steps() const { return steps_; }
  const FlowStep& step(std::size_t level, std::size_t k) const;

  std::vector<Shape> latent_shapes() const override;
  const Shape& output_shape() const override { return config_.y_shape; }
  const Preprocessor& preprocessor() const override { return pre_; }
  Var log_likelihood(Tape& tape, const Tensor& x, Var y_cont) const override;
  Tensor inverse(const LatentStack& z, const Tensor& x) const override;
  using ConditionalFlow::log_likelihood;

  // Log-likelihood at the zero-initialized starting point, in closed form:
  // only the couplings contribute, each with log sigmoid(2) per v2 entry.
  double initial_logdet() const;

 private:
  ModelConfig config_;
  Preprocessor pre_;
  ParameterStore params_;
  std::vector<FlowStep> steps_;
};

ForwardResult flow_forward(Tape& tape, Var y_cont, const Tensor& x, const FlowModel& model);
Tensor flow_inverse(const LatentStack& z, const Tensor& x, const FlowModel& model);
LatentStack latent_values(const ForwardResult& r);

// Sets every zero-initialized output layer to U(-a, a) / sqrt(fan_in) with
// a = magnitude, giving a generic non-identity flow. The 1x1-conv output is
// further divided by sqrt(c). Interior layers keep their initialization.
void randomize_output_layers(FlowModel& model, Rng& rng, double magnitude);
bool is_output_layer(const std::string& parameter_name);

}  // namespace cflow
