#pragma once

#include <cstddef>
#include <span>

#include "cflow/flow.hpp"

namespace cflow {

enum class PredictMode { kSampleMean, kGradient };

struct PredictionConfig {
  PredictMode mode = PredictMode::kSampleMean;
  std::size_t samples = 10;  // M
  double temperature = 1.0;
  std::size_t gradient_steps = 1000;
  double step_size = 0.1;
  bool discretize = true;

  void validate() const;
};

LatentStack draw_latents(const ConditionalFlow& model, Rng& rng, double temperature);

// z ~ N(0, T^2 I), y = g_x(z), returned in task units.
Tensor sample(const Tensor& x, const ConditionalFlow& model, Rng& rng, double temperature = 1.0);

struct SampleMean {
  Tensor mean;      // flow space
  Tensor variance;  // per-entry sample variance (0 when M = 1)
};

// y* = (1/M) sum_i g_x(z_i).
SampleMean predict_sample_mean(const Tensor& x, const ConditionalFlow& model, std::size_t samples,
                               Rng& rng, double temperature = 1.0);
// Average of explicitly supplied draws; order of draws does not matter.
SampleMean average_draws(const Tensor& x, const ConditionalFlow& model,
                         std::span<const LatentStack> draws);

struct GradientPrediction {
  Tensor y;               // flow space
  double log_likelihood;  // at y
  std::size_t accepted_steps;
};

// Gradient ascent on log p(y | x) over y. A step that lowers the likelihood
// is retried at half the size; ascent stops when no step is accepted.
GradientPrediction predict_gradient(const Tensor& x, const ConditionalFlow& model,
                                    const Tensor& init, std::size_t steps, double step_size);

enum class OutputKind { kBinaryMask, kContinuous };

// Task-unit rounding. Binary masks: average the channels, class 1 when the
// mean is >= 0.5, result is h x w x 1. Continuous outputs pass through.
Tensor discretize(const Tensor& y_task, OutputKind kind);
// Per-pixel argmax over channels, h x w x 1 class indices.
Tensor discretize_argmax(const Tensor& scores);

}  // namespace cflow
