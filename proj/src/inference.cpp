#include "cflow/inference.hpp"

#include <cmath>
#include <limits>

namespace cflow {

void PredictionConfig::validate() const {
  if (samples < 1) throw std::invalid_argument("predict.M must be >= 1");
  if (!(temperature >= 0.0)) throw std::invalid_argument("predict.temperature must be >= 0");
  if (gradient_steps < 1) throw std::invalid_argument("gradient steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("gradient step size must be > 0");
}

LatentStack draw_latents(const ConditionalFlow& model, Rng& rng, double temperature) {
  LatentStack z;
  for (const auto& s : model.latent_shapes()) {
    Tensor t(s);
    if (temperature > 0.0) t = rng.normal_tensor(s, temperature);
    z.parts.push_back(std::move(t));
  }
  return z;
}

Tensor sample(const Tensor& x, const ConditionalFlow& model, Rng& rng, double temperature) {
  return model.preprocessor().denormalize(model.inverse(draw_latents(model, rng, temperature), x));
}

SampleMean average_draws(const Tensor& x, const ConditionalFlow& model,
                         std::span<const LatentStack> draws) {
  if (draws.empty()) throw std::invalid_argument("average_draws: no draws");
  Tensor sum_y(model.output_shape());
  Tensor sum_sq(model.output_shape());
  for (const auto& z : draws) {
    const Tensor y = model.inverse(z, x);
    for (std::size_t i = 0; i < y.size(); ++i) {
      sum_y[i] += y[i];
      sum_sq[i] += y[i] * y[i];
    }
  }
  const double m = static_cast<double>(draws.size());
  SampleMean out{Tensor(model.output_shape()), Tensor(model.output_shape())};
  for (std::size_t i = 0; i < sum_y.size(); ++i) {
    const double mu = sum_y[i] / m;
    out.mean[i] = mu;
    out.variance[i] = draws.size() > 1 ? std::max(0.0, (sum_sq[i] - m * mu * mu) / (m - 1.0)) : 0.0;
  }
  return out;
}

SampleMean predict_sample_mean(const Tensor& x, const ConditionalFlow& model, std::size_t samples,
                               Rng& rng, double temperature) {
  if (samples < 1) throw std::invalid_argument("predict_sample_mean: M must be >= 1");
  std::vector<LatentStack> draws;
  draws.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) draws.push_back(draw_latents(model, rng, temperature));
  return average_draws(x, model, draws);
}

namespace {

struct Evaluation {
  double log_p;
  Tensor grad;
};

Evaluation evaluate(const Tensor& x, const ConditionalFlow& model, const Tensor& y) {
  Tape tape;
  Var yv = tape.variable(y);
  Var lp = model.log_likelihood(tape, x, yv);
  tape.backward(lp);
  return {lp.value().item(), tape.grad(yv)};
}

double try_log_p(const Tensor& x, const ConditionalFlow& model, const Tensor& y) {
  try {
    return model.log_likelihood(x, y);
  } catch (const NumericError&) {
    return -std::numeric_limits<double>::infinity();
  }
}

}  // namespace

GradientPrediction predict_gradient(const Tensor& x, const ConditionalFlow& model,
                                    const Tensor& init, std::size_t steps, double step_size) {
  if (steps < 1) throw std::invalid_argument("predict_gradient: steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("predict_gradient: step size must be > 0");
  Tensor y = init;
  Evaluation cur = evaluate(x, model, y);
  std::size_t accepted = 0;
  constexpr double kMinStep = 1e-12;
  for (std::size_t it = 0; it < steps; ++it) {
    double gnorm = 0.0;
    for (double g : cur.grad.data()) gnorm += g * g;
    if (gnorm == 0.0) break;
    bool moved = false;
    for (double eta = step_size; eta >= kMinStep; eta *= 0.5) {
      Tensor cand = y;
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] += eta * cur.grad[i];
      if (!cand.all_finite()) throw NumericError("predict_gradient: divergence (non-finite y)");
      if (try_log_p(x, model, cand) >= cur.log_p) {
        y = std::move(cand);
        cur = evaluate(x, model, y);
        moved = true;
        break;
      }
    }
    if (!moved) break;
    ++accepted;
  }
  return {y, cur.log_p, accepted};
}

Tensor discretize(const Tensor& y_task, OutputKind kind) {
  if (kind == OutputKind::kContinuous) return y_task;
  if (y_task.rank() != 3) throw ShapeError("discretize: expected h x w x c, got " + shape_str(y_task.shape()));
  const std::size_t h = y_task.height(), w = y_task.width(), c = y_task.channels();
  Tensor out({h, w, 1});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += y_task.at(i, j, k);
      out.at(i, j, 0) = s / static_cast<double>(c) >= 0.5 ? 1.0 : 0.0;
    }
  return out;
}

Tensor discretize_argmax(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("discretize_argmax: expected h x w x c");
  const std::size_t h = scores.height(), w = scores.width(), c = scores.channels();
  Tensor out({h, w, 1});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (scores.at(i, j, k) > scores.at(i, j, best)) best = k;
      out.at(i, j, 0) = static_cast<double>(best);
    }
  return out;
}

}  // namespace cflow
