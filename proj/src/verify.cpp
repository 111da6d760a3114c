#include "cflow/verify.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

#include "cflow/flow.hpp"
#include "cflow/inference.hpp"
#include "cflow/training.hpp"

namespace cflow {

namespace {

ArchitectureWidths small_widths() {
  ArchitectureWidths w;
  w.conv_channels = 4;
  w.fc_width = 8;
  w.coupling_hidden = 8;
  w.feature_channels = 4;
  return w;
}

FlowModel small_model(Shape x, Shape y, std::size_t L, std::size_t K, Rng& rng, double magnitude,
                      Preprocessor pre = Preprocessor::identity()) {
  ModelConfig c;
  c.levels = L;
  c.steps = K;
  c.widths = small_widths();
  c.x_shape = std::move(x);
  c.y_shape = std::move(y);
  FlowModel m(c, pre, rng);
  randomize_output_layers(m, rng, magnitude);
  return m;
}

std::vector<double> flat_latents(const FlowModel& m, const Tensor& x, const Tensor& y) {
  Tape t;
  std::vector<double> out;
  for (const auto& p : latent_values(flow_forward(t, t.constant(y), x, m)).parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

CheckRow upper(std::string suite, std::string what, double value, double bound) {
  return {std::move(suite), std::move(what), value, bound, bound - value, value < bound};
}

CheckRow round_trip(const CheckOptions& o) {
  double worst = 0.0;
  Rng rng(o.seed);
  for (std::size_t L : {1, 2})
    for (std::size_t K : {1, 2}) {
      const FlowModel m = small_model({8, 8, 1}, {8, 8, 2}, L, K, rng, o.magnitude);
      for (int i = 0; i < 4; ++i) {
        const Tensor x = rng.normal_tensor({8, 8, 1});
        const Tensor y = rng.normal_tensor({8, 8, 2});
        Tape t;
        const LatentStack z = latent_values(flow_forward(t, t.constant(y), x, m));
        worst = std::max(worst, max_abs_diff(flow_inverse(z, x, m), y));
      }
    }
  return upper("round-trip", "max |g(f(y)) - y|", worst, 1e-8);
}

CheckRow jacobian(const CheckOptions& o) {
  Rng rng(o.seed + 1);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    const FlowModel m = small_model({4, 4, 1}, {4, 4, 2}, 1, 1, rng, o.magnitude);
    const Tensor x = rng.normal_tensor({4, 4, 1});
    const Tensor y = rng.normal_tensor({4, 4, 2});
    const std::size_t d = y.size();
    Tensor jac({d, d});
    const double eps = 1e-6;
    for (std::size_t j = 0; j < d; ++j) {
      Tensor yp = y, ym = y;
      yp[j] += eps;
      ym[j] -= eps;
      const auto fp = flat_latents(m, x, yp), fm = flat_latents(m, x, ym);
      for (std::size_t i = 0; i < d; ++i) jac.at(i, j) = (fp[i] - fm[i]) / (2.0 * eps);
    }
    Tape t;
    const double ld = flow_forward(t, t.constant(y), x, m).total_logdet.value().item();
    const double ref = slogdet_lu(jac).logabsdet;
    worst = std::max(worst, std::abs(ld - ref) / std::max(1.0, std::abs(ref)));
  }
  return upper("jacobian", "rel |logdet - log|det J_fd||", worst, 1e-5);
}

CheckRow gradient(const CheckOptions& o) {
  Rng rng(o.seed + 2);
  FlowModel m = small_model({4, 4, 1}, {4, 4, 1}, 1, 1, rng, o.magnitude, Preprocessor::dequantize(2));
  const Tensor x = rng.normal_tensor({4, 4, 1});
  Tensor y({4, 4, 1});
  for (auto& v : y.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  const std::vector<FlowExample> batch{{&x, dequantize(y, 2, rng)}};
  Tape tape;
  tape.backward(nll_loss(tape, batch, m).loss);
  const auto grads = parameter_gradients(tape, m.parameters());
  double worst = 0.0;
  for (std::size_t p = 0; p < m.parameters().size(); ++p) {
    Parameter& prm = m.parameters()[p];
    for (std::size_t i = 0; i < prm.value.size(); i += 3) {
      const double orig = prm.value[i];
      auto f = [&](double v) {
        prm.value[i] = v;
        Tape t;
        const double r = nll_loss(t, batch, m).loss.value().item();
        prm.value[i] = orig;
        return r;
      };
      const double fd = (f(orig + 1e-6) - f(orig - 1e-6)) / 2e-6;
      const double g = grads[p][i];
      worst = std::max(worst, std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)}));
    }
  }
  return upper("gradient", "max rel err dNLL/dtheta", worst, 1e-6);
}

CheckRow normalization(const CheckOptions& o) {
  Rng rng(o.seed + 3);
  const FlowModel m = small_model({2, 2, 1}, {2, 2, 1}, 1, 1, rng, o.magnitude);
  const Tensor x = rng.normal_tensor({2, 2, 1});
  double lo[4], hi[4];
  for (int j = 0; j < 4; ++j) {
    lo[j] = INFINITY;
    hi[j] = -INFINITY;
  }
  for (int i = 0; i < 5000; ++i) {
    const Tensor y = sample(x, m, rng);
    for (int j = 0; j < 4; ++j) {
      lo[j] = std::min(lo[j], y[j]);
      hi[j] = std::max(hi[j], y[j]);
    }
  }
  double cell = 1.0, h[4];
  const int n = 16;
  for (int j = 0; j < 4; ++j) {
    const double pad = 0.25 * (hi[j] - lo[j]);
    lo[j] -= pad;
    hi[j] += pad;
    h[j] = (hi[j] - lo[j]) / n;
    cell *= h[j];
  }
  double total = 0.0;
  Tensor y({2, 2, 1});
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int e = 0; e < n; ++e) {
          const int idx[4]{a, b, c, e};
          for (int j = 0; j < 4; ++j) y[j] = lo[j] + (idx[j] + 0.5) * h[j];
          total += std::exp(m.log_likelihood(x, y));
        }
  total *= cell;
  return upper("normalization", "|integral of p - 1|", std::abs(total - 1.0), 0.05);
}

CheckRow dequantization_bound(const CheckOptions& o) {
  Rng rng(o.seed + 4);
  const FlowModel m =
      small_model({2, 2, 1}, {2, 2, 1}, 1, 1, rng, o.magnitude, Preprocessor::dequantize(2));
  const Tensor x = rng.normal_tensor({2, 2, 1});
  // 4-point Gauss-Legendre on [0, 1].
  const double g = std::sqrt(3.0 / 7.0 - 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
  const double k = std::sqrt(3.0 / 7.0 + 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
  const double wg = (18.0 + std::sqrt(30.0)) / 36.0, wk = (18.0 - std::sqrt(30.0)) / 36.0;
  const double nodes[4]{0.5 - 0.5 * k, 0.5 - 0.5 * g, 0.5 + 0.5 * g, 0.5 + 0.5 * k};
  const double weights[4]{wk / 2, wg / 2, wg / 2, wk / 2};
  double worst = INFINITY;
  for (unsigned bits = 0; bits < 16; ++bits) {
    auto log_p = [&](const double u[4]) {
      Tensor yc({2, 2, 1});
      for (int j = 0; j < 4; ++j) yc[j] = (((bits >> j) & 1u) + u[j]) / 2.0 - 0.5;
      return m.log_likelihood(x, yc);
    };
    double q = 0.0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        for (int c = 0; c < 4; ++c)
          for (int e = 0; e < 4; ++e) {
            const double u[4]{nodes[a], nodes[b], nodes[c], nodes[e]};
            q += weights[a] * weights[b] * weights[c] * weights[e] * std::exp(log_p(u));
          }
    const int n = 500;
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double u[4]{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
      const double v = log_p(u);
      s += v;
      ss += v * v;
    }
    const double mean = s / n;
    const double se = std::sqrt(std::max(0.0, ss / n - mean * mean) / (n - 1));
    worst = std::min(worst, std::log(q) - (mean - 3.0 * se));
  }
  return {"dequant-bound", "min log q - (E log p - 3 SE)", worst, 0.0, worst, worst >= 0.0};
}

}  // namespace

std::vector<CheckRow> run_checks(const CheckOptions& opts) {
  return {round_trip(opts), jacobian(opts), gradient(opts), normalization(opts),
          dequantization_bound(opts)};
}

void print_check_table(std::ostream& os, const std::vector<CheckRow>& rows) {
  os << std::left << std::setw(15) << "suite" << std::setw(32) << "measured" << std::right
     << std::setw(12) << "value" << std::setw(12) << "bound" << std::setw(12) << "margin"
     << "  result\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(15) << r.suite << std::setw(32) << r.measured << std::right
       << std::scientific << std::setprecision(3) << std::setw(12) << r.value << std::setw(12)
       << r.bound << std::setw(12) << r.margin << "  " << (r.pass ? "ok" : "FAIL") << '\n';
  }
  os << std::defaultfloat;
}

}  // namespace cflow
