// Acceptance suite. One PASS/FAIL line per criterion; exit status is the
// number of failures. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cflow/checkpoint.hpp"
#include "cflow/inference.hpp"
#include "cflow/tasks.hpp"
#include "cflow/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cflow;

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

FlowModel random_model(Shape x, Shape y, std::size_t L, std::size_t K, std::uint64_t seed,
                       double magnitude, Preprocessor pre = Preprocessor::identity()) {
  Rng rng(seed);
  FlowModel m = testutil::tiny_model(std::move(x), std::move(y), L, K, rng, pre);
  randomize_output_layers(m, rng, magnitude);
  return m;
}

// 1. flow_inverse(flow_forward(y)) == y.
Outcome invertibility() {
  double worst = 0.0;
  std::size_t pairs = 0;
  std::uint64_t seed = 0;
  for (std::size_t L : {1, 2, 3})
    for (std::size_t K : {1, 2, 4})
      for (std::size_t c : {2, 4}) {
        const std::size_t n = (L + K + c) % 2 ? 16 : 8;
        const FlowModel m = random_model({n, n, 1}, {n, n, c}, L, K, ++seed, 0.25);
        Rng rng(1000 + seed);
        for (int i = 0; i < 6; ++i) {
          const Tensor x = rng.normal_tensor({n, n, 1});
          const Tensor y = rng.normal_tensor({n, n, c});
          Tape t;
          const LatentStack z = latent_values(flow_forward(t, t.constant(y), x, m));
          worst = std::max(worst, max_abs_diff(flow_inverse(z, x, m), y));
          ++pairs;
        }
      }
  return {worst < 1e-8 && pairs >= 100, fmt("max |y' - y| = %.3g (< 1e-8) over %zu pairs", worst, pairs)};
}

// 2. Summed layer log-determinants against a finite-difference Jacobian.
Outcome exact_jacobian() {
  struct Cfg {
    Shape y;
    std::size_t L, K;
  };
  const std::vector<Cfg> cfgs{{{4, 4, 2}, 1, 1}, {{4, 4, 1}, 1, 2}, {{2, 2, 2}, 1, 2},
                              {{4, 4, 2}, 2, 1}, {{4, 4, 1}, 2, 2}};
  double worst = 0.0;
  std::size_t runs = 0;
  for (std::size_t r = 0; r < 20; ++r) {
    const Cfg& c = cfgs[r % cfgs.size()];
    const FlowModel m = random_model({4, 4, 1}, c.y, c.L, c.K, 200 + r, 0.4);
    Rng rng(300 + r);
    const Tensor x = rng.normal_tensor({4, 4, 1});
    const Tensor y = rng.normal_tensor(c.y);
    Tape t;
    const double ld = flow_forward(t, t.constant(y), x, m).total_logdet.value().item();
    auto f = [&](const std::vector<double>& in) { return testutil::forward_flat(m, x, in); };
    const double ref = oracle::full_pivot_logabsdet(oracle::numeric_jacobian(f, y.vec()));
    worst = std::max(worst, std::abs(ld - ref) / std::max(1.0, std::abs(ref)));
    ++runs;
  }
  return {worst < 1e-5, fmt("max rel |logdet - slogdet(J_fd)| = %.3g (< 1e-5) over %zu configs", worst, runs)};
}

// 3. exp(log p(y|x)) integrates to one over R^d.
Outcome normalization() {
  const FlowModel m = random_model({2, 2, 1}, {2, 2, 1}, 1, 1, 7, 0.5);
  Rng rng(8);
  const Tensor x = rng.normal_tensor({2, 2, 1});
  const std::size_t d = 4;
  std::vector<double> lo(d, INFINITY), hi(d, -INFINITY);
  for (int i = 0; i < 20000; ++i) {
    const Tensor y = sample(x, m, rng);
    for (std::size_t j = 0; j < d; ++j) {
      lo[j] = std::min(lo[j], y[j]);
      hi[j] = std::max(hi[j], y[j]);
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double pad = 0.15 * (hi[j] - lo[j]);
    lo[j] -= pad;
    hi[j] += pad;
  }
  std::size_t inside = 0;
  const std::size_t fresh = 20000;
  for (std::size_t i = 0; i < fresh; ++i) {
    const Tensor y = sample(x, m, rng);
    bool in = true;
    for (std::size_t j = 0; j < d; ++j) in = in && y[j] >= lo[j] && y[j] <= hi[j];
    inside += in;
  }
  const double coverage = static_cast<double>(inside) / fresh;

  const std::size_t n = 36;
  std::vector<double> h(d);
  double cell = 1.0;
  for (std::size_t j = 0; j < d; ++j) {
    h[j] = (hi[j] - lo[j]) / n;
    cell *= h[j];
  }
  double total = 0.0;
  Tensor y({2, 2, 1});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t e = 0; e < n; ++e) {
          const std::size_t idx[4]{a, b, c, e};
          for (std::size_t j = 0; j < d; ++j) y[j] = lo[j] + (idx[j] + 0.5) * h[j];
          total += std::exp(m.log_likelihood(x, y));
        }
  total *= cell;
  return {coverage >= 0.999 && std::abs(total - 1.0) <= 0.05,
          fmt("integral = %.5f (1 +- 0.05), box holds %.4f of sampled mass, %zu^4 midpoints", total,
              coverage, n)};
}

// 4. Tape gradients of the batch NLL against central differences.
Outcome gradient_fidelity() {
  FlowModel m = random_model({4, 4, 1}, {4, 4, 2}, 2, 1, 9, 0.3, Preprocessor::dequantize(2));
  Rng rng(10);
  std::vector<Tensor> xs{rng.normal_tensor({4, 4, 1}), rng.normal_tensor({4, 4, 1})};
  std::vector<FlowExample> batch;
  for (const auto& x : xs) {
    Tensor y({4, 4, 2});
    for (auto& v : y.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    batch.push_back({&x, dequantize(y, 2, rng)});
  }
  auto nll = [&] {
    Tape t;
    return nll_loss(t, batch, m).loss.value().item();
  };
  Tape tape;
  tape.backward(nll_loss(tape, batch, m).loss);
  const auto grads = parameter_gradients(tape, m.parameters());
  double worst = 0.0;
  std::string worst_name;
  std::size_t entries = 0, groups = 0;
  for (std::size_t p = 0; p < m.parameters().size(); ++p) {
    Parameter& prm = m.parameters()[p];
    ++groups;
    for (std::size_t i = 0; i < prm.value.size(); ++i) {
      const double orig = prm.value[i];
      const double fd = oracle::central_difference(
          [&](double v) {
            prm.value[i] = v;
            const double r = nll();
            prm.value[i] = orig;
            return r;
          },
          orig, 1e-6);
      const double e = oracle::rel_err(grads[p][i], fd);
      if (e > worst) {
        worst = e;
        worst_name = prm.name;
      }
      ++entries;
    }
  }
  return {worst < 1e-6, fmt("max rel err %.3g (< 1e-6) at %s; %zu entries in %zu groups",
                            worst, worst_name.c_str(), entries, groups)};
}

// 5. log q(y|x) = log of the integral of p over the unit cell >= E_u[log p(y + u|x)].
Outcome dequantization_bound() {
  const FlowModel m = random_model({2, 2, 1}, {2, 2, 1}, 1, 1, 11, 0.5, Preprocessor::dequantize(2));
  std::vector<double> nodes, weights;
  oracle::gauss_legendre(8, 0.0, 1.0, nodes, weights);
  Rng rng(12);
  double min_margin = INFINITY;
  std::size_t checks = 0, held = 0;
  for (int xi = 0; xi < 5; ++xi) {
    const Tensor x = rng.normal_tensor({2, 2, 1});
    for (unsigned bits = 0; bits < 16; ++bits) {
      double lat[4];
      for (int j = 0; j < 4; ++j) lat[j] = (bits >> j) & 1u;
      auto log_p = [&](const double u[4]) {
        Tensor yc({2, 2, 1});
        for (int j = 0; j < 4; ++j) yc[j] = (lat[j] + u[j]) / 2.0 - 0.5;
        return m.log_likelihood(x, yc);
      };
      double q = 0.0;
      for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t b = 0; b < 8; ++b)
          for (std::size_t c = 0; c < 8; ++c)
            for (std::size_t e = 0; e < 8; ++e) {
              const double u[4]{nodes[a], nodes[b], nodes[c], nodes[e]};
              q += weights[a] * weights[b] * weights[c] * weights[e] * std::exp(log_p(u));
            }
      const int n = 2000;
      double s = 0.0, ss = 0.0;
      for (int i = 0; i < n; ++i) {
        const double u[4]{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
        const double v = log_p(u);
        s += v;
        ss += v * v;
      }
      const double mean = s / n;
      const double se = std::sqrt(std::max(0.0, ss / n - mean * mean) / (n - 1));
      const double margin = std::log(q) - (mean - 3.0 * se);
      min_margin = std::min(min_margin, margin);
      held += margin >= 0.0;
      ++checks;
    }
  }
  return {held == checks, fmt("%zu/%zu cells satisfy log q >= E log p - 3 SE; min margin %.4g nats",
                              held, checks, min_margin)};
}

// 6. Desk-scale binary segmentation training.
Outcome training_sanity() {
  TaskSpec spec;
  spec.kind = TaskKind::kBinarySeg;
  spec.size = 8;
  spec.train_size = 200;
  spec.test_size = 32;
  spec.seed = 7;
  const TaskDataset data = generate_dataset(spec);
  ModelConfig mc;
  mc.levels = 1;
  mc.steps = 4;
  mc.widths = {16, 32, 64, 16};
  mc.x_shape = task_x_shape(spec);
  mc.y_shape = task_y_shape(spec);
  Rng rng(11);
  TrainState st(FlowModel(mc, task_preprocessor(spec), rng), 5);
  const auto examples = to_examples(data.train, spec.kind);
  TrainConfig tc;  // lr 0.0002, batch 2
  const std::size_t iters = 2000;
  const auto curve = train_loop(st, examples, tc, iters);
  std::vector<double> deciles(10, 0.0);
  for (std::size_t i = 0; i < iters; ++i) deciles[i * 10 / iters] += curve[i].nll_nats_per_dim;
  for (auto& v : deciles) v /= iters / 10.0;
  bool decreasing = true;
  for (std::size_t i = 1; i < 10; ++i) decreasing = decreasing && deciles[i] < deciles[i - 1];
  PredictionConfig pc;  // sample mean, M = 10
  Rng prng(3);
  const MetricReport rep = evaluate_task(data, st.model, pc, prng);
  std::ostringstream os;
  os << "decile NLL";
  for (double v : deciles) os << fmt(" %.3f", v);
  os << (decreasing ? " (strictly decreasing)" : " (NOT strictly decreasing)");
  os << fmt("; test IOU %.3f (>= 0.90), M=%zu, %zu iterations", rep.mean_iou, pc.samples, iters);
  return {decreasing && rep.mean_iou >= 0.90, os.str()};
}

// A flow with modes known by construction: y = x + g(z) per entry, where g
// is piecewise linear with slope k on [t1, t2] and 1 elsewhere. The stretch
// leaves a low-density valley; y = x + g(t2) is a local maximum of p(y|x)
// holding little mass, while the global structure peaks at y = x.
class KinkedFlow : public ConditionalFlow {
 public:
  static constexpr double t1 = 1.0, t2 = 1.5, k = 8.0;

  explicit KinkedFlow(Shape shape) : shape_(std::move(shape)) {}

  static double g(double z) {
    if (z < t1) return z;
    if (z < t2) return t1 + k * (z - t1);
    return t1 + k * (t2 - t1) + (z - t2);
  }
  static double g_inv(double y) {
    const double a = g(t2);
    if (y < t1) return y;
    if (y < a) return t1 + (y - t1) / k;
    return t2 + (y - a);
  }
  static double slope_at(double z) { return z >= t1 && z < t2 ? k : 1.0; }
  static double trap() { return g(t2); }

  std::vector<Shape> latent_shapes() const override { return {shape_}; }
  const Shape& output_shape() const override { return shape_; }
  const Preprocessor& preprocessor() const override { return pre_; }

  Var log_likelihood(Tape& tape, const Tensor& x, Var y) const override {
    Var d = sub(y, tape.constant(x));
    const Tensor& dv = d.value();
    Tensor lp(dv.shape()), dlp(dv.shape());
    const double c = 0.5 * std::log(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < dv.size(); ++i) {
      const double z = g_inv(dv[i]);
      const double s = slope_at(z);
      lp[i] = -0.5 * z * z - c - std::log(s);
      dlp[i] = -z / s;
    }
    const std::size_t pid = d.id();
    Var node = tape.record(std::move(lp), OpKind::kCustom, {pid},
                           [pid, dlp](Tape& t, std::size_t self) {
                             if (!t.requires_grad(pid)) return;
                             const Tensor& go = t.out_grad(self);
                             Tensor& gi = t.grad_ref(pid);
                             for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * dlp[i];
                           });
    return sum(node);
  }

  Tensor inverse(const LatentStack& z, const Tensor& x) const override {
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += g(z.parts[0][i]);
    return y;
  }

 private:
  Shape shape_;
  Preprocessor pre_;
};

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// 7. Gradient ascent gets trapped where the sample mean does not; the sample
// mean is also cheaper than 1000 ascent steps on a real model.
Outcome inference_comparison() {
  const Shape shape{2, 2, 1};
  const KinkedFlow flow(shape);
  Rng rng(13);
  std::size_t wins = 0;
  double sm_err_sum = 0.0, gr_err_sum = 0.0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    const Tensor x = rng.normal_tensor(shape);
    Tensor init = x;
    for (auto& v : init.data()) v += KinkedFlow::trap() + rng.uniform(0.2, 1.0);
    const GradientPrediction gp = predict_gradient(x, flow, init, 1000, 0.1);
    const SampleMean sm = predict_sample_mean(x, flow, 10, rng);
    const double ge = mean_abs_diff(gp.y, x), se = mean_abs_diff(sm.mean, x);
    gr_err_sum += ge;
    sm_err_sum += se;
    wins += ge > se;
  }

  const FlowModel m = random_model({8, 8, 1}, {8, 8, 3}, 1, 4, 14, 0.25);
  Rng trng(15);
  const Tensor x = trng.uniform_tensor({8, 8, 1}, 0.0, 1.0);
  auto t0 = Clock::now();
  predict_sample_mean(x, m, 10, trng);
  const double sm_time = seconds_since(t0);
  t0 = Clock::now();
  const GradientPrediction gp = predict_gradient(x, m, trng.normal_tensor({8, 8, 3}), 1000, 0.01);
  const double gr_time = seconds_since(t0);

  const bool quality = wins * 5 >= static_cast<std::size_t>(trials) * 4;
  return {quality && sm_time < gr_time,
          fmt("sample mean better in %zu/%d trials (>= 80%%), mean error %.3f vs gradient %.3f; "
              "wall time M=10 %.3fs vs 1000-step ascent %.3fs (%zu steps accepted)",
              wins, trials, sm_err_sum / trials, gr_err_sum / trials, sm_time, gr_time,
              gp.accepted_steps)};
}

// 8. Var[sample mean] ~ 1 / M.
Outcome estimator_scaling() {
  const FlowModel m = random_model({4, 4, 1}, {4, 4, 1}, 1, 2, 16, 0.5);
  Rng rng(17);
  const Tensor x = rng.normal_tensor({4, 4, 1});
  const int repeats = 200;
  std::vector<double> lx, ly;
  for (std::size_t M = 1; M <= 64; M *= 2) {
    Tensor s(m.output_shape()), ss(m.output_shape());
    for (int r = 0; r < repeats; ++r) {
      const Tensor mean = predict_sample_mean(x, m, M, rng).mean;
      for (std::size_t i = 0; i < mean.size(); ++i) {
        s[i] += mean[i];
        ss[i] += mean[i] * mean[i];
      }
    }
    double var = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double mu = s[i] / repeats;
      var += (ss[i] - repeats * mu * mu) / (repeats - 1);
    }
    var /= static_cast<double>(s.size());
    lx.push_back(std::log(static_cast<double>(M)));
    ly.push_back(std::log(var));
  }
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i] / n;
    my += ly[i] / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double slope = sxy / sxx;
  return {slope >= -1.15 && slope <= -0.85,
          fmt("log-variance slope %.4f in [-1.15, -0.85], M = 1..64, %d repeats", slope, repeats)};
}

// 9. Adam on f(w) = 1.5 (w - 2)^2 against the reference recurrence.
Outcome optimizer_oracle() {
  ParameterStore store;
  store.add("w", Tensor::from({-1.0}));
  AdamState state = AdamState::zeros_like(store);
  const TrainConfig cfg;
  oracle::AdamReference ref{0.0002, 0.9, 0.999, 1e-8};
  double w_ref = -1.0, worst = 0.0;
  for (int step = 0; step < 100; ++step) {
    Tape t;
    Var loss = scale(sum_squares(add_scalar(t.parameter(store[0]), -2.0)), 1.5);
    t.backward(loss);
    const double g = (*t.parameter_grad(store[0]))[0];
    adam_step(store, std::vector<Tensor>{Tensor::from({g})}, state, cfg);
    w_ref = ref.step(w_ref, 3.0 * (w_ref - 2.0));
    worst = std::max(worst, std::abs(store[0].value[0] - w_ref));
  }
  return {worst < 1e-12, fmt("max |w - w_ref| = %.3g (< 1e-12) over 100 steps", worst)};
}

bool same_tensors(const TrainState& a, const TrainState& b) {
  const auto& pa = a.model.parameters();
  const auto& pb = b.model.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!(pa[i].value == pb[i].value)) return false;
  }
  return a.adam.m == b.adam.m && a.adam.v == b.adam.v && a.adam.t == b.adam.t &&
         a.iteration == b.iteration && a.rng.state() == b.rng.state();
}

// 10. Checkpoint mid-run, resume, compare with an uninterrupted twin.
Outcome persistence() {
  TaskSpec spec;
  spec.kind = TaskKind::kBinarySeg;
  spec.size = 8;
  spec.train_size = 32;
  spec.seed = 19;
  const TaskDataset data = generate_dataset(spec);
  const auto examples = to_examples(data.train, spec.kind);
  ModelConfig mc;
  mc.steps = 2;
  mc.widths = {8, 16, 16, 8};
  mc.x_shape = task_x_shape(spec);
  mc.y_shape = task_y_shape(spec);
  auto fresh = [&] {
    Rng rng(20);
    return TrainState(FlowModel(mc, task_preprocessor(spec), rng), 21);
  };
  const TrainConfig tc;
  TrainState twin = fresh();
  const auto full = train_loop(twin, examples, tc, 40);

  TrainState first = fresh();
  train_loop(first, examples, tc, 20);
  testutil::TempDir dir("accept");
  save_checkpoint(dir.path() / "mid.cfck", first);
  TrainState resumed = load_checkpoint(dir.path() / "mid.cfck");
  const bool bitwise_load = same_tensors(first, resumed);
  const auto rest = train_loop(resumed, examples, tc, 20);

  const double next_diff = std::abs(rest.front().nll_nats_per_dim - full[20].nll_nats_per_dim);
  const bool bitwise_end = same_tensors(twin, resumed);
  return {next_diff <= 1e-12 && bitwise_load && bitwise_end,
          fmt("next-iteration NLL diff %.3g (<= 1e-12); load bitwise %s; final state bitwise %s",
              next_diff, bitwise_load ? "yes" : "NO", bitwise_end ? "yes" : "NO")};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "invertibility", 60, invertibility},
      {2, "exact Jacobian", 120, exact_jacobian},
      {3, "normalization", 600, normalization},
      {4, "gradient fidelity", 300, gradient_fidelity},
      {5, "dequantization bound", 600, dequantization_bound},
      {6, "training sanity", 1800, training_sanity},
      {7, "inference comparison", 600, inference_comparison},
      {8, "estimator scaling", 300, estimator_scaling},
      {9, "optimizer oracle", 1, optimizer_oracle},
      {10, "persistence", 300, persistence},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s  %2d %-22s %s [%.2fs, limit %.0fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_seconds, in_time ? "" : ", EXCEEDED");
    std::fflush(stdout);
  }
  return failures;
}
