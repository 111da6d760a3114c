#include "cflow/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

#include "cflow/tensor_io.hpp"
#include "json.hpp"

namespace cflow {

TaskKind parse_task_kind(const std::string& s) {
  if (s == "binary-seg") return TaskKind::kBinarySeg;
  if (s == "denoise") return TaskKind::kDenoise;
  if (s == "inpaint") return TaskKind::kInpaint;
  throw ConfigError("task.kind: unknown task '" + s + "' (binary-seg, denoise, inpaint)");
}

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kBinarySeg: return "binary-seg";
    case TaskKind::kDenoise: return "denoise";
    case TaskKind::kInpaint: return "inpaint";
  }
  return "?";
}

std::size_t TaskSpec::block_side() const {
  return static_cast<std::size_t>(std::lround(std::sqrt(mask_fraction) * static_cast<double>(size)));
}

void TaskSpec::validate() const {
  const std::size_t factor = std::size_t{1} << levels;
  if (size < 8) throw std::invalid_argument("task.size must be >= 8");
  if (size % factor) {
    throw std::invalid_argument("task.size " + std::to_string(size) + " not divisible by 2^L = " +
                                std::to_string(factor));
  }
  if (train_size < 1 || test_size < 1) throw std::invalid_argument("dataset sizes must be >= 1");
  if (bins < 2) throw std::invalid_argument("task.bins must be >= 2");
  if (kind == TaskKind::kDenoise && !(sigma > 0.0)) {
    throw std::invalid_argument("task.sigma must be > 0");
  }
  if (kind == TaskKind::kInpaint) {
    if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) {
      throw std::invalid_argument("task.mask_fraction must be in (0, 1)");
    }
    const std::size_t s = block_side();
    if (s < 2 || s >= size || (size - s) % 2 || s % factor) {
      throw std::invalid_argument("task.mask_fraction " + std::to_string(mask_fraction) +
                                  " gives a " + std::to_string(s) +
                                  "-pixel central block, which must be even, centered and "
                                  "divisible by 2^L = " + std::to_string(factor));
    }
  }
}

namespace {

// Values on a 2^-16 grid keep sums and differences of 0-255 images exact.
double quantize(double v) { return std::round(v * 65536.0) / 65536.0; }

Tensor smooth_field(std::size_t n, Rng& rng) {
  Tensor img({n, n, 1}, 127.5);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int k = 0; k < 3; ++k) {
    const double amp = rng.uniform(15.0, 35.0);
    const double fy = static_cast<double>(rng.index(3));
    const double fx = static_cast<double>(rng.index(3));
    const double phase = rng.uniform(0.0, two_pi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        img.at(i, j, 0) += amp * std::sin(two_pi * (fy * i + fx * j) / n + phase);
  }
  for (auto& v : img.data()) v = quantize(v);
  return img;
}

}  // namespace

std::vector<TaskSample> gen_binary_seg(const TaskSpec& spec, std::size_t count, Rng& rng) {
  const std::size_t n = spec.size;
  if (n < 8) throw std::invalid_argument("gen_binary_seg: size must be >= 8");
  const double nd = static_cast<double>(n);
  std::vector<TaskSample> out;
  out.reserve(count);
  while (out.size() < count) {
    Tensor mask({n, n, 1});
    Tensor img({n, n, 1});
    const double f1 = rng.uniform(0.5, 2.0), f2 = rng.uniform(0.5, 2.0);
    const double p1 = rng.uniform(0.0, 6.3), p2 = rng.uniform(0.0, 6.3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        img.at(i, j, 0) = 0.15 + 0.08 * std::sin(f1 * i + p1) * std::cos(f2 * j + p2) +
                          0.05 * rng.uniform(-1.0, 1.0);
    const std::size_t shapes = 1 + rng.index(3);
    for (std::size_t s = 0; s < shapes; ++s) {
      const bool ellipse = rng.uniform() < 0.5;
      const double intensity = rng.uniform(0.65, 0.9);
      const double cy = rng.uniform(0.0, nd), cx = rng.uniform(0.0, nd);
      const double ry = rng.uniform(0.15, 0.4) * nd, rx = rng.uniform(0.15, 0.4) * nd;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double dy = (i + 0.5 - cy) / ry, dx = (j + 0.5 - cx) / rx;
          const bool inside = ellipse ? dy * dy + dx * dx <= 1.0
                                      : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
          if (inside) {
            mask.at(i, j, 0) = 1.0;
            img.at(i, j, 0) = intensity + 0.05 * rng.uniform(-1.0, 1.0);
          }
        }
    }
    const double frac = sum(mask) / (nd * nd);
    if (frac < 0.05 || frac > 0.8) continue;
    TaskSample smp;
    smp.x = img;
    smp.y = concat_channels(concat_channels(mask, mask), mask);
    smp.clean = mask;
    out.push_back(std::move(smp));
  }
  return out;
}

std::vector<TaskSample> gen_denoise(const TaskSpec& spec, std::size_t count, Rng& rng) {
  if (!(spec.sigma > 0.0)) throw std::invalid_argument("gen_denoise: sigma must be > 0");
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    TaskSample smp;
    smp.clean = smooth_field(spec.size, rng);
    smp.y = Tensor(smp.clean.shape());
    smp.x = smp.clean;
    for (std::size_t i = 0; i < smp.x.size(); ++i) {
      smp.y[i] = quantize(spec.sigma * rng.normal());
      smp.x[i] += smp.y[i];
    }
    out.push_back(std::move(smp));
  }
  return out;
}

std::vector<TaskSample> gen_inpaint(const TaskSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  const std::size_t n = spec.size, s = spec.block_side(), o = (n - s) / 2;
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    TaskSample smp;
    smp.clean = smooth_field(n, rng);
    smp.x = smp.clean;
    smp.y = Tensor({s, s, 1});
    smp.block_row = smp.block_col = o;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        smp.y.at(i, j, 0) = smp.clean.at(o + i, o + j, 0);
        smp.x.at(o + i, o + j, 0) = 0.0;
      }
    out.push_back(std::move(smp));
  }
  return out;
}

TaskDataset generate_dataset(const TaskSpec& spec) {
  spec.validate();
  TaskDataset d;
  d.spec = spec;
  Rng rng(spec.seed);
  auto gen = [&](std::size_t count) {
    switch (spec.kind) {
      case TaskKind::kBinarySeg: return gen_binary_seg(spec, count, rng);
      case TaskKind::kDenoise: return gen_denoise(spec, count, rng);
      case TaskKind::kInpaint: return gen_inpaint(spec, count, rng);
    }
    return std::vector<TaskSample>{};
  };
  d.train = gen(spec.train_size);
  d.test = gen(spec.test_size);
  return d;
}

std::uint64_t TaskDataset::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* split : {&train, &test})
    for (const auto& s : *split) {
      h = cflow::content_hash(s.x, h);
      h = cflow::content_hash(s.y, h);
      h = cflow::content_hash(s.clean, h);
    }
  return h;
}

Preprocessor task_preprocessor(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kBinarySeg: return Preprocessor::dequantize(spec.bins);
    case TaskKind::kDenoise: return Preprocessor::affine(1.0 / spec.sigma, 0.0);
    case TaskKind::kInpaint: return Preprocessor::affine(1.0 / 64.0, 127.5);
  }
  return Preprocessor::identity();
}

Tensor model_input(const TaskSample& s, TaskKind kind) {
  if (kind == TaskKind::kBinarySeg) return s.x;
  Tensor x = s.x;
  for (auto& v : x.data()) v /= 255.0;
  return x;
}

Shape task_x_shape(const TaskSpec& spec) { return {spec.size, spec.size, 1}; }

Shape task_y_shape(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kBinarySeg: return {spec.size, spec.size, 3};
    case TaskKind::kDenoise: return {spec.size, spec.size, 1};
    case TaskKind::kInpaint: return {spec.block_side(), spec.block_side(), 1};
  }
  return {};
}

OutputKind task_output_kind(TaskKind kind) {
  return kind == TaskKind::kBinarySeg ? OutputKind::kBinaryMask : OutputKind::kContinuous;
}

std::vector<Example> to_examples(const std::vector<TaskSample>& samples, TaskKind kind) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({model_input(s, kind), s.y});
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_binary(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(what) + ": mask is not binary");
  }
}

}  // namespace

double iou(const Tensor& pred_mask, const Tensor& true_mask) {
  require_same_shape(pred_mask, true_mask, "iou");
  require_binary(pred_mask, "iou");
  require_binary(true_mask, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    const bool p = pred_mask[i] == 1.0, t = true_mask[i] == 1.0;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double rmse = std::sqrt(se / static_cast<double>(a.size()));
  if (rmse == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak / rmse);
}

double pixel_accuracy(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "pixel_accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

void MetricReport::aggregate() {
  mean_iou = mean_psnr = mean_pixel_accuracy = 0.0;
  if (examples.empty()) return;
  for (const auto& e : examples) {
    mean_iou += e.iou;
    mean_psnr += e.psnr;
    mean_pixel_accuracy += e.pixel_accuracy;
  }
  const double n = static_cast<double>(examples.size());
  mean_iou /= n;
  mean_psnr /= n;
  mean_pixel_accuracy /= n;
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "index,iou,psnr,pixel_accuracy,log_likelihood\n" << std::setprecision(10);
  for (const auto& e : examples) {
    os << e.index << ',' << e.iou << ',' << e.psnr << ',' << e.pixel_accuracy << ','
       << e.log_likelihood << '\n';
  }
  os << "mean," << mean_iou << ',' << mean_psnr << ',' << mean_pixel_accuracy << ",\n";
}

void MetricReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : examples) {
    nlohmann::json j = {{"index", e.index},
                        {"iou", e.iou},
                        {"psnr", e.psnr},
                        {"pixel_accuracy", e.pixel_accuracy},
                        {"log_likelihood", e.log_likelihood}};
    os << j.dump() << '\n';
  }
  nlohmann::json agg = {{"aggregate", true},         {"task", task},
                        {"mode", mode},              {"M", samples},
                        {"wall_seconds", wall_seconds}, {"examples", examples.size()},
                        {"mean_iou", mean_iou},      {"mean_psnr", mean_psnr},
                        {"mean_pixel_accuracy", mean_pixel_accuracy}};
  os << agg.dump() << '\n';
}

MetricReport evaluate_task(const TaskDataset& data, const FlowModel& model,
                           const PredictionConfig& cfg, Rng& rng,
                           std::vector<Tensor>* predictions,
                           std::vector<Tensor>* variances) {
  cfg.validate();
  const TaskKind kind = data.spec.kind;
  const Preprocessor& pre = model.preprocessor();
  MetricReport rep;
  rep.task = task_kind_name(kind);
  rep.mode = cfg.mode == PredictMode::kSampleMean ? "sample-mean" : "gradient";
  rep.samples = cfg.mode == PredictMode::kSampleMean ? cfg.samples : 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const TaskSample& s = data.test[i];
    const Tensor x = model_input(s, kind);
    Tensor pred, var(model.output_shape());
    ExampleMetrics m;
    m.index = i;
    if (cfg.mode == PredictMode::kSampleMean) {
      SampleMean sm = predict_sample_mean(x, model, cfg.samples, rng, cfg.temperature);
      pred = std::move(sm.mean);
      var = std::move(sm.variance);
      try {
        m.log_likelihood = model.log_likelihood(x, pred);
      } catch (const NumericError&) {
        m.log_likelihood = -std::numeric_limits<double>::infinity();
      }
    } else {
      const auto g = predict_gradient(x, model, Tensor(model.output_shape()), cfg.gradient_steps,
                                      cfg.step_size);
      pred = g.y;
      m.log_likelihood = g.log_likelihood;
    }
    Tensor y_task = pre.denormalize(pred);
    if (kind == TaskKind::kBinarySeg) {
      const Tensor mask = discretize(y_task, OutputKind::kBinaryMask);
      const Tensor truth = slice_channels(s.y, 0, 1);
      m.iou = iou(mask, truth);
      m.pixel_accuracy = pixel_accuracy(mask, truth);
      if (cfg.discretize) y_task = mask;
    } else if (kind == TaskKind::kDenoise) {
      Tensor denoised = s.x;
      for (std::size_t j = 0; j < denoised.size(); ++j) denoised[j] -= y_task[j];
      m.psnr = psnr(s.clean, denoised, 255.0);
    } else {
      Tensor filled = s.x;
      const std::size_t b = y_task.height();
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < b; ++c)
          filled.at(s.block_row + r, s.block_col + c, 0) = y_task.at(r, c, 0);
      m.psnr = psnr(s.clean, filled, 255.0);
    }
    rep.examples.push_back(m);
    if (predictions) predictions->push_back(std::move(y_task));
    if (variances) variances->push_back(std::move(var));
  }
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.aggregate();
  return rep;
}

namespace {

Tensor stack(const std::vector<TaskSample>& samples, Tensor TaskSample::*field) {
  const Shape& s = (samples.front().*field).shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  std::vector<double> data;
  data.reserve(numel(shape));
  for (const auto& smp : samples) {
    const Tensor& t = smp.*field;
    if (t.shape() != s) throw ShapeError("stack: ragged samples");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

void unstack(const Tensor& t, std::vector<TaskSample>& samples, Tensor TaskSample::*field) {
  const std::size_t n = t.dim(0);
  Shape inner(t.shape().begin() + 1, t.shape().end());
  const std::size_t per = numel(inner);
  samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d(t.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                          t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    samples[i].*field = Tensor(inner, std::move(d));
  }
}

KeyValues spec_entries(const TaskSpec& s) {
  KeyValues kv;
  kv.set("task.kind", task_kind_name(s.kind));
  kv.set("task.size", std::to_string(s.size));
  kv.set("task.train_size", std::to_string(s.train_size));
  kv.set("task.test_size", std::to_string(s.test_size));
  kv.set("task.sigma", format_double(s.sigma));
  kv.set("task.mask_fraction", format_double(s.mask_fraction));
  kv.set("task.bins", std::to_string(s.bins));
  kv.set("task.seed", std::to_string(s.seed));
  kv.set("model.L", std::to_string(s.levels));
  return kv;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const TaskDataset& data) {
  std::filesystem::create_directories(dir);
  for (auto [name, split] : {std::pair{"train", &data.train}, std::pair{"test", &data.test}}) {
    const std::string n = name;
    save_tensor(dir / (n + "_x.cft"), stack(*split, &TaskSample::x));
    save_tensor(dir / (n + "_y.cft"), stack(*split, &TaskSample::y));
    save_tensor(dir / (n + "_clean.cft"), stack(*split, &TaskSample::clean));
  }
  KeyValues kv = spec_entries(data.spec);
  kv.set("content_hash", std::to_string(data.content_hash()));
  std::ofstream os(dir / "manifest.txt");
  os << "# cflow dataset manifest\n" << kv.serialize();
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
}

TaskDataset load_dataset(const std::filesystem::path& dir) {
  const KeyValues kv = KeyValues::load(dir / "manifest.txt");
  TaskDataset d;
  d.spec = task_spec_from_config(kv);
  for (auto [name, split] : {std::pair{"train", &d.train}, std::pair{"test", &d.test}}) {
    const std::string n = name;
    unstack(load_tensor(dir / (n + "_x.cft")), *split, &TaskSample::x);
    unstack(load_tensor(dir / (n + "_y.cft")), *split, &TaskSample::y);
    unstack(load_tensor(dir / (n + "_clean.cft")), *split, &TaskSample::clean);
  }
  if (d.spec.kind == TaskKind::kInpaint) {
    const std::size_t o = (d.spec.size - d.spec.block_side()) / 2;
    for (auto* split : {&d.train, &d.test})
      for (auto& s : *split) s.block_row = s.block_col = o;
  }
  const std::string want = kv.get("content_hash");
  if (std::to_string(d.content_hash()) != want) {
    throw FormatError("dataset in " + dir.string() + " does not match its manifest hash");
  }
  return d;
}

void write_pnm(const std::filesystem::path& path, const Tensor& image, double peak) {
  if (image.rank() != 3 || (image.channels() != 1 && image.channels() != 3)) {
    throw ShapeError("write_pnm: need h x w x 1 or h x w x 3, got " + shape_str(image.shape()));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << (image.channels() == 1 ? "P5" : "P6") << '\n'
     << image.width() << ' ' << image.height() << "\n255\n";
  for (double v : image.data()) {
    const double scaled = std::clamp(v / peak, 0.0, 1.0) * 255.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
  }
}

TaskSpec task_spec_from_config(const KeyValues& kv) {
  TaskSpec s;
  s.kind = parse_task_kind(kv.get("task.kind"));
  s.size = static_cast<std::size_t>(kv.get_int("task.size"));
  s.train_size = static_cast<std::size_t>(kv.get_int_or("task.train_size", 64));
  s.test_size = static_cast<std::size_t>(kv.get_int_or("task.test_size", 16));
  s.sigma = kv.get_double_or("task.sigma", 25.0);
  s.mask_fraction = kv.get_double_or("task.mask_fraction", 0.25);
  s.bins = static_cast<std::size_t>(kv.get_int_or("task.bins", 2));
  s.levels = static_cast<std::size_t>(kv.get_int_or("model.L", 1));
  s.seed = static_cast<std::uint64_t>(kv.get_int_or("task.seed", kv.get_int_or("train.seed", 0)));
  return s;
}

}  // namespace cflow
