// cflow: generate task data, train, predict, sample, evaluate and self-check.
//
// Exit codes: 0 ok, 1 usage or I/O error, 2 config error, 3 numeric failure,
// 4 check-suite failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cflow/checkpoint.hpp"
#include "cflow/config.hpp"
#include "cflow/tasks.hpp"
#include "cflow/tensor_io.hpp"
#include "cflow/verify.hpp"

namespace fs = std::filesystem;
using namespace cflow;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheck = 4;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

KeyValues load_config(const Common& c) {
  KeyValues kv = c.config_path.empty() ? KeyValues{} : KeyValues::load(c.config_path);
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override must look like key=value, got '" + o + "'");
    }
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  return kv;
}

std::size_t get_size(const KeyValues& kv, const std::string& key) {
  const long long v = kv.get_int(key);
  if (v < 0) throw ConfigError(key + " must be non-negative, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

std::size_t get_size_or(const KeyValues& kv, const std::string& key, long long fallback) {
  return kv.has(key) ? get_size(kv, key) : static_cast<std::size_t>(fallback);
}

fs::path outdir(const KeyValues& kv) { return kv.get("io.outdir"); }

// The dataset is a pure function of the task keys. An existing copy on disk
// must agree with them.
TaskDataset task_data(const KeyValues& kv) {
  const TaskSpec spec = task_spec_from_config(kv);
  spec.validate();
  TaskDataset data = generate_dataset(spec);
  const fs::path dir = outdir(kv) / "data";
  if (fs::exists(dir / "manifest.txt")) {
    if (load_dataset(dir).content_hash() != data.content_hash()) {
      throw ConfigError("dataset in " + dir.string() +
                        " was generated from different task.* keys; remove it or change io.outdir");
    }
  } else {
    fs::create_directories(dir);
    save_dataset(dir, data);
  }
  return data;
}

ModelConfig model_config(const KeyValues& kv, const TaskSpec& spec) {
  ModelConfig c;
  c.levels = get_size(kv, "model.L");
  c.steps = get_size(kv, "model.K");
  c.widths.conv_channels = get_size(kv, "model.n_c");
  c.widths.fc_width = get_size(kv, "model.n_w");
  c.widths.coupling_hidden = get_size_or(kv, "model.hidden", c.widths.coupling_hidden);
  c.widths.feature_channels = get_size_or(kv, "model.features", c.widths.feature_channels);
  c.x_shape = task_x_shape(spec);
  c.y_shape = task_y_shape(spec);
  return c;
}

TrainConfig train_config(const KeyValues& kv) {
  TrainConfig t;
  t.learning_rate = kv.get_double_or("train.lr", t.learning_rate);
  t.beta1 = kv.get_double_or("train.beta1", t.beta1);
  t.beta2 = kv.get_double_or("train.beta2", t.beta2);
  t.epsilon = kv.get_double_or("train.epsilon", t.epsilon);
  t.batch_size = get_size_or(kv, "train.batch", static_cast<long long>(t.batch_size));
  t.iterations = get_size(kv, "train.iters");
  t.seed = static_cast<std::uint64_t>(kv.get_int("train.seed"));
  t.checkpoint_interval = get_size_or(kv, "train.checkpoint_interval", 0);
  t.outdir = outdir(kv);
  t.validate();
  return t;
}

PredictionConfig prediction_config(const KeyValues& kv) {
  PredictionConfig p;
  const std::string mode = kv.get_or("predict.mode", "sample-mean");
  if (mode == "sample-mean") {
    p.mode = PredictMode::kSampleMean;
  } else if (mode == "gradient") {
    p.mode = PredictMode::kGradient;
  } else {
    throw ConfigError("predict.mode must be sample-mean or gradient, got '" + mode + "'");
  }
  p.samples = get_size_or(kv, "predict.M", static_cast<long long>(p.samples));
  p.temperature = kv.get_double_or("predict.temperature", p.temperature);
  p.gradient_steps = get_size_or(kv, "predict.steps", static_cast<long long>(p.gradient_steps));
  p.step_size = kv.get_double_or("predict.step_size", p.step_size);
  p.validate();
  return p;
}

std::uint64_t predict_seed(const KeyValues& kv) {
  return static_cast<std::uint64_t>(kv.get_int_or("predict.seed", kv.get_int_or("train.seed", 0)));
}

fs::path checkpoint_path(const KeyValues& kv) { return outdir(kv) / "checkpoint.cfck"; }

FlowModel trained_model(const KeyValues& kv) {
  const fs::path p = checkpoint_path(kv);
  if (!fs::exists(p)) throw std::runtime_error("no checkpoint at " + p.string() + "; run train first");
  return load_checkpoint(p).model;
}

std::vector<CurvePoint> read_curve(const fs::path& path, std::uint64_t up_to) {
  std::vector<CurvePoint> out;
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    CurvePoint p{};
    if (std::sscanf(line.c_str(), "%lu,%lf", &p.iteration, &p.nll_nats_per_dim) == 2 &&
        p.iteration <= up_to) {
      out.push_back(p);
    }
  }
  return out;
}

std::string image_name(const char* stem, std::size_t i, std::size_t channels) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.%s", stem, i, channels == 3 ? "ppm" : "pgm");
  return buf;
}

// Viewable form of a task-unit output: the mask, the denoised image or the
// filled-in block.
Tensor viewable(const TaskSample& s, const Tensor& y_task, TaskKind kind) {
  if (kind == TaskKind::kBinarySeg) return discretize(y_task, OutputKind::kBinaryMask);
  if (kind == TaskKind::kInpaint) return y_task;
  Tensor out = s.x;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] -= y_task[j];
  return out;
}

int cmd_gen(const Common& c) {
  const KeyValues kv = load_config(c);
  const TaskDataset data = task_data(kv);
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size()
            << " test examples to " << (outdir(kv) / "data").string() << " (hash "
            << data.content_hash() << ")\n";
  return 0;
}

int cmd_train(const Common& c, bool resume, bool quiet) {
  const KeyValues kv = load_config(c);
  const TrainConfig tc = train_config(kv);
  const TaskDataset data = task_data(kv);
  const fs::path ckpt = checkpoint_path(kv);

  Rng model_rng(tc.seed);
  TrainState state(FlowModel(model_config(kv, data.spec), task_preprocessor(data.spec), model_rng),
                   tc.seed + 1);
  std::vector<CurvePoint> curve;
  if (resume && fs::exists(ckpt)) {
    TrainState loaded = load_checkpoint(ckpt);
    if (describe_model(loaded.model).serialize() != describe_model(state.model).serialize()) {
      throw ConfigError("checkpoint " + ckpt.string() + " does not match the model.* keys");
    }
    state = std::move(loaded);
    curve = read_curve(outdir(kv) / "curve.csv", state.iteration);
  }

  std::ofstream(outdir(kv) / "config.txt") << kv.serialize();
  const std::vector<Example> examples = to_examples(data.train, data.spec.kind);
  const std::size_t remaining =
      tc.iterations > state.iteration ? tc.iterations - state.iteration : 0;
  const auto report = [&](const CurvePoint& p) {
    if (!quiet && (p.iteration % 50 == 0 || p.iteration == tc.iterations)) {
      std::cout << "iter " << p.iteration << "  nll " << p.nll_nats_per_dim << " nats/dim\n";
    }
  };
  const auto run = train_loop(state, examples, tc, remaining, report);
  curve.insert(curve.end(), run.begin(), run.end());
  save_checkpoint(ckpt, state);
  write_curve_csv(outdir(kv) / "curve.csv", curve);
  std::cout << "trained to iteration " << state.iteration << ", checkpoint " << ckpt.string()
            << '\n';
  return 0;
}

int cmd_predict(const Common& c, bool write_outputs) {
  const KeyValues kv = load_config(c);
  const PredictionConfig pc = prediction_config(kv);
  const TaskDataset data = task_data(kv);
  const FlowModel model = trained_model(kv);
  Rng rng(predict_seed(kv));
  std::vector<Tensor> preds, vars;
  MetricReport rep = evaluate_task(data, model, pc, rng, &preds, &vars);
  const fs::path dir = outdir(kv);
  rep.write_csv(dir / "metrics.csv");
  rep.write_jsonl(dir / "metrics.jsonl");
  if (write_outputs && !preds.empty()) {
    save_tensor(dir / "predictions.cft", stack(preds));
    save_tensor(dir / "variance.cft", stack(vars));
    const double peak = data.spec.kind == TaskKind::kBinarySeg ? 1.0 : 255.0;
    for (std::size_t i = 0; i < preds.size() && i < 8; ++i) {
      const Tensor img = viewable(data.test[i], preds[i], data.spec.kind);
      write_pnm(dir / image_name("pred", i, img.channels()), img, peak);
    }
  }
  std::cout << rep.task << ' ' << rep.mode << " on " << rep.examples.size() << " test examples";
  if (data.spec.kind == TaskKind::kBinarySeg) {
    std::cout << ": mean IOU " << rep.mean_iou << ", pixel accuracy " << rep.mean_pixel_accuracy;
  } else {
    std::cout << ": mean PSNR " << rep.mean_psnr << " dB";
  }
  std::cout << " (" << rep.wall_seconds << " s)\n";
  return 0;
}

int cmd_sample(const Common& c, std::size_t index, std::size_t count) {
  const KeyValues kv = load_config(c);
  const TaskDataset data = task_data(kv);
  if (index >= data.test.size()) {
    throw ConfigError("--index " + std::to_string(index) + " is past the " +
                      std::to_string(data.test.size()) + " test examples");
  }
  const FlowModel model = trained_model(kv);
  const double temperature = kv.get_double_or("predict.temperature", 1.0);
  if (!(temperature >= 0.0)) throw ConfigError("predict.temperature must be >= 0");
  Rng rng(predict_seed(kv));
  const TaskSample& s = data.test[index];
  const Tensor x = model_input(s, data.spec.kind);
  const double peak = data.spec.kind == TaskKind::kBinarySeg ? 1.0 : 255.0;
  const fs::path dir = outdir(kv);
  std::vector<Tensor> draws;
  for (std::size_t i = 0; i < count; ++i) {
    draws.push_back(sample(x, model, rng, temperature));
    const Tensor img = viewable(s, draws.back(), data.spec.kind);
    write_pnm(dir / image_name("sample", i, img.channels()), img, peak);
  }
  save_tensor(dir / "samples.cft", stack(draws));
  std::cout << "wrote " << count << " samples for test example " << index << " to "
            << dir.string() << '\n';
  return 0;
}

int cmd_check(std::uint64_t seed) {
  CheckOptions o;
  o.seed = seed;
  const auto rows = run_checks(o);
  print_check_table(std::cout, rows);
  for (const auto& r : rows) {
    if (!r.pass) return kExitCheck;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cflow: conditional normalizing flows for structured prediction"};
  app.require_subcommand(1);
  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "key = value config file")
        ->check(CLI::ExistingFile);
    sub->add_option("-s,--set", common.overrides, "override a config key, key=value");
  };

  auto* gen = app.add_subcommand("gen", "generate the task dataset into io.outdir/data");
  add_common(gen);

  bool resume = false, quiet = false;
  auto* train = app.add_subcommand("train", "train a model, writing checkpoint and curve.csv");
  add_common(train);
  train->add_flag("--resume", resume, "continue from io.outdir/checkpoint.cfck");
  train->add_flag("-q,--quiet", quiet, "no per-iteration progress");

  std::string mode;
  std::size_t samples = 0;
  const auto add_predict = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--mode", mode, "sample-mean or gradient (predict.mode)");
    sub->add_option("--M", samples, "number of draws (predict.M)");
  };
  auto* predict =
      app.add_subcommand("predict", "predict the test split, writing outputs and metrics");
  add_predict(predict);
  auto* eval = app.add_subcommand("eval", "score the test split, writing metrics only");
  add_predict(eval);

  std::size_t index = 0, count = 8;
  auto* samp = app.add_subcommand("sample", "draw outputs for one test example");
  add_common(samp);
  samp->add_option("--index", index, "test example index");
  samp->add_option("--count", count, "number of draws")->check(CLI::PositiveNumber);

  std::uint64_t check_seed = 1;
  auto* check = app.add_subcommand("check", "run the invariant suite at tiny sizes");
  check->add_option("--seed", check_seed, "seed for the random models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (!mode.empty()) common.overrides.push_back("predict.mode=" + mode);
  if (samples != 0) common.overrides.push_back("predict.M=" + std::to_string(samples));

  try {
    if (*gen) return cmd_gen(common);
    if (*train) return cmd_train(common, resume, quiet);
    if (*predict) return cmd_predict(common, true);
    if (*eval) return cmd_predict(common, false);
    if (*samp) return cmd_sample(common, index, count);
    if (*check) return cmd_check(check_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
