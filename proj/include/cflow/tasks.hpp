#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cflow/config.hpp"
#include "cflow/flow.hpp"
#include "cflow/inference.hpp"
#include "cflow/training.hpp"

namespace cflow {

enum class TaskKind { kBinarySeg, kDenoise, kInpaint };

TaskKind parse_task_kind(const std::string& s);
const char* task_kind_name(TaskKind k);

struct TaskSpec {
  TaskKind kind = TaskKind::kBinarySeg;
  std::size_t size = 8;  // square images, size x size
  std::size_t train_size = 64;
  std::size_t test_size = 16;
  double sigma = 25.0;          // denoise noise std on the 0-255 scale
  double mask_fraction = 0.25;  // inpaint: hidden central area / image area
  std::size_t bins = 2;
  std::size_t levels = 1;  // L, for divisibility checks
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t block_side() const;  // inpaint block edge
};

// One generated pair plus whatever the metrics need.
struct TaskSample {
  Tensor x;      // task input (0-1 for binary-seg, 0-255 otherwise)
  Tensor y;      // task target
  Tensor clean;  // denoise: clean image; inpaint: full original image
  std::size_t block_row = 0, block_col = 0;  // inpaint block origin
};

struct TaskDataset {
  TaskSpec spec;
  std::vector<TaskSample> train;
  std::vector<TaskSample> test;

  std::uint64_t content_hash() const;
};

std::vector<TaskSample> gen_binary_seg(const TaskSpec& spec, std::size_t count, Rng& rng);
std::vector<TaskSample> gen_denoise(const TaskSpec& spec, std::size_t count, Rng& rng);
std::vector<TaskSample> gen_inpaint(const TaskSpec& spec, std::size_t count, Rng& rng);
// Pure function of the spec (including its seed).
TaskDataset generate_dataset(const TaskSpec& spec);

// Flow-side view of a task: model input scaling, preprocessing, shapes.
Preprocessor task_preprocessor(const TaskSpec& spec);
Tensor model_input(const TaskSample& s, TaskKind kind);
Shape task_x_shape(const TaskSpec& spec);
Shape task_y_shape(const TaskSpec& spec);
OutputKind task_output_kind(TaskKind kind);
std::vector<Example> to_examples(const std::vector<TaskSample>& samples, TaskKind kind);

// Metrics. IOU of two empty masks is 1. PSNR of identical inputs is +inf.
double iou(const Tensor& pred_mask, const Tensor& true_mask);
double psnr(const Tensor& a, const Tensor& b, double peak = 255.0);
double pixel_accuracy(const Tensor& pred, const Tensor& truth);

struct ExampleMetrics {
  std::size_t index;
  double iou = 0.0;
  double psnr = 0.0;
  double pixel_accuracy = 0.0;
  double log_likelihood = 0.0;
};

struct MetricReport {
  std::string task;
  std::string mode;
  std::size_t samples = 0;  // M
  double wall_seconds = 0.0;
  std::vector<ExampleMetrics> examples;
  double mean_iou = 0.0;
  double mean_psnr = 0.0;
  double mean_pixel_accuracy = 0.0;

  void aggregate();
  void write_csv(const std::filesystem::path& path) const;
  void write_jsonl(const std::filesystem::path& path) const;
};

// Predicts every test example and scores it against the task's ground truth.
// predictions receives the task-unit outputs and variances the flow-space
// sample variance (zeros in gradient mode) when non-null.
MetricReport evaluate_task(const TaskDataset& data, const FlowModel& model,
                           const PredictionConfig& cfg, Rng& rng,
                           std::vector<Tensor>* predictions = nullptr,
                           std::vector<Tensor>* variances = nullptr);

// Dataset files: {split}_x.cft / {split}_y.cft / {split}_clean.cft stacked on a
// leading axis, plus manifest.txt (spec keys and content hash).
void save_dataset(const std::filesystem::path& dir, const TaskDataset& data);
TaskDataset load_dataset(const std::filesystem::path& dir);

// Binary PGM (1 channel) or PPM (3 channels); values clamped to [0, peak].
void write_pnm(const std::filesystem::path& path, const Tensor& image, double peak);

TaskSpec task_spec_from_config(const KeyValues& kv);

}  // namespace cflow
