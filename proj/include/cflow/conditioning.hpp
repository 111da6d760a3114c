#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "cflow/autodiff.hpp"
#include "cflow/rng.hpp"

namespace cflow {

// Owns every named parameter of a model. Indices are stable handles, so a
// copied store (and whatever indexes into it) stays self-consistent.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;

  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Conv geometry mapping an input extent H_i to H_o: stride H_i / H_o,
// kernel 2 * padding + stride.
struct DownscaleSpec {
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  std::size_t stride = 1;
  std::size_t kernel = 1;
  std::size_t padding = 0;
};

DownscaleSpec downscale_spec(std::size_t in_size, std::size_t out_size, std::size_t padding);

enum class CNLayerKind { kConv, kFullyConnected };

struct CNLayer {
  CNLayerKind kind = CNLayerKind::kConv;
  std::size_t weight = 0;  // index into the ParameterStore
  std::size_t bias = 0;
  Conv2dGeometry geometry;
  bool relu = true;
};

// A feed-forward conditioning network. ReLU after every layer but the last;
// the last layer starts at zero.
struct CNParams {
  std::vector<CNLayer> layers;

  std::size_t output_width(const ParameterStore& store) const;
  Var run(Tape& tape, Var input, const ParameterStore& store) const;
};

struct ArchitectureWidths {
  std::size_t conv_channels = 64;     // n_c
  std::size_t fc_width = 128;         // n_w
  std::size_t coupling_hidden = 256;  // channels of the coupling network
  std::size_t feature_channels = 16;  // channels of x_r
};

// Spatial size the actnorm / 1x1-conv CNs reduce x to before the FC stack.
std::size_t cn_target_extent(std::size_t extent);

// Six layers: three convolutions (the first downscales x to at most 4x4),
// three fully connected. Final width is out_width.
CNParams make_weight_cn(ParameterStore& store, const std::string& prefix, const Shape& x_shape,
                        std::size_t out_width, const ArchitectureWidths& widths, Rng& rng);
// Three convolutions: 3x3, downscale to (target_h, target_w), 3x3.
CNParams make_feature_cn(ParameterStore& store, const std::string& prefix, const Shape& x_shape,
                         std::size_t target_h, std::size_t target_w,
                         const ArchitectureWidths& widths, Rng& rng);
// Three 3x3 convolutions producing 2 * half_channels outputs.
CNParams make_coupling_nn(ParameterStore& store, const std::string& prefix,
                          std::size_t in_channels, std::size_t half_channels,
                          const ArchitectureWidths& widths, Rng& rng);

struct ActnormWeights {
  Var scale;      // s > 0, shape [c]
  Var log_scale;  // log s
  Var bias;       // shape [c]

  // Wraps an explicit scale; throws NumericError if any entry is <= 0.
  static ActnormWeights from_scale(Var scale, Var bias);
};

struct ConvWeights {
  Var matrix;  // c x c
};

struct CouplingOutput {
  Var scale;      // s2 in (0, 1)
  Var log_scale;  // log s2
  Var shift;      // b2
};

// s = exp(raw[0:c]), b = raw[c:2c].
ActnormWeights cn_actnorm(Tape& tape, const Tensor& x, const CNParams& p,
                          const ParameterStore& store, std::size_t c);
// W = I + reshape(raw, c x c).
ConvWeights cn_conv(Tape& tape, const Tensor& x, const CNParams& p, const ParameterStore& store,
                    std::size_t c);
Var cn_coupling_features(Tape& tape, const Tensor& x, const CNParams& p,
                         const ParameterStore& store);
// s2 = sigmoid(raw[0:c/2] + 2), b2 = raw[c/2:c].
CouplingOutput nn_coupling(Var v1, Var x_r, const CNParams& p, const ParameterStore& store);

inline constexpr double kCouplingScaleOffset = 2.0;

}  // namespace cflow
