#include "cflow/conditioning.hpp"

#include <cmath>

namespace cflow {

std::size_t ParameterStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const std::size_t i = params_.size();
  index_.emplace(name, i);
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return i;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

DownscaleSpec downscale_spec(std::size_t in_size, std::size_t out_size, std::size_t padding) {
  if (in_size == 0 || out_size == 0 || in_size % out_size != 0) {
    throw ShapeError("downscale_spec: " + std::to_string(out_size) + " does not divide " +
                     std::to_string(in_size));
  }
  DownscaleSpec s;
  s.in_size = in_size;
  s.out_size = out_size;
  s.padding = padding;
  s.stride = in_size / out_size;
  s.kernel = 2 * padding + s.stride;
  return s;
}

std::size_t cn_target_extent(std::size_t extent) {
  for (std::size_t t = std::min<std::size_t>(4, extent); t > 1; --t) {
    if (extent % t == 0) return t;
  }
  return 1;
}

std::size_t CNParams::output_width(const ParameterStore& store) const {
  return store[layers.back().weight].value.shape().back();
}

Var CNParams::run(Tape& tape, Var input, const ParameterStore& store) const {
  Var h = input;
  for (const auto& layer : layers) {
    Var w = tape.parameter(store[layer.weight]);
    Var b = tape.parameter(store[layer.bias]);
    if (layer.kind == CNLayerKind::kConv) {
      h = add(conv2d(h, w, layer.geometry), b);
    } else {
      if (h.value().rank() != 2 || h.value().dim(0) != 1) h = reshape(h, {1, h.value().size()});
      h = add(matmul(h, w), b);
    }
    if (layer.relu) h = relu(h);
  }
  return h;
}

namespace {

Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

struct LayerBuilder {
  ParameterStore& store;
  const std::string& prefix;
  Rng& rng;
  CNParams net;

  void conv(const std::string& name, std::size_t kh, std::size_t kw, std::size_t cin,
            std::size_t cout, Conv2dGeometry g, bool last) {
    Shape ws{kh, kw, cin, cout};
    Tensor w = last ? Tensor(ws) : kaiming_uniform(ws, kh * kw * cin, rng);
    CNLayer layer;
    layer.kind = CNLayerKind::kConv;
    layer.weight = store.add(prefix + "." + name + ".w", std::move(w));
    layer.bias = store.add(prefix + "." + name + ".b", Tensor({cout}));
    layer.geometry = g;
    layer.relu = !last;
    net.layers.push_back(layer);
  }

  void fc(const std::string& name, std::size_t in, std::size_t out, bool last) {
    Tensor w = last ? Tensor({in, out}) : kaiming_uniform({in, out}, in, rng);
    CNLayer layer;
    layer.kind = CNLayerKind::kFullyConnected;
    layer.weight = store.add(prefix + "." + name + ".w", std::move(w));
    layer.bias = store.add(prefix + "." + name + ".b", Tensor({out}));
    layer.relu = !last;
    net.layers.push_back(layer);
  }
};

void require_hwc_shape(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + ": expected h x w x c, got " + shape_str(s));
}

}  // namespace

CNParams make_weight_cn(ParameterStore& store, const std::string& prefix, const Shape& x_shape,
                        std::size_t out_width, const ArchitectureWidths& widths, Rng& rng) {
  require_hwc_shape(x_shape, "make_weight_cn");
  const std::size_t th = cn_target_extent(x_shape[0]);
  const std::size_t tw = cn_target_extent(x_shape[1]);
  const auto dh = downscale_spec(x_shape[0], th, 1);
  const auto dw = downscale_spec(x_shape[1], tw, 1);
  const std::size_t nc = widths.conv_channels, nw = widths.fc_width;
  LayerBuilder b{store, prefix, rng, {}};
  b.conv("rconv", dh.kernel, dw.kernel, x_shape[2], nc,
         {dh.stride, dw.stride, dh.padding, dw.padding}, false);
  b.conv("conv1", 3, 3, nc, nc, Conv2dGeometry::uniform(1, 1), false);
  b.conv("conv2", 3, 3, nc, nc, Conv2dGeometry::uniform(1, 1), false);
  b.fc("fc1", th * tw * nc, nw, false);
  b.fc("fc2", nw, nw, false);
  b.fc("out", nw, out_width, true);
  return b.net;
}

CNParams make_feature_cn(ParameterStore& store, const std::string& prefix, const Shape& x_shape,
                         std::size_t target_h, std::size_t target_w,
                         const ArchitectureWidths& widths, Rng& rng) {
  require_hwc_shape(x_shape, "make_feature_cn");
  const auto dh = downscale_spec(x_shape[0], target_h, 1);
  const auto dw = downscale_spec(x_shape[1], target_w, 1);
  const std::size_t f = widths.feature_channels;
  LayerBuilder b{store, prefix, rng, {}};
  b.conv("conv1", 3, 3, x_shape[2], f, Conv2dGeometry::uniform(1, 1), false);
  b.conv("rconv", dh.kernel, dw.kernel, f, f, {dh.stride, dw.stride, dh.padding, dw.padding},
         false);
  b.conv("out", 3, 3, f, f, Conv2dGeometry::uniform(1, 1), true);
  return b.net;
}

CNParams make_coupling_nn(ParameterStore& store, const std::string& prefix,
                          std::size_t in_channels, std::size_t half_channels,
                          const ArchitectureWidths& widths, Rng& rng) {
  const std::size_t hid = widths.coupling_hidden;
  LayerBuilder b{store, prefix, rng, {}};
  b.conv("conv1", 3, 3, in_channels, hid, Conv2dGeometry::uniform(1, 1), false);
  b.conv("conv2", 3, 3, hid, hid, Conv2dGeometry::uniform(1, 1), false);
  b.conv("out", 3, 3, hid, 2 * half_channels, Conv2dGeometry::uniform(1, 1), true);
  return b.net;
}

ActnormWeights ActnormWeights::from_scale(Var scale, Var bias) {
  return ActnormWeights{scale, log(scale), bias};
}

namespace {

void require_width(const CNParams& p, const ParameterStore& store, std::size_t want,
                   const char* what) {
  const std::size_t got = p.output_width(store);
  if (got != want) {
    throw ShapeError(std::string(what) + ": network width " + std::to_string(got) +
                     ", expected " + std::to_string(want));
  }
}

}  // namespace

ActnormWeights cn_actnorm(Tape& tape, const Tensor& x, const CNParams& p,
                          const ParameterStore& store, std::size_t c) {
  require_width(p, store, 2 * c, "cn_actnorm");
  Var raw = reshape(p.run(tape, tape.constant(x), store), {1, 1, 2 * c});
  Var log_s = reshape(slice_channels(raw, 0, c), {c});
  Var b = reshape(slice_channels(raw, c, 2 * c), {c});
  return ActnormWeights{exp(log_s), log_s, b};
}

ConvWeights cn_conv(Tape& tape, const Tensor& x, const CNParams& p, const ParameterStore& store,
                    std::size_t c) {
  require_width(p, store, c * c, "cn_conv");
  Var raw = reshape(p.run(tape, tape.constant(x), store), {c, c});
  return ConvWeights{add(raw, tape.constant(Tensor::identity(c)))};
}

Var cn_coupling_features(Tape& tape, const Tensor& x, const CNParams& p,
                         const ParameterStore& store) {
  return p.run(tape, tape.constant(x), store);
}

CouplingOutput nn_coupling(Var v1, Var x_r, const CNParams& p, const ParameterStore& store) {
  const Shape& a = v1.shape();
  const Shape& b = x_r.shape();
  if (a.size() != 3 || b.size() != 3 || a[0] != b[0] || a[1] != b[1]) {
    throw ShapeError("nn_coupling: spatial mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t half = a[2];
  require_width(p, store, 2 * half, "nn_coupling");
  Var raw = p.run(v1.tape(), concat_channels(v1, x_r), store);
  Var pre = add_scalar(slice_channels(raw, 0, half), kCouplingScaleOffset);
  return CouplingOutput{sigmoid(pre), log_sigmoid(pre), slice_channels(raw, half, 2 * half)};
}

}  // namespace cflow
