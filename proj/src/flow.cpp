#include "cflow/flow.hpp"

#include <cmath>
#include <sstream>

namespace cflow {

Preprocessor Preprocessor::dequantize(std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("dequantize: bins must be >= 2");
  Preprocessor p;
  p.kind = Kind::kDequantize;
  p.bins = bins;
  return p;
}

Preprocessor Preprocessor::affine(double scale, double shift) {
  if (!(scale > 0.0)) throw std::invalid_argument("affine preprocessing: scale must be > 0");
  Preprocessor p;
  p.kind = Kind::kAffine;
  p.scale = scale;
  p.shift = shift;
  return p;
}

double Preprocessor::logdet(std::size_t d) const {
  const double n = static_cast<double>(d);
  switch (kind) {
    case Kind::kIdentity: return 0.0;
    case Kind::kDequantize: return -n * std::log(static_cast<double>(bins));
    case Kind::kAffine: return n * std::log(scale);
  }
  return 0.0;
}

Tensor Preprocessor::normalize(const Tensor& y) const {
  Tensor out = y;
  switch (kind) {
    case Kind::kIdentity: break;
    case Kind::kDequantize:
      // Midpoint of each bin; training adds the uniform noise instead.
      for (auto& v : out.data()) v = (v + 0.5) / static_cast<double>(bins) - 0.5;
      break;
    case Kind::kAffine:
      for (auto& v : out.data()) v = (v - shift) * scale;
      break;
  }
  return out;
}

Tensor Preprocessor::denormalize(const Tensor& y_cont) const {
  Tensor out = y_cont;
  switch (kind) {
    case Kind::kIdentity: break;
    case Kind::kDequantize:
      for (auto& v : out.data()) v = (v + 0.5) * static_cast<double>(bins) - 0.5;
      break;
    case Kind::kAffine:
      for (auto& v : out.data()) v = v / scale + shift;
      break;
  }
  return out;
}

std::size_t LatentStack::element_count() const {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  return n;
}

double ConditionalFlow::log_likelihood(const Tensor& x, const Tensor& y_cont) const {
  Tape tape;
  return log_likelihood(tape, x, tape.constant(y_cont)).value().item();
}

FlowModel::FlowModel(ModelConfig config, Preprocessor pre, Rng& rng)
    : config_(std::move(config)), pre_(pre) {
  const Shape& ys = config_.y_shape;
  const Shape& xs = config_.x_shape;
  if (config_.levels < 1 || config_.steps < 1) {
    throw std::invalid_argument("FlowModel: levels and steps must be >= 1");
  }
  if (ys.size() != 3 || xs.size() != 3) {
    throw ShapeError("FlowModel: x and y must be h x w x c, got " + shape_str(xs) + " and " +
                     shape_str(ys));
  }
  const std::size_t factor = std::size_t{1} << config_.levels;
  if (ys[0] % factor || ys[1] % factor) {
    throw ShapeError("FlowModel: output " + shape_str(ys) + " not divisible by 2^L = " +
                     std::to_string(factor));
  }
  std::size_t h = ys[0], w = ys[1], c = ys[2];
  for (std::size_t l = 0; l < config_.levels; ++l) {
    h /= 2;
    w /= 2;
    c *= 4;
    if (xs[0] % h || xs[1] % w) {
      throw ShapeError("FlowModel: conditioning input " + shape_str(xs) +
                       " cannot be downscaled to level extent " + std::to_string(h) + "x" +
                       std::to_string(w));
    }
    for (std::size_t k = 0; k < config_.steps; ++k) {
      const std::string prefix = "l" + std::to_string(l) + ".k" + std::to_string(k);
      FlowStep st;
      st.level = l;
      st.step = k;
      st.channels = c;
      st.actnorm = make_weight_cn(params_, prefix + ".actnorm", xs, 2 * c, config_.widths, rng);
      st.conv = make_weight_cn(params_, prefix + ".invconv", xs, c * c, config_.widths, rng);
      st.features = make_feature_cn(params_, prefix + ".features", xs, h, w, config_.widths, rng);
      st.coupling = make_coupling_nn(params_, prefix + ".coupling",
                                     c / 2 + config_.widths.feature_channels, c / 2,
                                     config_.widths, rng);
      steps_.push_back(std::move(st));
    }
    if (l + 1 < config_.levels) c /= 2;
  }
}

const FlowStep& FlowModel::step(std::size_t level, std::size_t k) const {
  return steps_.at(level * config_.steps + k);
}

std::vector<Shape> FlowModel::latent_shapes() const {
  std::vector<Shape> shapes;
  std::size_t h = config_.y_shape[0], w = config_.y_shape[1], c = config_.y_shape[2];
  for (std::size_t l = 0; l < config_.levels; ++l) {
    h /= 2;
    w /= 2;
    c *= 4;
    if (l + 1 < config_.levels) {
      shapes.push_back({h, w, c / 2});
      c /= 2;
    }
  }
  shapes.push_back({h, w, c});
  return shapes;
}

double FlowModel::initial_logdet() const {
  double total = 0.0;
  const std::size_t pixels_y = config_.y_shape[0] * config_.y_shape[1];
  for (const auto& st : steps_) {
    const std::size_t level_pixels = pixels_y >> (2 * (st.level + 1));
    total += static_cast<double>(level_pixels * st.channels / 2) *
             -std::log1p(std::exp(-kCouplingScaleOffset));
  }
  return total;
}

namespace {

std::string where(const FlowStep& st, const char* layer) {
  std::ostringstream os;
  os << "level " << st.level << " step " << st.step << " " << layer;
  return os.str();
}

template <typename F>
LayerResult annotated(const FlowStep& st, const char* layer, F&& f) {
  LayerResult r;
  try {
    r = f();
  } catch (const SingularMatrixError& e) {
    throw SingularMatrixError(where(st, layer) + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where(st, layer) + ": " + e.what());
  }
  if (!r.out.value().all_finite() || !std::isfinite(r.logdet.value().item())) {
    throw NumericError(where(st, layer) + ": non-finite output");
  }
  return r;
}

}  // namespace

ForwardResult flow_forward(Tape& tape, Var y_cont, const Tensor& x, const FlowModel& model) {
  const ModelConfig& cfg = model.config();
  if (y_cont.shape() != cfg.y_shape) {
    throw ShapeError("flow_forward: y " + shape_str(y_cont.shape()) + ", model expects " +
                     shape_str(cfg.y_shape));
  }
  if (x.shape() != cfg.x_shape) {
    throw ShapeError("flow_forward: x " + shape_str(x.shape()) + ", model expects " +
                     shape_str(cfg.x_shape));
  }
  const ParameterStore& store = model.parameters();
  ForwardResult res;
  std::vector<Var> logdets;
  Var v = y_cont;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    v = squeeze2x2(v);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
      const FlowStep& st = model.step(l, k);
      const std::size_t c = st.channels;
      auto record = [&](const char* kind, const LayerResult& r) {
        res.layers.push_back({l, k, kind, r.logdet.value().item()});
        logdets.push_back(r.logdet);
        v = r.out;
      };
      record("actnorm", annotated(st, "actnorm", [&] {
               return actnorm_forward(v, cn_actnorm(tape, x, st.actnorm, store, c));
             }));
      record("invconv", annotated(st, "invconv", [&] {
               return invconv_forward(v, cn_conv(tape, x, st.conv, store, c).matrix);
             }));
      record("coupling", annotated(st, "coupling", [&] {
               return coupling_forward(v, cn_coupling_features(tape, x, st.features, store),
                                       st.coupling, store);
             }));
    }
    if (l + 1 < cfg.levels) {
      auto [kept, z] = split_forward(v);
      res.latents.push_back(z);
      v = kept;
    }
  }
  res.latents.push_back(v);
  Var total = logdets.front();
  for (std::size_t i = 1; i < logdets.size(); ++i) total = add(total, logdets[i]);
  res.total_logdet = total;
  return res;
}

LatentStack latent_values(const ForwardResult& r) {
  LatentStack s;
  for (const auto& z : r.latents) s.parts.push_back(z.value());
  return s;
}

Tensor flow_inverse(const LatentStack& z, const Tensor& x, const FlowModel& model) {
  const ModelConfig& cfg = model.config();
  const auto shapes = model.latent_shapes();
  if (z.parts.size() != shapes.size()) {
    throw ShapeError("flow_inverse: expected " + std::to_string(shapes.size()) +
                     " latent parts, got " + std::to_string(z.parts.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (z.parts[i].shape() != shapes[i]) {
      throw ShapeError("flow_inverse: latent part " + std::to_string(i) + " has shape " +
                       shape_str(z.parts[i].shape()) + ", expected " + shape_str(shapes[i]));
    }
  }
  const ParameterStore& store = model.parameters();
  Tensor v = z.parts.back();
  for (std::size_t l = cfg.levels; l-- > 0;) {
    if (l + 1 < cfg.levels) v = split_inverse(v, z.parts[l]);
    for (std::size_t k = cfg.steps; k-- > 0;) {
      const FlowStep& st = model.step(l, k);
      const std::size_t c = st.channels;
      Tape tape;
      try {
        v = coupling_inverse(v, cn_coupling_features(tape, x, st.features, store).value(),
                             st.coupling, store);
        v = invconv_inverse(v, cn_conv(tape, x, st.conv, store, c).matrix.value());
        const ActnormWeights an = cn_actnorm(tape, x, st.actnorm, store, c);
        v = actnorm_inverse(v, an.scale.value(), an.bias.value());
      } catch (const SingularMatrixError& e) {
        throw SingularMatrixError(where(st, "inverse") + ": " + e.what());
      } catch (const NumericError& e) {
        throw NumericError(where(st, "inverse") + ": " + e.what());
      }
      if (!v.all_finite()) throw NumericError(where(st, "inverse") + ": non-finite output");
    }
    v = unsqueeze2x2(v);
  }
  return v;
}

Var FlowModel::log_likelihood(Tape& tape, const Tensor& x, Var y_cont) const {
  const ForwardResult r = flow_forward(tape, y_cont, x, *this);
  Var total = r.total_logdet;
  for (const auto& z : r.latents) total = add(total, standard_normal_logpdf(z));
  total = add_scalar(total, pre_.logdet(y_cont.value().size()));
  if (!std::isfinite(total.value().item())) throw NumericError("log_likelihood: non-finite value");
  return total;
}

Tensor FlowModel::inverse(const LatentStack& z, const Tensor& x) const {
  return flow_inverse(z, x, *this);
}

bool is_output_layer(const std::string& name) {
  return name.find(".out.") != std::string::npos;
}

void randomize_output_layers(FlowModel& model, Rng& rng, double magnitude) {
  for (auto& p : model.parameters()) {
    if (!is_output_layer(p.name)) continue;
    const Shape& s = p.value.shape();
    const double fan_in = s.size() == 1 ? 1.0 : static_cast<double>(p.value.size() / s.back());
    double a = magnitude / std::sqrt(fan_in);
    // A c x c perturbation of iid entries has operator norm ~ sqrt(c) times
    // the entry size; divide it out so W = I + M stays well conditioned.
    if (p.name.find(".invconv.out.") != std::string::npos) {
      a /= std::sqrt(std::sqrt(static_cast<double>(s.back())));
    }
    for (auto& v : p.value.data()) v = rng.uniform(-a, a);
  }
}

}  // namespace cflow
