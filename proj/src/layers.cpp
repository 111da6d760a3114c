#include "cflow/layers.hpp"

#include <cmath>
#include <numbers>

namespace cflow {

namespace {

void require_hwc(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + ": expected h x w x c, got " + shape_str(s));
}

void require_even_channels(const Shape& s, const char* what) {
  require_hwc(s, what);
  if (s[2] % 2) {
    throw ShapeError(std::string(what) + ": odd channel count " + std::to_string(s[2]));
  }
}

}  // namespace

LayerResult actnorm_forward(Var v, const ActnormWeights& w) {
  require_hwc(v.shape(), "actnorm_forward");
  const double pixels = static_cast<double>(v.shape()[0] * v.shape()[1]);
  Var u = add(mul(v, w.scale), w.bias);
  return {u, scale(sum(w.log_scale), pixels)};
}

Tensor actnorm_inverse(const Tensor& u, const Tensor& scale, const Tensor& bias) {
  const std::size_t c = u.shape().back();
  if (scale.size() != c || bias.size() != c) throw ShapeError("actnorm_inverse: width mismatch");
  for (double s : scale.data()) {
    if (!(s > 0.0)) throw NumericError("actnorm_inverse: non-positive scale");
  }
  Tensor v = u;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - bias[i % c]) / scale[i % c];
  return v;
}

LayerResult invconv_forward(Var v, Var w) {
  require_hwc(v.shape(), "invconv_forward");
  const Shape s = v.shape();
  if (w.shape() != Shape{s[2], s[2]}) {
    throw ShapeError("invconv_forward: weight " + shape_str(w.shape()) + " for " +
                     std::to_string(s[2]) + " channels");
  }
  // Rows are pixels, so u = v W^T applies W to every pixel vector.
  Var flat = reshape(v, {s[0] * s[1], s[2]});
  Var u = reshape(matmul(flat, transpose(w)), s);
  return {u, scale(logabsdet(w), static_cast<double>(s[0] * s[1]))};
}

Tensor invconv_inverse(const Tensor& u, const Tensor& w) {
  const Shape s = u.shape();
  const Tensor inv = mat_inverse(w);
  return matmul(u.reshaped({s[0] * s[1], s[2]}), transpose(inv)).reshaped(s);
}

LayerResult coupling_forward(Var v, Var x_r, const CNParams& nn, const ParameterStore& store) {
  require_even_channels(v.shape(), "coupling_forward");
  const std::size_t c = v.shape()[2], half = c / 2;
  Var v1 = slice_channels(v, 0, half);
  Var v2 = slice_channels(v, half, c);
  const CouplingOutput st = nn_coupling(v1, x_r, nn, store);
  Var u2 = add(mul(v2, st.scale), st.shift);
  return {concat_channels(v1, u2), sum(st.log_scale)};
}

Tensor coupling_inverse(const Tensor& u, const Tensor& x_r, const CNParams& nn,
                        const ParameterStore& store) {
  require_even_channels(u.shape(), "coupling_inverse");
  const std::size_t c = u.channels(), half = c / 2;
  Tape tape;
  const Tensor u1 = slice_channels(u, 0, half);
  const CouplingOutput st = nn_coupling(tape.constant(u1), tape.constant(x_r), nn, store);
  Tensor v2 = slice_channels(u, half, c);
  const Tensor& s2 = st.scale.value();
  const Tensor& b2 = st.shift.value();
  for (std::size_t i = 0; i < v2.size(); ++i) v2[i] = (v2[i] - b2[i]) / s2[i];
  return concat_channels(u1, v2);
}

std::pair<Var, Var> split_forward(Var v) {
  require_even_channels(v.shape(), "split_forward");
  const std::size_t c = v.shape()[2];
  return {slice_channels(v, 0, c / 2), slice_channels(v, c / 2, c)};
}

Tensor split_inverse(const Tensor& kept, const Tensor& z_part) {
  return concat_channels(kept, z_part);
}

Var standard_normal_logpdf(Var z) {
  const double d = static_cast<double>(z.value().size());
  return add_scalar(scale(sum_squares(z), -0.5), -0.5 * d * std::log(2.0 * std::numbers::pi));
}

double standard_normal_logpdf(const Tensor& z) {
  double ss = 0.0;
  for (double v : z.data()) ss += v * v;
  return -0.5 * ss - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

}  // namespace cflow
