#include "cflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace cflow {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no tensors");
  const Shape& s = parts.front().shape();
  Shape shape{parts.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  std::vector<double> data;
  data.reserve(numel(shape));
  for (const auto& t : parts) {
    if (t.shape() != s) throw ShapeError("stack: " + shape_str(t.shape()) + " vs " + shape_str(s));
    data.insert(data.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

double sum(const Tensor& t) { return std::accumulate(t.vec().begin(), t.vec().end(), 0.0); }

static void require_hwc(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected h x w x c tensor, got " +
                     shape_str(t.shape()));
  }
}

Tensor slice_channels(const Tensor& t, std::size_t begin, std::size_t end) {
  require_hwc(t, "slice_channels");
  const std::size_t c = t.channels();
  if (begin >= end || end > c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of " + std::to_string(c) + " channels");
  }
  const std::size_t n = end - begin;
  const std::size_t pixels = t.height() * t.width();
  Tensor out({t.height(), t.width(), n});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(p * c + begin), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(p * n));
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_hwc(a, "concat_channels");
  require_hwc(b, "concat_channels");
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t ca = a.channels(), cb = b.channels(), c = ca + cb;
  const std::size_t pixels = a.height() * a.width();
  Tensor out({a.height(), a.width(), c});
  auto dst = out.data().begin();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(p * ca), ca,
                dst + static_cast<std::ptrdiff_t>(p * c));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(p * cb), cb,
                dst + static_cast<std::ptrdiff_t>(p * c + ca));
  }
  return out;
}

Tensor squeeze2x2(const Tensor& t) {
  require_hwc(t, "squeeze");
  const std::size_t h = t.height(), w = t.width(), c = t.channels();
  if (h % 2 || w % 2) throw ShapeError("squeeze: odd spatial dims " + shape_str(t.shape()));
  Tensor out({h / 2, w / 2, 4 * c});
  for (std::size_t i = 0; i < h / 2; ++i)
    for (std::size_t j = 0; j < w / 2; ++j)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            out.at(i, j, ci * 4 + dy * 2 + dx) = t.at(2 * i + dy, 2 * j + dx, ci);
  return out;
}

Tensor unsqueeze2x2(const Tensor& t) {
  require_hwc(t, "unsqueeze");
  const std::size_t h = t.height(), w = t.width(), c4 = t.channels();
  if (c4 % 4) throw ShapeError("unsqueeze: channels not divisible by 4 " + shape_str(t.shape()));
  const std::size_t c = c4 / 4;
  Tensor out({h * 2, w * 2, c});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            out.at(2 * i + dy, 2 * j + dx, ci) = t.at(i, j, ci * 4 + dy * 2 + dx);
  return out;
}

}  // namespace cflow
