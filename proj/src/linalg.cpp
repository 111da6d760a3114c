#include "cflow/linalg.hpp"

#include <cmath>
#include <utility>

namespace cflow {

namespace {

void require_square(const Tensor& w, const char* what) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
    throw ShapeError(std::string(what) + ": expected square matrix, got " + shape_str(w.shape()));
  }
}

// In-place LU of an n x n row-major matrix. perm[i] is the source row of row i.
int lu_decompose(std::vector<double>& a, std::size_t n, std::vector<std::size_t>& perm) {
  perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  int sign = 1;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(a[k * n + k]);
    for (std::size_t r = k + 1; r < n; ++r) {
      const double v = std::abs(a[r * n + k]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best >= kPivotThreshold)) {
      throw SingularMatrixError("matrix is singular: pivot " + std::to_string(best) +
                                " at column " + std::to_string(k));
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[piv * n + j]);
      std::swap(perm[k], perm[piv]);
      sign = -sign;
    }
    const double d = a[k * n + k];
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a[r * n + k] / d;
      a[r * n + k] = f;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) a[r * n + j] -= f * a[k * n + j];
    }
  }
  return sign;
}

}  // namespace

Slogdet slogdet_lu(const Tensor& w) {
  require_square(w, "slogdet_lu");
  const std::size_t n = w.dim(0);
  std::vector<double> a = w.vec();
  std::vector<std::size_t> perm;
  Slogdet out;
  out.sign = lu_decompose(a, n, perm);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i * n + i];
    if (d < 0) out.sign = -out.sign;
    out.logabsdet += std::log(std::abs(d));
  }
  return out;
}

Tensor mat_inverse(const Tensor& w) {
  require_square(w, "mat_inverse");
  const std::size_t n = w.dim(0);
  std::vector<double> a = w.vec();
  std::vector<std::size_t> perm;
  lu_decompose(a, n, perm);
  Tensor inv({n, n});
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    // Solve L U x = P e_j.
    for (std::size_t i = 0; i < n; ++i) col[i] = perm[i] == j ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = col[i];
      for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * col[k];
      col[i] = s;
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = col[i];
      for (std::size_t k = i + 1; k < n; ++k) s -= a[i * n + k] * col[k];
      col[i] = s / a[i * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) inv.at(i, j) = col[i];
  }
  return inv;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected matrix, got " + shape_str(a.shape()));
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Shape conv2d_output_shape(const Shape& input, const Shape& kernel, const Conv2dGeometry& g) {
  if (input.size() != 3 || kernel.size() != 4 || kernel[2] != input[2]) {
    throw ShapeError("conv2d: input " + shape_str(input) + " incompatible with kernel " +
                     shape_str(kernel));
  }
  if (g.stride_h == 0 || g.stride_w == 0) throw ShapeError("conv2d: stride must be positive");
  const auto out_dim = [](std::size_t in, std::size_t k, std::size_t s, std::size_t p) -> long {
    const long span = static_cast<long>(in + 2 * p) - static_cast<long>(k);
    if (span < 0) return 0;
    return span / static_cast<long>(s) + 1;
  };
  const long oh = out_dim(input[0], kernel[0], g.stride_h, g.pad_h);
  const long ow = out_dim(input[1], kernel[1], g.stride_w, g.pad_w);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: nonpositive output dims for input " + shape_str(input) +
                     " kernel " + shape_str(kernel));
  }
  return {static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kernel[3]};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dGeometry& g) {
  const Shape os = conv2d_output_shape(input.shape(), kernel.shape(), g);
  Tensor out(os);
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  double* o = out.data().data();
  for (std::size_t oy = 0; oy < os[0]; ++oy) {
    for (std::size_t ox = 0; ox < os[1]; ++ox) {
      double* orow = o + (oy * os[1] + ox) * cout;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride_h + ky) - static_cast<long>(g.pad_h);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride_w + kx) - static_cast<long>(g.pad_w);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* irow = in + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const double* kbase = ker + (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double v = irow[ci];
            if (v == 0.0) continue;
            const double* krow = kbase + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) orow[co] += v * krow[co];
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernel, const Conv2dGeometry& g,
                     const Tensor& grad_out, Tensor* grad_input, Tensor* grad_kernel) {
  const Shape os = conv2d_output_shape(input.shape(), kernel.shape(), g);
  if (grad_out.shape() != os) throw ShapeError("conv2d_backward: grad shape mismatch");
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  const double* go = grad_out.data().data();
  double* gi = grad_input ? grad_input->data().data() : nullptr;
  double* gk = grad_kernel ? grad_kernel->data().data() : nullptr;
  for (std::size_t oy = 0; oy < os[0]; ++oy) {
    for (std::size_t ox = 0; ox < os[1]; ++ox) {
      const double* grow = go + (oy * os[1] + ox) * cout;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride_h + ky) - static_cast<long>(g.pad_h);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride_w + kx) - static_cast<long>(g.pad_w);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const std::size_t ioff =
              (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const std::size_t koff = (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* krow = ker + koff + ci * cout;
            if (gi) {
              double acc = 0.0;
              for (std::size_t co = 0; co < cout; ++co) acc += krow[co] * grow[co];
              gi[ioff + ci] += acc;
            }
            if (gk) {
              const double v = in[ioff + ci];
              if (v == 0.0) continue;
              double* gkrow = gk + koff + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) gkrow[co] += v * grow[co];
            }
          }
        }
      }
    }
  }
}

}  // namespace cflow
