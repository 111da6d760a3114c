#pragma once

#include "cflow/tensor.hpp"

namespace cflow {

class SingularMatrixError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Pivots with magnitude below this are treated as exact singularity.
inline constexpr double kPivotThreshold = 1e-12;

struct Slogdet {
  int sign = 1;
  double logabsdet = 0.0;
};

// LU with partial pivoting. Throws SingularMatrixError on a vanishing pivot.
Slogdet slogdet_lu(const Tensor& w);
Tensor mat_inverse(const Tensor& w);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Geometry of a 2-d cross-correlation over h x w x c tensors.
struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;

  static Conv2dGeometry uniform(std::size_t stride, std::size_t padding) {
    return {stride, stride, padding, padding};
  }
};

// input: h x w x c_in, kernel: k_h x k_w x c_in x c_out. No kernel flip.
Shape conv2d_output_shape(const Shape& input, const Shape& kernel, const Conv2dGeometry& g);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dGeometry& g);
void conv2d_backward(const Tensor& input, const Tensor& kernel, const Conv2dGeometry& g,
                     const Tensor& grad_out, Tensor* grad_input, Tensor* grad_kernel);

}  // namespace cflow
