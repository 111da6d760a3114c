#pragma once

#include <utility>

#include "cflow/autodiff.hpp"
#include "cflow/conditioning.hpp"

namespace cflow {

// Output of one invertible layer and its log|det Jacobian| as a scalar node.
struct LayerResult {
  Var out;
  Var logdet;
};

// u_ij = s * v_ij + b; logdet = h * w * sum(log s).
LayerResult actnorm_forward(Var v, const ActnormWeights& w);
Tensor actnorm_inverse(const Tensor& u, const Tensor& scale, const Tensor& bias);

// u_ij = W v_ij; logdet = h * w * log|det W|.
LayerResult invconv_forward(Var v, Var w);
Tensor invconv_inverse(const Tensor& u, const Tensor& w);

// v1, v2 = split(v); s2, b2 = NN(v1, x_r); u = concat(v1, s2 * v2 + b2).
LayerResult coupling_forward(Var v, Var x_r, const CNParams& nn, const ParameterStore& store);
Tensor coupling_inverse(const Tensor& u, const Tensor& x_r, const CNParams& nn,
                        const ParameterStore& store);

// First channel half is kept, second half leaves as a latent.
std::pair<Var, Var> split_forward(Var v);
Tensor split_inverse(const Tensor& kept, const Tensor& z_part);

// Sum of standard-normal log densities over all entries.
Var standard_normal_logpdf(Var z);
double standard_normal_logpdf(const Tensor& z);

}  // namespace cflow
