#include <gtest/gtest.h>

#include <cmath>

#include "cflow/conditioning.hpp"
#include "cflow/layers.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cflow;

namespace {

const Shape kX{8, 8, 1};

Parameter& param(ParameterStore& store, const std::string& name) {
  Parameter* p = store.find(name);
  if (!p) throw std::out_of_range(name);
  return *p;
}

}  // namespace

TEST(Downscale, Examples) {
  const auto a = downscale_spec(64, 16, 1);
  EXPECT_EQ(a.stride, 4u);
  EXPECT_EQ(a.kernel, 6u);
  const auto b = downscale_spec(8, 8, 1);
  EXPECT_EQ(b.stride, 1u);
  EXPECT_EQ(b.kernel, 3u);
  const auto c = downscale_spec(32, 4, 0);
  EXPECT_EQ(c.stride, 8u);
  EXPECT_EQ(c.kernel, 8u);
  EXPECT_THROW(downscale_spec(10, 4, 1), ShapeError);
  EXPECT_THROW(downscale_spec(4, 8, 1), ShapeError);
}

TEST(Downscale, OutputExtentMatchesTarget) {
  for (std::size_t in : {4, 8, 16, 32, 64}) {
    for (std::size_t out = 1; out <= in; out *= 2) {
      for (std::size_t pad : {0, 1}) {
        const auto d = downscale_spec(in, out, pad);
        const auto g = Conv2dGeometry::uniform(d.stride, d.padding);
        const Shape s = conv2d_output_shape({in, in, 1}, {d.kernel, d.kernel, 1, 1}, g);
        EXPECT_EQ(s[0], out) << in << " -> " << out << " pad " << pad;
      }
    }
  }
}

TEST(Downscale, TargetExtent) {
  EXPECT_EQ(cn_target_extent(64), 4u);
  EXPECT_EQ(cn_target_extent(8), 4u);
  EXPECT_EQ(cn_target_extent(6), 3u);
  EXPECT_EQ(cn_target_extent(2), 2u);
  EXPECT_EQ(cn_target_extent(5), 1u);
}

TEST(ParameterStore, RejectsDuplicates) {
  ParameterStore s;
  EXPECT_EQ(s.add("a", Tensor({2})), 0u);
  EXPECT_EQ(s.add("b", Tensor({3})), 1u);
  EXPECT_THROW(s.add("a", Tensor({1})), std::invalid_argument);
  EXPECT_EQ(s.total_elements(), 5u);
  EXPECT_EQ(s.find("c"), nullptr);
}

TEST(WeightCN, LayerStructure) {
  Rng rng(1);
  ParameterStore store;
  const auto p = make_weight_cn(store, "cn", {16, 16, 1}, 8, testutil::tiny_widths(), rng);
  ASSERT_EQ(p.layers.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.layers[i].kind, CNLayerKind::kConv);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(p.layers[i].kind, CNLayerKind::kFullyConnected);
  EXPECT_FALSE(p.layers.back().relu);
  EXPECT_EQ(p.output_width(store), 8u);
  // The downscaling conv reduces 16x16 to 4x4.
  EXPECT_EQ(store[p.layers[0].weight].value.shape(), (Shape{6, 6, 1, 3}));
  EXPECT_EQ(store[p.layers[3].weight].value.shape(), (Shape{4 * 4 * 3, 6}));
}

TEST(WeightCN, ZeroInitGivesIdentityWeights) {
  Rng rng(2);
  ParameterStore store;
  const auto w = testutil::tiny_widths();
  const auto an = make_weight_cn(store, "an", kX, 2 * 4, w, rng);
  const auto cv = make_weight_cn(store, "cv", kX, 4 * 4, w, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = rng.normal_tensor(kX);
    Tape tape;
    const auto a = cn_actnorm(tape, x, an, store, 4);
    EXPECT_EQ(a.scale.value(), Tensor({4}, 1.0));
    EXPECT_EQ(a.bias.value(), Tensor({4}, 0.0));
    EXPECT_EQ(cn_conv(tape, x, cv, store, 4).matrix.value(), Tensor::identity(4));
  }
}

TEST(WeightCN, WidthMismatchIsAnError) {
  Rng rng(3);
  ParameterStore store;
  const auto an = make_weight_cn(store, "an", kX, 6, testutil::tiny_widths(), rng);
  Tape tape;
  EXPECT_THROW(cn_actnorm(tape, Tensor(kX), an, store, 4), ShapeError);
  EXPECT_THROW(cn_conv(tape, Tensor(kX), an, store, 2), ShapeError);
}

TEST(WeightCN, ActnormScaleFromLogOutput) {
  Rng rng(4);
  ParameterStore store;
  const auto an = make_weight_cn(store, "an", kX, 4, testutil::tiny_widths(), rng);
  param(store, "an.out.b").value = Tensor::from({std::log(2.0), std::log(3.0), 0.5, -1.0});
  Tape tape;
  const auto a = cn_actnorm(tape, rng.normal_tensor(kX), an, store, 2);
  EXPECT_LT(max_abs_diff(a.scale.value(), Tensor::from({2, 3})), 1e-15);
  EXPECT_EQ(a.bias.value(), Tensor::from({0.5, -1.0}));
}

TEST(WeightCN, ConvMatrixLogDet) {
  Rng rng(5);
  ParameterStore store;
  const auto cv = make_weight_cn(store, "cv", kX, 4, testutil::tiny_widths(), rng);
  param(store, "cv.out.b").value = Tensor::from({1, 0, 0, 1});
  Tape tape;
  const auto w = cn_conv(tape, Tensor(kX), cv, store, 2);
  EXPECT_EQ(w.matrix.value(), Tensor({2, 2}, {2, 0, 0, 2}));
  EXPECT_NEAR(logabsdet(w.matrix).value().item(), 2.0 * std::log(2.0), 1e-15);
}

TEST(WeightCN, DiagonallyDominantPerturbationIsInvertible) {
  Rng rng(6);
  ParameterStore store;
  const std::size_t c = 4;
  const auto cv = make_weight_cn(store, "cv", kX, c * c, testutil::tiny_widths(), rng);
  for (int trial = 0; trial < 100; ++trial) {
    // Off-diagonal row sums below 1 - |diagonal perturbation| keep I + M nonsingular.
    Tensor m = rng.uniform_tensor({c * c}, -0.2, 0.2);
    param(store, "cv.out.b").value = m;
    Tape tape;
    const Tensor w = cn_conv(tape, rng.normal_tensor(kX), cv, store, c).matrix.value();
    const double ref = oracle::full_pivot_logabsdet(w);
    EXPECT_TRUE(std::isfinite(ref));
    EXPECT_LT(std::abs(slogdet_lu(w).logabsdet - ref), 1e-12);
    EXPECT_LT(max_abs_diff(matmul(w, mat_inverse(w)), Tensor::identity(c)), 1e-12);
  }
}

TEST(FeatureCN, OutputShapeAndZeroInit) {
  Rng rng(7);
  ParameterStore store;
  const auto f = make_feature_cn(store, "f", {16, 16, 1}, 4, 4, testutil::tiny_widths(), rng);
  Tape tape;
  Var xr = cn_coupling_features(tape, rng.normal_tensor({16, 16, 1}), f, store);
  EXPECT_EQ(xr.shape(), (Shape{4, 4, 4}));
  EXPECT_EQ(xr.value(), Tensor({4, 4, 4}, 0.0));
}

TEST(CouplingNN, ZeroInitGivesConstantScale) {
  Rng rng(8);
  ParameterStore store;
  const auto w = testutil::tiny_widths();
  const auto nn = make_coupling_nn(store, "nn", 2 + w.feature_channels, 2, w, rng);
  Tape tape;
  const auto out = nn_coupling(tape.constant(rng.normal_tensor({4, 4, 2})),
                               tape.constant(rng.normal_tensor({4, 4, 4})), nn, store);
  const double s2 = 1.0 / (1.0 + std::exp(-2.0));
  EXPECT_LT(max_abs_diff(out.scale.value(), Tensor({4, 4, 2}, s2)), 1e-15);
  EXPECT_LT(max_abs_diff(out.log_scale.value(), Tensor({4, 4, 2}, std::log(s2))), 1e-15);
  EXPECT_EQ(out.shift.value(), Tensor({4, 4, 2}, 0.0));
}

TEST(CouplingNN, SpatialMismatchIsAnError) {
  Rng rng(9);
  ParameterStore store;
  const auto w = testutil::tiny_widths();
  const auto nn = make_coupling_nn(store, "nn", 2 + w.feature_channels, 2, w, rng);
  Tape tape;
  EXPECT_THROW(nn_coupling(tape.constant(Tensor({4, 4, 2})), tape.constant(Tensor({2, 2, 4})), nn,
                           store),
               ShapeError);
}

TEST(CouplingNN, ScaleStaysInUnitInterval) {
  Rng rng(10);
  ParameterStore store;
  const auto w = testutil::tiny_widths();
  const auto nn = make_coupling_nn(store, "nn", 2 + w.feature_channels, 2, w, rng);
  for (auto& p : store) p.value = rng.normal_tensor(p.value.shape(), 0.5);
  Tape tape;
  const auto out = nn_coupling(tape.constant(rng.normal_tensor({4, 4, 2}, 3.0)),
                               tape.constant(rng.normal_tensor({4, 4, 4}, 3.0)), nn, store);
  for (double s : out.scale.value().data()) {
    EXPECT_GT(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
  for (double ls : out.log_scale.value().data()) EXPECT_TRUE(std::isfinite(ls));
}

TEST(CN, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(11);
  ParameterStore store;
  const auto an = make_weight_cn(store, "an", {4, 4, 1}, 4, testutil::tiny_widths(), rng);
  for (auto& p : store) {
    if (is_output_layer(p.name)) p.value = rng.normal_tensor(p.value.shape(), 0.3);
  }
  const Tensor x = rng.normal_tensor({4, 4, 1});
  const Tensor probe = rng.normal_tensor({2});
  auto loss = [&](Tape& tape) {
    const auto a = cn_actnorm(tape, x, an, store, 2);
    return add(sum(mul(a.scale, tape.constant(probe))), sum_squares(a.bias));
  };
  Tape tape;
  tape.backward(loss(tape));
  for (auto& p : store) {
    const Tensor* g = tape.parameter_grad(p);
    ASSERT_NE(g, nullptr) << p.name;
    for (std::size_t i = 0; i < p.value.size(); i += 7) {
      const double orig = p.value[i];
      auto f = [&](double v) {
        p.value[i] = v;
        Tape t;
        const double r = loss(t).value().item();
        p.value[i] = orig;
        return r;
      };
      const double fd = oracle::central_difference(f, orig);
      EXPECT_LT(oracle::rel_err((*g)[i], fd), 1e-6) << p.name << "[" << i << "]";
    }
  }
}
