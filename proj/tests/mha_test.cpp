#include <gtest/gtest.h>

#include <cmath>

#include "dfkd/mha.hpp"
#include "dfkd/models.hpp"
#include "test_util.hpp"

using dfkd::MhaModule;
using dfkd::Rng;
using dfkd::Tensor;
using dfkd::Variable;
namespace ops = dfkd::ops;

namespace {

void set_identity_1x1(dfkd::nn::Conv2d<float>& conv) {
  conv.weight.value().fill(0.0f);
  const int c = conv.weight.value().dim(0);
  for (int i = 0; i < c; ++i) conv.weight.value().at(i, i, 0, 0) = 1.0f;
  conv.bias.value().fill(0.0f);
}

void zero_conv(dfkd::nn::Conv2d<float>& conv) {
  conv.weight.value().fill(0.0f);
  conv.bias.value().fill(0.0f);
}

}  // namespace

TEST(MhaAttention, SingleRouteIdentityReducesToSigmoid) {
  Rng rng(0);
  MhaModule<float> mha(3, 1, rng);
  set_identity_1x1(mha.route_convs[0][0]);
  set_identity_1x1(mha.fuse_convs[0]);
  Tensor<float> f({2, 3, 2, 2});
  f.fill_normal(rng, 0.0, 1.0);
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = std::abs(f[i]);  // F >= 0 so ReLU is transparent
  auto a = mha.attention(Variable<float>::constant(f));
  for (std::int64_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(a.value()[i], 1.0f / (1.0f + std::exp(-f[i])), 1e-6);
}

TEST(MhaAttention, AllZeroWeightsGiveHalf) {
  Rng rng(1);
  MhaModule<float> mha(4, 3, rng);
  for (auto& route : mha.route_convs)
    for (auto& c : route) zero_conv(c);
  for (auto& c : mha.fuse_convs) zero_conv(c);
  Tensor<float> f({2, 4, 3, 3});
  f.fill_normal(rng, 0.0, 1.0);
  auto a = mha.attention(Variable<float>::constant(f));
  for (std::int64_t i = 0; i < a.value().numel(); ++i) EXPECT_FLOAT_EQ(a.value()[i], 0.5f);
}

// Scalar oracle: 1x2x1x1 input, hand-set conv weights, R = 3.
TEST(MhaAttention, ThreeOrderScalarOracle) {
  Rng rng(2);
  MhaModule<float> mha(2, 3, rng);
  // weights chosen by hand; conv(y)_o = sum_i w[o][i] * f_i + b_o at the single site
  const double f0 = 0.7, f1 = -0.3;
  auto set = [](dfkd::nn::Conv2d<float>& c, std::array<std::array<double, 2>, 2> w,
                std::array<double, 2> b) {
    for (int o = 0; o < 2; ++o) {
      for (int i = 0; i < 2; ++i) c.weight.value().at(o, i, 0, 0) = static_cast<float>(w[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)]);
      c.bias.value()[o] = static_cast<float>(b[static_cast<std::size_t>(o)]);
    }
  };
  // route 1: one conv + fuse
  set(mha.route_convs[0][0], {{{1.0, 0.5}, {-0.25, 2.0}}}, {0.1, -0.2});
  set(mha.fuse_convs[0], {{{0.3, -1.0}, {0.8, 0.4}}}, {0.0, 0.05});
  // route 2: two convs + fuse
  set(mha.route_convs[1][0], {{{0.6, -0.7}, {1.2, 0.3}}}, {0.0, 0.1});
  set(mha.route_convs[1][1], {{{-0.5, 0.9}, {0.2, 0.2}}}, {0.3, 0.0});
  set(mha.fuse_convs[1], {{{1.0, 1.0}, {-0.6, 0.5}}}, {0.0, 0.0});
  // route 3: three convs + fuse
  set(mha.route_convs[2][0], {{{0.2, 0.4}, {-0.3, 0.7}}}, {0.05, 0.0});
  set(mha.route_convs[2][1], {{{1.5, -0.2}, {0.0, 1.0}}}, {0.0, -0.1});
  set(mha.route_convs[2][2], {{{0.9, 0.1}, {0.4, -0.8}}}, {0.2, 0.0});
  set(mha.fuse_convs[2], {{{-0.4, 0.6}, {0.7, 0.3}}}, {0.1, 0.0});

  auto conv_apply = [&](std::array<std::array<double, 2>, 2> w, std::array<double, 2> b,
                        std::array<double, 2> in) -> std::array<double, 2> {
    return {w[0][0] * in[0] + w[0][1] * in[1] + b[0], w[1][0] * in[0] + w[1][1] * in[1] + b[1]};
  };
  const std::array<double, 2> fin{f0, f1};
  auto relu2 = [](std::array<double, 2> v) -> std::array<double, 2> {
    return {std::max(0.0, v[0]), std::max(0.0, v[1])};
  };
  // route 1
  auto r1 = conv_apply({{{1.0, 0.5}, {-0.25, 2.0}}}, {0.1, -0.2}, fin);
  auto o1 = conv_apply({{{0.3, -1.0}, {0.8, 0.4}}}, {0.0, 0.05}, relu2(r1));
  // route 2
  auto r2a = conv_apply({{{0.6, -0.7}, {1.2, 0.3}}}, {0.0, 0.1}, fin);
  auto r2b = conv_apply({{{-0.5, 0.9}, {0.2, 0.2}}}, {0.3, 0.0}, fin);
  std::array<double, 2> p2{r2a[0] * r2b[0], r2a[1] * r2b[1]};
  auto o2 = conv_apply({{{1.0, 1.0}, {-0.6, 0.5}}}, {0.0, 0.0}, relu2(p2));
  // route 3
  auto r3a = conv_apply({{{0.2, 0.4}, {-0.3, 0.7}}}, {0.05, 0.0}, fin);
  auto r3b = conv_apply({{{1.5, -0.2}, {0.0, 1.0}}}, {0.0, -0.1}, fin);
  auto r3c = conv_apply({{{0.9, 0.1}, {0.4, -0.8}}}, {0.2, 0.0}, fin);
  std::array<double, 2> p3{r3a[0] * r3b[0] * r3c[0], r3a[1] * r3b[1] * r3c[1]};
  auto o3 = conv_apply({{{-0.4, 0.6}, {0.7, 0.3}}}, {0.1, 0.0}, relu2(p3));

  Tensor<float> f({1, 2, 1, 1}, {static_cast<float>(f0), static_cast<float>(f1)});
  auto a = mha.attention(Variable<float>::constant(f));
  for (int c = 0; c < 2; ++c) {
    const double expect = 1.0 / (1.0 + std::exp(-(o1[static_cast<std::size_t>(c)] + o2[static_cast<std::size_t>(c)] + o3[static_cast<std::size_t>(c)])));
    EXPECT_NEAR(a.value()[c], expect, 1e-5);
  }
}

TEST(MhaAttention, SigmoidRangeAndShapePreserved) {
  Rng rng(3);
  for (int order = 1; order <= 3; ++order) {
    MhaModule<float> mha(6, order, rng);
    Tensor<float> f({2, 6, 4, 4});
    f.fill_normal(rng, 0.0, 0.6);
    auto a = mha.attention(Variable<float>::constant(f));
    EXPECT_TRUE(a.value().same_shape(f));
    for (std::int64_t i = 0; i < a.value().numel(); ++i) {
      ASSERT_GT(a.value()[i], 0.0f);
      ASSERT_LT(a.value()[i], 1.0f);
    }
    auto fm = mha.forward(Variable<float>::constant(f));
    EXPECT_TRUE(fm.value().same_shape(f));
  }
}

TEST(MhaAttention, OrderReductionWithZeroedHighRoutes) {
  Rng rng(4);
  MhaModule<float> mha3(5, 3, rng);
  MhaModule<float> mha1(5, 1, rng);
  // same route-1 weights; routes 2 and 3 zero-weighted
  mha1.route_convs[0][0].weight.value() = mha3.route_convs[0][0].weight.value();
  mha1.route_convs[0][0].bias.value() = mha3.route_convs[0][0].bias.value();
  mha1.fuse_convs[0].weight.value() = mha3.fuse_convs[0].weight.value();
  mha1.fuse_convs[0].bias.value() = mha3.fuse_convs[0].bias.value();
  for (int route = 1; route < 3; ++route) {
    for (auto& c : mha3.route_convs[static_cast<std::size_t>(route)]) zero_conv(c);
    zero_conv(mha3.fuse_convs[static_cast<std::size_t>(route)]);
  }
  Tensor<float> f({2, 5, 3, 3});
  f.fill_normal(rng, 0.0, 1.0);
  auto a3 = mha3.attention(Variable<float>::constant(f));
  auto a1 = mha1.attention(Variable<float>::constant(f));
  for (std::int64_t i = 0; i < a3.value().numel(); ++i) EXPECT_NEAR(a3.value()[i], a1.value()[i], 1e-6);
}

TEST(MhaApply, IdentityZeroAndElementwiseOracle) {
  Rng rng(5);
  Tensor<float> f({2, 3, 2, 2});
  f.fill_normal(rng, 0.0, 1.0);
  auto ones = Variable<float>::constant(Tensor<float>::full({2, 3, 2, 2}, 1.0f));
  auto out1 = dfkd::mha_apply(Variable<float>::constant(f), ones);
  EXPECT_EQ(std::memcmp(out1.value().data(), f.data(), sizeof(float) * f.numel()), 0);

  auto zeros = Variable<float>::constant(Tensor<float>({2, 3, 2, 2}));
  auto out0 = dfkd::mha_apply(Variable<float>::constant(f), zeros);
  for (std::int64_t i = 0; i < out0.value().numel(); ++i) EXPECT_EQ(out0.value()[i], 0.0f);

  Tensor<float> a({2, 3, 2, 2});
  a.fill_normal(rng, 0.0, 1.0);
  auto out = dfkd::mha_apply(Variable<float>::constant(f), Variable<float>::constant(a));
  for (std::int64_t i = 0; i < out.value().numel(); ++i) EXPECT_EQ(out.value()[i], f[i] * a[i]);

  EXPECT_THROW(dfkd::mha_apply(Variable<float>::constant(f),
                               Variable<float>::constant(Tensor<float>({2, 3, 2, 3}))),
               std::invalid_argument);
}

TEST(MhadLoss, OraclesAndSymmetry) {
  // identical lists -> 0
  Rng rng(6);
  Tensor<float> t({2, 3, 2, 2});
  t.fill_normal(rng, 0.0, 1.0);
  auto tv = Variable<float>::constant(t);
  EXPECT_FLOAT_EQ(dfkd::mhad_loss<float>({tv}, {tv}).value()[0], 0.0f);

  // single tap, N=C=1, teacher all ones 2x2, student zeros -> 1
  auto ones = Variable<float>::constant(Tensor<float>::full({1, 1, 2, 2}, 1.0f));
  auto zeros = Variable<float>::constant(Tensor<float>({1, 1, 2, 2}));
  EXPECT_FLOAT_EQ(dfkd::mhad_loss<float>({ones}, {zeros}).value()[0], 1.0f);

  // teacher = t, student = 2t -> mean(t^2)
  Tensor<float> dbl = t;
  for (std::int64_t i = 0; i < dbl.numel(); ++i) dbl[i] *= 2.0f;
  double want = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) want += double(t[i]) * t[i];
  want /= t.numel();
  EXPECT_NEAR(dfkd::mhad_loss<float>({tv}, {Variable<float>::constant(dbl)}).value()[0], want, 1e-5);

  // value symmetric under swapping the lists
  Tensor<float> s({2, 3, 2, 2});
  s.fill_normal(rng, 0.0, 1.0);
  auto sv = Variable<float>::constant(s);
  EXPECT_FLOAT_EQ(dfkd::mhad_loss<float>({tv, sv}, {sv, tv}).value()[0],
                  dfkd::mhad_loss<float>({sv, tv}, {tv, sv}).value()[0]);

  EXPECT_THROW(dfkd::mhad_loss<float>({tv, sv}, {sv}), std::invalid_argument);
  EXPECT_THROW(dfkd::mhad_loss<float>({ones}, {sv}), std::invalid_argument);
}

// Gradients through the student-side pipeline: adapter -> MHA -> gated map ->
// MHAD loss against a fixed teacher map, on a 1x4x2x2 instance.
TEST(MhadLoss, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  MhaModule<double> mha_s(4, 3, rng);
  dfkd::Adapter<double> adapter(3, 4, rng);
  Tensor<double> student_feat({1, 3, 2, 2});
  student_feat.fill_normal(rng, 0.0, 1.0);
  Tensor<double> teacher_map({1, 4, 2, 2});
  teacher_map.fill_normal(rng, 0.0, 1.0);
  auto sfeat = Variable<double>::constant(student_feat);
  auto tmap = Variable<double>::constant(teacher_map);

  dfkd::nn::Registry<double> reg;
  adapter.register_into(reg, "adapter");
  mha_s.register_into(reg, "mha");
  auto report = dfkd_test::grad_check(
      reg.param_ptrs(),
      [&] {
        auto lifted = adapter.forward(sfeat);
        auto gated = mha_s.forward(lifted);
        return dfkd::mhad_loss<double>({tmap}, {gated});
      },
      1e-3, 1e-3);
  EXPECT_GE(report.pass_fraction(), 0.99) << "worst rel " << report.worst_rel;
}
