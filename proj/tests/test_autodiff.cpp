#include "uniddg/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "uniddg/errors.hpp"
#include "uniddg/rng.hpp"

using namespace uniddg;
using uniddg::testing::gradcheck;
using uniddg::testing::random_tensor;

TEST(Autodiff, AddMulScaleGrad) {
  RandomStream rng(1);
  std::vector<Tensor> params = {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
  Tensor r = random_tensor({2, 3}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    Var y = t.mul(t.add(v[0], v[1]), t.scale(v[0], 0.5));
    return t.dot_const(y, r);
  };
  auto rep = gradcheck(fwd, params, rng, 6);
  EXPECT_LE(rep.max_rel_err, 1e-4);
}

TEST(Autodiff, LeakyReluTanhGrad) {
  RandomStream rng(2);
  std::vector<Tensor> params = {random_tensor({4, 5}, rng)};
  Tensor r = random_tensor({4, 5}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.tanh_(t.leaky_relu(v[0], 0.2)), r);
  };
  auto rep = gradcheck(fwd, params, rng, 20);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, Conv2dForwardKnown) {
  // 1x1x2x2 input, single 3x3 identity-ish kernel, pad 1
  Tape t;
  Tensor x({1, 1, 2, 2});
  x.data = {1, 2, 3, 4};
  Tensor w({1, 1, 3, 3}, 0.0);
  w.data[4] = 1.0;  // center tap
  Tensor b({1}, 0.5);
  Var y = t.conv2d(t.input(x), t.input(w), t.input(b), 1, 1);
  const Tensor& vy = t.value(y);
  ASSERT_EQ(vy.shape, (std::vector<int>{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(vy[0], 1.5);
  EXPECT_DOUBLE_EQ(vy[3], 4.5);
}

TEST(Autodiff, Conv2dGrad) {
  RandomStream rng(3);
  std::vector<Tensor> params = {random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
                                random_tensor({4}, rng)};
  Tensor r = random_tensor({2, 4, 5, 6}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.conv2d(v[0], v[1], v[2], 1, 1), r);
  };
  auto rep = gradcheck(fwd, params, rng, 20);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, Conv2dStride2Grad) {
  RandomStream rng(4);
  std::vector<Tensor> params = {random_tensor({2, 2, 8, 8}, rng), random_tensor({3, 2, 4, 4}, rng),
                                random_tensor({3}, rng)};
  Tensor r = random_tensor({2, 3, 4, 4}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.conv2d(v[0], v[1], v[2], 2, 1), r);
  };
  auto rep = gradcheck(fwd, params, rng, 20);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, MaxPoolUpsampleGrad) {
  RandomStream rng(5);
  std::vector<Tensor> params = {random_tensor({2, 3, 4, 4}, rng)};
  Tensor r = random_tensor({2, 3, 4, 4}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.upsample2(t.maxpool2(v[0])), r);
  };
  auto rep = gradcheck(fwd, params, rng, 20);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, LinearGapGrad) {
  RandomStream rng(6);
  std::vector<Tensor> params = {random_tensor({3, 4, 3, 3}, rng), random_tensor({5, 4}, rng),
                                random_tensor({5}, rng)};
  Tensor r = random_tensor({3, 5}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.linear(t.global_avg_pool(v[0]), v[1], v[2]), r);
  };
  auto rep = gradcheck(fwd, params, rng, 20);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, BatchNormTrainGrad) {
  RandomStream rng(7);
  std::vector<Tensor> params = {random_tensor({3, 4, 5, 5}, rng), random_tensor({4}, rng, 0.5, 1.5),
                                random_tensor({4}, rng)};
  Tensor r = random_tensor({3, 4, 5, 5}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    BatchNormState st;
    st.init(4);
    return t.dot_const(t.batch_norm(v[0], v[1], v[2], st, true, 0.1, 1e-5), r);
  };
  auto rep = gradcheck(fwd, params, rng, 25);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, BatchNormEvalUsesRunningStats) {
  Tape t;
  RandomStream rng(8);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  BatchNormState st;
  st.init(3);
  st.running_mean.data = {0.2, -0.1, 0.0};
  st.running_var.data = {1.5, 0.5, 1.0};
  Tensor gamma({3}, 1.0), beta({3}, 0.0);
  Var y = t.batch_norm(t.input(x), t.input(gamma), t.input(beta), st, false, 0.1, 1e-5);
  const Tensor& vy = t.value(y);
  EXPECT_NEAR(vy[0], (x[0] - 0.2) / std::sqrt(1.5 + 1e-5), 1e-12);
  // eval mode must not touch the running stats
  EXPECT_DOUBLE_EQ(st.running_mean[0], 0.2);
}

TEST(Autodiff, InstanceNormGrad) {
  RandomStream rng(9);
  std::vector<Tensor> params = {random_tensor({2, 3, 4, 4}, rng)};
  Tensor r = random_tensor({2, 3, 4, 4}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.instance_norm(v[0], 1e-5), r);
  };
  auto rep = gradcheck(fwd, params, rng, 25);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, AdainGrad) {
  RandomStream rng(10);
  std::vector<Tensor> params = {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3}, rng, 0.5, 2.0),
                                random_tensor({2, 3}, rng)};
  Tensor r = random_tensor({2, 3, 4, 4}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.adain(v[0], v[1], v[2], 1e-5), r);
  };
  auto rep = gradcheck(fwd, params, rng, 25);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, SoftmaxGrad) {
  RandomStream rng(11);
  std::vector<Tensor> params = {random_tensor({2, 3, 3, 3}, rng)};
  Tensor r = random_tensor({2, 3, 3, 3}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.softmax_ch(v[0]), r);
  };
  auto rep = gradcheck(fwd, params, rng, 25);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, SoftmaxSumsToOne) {
  Tape t;
  RandomStream rng(12);
  Tensor x = random_tensor({1, 4, 2, 2}, rng, -3, 3);
  Var y = t.softmax_ch(t.input(x));
  const Tensor& vy = t.value(y);
  for (int p = 0; p < 4; ++p) {
    double s = 0;
    for (int c = 0; c < 4; ++c) s += vy[c * 4 + p];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, ReparamSampleGrad) {
  RandomStream rng(13);
  std::vector<Tensor> params = {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)};
  Tensor eps = random_tensor({2, 4}, rng);
  Tensor r = random_tensor({2, 4}, rng);
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.reparam_sample(v[0], v[1], eps), r);
  };
  auto rep = gradcheck(fwd, params, rng, 8);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, ReparamGradientStructure) {
  // ds/dmean = 1, ds/dlogvar = 0.5*exp(0.5*lv)*eps, per coordinate
  Tape t;
  Tensor mean({1, 3}, 0.0), logvar({1, 3});
  logvar.data = {0.0, -1.0, 1.0};
  Tensor eps({1, 3});
  eps.data = {0.7, -0.3, 1.1};
  Var m = t.param(mean), lv = t.param(logvar);
  Var s = t.reparam_sample(m, lv, eps);
  Tensor r({1, 3}, 1.0);
  t.backward(t.dot_const(s, r));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(t.grad(m)[i], 1.0, 1e-12);
    EXPECT_NEAR(t.grad(lv)[i], 0.5 * std::exp(0.5 * logvar[i]) * eps[i], 1e-12);
  }
}

TEST(Autodiff, L1MeanGradAndValue) {
  Tape t;
  Tensor a({2}), b({2});
  a.data = {1, 2};
  b.data = {2, 4};
  Var va = t.param(a), vb = t.param(b);
  Var l = t.l1_mean(va, vb);
  EXPECT_DOUBLE_EQ(t.value(l)[0], 1.5);
  t.backward(l);
  EXPECT_DOUBLE_EQ(t.grad(va)[0], -0.5);
  EXPECT_DOUBLE_EQ(t.grad(vb)[1], 0.5);
}

TEST(Autodiff, SoftDiceGrad) {
  RandomStream rng(14);
  Tensor onehot({2, 3, 4, 4}, 0.0);
  for (int n = 0; n < 2; ++n)
    for (int p = 0; p < 16; ++p) {
      int cls = static_cast<int>(rng.index(3));
      onehot[(n * 3 + cls) * 16 + p] = 1.0;
    }
  std::vector<Tensor> params = {random_tensor({2, 3, 4, 4}, rng)};
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.soft_dice_loss(t.softmax_ch(v[0]), onehot, 1e-5);
  };
  auto rep = gradcheck(fwd, params, rng, 30);
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Autodiff, ConcatPermuteSliceGrad) {
  RandomStream rng(15);
  std::vector<Tensor> params = {random_tensor({3, 2, 2, 2}, rng), random_tensor({3, 3, 2, 2}, rng)};
  Tensor r = random_tensor({3, 5, 2, 2}, rng);
  std::vector<int> perm = {2, 0, 1};
  auto fwd = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.permute_n(t.concat_ch(v[0], v[1]), perm), r);
  };
  auto rep = gradcheck(fwd, params, rng, 15);
  EXPECT_LE(rep.max_rel_err, 1e-3);

  std::vector<Tensor> p2 = {random_tensor({2, 6}, rng)};
  Tensor r2 = random_tensor({2, 3}, rng);
  auto fwd2 = [&](Tape& t, const std::vector<Var>& v) {
    return t.dot_const(t.slice_cols(v[0], 2, 3), r2);
  };
  auto rep2 = gradcheck(fwd2, p2, rng, 10);
  EXPECT_LE(rep2.max_rel_err, 1e-3);
}

TEST(Autodiff, WeightedSumLinearity) {
  Tape t;
  Var a = t.param(Tensor::scalar(0.2));
  Var b = t.param(Tensor::scalar(1.0));
  Var s = t.weighted_sum({a, b}, {5.0, 3.0});
  EXPECT_DOUBLE_EQ(t.value(s)[0], 4.0);
  t.backward(s);
  EXPECT_DOUBLE_EQ(t.grad(a)[0], 5.0);
  EXPECT_DOUBLE_EQ(t.grad(b)[0], 3.0);
}

TEST(Autodiff, MaskChannelsBroadcast) {
  Tape t;
  Tensor x({1, 2, 1, 2});
  x.data = {0.5, -0.5, 0.25, 0.75};
  Tensor mask({1, 1, 2});
  mask.data = {1, 0};
  Var y = t.mask_channels(t.input(x), mask);
  const Tensor& vy = t.value(y);
  EXPECT_DOUBLE_EQ(vy[0], 0.5);
  EXPECT_DOUBLE_EQ(vy[1], 0.0);
  EXPECT_DOUBLE_EQ(vy[2], 0.25);
  EXPECT_DOUBLE_EQ(vy[3], 0.0);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape t;
  Var a = t.input(Tensor({2, 2}));
  Var b = t.input(Tensor({2, 3}));
  EXPECT_THROW(t.add(a, b), ShapeError);
  EXPECT_THROW(t.maxpool2(t.input(Tensor({1, 1, 3, 3}))), ShapeError);
}

TEST(Autodiff, SharedLeafAccumulatesAcrossUses) {
  // the same parameter used twice must receive both gradient paths
  Tape t;
  Tensor p({1}, 2.0);
  Var v = t.param(p);
  Var y = t.mul(v, v);  // y = p^2, dy/dp = 2p = 4
  t.backward(t.dot_const(y, Tensor({1}, 1.0)));
  EXPECT_DOUBLE_EQ(t.grad(v)[0], 4.0);
}
