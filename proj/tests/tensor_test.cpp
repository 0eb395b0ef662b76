// Copyright 2026 The AMVQ Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "amvq/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "amvq/common.hpp"
#include "amvq/float16.hpp"
#include "doctest.h"

using namespace amvq;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, float lo = -2.0f,
                     float hi = 2.0f, bool requires_grad = false) {
  Eigen::ArrayXf data(shape_size(shape));
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(rng.uniform(lo, hi));
  }
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Keeps samples away from the relu/leaky_relu kink so central differences
// stay one-sided-free.
Tensor random_tensor_off_kink(Shape shape, RngStream& rng) {
  Tensor t = random_tensor(shape, rng);
  Eigen::ArrayXf& v = t.mutable_value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) < 0.05f) v[i] = v[i] < 0.0f ? -0.1f : 0.1f;
  }
  return t;
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rank() == 2);
  CHECK(z.size() == 6);
  CHECK(z.value().abs().maxCoeff() == 0.0f);

  Tensor f = Tensor::full({4}, 1.5f);
  CHECK(f.value().minCoeff() == 1.5f);

  CHECK(Tensor::scalar(2.0f).item() == 2.0f);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, Eigen::ArrayXf::Zero(3)),
                  ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2}).item(), ShapeError);
}

TEST_CASE("relu forward matches definition") {
  Tensor x = Tensor::from_data({3}, (Eigen::ArrayXf(3) << -1, 0, 2).finished());
  Tensor y = relu(x);
  CHECK(y.value()[0] == 0.0f);
  CHECK(y.value()[1] == 0.0f);
  CHECK(y.value()[2] == 2.0f);
}

TEST_CASE("conv2d all-ones box sums nine ones") {
  Tensor x = Tensor::full({1, 1, 4, 4}, 1.0f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d output shape follows floor((in+2p-k)/s)+1") {
  Tensor x = Tensor::zeros({2, 3, 11, 7});
  Tensor w = Tensor::zeros({5, 3, 3, 3});
  Tensor b = Tensor::zeros({5});
  CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{2, 5, 6, 4});
  CHECK(conv2d(x, w, b, 1, 0).shape() == Shape{2, 5, 9, 5});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({5, 4, 3, 3}), b, 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, w, Tensor::zeros({4}), 1, 0), ShapeError);
}

TEST_CASE("conv2d forward matches direct convolution oracle") {
  RngStream rng(101);
  const int n = 2, cin = 3, h = 6, w = 5, cout = 4, k = 3;
  for (int stride = 1; stride <= 2; ++stride) {
    for (int pad = 0; pad <= 1; ++pad) {
      Tensor x = random_tensor({n, cin, h, w}, rng);
      Tensor wt = random_tensor({cout, cin, k, k}, rng);
      Tensor b = random_tensor({cout}, rng);
      Tensor y = conv2d(x, wt, b, stride, pad);
      const int oh = (h + 2 * pad - k) / stride + 1;
      const int ow = (w + 2 * pad - k) / stride + 1;
      REQUIRE(y.shape() == Shape{n, cout, oh, ow});
      // Brute-force loop oracle, independent of the im2col path.
      for (int ni = 0; ni < n; ++ni) {
        for (int co = 0; co < cout; ++co) {
          for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
              double acc = b.value()[co];
              for (int ci = 0; ci < cin; ++ci) {
                for (int ki = 0; ki < k; ++ki) {
                  for (int kj = 0; kj < k; ++kj) {
                    const int ih = i * stride - pad + ki;
                    const int iw = j * stride - pad + kj;
                    if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                    acc += static_cast<double>(
                               x.value()[((ni * cin + ci) * h + ih) * w + iw]) *
                           wt.value()[((co * cin + ci) * k + ki) * k + kj];
                  }
                }
              }
              const float got =
                  y.value()[((ni * cout + co) * oh + i) * ow + j];
              CHECK(got == doctest::Approx(acc).epsilon(1e-4));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("backward on sum of squares") {
  Tensor x = Tensor::from_data({2}, (Eigen::ArrayXf(2) << 1, 2).finished(),
                               true);
  Tensor loss = squared_l2(x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward rejects non-scalar loss and consumed graphs") {
  Tensor x = Tensor::zeros({3}, true);
  CHECK_THROWS_AS(backward(relu(x)), ShapeError);

  Tensor y = sum(relu(x));
  backward(y);
  CHECK_THROWS_WITH_AS(backward(y), doctest::Contains("consumed"),
                       std::runtime_error);
}

TEST_CASE("stop_gradient forwards values and blocks gradient") {
  // y = stop_gradient(x) * x at x = 3: dy/dx must be 3, not 6.
  Tensor x = Tensor::from_data({1}, Eigen::ArrayXf::Constant(1, 3.0f), true);
  Tensor y = stop_gradient(x) * x;
  CHECK(y.item() == doctest::Approx(9.0f));
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(3.0f));
}

TEST_CASE("quantizer-style loss gradient at a known point") {
  // l = ||sg(f) - z||^2 + beta * ||f - sg(z)||^2 with f=(1,0), z=(0,0),
  // beta = 0.25. The gradient w.r.t. f is 2*beta*(f - z) = (0.5, 0).
  const float beta = 0.25f;
  Eigen::ArrayXf f0(2);
  f0 << 1.0f, 0.0f;
  Tensor z = Tensor::zeros({2});
  auto loss_of = [&](const Tensor& f) {
    return squared_l2(stop_gradient(f) - z) +
           scale(squared_l2(f - stop_gradient(z)), beta);
  };

  Tensor f = Tensor::from_data({2}, f0, true);
  Tensor l = loss_of(f);
  CHECK(l.item() == doctest::Approx(1.25f));
  backward(l);
  CHECK(f.grad()[0] == doctest::Approx(0.5f));
  CHECK(f.grad()[1] == doctest::Approx(0.0f));

  // Cross-check against the stop-gradient-aware finite-difference oracle at
  // the contractual step size.
  const float err = gradient_check(loss_of, Tensor::from_data({2}, f0), 1e-3f);
  CHECK(err < 1e-3f);
}

TEST_CASE("gradient_check is exact for linear f and sg-aware") {
  RngStream rng(7);
  Tensor x = random_tensor({5}, rng);
  CHECK(gradient_check([](const Tensor& t) { return sum(t); }, x, 1e-2f) <
        1e-6f);

  // f = sum(stop_gradient(t) * t) at t=2: analytic slope 2, full-product
  // numeric slope would be 4. The oracle must hold the stopped branch fixed.
  Tensor two = Tensor::from_data({1}, Eigen::ArrayXf::Constant(1, 2.0f));
  CHECK(gradient_check(
            [](const Tensor& t) { return sum(stop_gradient(t) * t); }, two,
            1e-3f) < 1e-4f);
}

TEST_CASE("gradient_check flags non-finite outputs") {
  Tensor x = Tensor::from_data({1}, Eigen::ArrayXf::Constant(1, -1.0f));
  CHECK_THROWS_WITH_AS(
      gradient_check([](const Tensor& t) { return sum(log(t)); }, x, 1e-3f),
      doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("finite differences validate every elementwise primitive") {
  RngStream rng(42);
  auto check_unary = [&](const char* name,
                         std::function<Tensor(const Tensor&)> op,
                         const Tensor& x) {
    auto f = [&op](const Tensor& t) { return sum(op(t)); };
    const float err = gradient_check(f, x, 1e-3f);
    INFO("op: ", name);
    CHECK(err < 1e-3f);
  };

  check_unary("relu", [](const Tensor& t) { return relu(t); },
              random_tensor_off_kink({4, 3}, rng));
  check_unary("leaky_relu",
              [](const Tensor& t) { return leaky_relu(t, 0.2f); },
              random_tensor_off_kink({4, 3}, rng));
  check_unary("sigmoid", [](const Tensor& t) { return sigmoid(t); },
              random_tensor({6}, rng));
  check_unary("tanh", [](const Tensor& t) { return tanh(t); },
              random_tensor({6}, rng));
  check_unary("log", [](const Tensor& t) { return log(t); },
              random_tensor({6}, rng, 0.5f, 2.5f));
  check_unary("softplus", [](const Tensor& t) { return softplus(t); },
              random_tensor({6}, rng));
  check_unary("mean", [](const Tensor& t) { return mean(t); },
              random_tensor({7}, rng));
  check_unary("squared_l2", [](const Tensor& t) { return squared_l2(t); },
              random_tensor({7}, rng));
  check_unary("scale", [](const Tensor& t) { return scale(t, -1.7f); },
              random_tensor({7}, rng));

  Tensor other = random_tensor({5}, rng);
  check_unary("add", [&](const Tensor& t) { return add(t, other); },
              random_tensor({5}, rng));
  check_unary("sub", [&](const Tensor& t) { return sub(other, t); },
              random_tensor({5}, rng));
  check_unary("mul", [&](const Tensor& t) { return mul(t, other); },
              random_tensor({5}, rng));
  check_unary("mul-self", [](const Tensor& t) { return mul(t, t); },
              random_tensor({5}, rng));
}

TEST_CASE("finite differences validate structural and conv primitives") {
  RngStream rng(43);
  auto fd = [&](std::function<Tensor(const Tensor&)> f, const Tensor& x) {
    return gradient_check(std::move(f), x, 1e-2f);
  };

  CHECK(fd([](const Tensor& t) {
          return sum(reshape(t, {6}) * reshape(t, {6}));
        },
           random_tensor({2, 3}, rng)) < 1e-3f);

  Tensor rhs = random_tensor({3, 2}, rng);
  CHECK(fd([&](const Tensor& t) { return squared_l2(matmul(t, rhs)); },
           random_tensor({2, 3}, rng)) < 1e-3f);
  Tensor lhs = random_tensor({2, 3}, rng);
  CHECK(fd([&](const Tensor& t) { return squared_l2(matmul(lhs, t)); },
           random_tensor({3, 2}, rng)) < 1e-3f);

  CHECK(fd([](const Tensor& t) { return squared_l2(positions_to_matrix(t)); },
           random_tensor({2, 3, 2, 2}, rng)) < 1e-3f);
  CHECK(fd(
            [](const Tensor& t) {
              return squared_l2(matrix_to_nchw(t, {2, 3, 2, 2}));
            },
            random_tensor({8, 3}, rng)) < 1e-3f);

  std::vector<int> rows = {2, 0, 2, 1};
  CHECK(fd([&](const Tensor& t) {
          return squared_l2(index_select_rows(t, rows));
        },
           random_tensor({3, 4}, rng)) < 1e-3f);

  CHECK(fd([](const Tensor& t) { return squared_l2(upsample_nearest2x(t)); },
           random_tensor({1, 2, 3, 3}, rng)) < 1e-3f);

  Tensor w = random_tensor({2, 1, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  CHECK(fd([&](const Tensor& t) {
          return sum(relu(conv2d(t, w, b, 1, 1)));
        },
           random_tensor_off_kink({1, 1, 5, 5}, rng)) < 1e-3f);
  Tensor x = random_tensor({1, 1, 5, 5}, rng);
  CHECK(fd([&](const Tensor& t) {
          return squared_l2(conv2d(x, t, b, 2, 1));
        },
           random_tensor({2, 1, 3, 3}, rng)) < 1e-3f);
  CHECK(fd([&](const Tensor& t) {
          return squared_l2(conv2d(x, w, t, 1, 0));
        },
           random_tensor({2}, rng)) < 1e-3f);
}

TEST_CASE("conv2d passes the adjoint identity") {
  // <conv(x), y> == <x, conv_adjoint(y)>; the backward pass computes the
  // adjoint, so compare the two inner products directly.
  RngStream rng(44);
  for (int stride = 1; stride <= 2; ++stride) {
    Tensor x = random_tensor({1, 2, 6, 6}, rng, -2.0f, 2.0f, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = Tensor::zeros({3});
    Tensor cx = conv2d(x, w, b, stride, 1);
    Tensor y = random_tensor(cx.shape(), rng);
    const double lhs =
        (cx.value().cast<double>() * y.value().cast<double>()).sum();
    backward(sum(cx * y));
    const double rhs =
        (x.value().cast<double>() * x.grad().cast<double>()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
  }
}

TEST_CASE("stop_gradient equals constant substitution") {
  RngStream rng(45);
  Tensor x0 = random_tensor({4}, rng);

  Tensor xa = Tensor::from_data({4}, x0.value(), true);
  Tensor ya = sum(stop_gradient(sigmoid(xa)) * xa + tanh(xa));
  backward(ya);

  // Same graph with the stopped branch replaced by a literal constant.
  Tensor xb = Tensor::from_data({4}, x0.value(), true);
  Tensor constant =
      Tensor::from_data({4}, sigmoid(Tensor::from_data({4}, x0.value()))
                                 .value());
  Tensor yb = sum(constant * xb + tanh(xb));
  backward(yb);

  CHECK(ya.item() == doctest::Approx(yb.item()).epsilon(1e-6));
  for (int i = 0; i < 4; ++i) {
    CHECK(xa.grad()[i] == doctest::Approx(xb.grad()[i]).epsilon(1e-6));
  }
}

TEST_CASE("batch_norm training statistics and eval affine map") {
  RngStream rng(46);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor gamma = Tensor::full({3}, 1.0f);
  Tensor beta = Tensor::zeros({3});

  BatchNormState state = BatchNormState::identity(3);
  Tensor y = batch_norm(x, gamma, beta, state, /*training=*/true);
  // Normalized output has near-zero mean and near-unit variance per channel.
  const int64_t plane = 16, per_channel = 32;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int n = 0; n < 2; ++n) {
      auto seg = y.value().segment((n * 3 + c) * plane, plane);
      s += seg.cast<double>().sum();
      s2 += seg.cast<double>().square().sum();
    }
    const double m = s / per_channel;
    CHECK(std::abs(m) < 1e-4);
    CHECK(s2 / per_channel - m * m == doctest::Approx(1.0).epsilon(1e-2));
  }
  // Running stats moved 10% of the way from identity toward batch stats.
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int n = 0; n < 2; ++n) {
      auto seg = x.value().segment((n * 3 + c) * plane, plane);
      s += seg.cast<double>().sum();
      s2 += seg.cast<double>().square().sum();
    }
    const double mu = s / per_channel;
    const double var = s2 / per_channel - mu * mu;
    CHECK(state.running_mean[c] == doctest::Approx(0.1 * mu).epsilon(1e-4));
    CHECK(state.running_var[c] ==
          doctest::Approx(0.9 + 0.1 * var).epsilon(1e-4));
  }

  // Eval mode with identity statistics is the identity map (gamma=1,
  // beta=0) up to the eps guard in 1/sqrt(var + eps), so applying it twice
  // equals applying it once to within that guard.
  BatchNormState ident = BatchNormState::identity(3);
  Tensor e1 = batch_norm(x, gamma, beta, ident, /*training=*/false);
  Tensor e2 = batch_norm(e1, gamma, beta, ident, /*training=*/false);
  CHECK((e1.value() - e2.value()).abs().maxCoeff() < 5e-5f);
}

TEST_CASE("batch_norm gradients match finite differences") {
  RngStream rng(47);
  Tensor x0 = random_tensor({2, 2, 3, 3}, rng);
  Tensor gamma0 = random_tensor({2}, rng, 0.5f, 1.5f);
  Tensor beta0 = random_tensor({2}, rng, -0.5f, 0.5f);
  const BatchNormState initial = BatchNormState::identity(2);

  auto wrt_x = [&](const Tensor& t) {
    BatchNormState s = initial;  // fresh copy keeps f pure under FD probing
    return squared_l2(batch_norm(t, gamma0, beta0, s, true));
  };
  CHECK(gradient_check(wrt_x, x0, 1e-2f) < 1e-3f);

  auto wrt_gamma = [&](const Tensor& t) {
    BatchNormState s = initial;
    return squared_l2(batch_norm(x0, t, beta0, s, true));
  };
  CHECK(gradient_check(wrt_gamma, gamma0, 1e-2f) < 1e-3f);

  auto wrt_beta = [&](const Tensor& t) {
    BatchNormState s = initial;
    return squared_l2(batch_norm(x0, gamma0, t, s, true));
  };
  CHECK(gradient_check(wrt_beta, beta0, 1e-2f) < 1e-3f);

  auto eval_x = [&](const Tensor& t) {
    BatchNormState s = initial;
    return squared_l2(batch_norm(t, gamma0, beta0, s, false));
  };
  CHECK(gradient_check(eval_x, x0, 1e-2f) < 1e-3f);
}

TEST_CASE("positions_to_matrix round-trips and orders positions") {
  // [N,C,H,W] -> [N*H*W, C] with row p = (n*H + h)*W + w.
  Tensor x = Tensor::from_data(
      {1, 2, 2, 2},
      (Eigen::ArrayXf(8) << 0, 1, 2, 3, 10, 11, 12, 13).finished());
  Tensor m = positions_to_matrix(x);
  REQUIRE(m.shape() == Shape{4, 2});
  CHECK(m.value()[0] == 0.0f);   // row 0 = (h0,w0): channels (0, 10)
  CHECK(m.value()[1] == 10.0f);
  CHECK(m.value()[6] == 3.0f);   // row 3 = (h1,w1): channels (3, 13)
  CHECK(m.value()[7] == 13.0f);

  Tensor back = matrix_to_nchw(m, {1, 2, 2, 2});
  CHECK((back.value() - x.value()).abs().maxCoeff() == 0.0f);
}

TEST_CASE("tensor container round-trips bit-exactly") {
  RngStream rng(48);
  Tensor t = random_tensor({3, 5, 2}, rng);
  t.mutable_value()[0] = -0.0f;
  t.mutable_value()[1] = 1e-38f;
  std::stringstream ss;
  save_tensor(ss, t);
  Tensor u = load_tensor(ss);
  REQUIRE(u.shape() == t.shape());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    CHECK(float_bits(u.value()[i]) == float_bits(t.value()[i]));
  }

  std::stringstream bad("NOTMAGIC-------");
  CHECK_THROWS_AS(load_tensor(bad), IoError);
}

TEST_CASE("tensor container header layout is stable") {
  Tensor t = Tensor::from_data({2, 3}, Eigen::ArrayXf::Zero(6));
  std::stringstream ss;
  save_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 8 + 2 + 1 + 2 * 4 + 6 * 4);
  CHECK(bytes.substr(0, 8) == "AMVQTNSR");
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);   // version lo
  CHECK(static_cast<unsigned char>(bytes[9]) == 0);   // version hi
  CHECK(static_cast<unsigned char>(bytes[10]) == 2);  // rank
  CHECK(static_cast<unsigned char>(bytes[11]) == 2);  // dim0 LE
  CHECK(static_cast<unsigned char>(bytes[15]) == 3);  // dim1 LE
}

TEST_CASE("half-precision conversion basics") {
  CHECK(float_to_half(0.0f) == 0);
  CHECK(float_to_half(1.0f) == 0x3c00);
  CHECK(float_to_half(-2.0f) == 0xc000);
  CHECK(half_to_float(0x3c00) == 1.0f);
  CHECK(half_to_float(0x7c00) == std::numeric_limits<float>::infinity());
  CHECK(std::isnan(half_to_float(0x7e00)));
  // Round-trip exactness for values representable in binary16.
  for (float v : {0.5f, -0.25f, 1024.0f, 0.099975586f}) {
    CHECK(half_to_float(float_to_half(v)) == v);
  }
  // Nearest-even rounding: 1 + 2^-11 is midway between 1.0 and 1+2^-10.
  CHECK(round_to_half(1.0f + 0x1.0p-11f) == 1.0f);
  CHECK(round_to_half(1.0f + 0x1.8p-11f) == 1.0f + 0x1.0p-10f);
  // Large magnitudes overflow to infinity.
  CHECK(half_to_float(float_to_half(1e6f)) ==
        std::numeric_limits<float>::infinity());
  // Subnormal half values survive the round trip.
  CHECK(half_to_float(float_to_half(0x1.0p-24f)) == 0x1.0p-24f);
}

TEST_CASE("rng streams are deterministic and fork independently") {
  RngStream a(123), b(123);
  for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(123);
  RngStream f1 = c.fork(1), f2 = c.fork(2), f1b = RngStream(123).fork(1);
  CHECK(f1.next_u64() == f1b.next_u64());
  CHECK(f1.next_u64() != f2.next_u64());

  RngStream g(9);
  double m = 0.0, m2 = 0.0;
  const int kDraws = 20000;
  for (int i = 0; i < kDraws; ++i) {
    const double v = g.next_gaussian();
    m += v;
    m2 += v * v;
  }
  m /= kDraws;
  m2 /= kDraws;
  CHECK(std::abs(m) < 0.03);
  CHECK(m2 - m * m == doctest::Approx(1.0).epsilon(0.05));

  RngStream u(10);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform(-1.0, 2.0);
    CHECK(v >= -1.0);
    CHECK(v < 2.0);
  }
}
