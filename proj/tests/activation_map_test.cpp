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

#include "amvq/activation_map.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "amvq/common.hpp"
#include "doctest.h"

using namespace amvq;

namespace {

FeatureGrid random_grid(int l_dim, int m, RngStream& rng, float lo = -2.0f,
                        float hi = 2.0f) {
  FeatureGrid g(l_dim, m);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < l_dim; ++i) {
      g(i, j) = static_cast<float>(rng.uniform(lo, hi));
    }
  }
  return g;
}

Codebook random_codebook(int l_dim, int k, RngStream& rng) {
  Codebook cb;
  cb.vectors = random_grid(l_dim, k, rng);
  return cb;
}

}  // namespace

TEST_CASE("vq_loss_gradient equals 2*beta*(f - z) at the worked example") {
  Codebook cb;
  cb.vectors = Eigen::MatrixXf::Zero(2, 2);
  cb.vectors.col(1) << 9.0f, 9.0f;
  FeatureGrid f(2, 1);
  f.col(0) << 1.0f, 0.0f;
  QuantizationResult r = quantize_nearest(f, cb);
  REQUIRE(r.indices[0] == 0);

  FeatureGrid g = vq_loss_gradient(f, r, 0.25f);
  CHECK(g(0, 0) == doctest::Approx(0.5f));
  CHECK(g(1, 0) == doctest::Approx(0.0f));

  // Finite differences on the commitment term confirm the closed form.
  Tensor qt = feature_grid_to_tensor(r.quantized);
  auto loss_of = [&](const Tensor& t) {
    return squared_l2(stop_gradient(t) - qt) +
           scale(squared_l2(t - stop_gradient(qt)), 0.25f);
  };
  CHECK(gradient_check(loss_of, feature_grid_to_tensor(f), 1e-3f) < 1e-3f);
}

TEST_CASE("vq_loss_gradient vanishes at exact codewords") {
  RngStream rng(3);
  Codebook cb = random_codebook(4, 6, rng);
  FeatureGrid f(4, 2);
  f.col(0) = cb.vectors.col(2);
  f.col(1) = cb.vectors.col(5);
  QuantizationResult r = quantize_nearest(f, cb);
  FeatureGrid g = vq_loss_gradient(f, r, 0.25f);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("autodiff and analytic gradient routes agree") {
  RngStream rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const int l = 3 + trial, m = 8 + 3 * trial, k = 5 + trial;
    Codebook cb = random_codebook(l, k, rng);
    FeatureGrid f = random_grid(l, m, rng);
    QuantizationResult r = quantize_nearest(f, cb);
    FeatureGrid a = vq_loss_gradient(f, r, 0.25f);
    FeatureGrid b = vq_loss_gradient_autodiff(f, r, 0.25f);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("stale quantization results are rejected") {
  RngStream rng(7);
  Codebook cb = random_codebook(3, 4, rng);
  FeatureGrid f = random_grid(3, 5, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  f(0, 0) += 0.25f;  // features changed after quantization
  CHECK_THROWS_AS(vq_loss_gradient(f, r, 0.25f), ConfigError);
  ActivationMap flat;
  flat.values = Eigen::ArrayXf::Zero(5);
  flat.normalized = true;
  CHECK_THROWS_AS(threshold_fuse(f, r, flat, 0.3f), ConfigError);
}

TEST_CASE("channel_weights pools gradients per channel") {
  FeatureGrid zeros = FeatureGrid::Zero(3, 4);
  CHECK(channel_weights(zeros).abs().maxCoeff() == 0.0f);

  FeatureGrid g(1, 2);
  g(0, 0) = 0.2f;
  g(0, 1) = 0.4f;
  CHECK(channel_weights(g)[0] == doctest::Approx(0.3f));

  FeatureGrid c(3, 7);
  c.row(0).setConstant(1.5f);
  c.row(1).setConstant(-0.25f);
  c.row(2).setConstant(0.0f);
  Eigen::ArrayXf alpha = channel_weights(c);
  CHECK(alpha[0] == doctest::Approx(1.5f));
  CHECK(alpha[1] == doctest::Approx(-0.25f));
  CHECK(alpha[2] == doctest::Approx(0.0f));

  // Absolute-value pooling drops cancellation.
  FeatureGrid s(1, 2);
  s(0, 0) = -0.2f;
  s(0, 1) = 0.2f;
  CHECK(channel_weights(s, false)[0] == doctest::Approx(0.0f));
  CHECK(channel_weights(s, true)[0] == doctest::Approx(0.2f));
}

TEST_CASE("activation_map applies weighted pooling with ReLU clamp") {
  FeatureGrid f(2, 2);
  f.col(0) << 0.5f, 0.2f;
  f.col(1) << 0.2f, 0.5f;
  Eigen::ArrayXf alpha(2);
  alpha << 1.0f, -1.0f;
  ActivationMap map = activation_map(f, alpha);
  CHECK(map.values[0] == doctest::Approx(0.3f));
  CHECK(map.values[1] == 0.0f);  // negative sum clamped
  CHECK_FALSE(map.normalized);

  ActivationMap zero_alpha = activation_map(f, Eigen::ArrayXf::Zero(2));
  CHECK(zero_alpha.values.abs().maxCoeff() == 0.0f);
}

TEST_CASE("activation_map matches a scalar double-loop oracle exactly") {
  RngStream rng(11);
  FeatureGrid f = random_grid(5, 17, rng);
  Eigen::ArrayXf alpha(5);
  for (int l = 0; l < 5; ++l) {
    alpha[l] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  ActivationMap map = activation_map(f, alpha);
  for (int m = 0; m < 17; ++m) {
    double acc = 0.0;
    for (int l = 0; l < 5; ++l) {
      acc += static_cast<double>(alpha[l]) * static_cast<double>(f(l, m));
    }
    const float expect = static_cast<float>(std::max(0.0, acc));
    CHECK(map.values[m] == expect);
  }
}

TEST_CASE("activation_map is invariant under consistent channel permutation") {
  RngStream rng(13);
  FeatureGrid f = random_grid(4, 9, rng);
  Eigen::ArrayXf alpha(4);
  for (int l = 0; l < 4; ++l) {
    alpha[l] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  ActivationMap base = activation_map(f, alpha);

  const int perm[4] = {2, 0, 3, 1};
  FeatureGrid fp(4, 9);
  Eigen::ArrayXf ap(4);
  for (int l = 0; l < 4; ++l) {
    fp.row(l) = f.row(perm[l]);
    ap[l] = alpha[perm[l]];
  }
  ActivationMap permuted = activation_map(fp, ap);
  for (int m = 0; m < 9; ++m) {
    CHECK(permuted.values[m] == doctest::Approx(base.values[m]).epsilon(1e-6));
  }
}

TEST_CASE("normalize_map scales to unit max and is idempotent") {
  ActivationMap map;
  map.values = (Eigen::ArrayXf(3) << 0.0f, 2.0f, 4.0f).finished();
  ActivationMap n = normalize_map(map);
  CHECK(n.normalized);
  CHECK(n.values[0] == 0.0f);
  CHECK(n.values[1] == doctest::Approx(0.5f));
  CHECK(n.values[2] == doctest::Approx(1.0f));

  ActivationMap nn = normalize_map(n);
  CHECK((nn.values - n.values).abs().maxCoeff() == 0.0f);

  ActivationMap zero;
  zero.values = Eigen::ArrayXf::Zero(4);
  ActivationMap nz = normalize_map(zero);
  CHECK(nz.normalized);
  CHECK(nz.values.abs().maxCoeff() == 0.0f);
}

TEST_CASE("threshold_fuse tags positions against the map") {
  RngStream rng(17);
  Codebook cb = random_codebook(3, 4, rng);
  FeatureGrid f = random_grid(3, 3, rng);
  QuantizationResult r = quantize_nearest(f, cb);

  ActivationMap map;
  map.values = (Eigen::ArrayXf(3) << 0.0f, 0.5f, 1.0f).finished();
  map.normalized = true;

  HybridSymbolStream s = threshold_fuse(f, r, map, 0.3f);
  REQUIRE(s.entries.size() == 3);
  CHECK(s.entries[0].tag == SymbolTag::kIndex);
  CHECK(s.entries[1].tag == SymbolTag::kRaw);
  CHECK(s.entries[2].tag == SymbolTag::kRaw);
  CHECK(s.k_count == 4);
  CHECK(s.raw_fraction() == doctest::Approx(2.0 / 3.0));

  // T >= 1 on a normalized map forces pure VQ.
  HybridSymbolStream pure = threshold_fuse(f, r, map, 1.0f);
  for (const SymbolEntry& e : pure.entries) {
    CHECK(e.tag == SymbolTag::kIndex);
  }

  // Inverted convention flips each tag.
  HybridSymbolStream inv = threshold_fuse(f, r, map, 0.3f, /*invert=*/true);
  for (size_t i = 0; i < 3; ++i) {
    CHECK((inv.entries[i].tag == SymbolTag::kRaw) ==
          (s.entries[i].tag == SymbolTag::kIndex));
  }

  ActivationMap not_norm;
  not_norm.values = map.values;
  not_norm.normalized = false;
  CHECK_THROWS_AS(threshold_fuse(f, r, not_norm, 0.3f), ConfigError);
  CHECK_THROWS_AS(threshold_fuse(f, r, map, -0.1f), ConfigError);
}

TEST_CASE("INDEX coverage grows monotonically with the threshold") {
  RngStream rng(19);
  Codebook cb = random_codebook(4, 8, rng);
  FeatureGrid f = random_grid(4, 40, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  ActivationMap map =
      normalize_map(activation_map(f, channel_weights(vq_loss_gradient(
                                          f, r, 0.25f))));

  int prev_index_count = -1;
  for (int step = 0; step <= 10; ++step) {
    const float t = 0.1f * static_cast<float>(step);
    HybridSymbolStream s = threshold_fuse(f, r, map, t);
    int index_count = 0;
    for (const SymbolEntry& e : s.entries) {
      if (e.tag == SymbolTag::kIndex) ++index_count;
    }
    CHECK(index_count >= prev_index_count);  // raw count non-increasing in T
    prev_index_count = index_count;
  }
}

TEST_CASE("defuse reconstructs codewords and raw payloads") {
  RngStream rng(23);
  Codebook cb = random_codebook(3, 5, rng);
  FeatureGrid f = random_grid(3, 12, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  ActivationMap map =
      normalize_map(activation_map(f, channel_weights(vq_loss_gradient(
                                          f, r, 0.25f))));

  // All-INDEX stream returns the quantized grid exactly.
  HybridSymbolStream all_index = threshold_fuse(f, r, map, 1.0f);
  FeatureGrid qhat = defuse(all_index, cb);
  CHECK((qhat - r.quantized).cwiseAbs().maxCoeff() == 0.0f);

  // All-RAW stream returns the original features exactly (no serialization
  // in this module).
  HybridSymbolStream all_raw = threshold_fuse(f, r, map, 1.0f, /*invert=*/true);
  REQUIRE(all_raw.raw_fraction() == 1.0);
  FeatureGrid fhat = defuse(all_raw, cb);
  CHECK((fhat - f).cwiseAbs().maxCoeff() == 0.0f);

  // Mixed stream: total error comes from INDEX positions alone.
  HybridSymbolStream mixed = threshold_fuse(f, r, map, 0.4f);
  FeatureGrid mhat = defuse(mixed, cb);
  double expected = 0.0;
  for (int m = 0; m < 12; ++m) {
    if (mixed.entries[static_cast<size_t>(m)].tag == SymbolTag::kIndex) {
      expected += (r.quantized.col(m) - f.col(m)).cast<double>().squaredNorm();
    }
  }
  const double got = (mhat - f).cast<double>().squaredNorm();
  CHECK(got == doctest::Approx(expected).epsilon(1e-6));

  // Distortion dominance holds per position.
  for (int m = 0; m < 12; ++m) {
    const double fused = (mhat.col(m) - f.col(m)).cast<double>().norm();
    const double vq = (r.quantized.col(m) - f.col(m)).cast<double>().norm();
    CHECK(fused <= vq + 1e-9);
  }
}

TEST_CASE("defuse validates the codebook against the stream header") {
  RngStream rng(29);
  Codebook cb = random_codebook(3, 5, rng);
  FeatureGrid f = random_grid(3, 4, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  ActivationMap map;
  map.values = Eigen::ArrayXf::Zero(4);
  map.normalized = true;
  HybridSymbolStream s = threshold_fuse(f, r, map, 0.3f);

  Codebook wrong_k = random_codebook(3, 6, rng);
  CHECK_THROWS_AS(defuse(s, wrong_k), ConfigError);
  Codebook wrong_dim = random_codebook(4, 5, rng);
  CHECK_THROWS_AS(defuse(s, wrong_dim), ShapeError);

  HybridSymbolStream corrupted = s;
  corrupted.entries[0].index = 7;  // beyond K=5
  CHECK_THROWS_AS(defuse(corrupted, cb), ConfigError);
}

TEST_CASE("streams compare by content") {
  RngStream rng(31);
  Codebook cb = random_codebook(2, 4, rng);
  FeatureGrid f = random_grid(2, 6, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  ActivationMap map =
      normalize_map(activation_map(f, channel_weights(vq_loss_gradient(
                                          f, r, 0.25f))));
  HybridSymbolStream a = threshold_fuse(f, r, map, 0.5f);
  HybridSymbolStream b = threshold_fuse(f, r, map, 0.5f);
  CHECK(streams_equal(a, b));
  if (!b.entries.empty()) {
    if (b.entries[0].tag == SymbolTag::kIndex) {
      b.entries[0].index ^= 1u;
    } else {
      b.entries[0].raw[0] += 1.0f;
    }
    CHECK_FALSE(streams_equal(a, b));
  }
}
