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

#include "amvq/quantizer.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
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

// Independent double-loop nearest-neighbor scan (the oracle the main path is
// checked against).
std::vector<int> brute_force_nearest(const FeatureGrid& f,
                                     const Codebook& cb) {
  std::vector<int> out(static_cast<size_t>(f.cols()));
  for (int m = 0; m < f.cols(); ++m) {
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (int k = 0; k < cb.K(); ++k) {
      double d = 0.0;
      for (int l = 0; l < cb.L_dim(); ++l) {
        const double diff =
            static_cast<double>(f(l, m)) - static_cast<double>(cb.vectors(l, k));
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_k = k;
      }
    }
    out[static_cast<size_t>(m)] = best_k;
  }
  return out;
}

}  // namespace

TEST_CASE("quantize_nearest picks the hand-checked codeword") {
  Codebook cb;
  cb.vectors.resize(2, 2);
  cb.vectors.col(0) << 0.0f, 0.0f;
  cb.vectors.col(1) << 1.0f, 1.0f;
  FeatureGrid f(2, 1);
  f.col(0) << 0.2f, 0.1f;  // distances^2: 0.05 vs 1.45
  QuantizationResult r = quantize_nearest(f, cb);
  CHECK(r.indices[0] == 0);
  CHECK(r.quantized(0, 0) == 0.0f);
  CHECK(r.vq_loss == doctest::Approx(0.05f));
}

TEST_CASE("quantize_nearest on an exact codeword gives zero error") {
  RngStream rng(3);
  Codebook cb = random_codebook(4, 6, rng);
  FeatureGrid f(4, 1);
  f.col(0) = cb.vectors.col(3);
  QuantizationResult r = quantize_nearest(f, cb);
  CHECK(r.indices[0] == 3);
  CHECK(r.vq_loss == 0.0f);
  CHECK((r.quantized.col(0) - cb.vectors.col(3)).norm() == 0.0f);
}

TEST_CASE("quantize_nearest matches the brute-force oracle (M=32,L=8,K=16)") {
  RngStream rng(7);
  Codebook cb = random_codebook(8, 16, rng);
  FeatureGrid f = random_grid(8, 32, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  std::vector<int> oracle = brute_force_nearest(f, cb);
  REQUIRE(r.indices.size() == oracle.size());
  for (size_t i = 0; i < oracle.size(); ++i) CHECK(r.indices[i] == oracle[i]);
}

TEST_CASE("quantize_nearest matches brute force across random instances") {
  RngStream rng(11);
  const int cases[][3] = {{3, 5, 2}, {8, 64, 33}, {2, 256, 1024}, {16, 31, 7}};
  for (auto [l, m, k] : cases) {
    Codebook cb = random_codebook(l, k, rng);
    FeatureGrid f = random_grid(l, m, rng);
    QuantizationResult r = quantize_nearest(f, cb);
    std::vector<int> oracle = brute_force_nearest(f, cb);
    for (size_t i = 0; i < oracle.size(); ++i) {
      CHECK(r.indices[i] == oracle[i]);
    }
    // Optimality: selected codeword is at least as close as every other.
    for (int mi = 0; mi < m; ++mi) {
      const double chosen =
          (f.col(mi) - r.quantized.col(mi)).cast<double>().squaredNorm();
      for (int kj = 0; kj < k; ++kj) {
        const double alt =
            (f.col(mi) - cb.vectors.col(kj)).cast<double>().squaredNorm();
        CHECK(chosen <= alt + 1e-12);
      }
    }
  }
}

TEST_CASE("duplicating a codeword never changes selected indices") {
  RngStream rng(13);
  Codebook cb = random_codebook(4, 8, rng);
  FeatureGrid f = random_grid(4, 24, rng);
  QuantizationResult base = quantize_nearest(f, cb);

  for (int dup = 0; dup < 8; ++dup) {
    Codebook extended;
    extended.vectors.resize(4, 9);
    extended.vectors.leftCols(8) = cb.vectors;
    extended.vectors.col(8) = cb.vectors.col(dup);
    QuantizationResult r = quantize_nearest(f, extended);
    for (size_t i = 0; i < base.indices.size(); ++i) {
      CHECK(r.indices[i] == base.indices[i]);  // lowest index wins the tie
    }
  }
}

TEST_CASE("quantize_nearest rejects bad inputs") {
  Codebook tiny;
  tiny.vectors.resize(2, 1);
  tiny.vectors.setZero();
  FeatureGrid f = FeatureGrid::Zero(2, 3);
  CHECK_THROWS_AS(quantize_nearest(f, tiny), ConfigError);

  Codebook cb;
  cb.vectors = Eigen::MatrixXf::Zero(3, 4);
  CHECK_THROWS_AS(quantize_nearest(f, cb), ShapeError);

  Codebook nan_cb;
  nan_cb.vectors = Eigen::MatrixXf::Zero(2, 4);
  nan_cb.vectors(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(quantize_nearest(f, nan_cb), ConfigError);
}

TEST_CASE("vq_loss arithmetic and gradient routing") {
  Codebook cb;
  cb.vectors = Eigen::MatrixXf::Zero(2, 2);
  cb.vectors.col(1) << 5.0f, 5.0f;  // far; position picks codeword 0
  FeatureGrid f(2, 1);
  f.col(0) << 1.0f, 0.0f;
  QuantizationResult r = quantize_nearest(f, cb);
  REQUIRE(r.indices[0] == 0);
  CHECK(vq_loss_value(f, r, 0.25f) == doctest::Approx(1.25f));

  // Graph route: gradient w.r.t. f is 2*beta*(f - z) = (0.5, 0); gradient
  // w.r.t. the selected codeword is 2*(z - f) = (-2, 0).
  Tensor ft = feature_grid_to_tensor(f, /*requires_grad=*/true);
  Tensor ct = codebook_to_tensor(cb, /*requires_grad=*/true);
  Tensor loss = build_vq_loss(ft, ct, r.indices, 0.25f);
  CHECK(loss.item() == doctest::Approx(1.25f));
  backward(loss);
  CHECK(ft.grad()[0] == doctest::Approx(0.5f));
  CHECK(ft.grad()[1] == doctest::Approx(0.0f));
  CHECK(ct.grad()[0] == doctest::Approx(-2.0f));
  CHECK(ct.grad()[1] == doctest::Approx(0.0f));
  CHECK(ct.grad()[2] == 0.0f);  // unselected codeword untouched
  CHECK(ct.grad()[3] == 0.0f);
}

TEST_CASE("vq_loss is zero with zero gradients at exact match") {
  RngStream rng(17);
  Codebook cb = random_codebook(3, 4, rng);
  FeatureGrid f(3, 2);
  f.col(0) = cb.vectors.col(1);
  f.col(1) = cb.vectors.col(2);
  QuantizationResult r = quantize_nearest(f, cb);
  CHECK(vq_loss_value(f, r, 0.25f) == 0.0f);

  Tensor ft = feature_grid_to_tensor(f, true);
  Tensor ct = codebook_to_tensor(cb, true);
  Tensor loss = build_vq_loss(ft, ct, r.indices, 0.25f);
  backward(loss);
  CHECK(ft.grad().abs().maxCoeff() == 0.0f);
  CHECK(ct.grad().abs().maxCoeff() == 0.0f);
}

TEST_CASE("vq_loss gradient matches finite differences") {
  RngStream rng(19);
  Codebook cb = random_codebook(4, 8, rng);
  FeatureGrid f = random_grid(4, 6, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  Tensor ct = codebook_to_tensor(cb);
  const std::vector<int> indices = r.indices;

  auto loss_of_f = [&](const Tensor& t) {
    return build_vq_loss(t, ct, indices, 0.25f);
  };
  Tensor f0 = feature_grid_to_tensor(f);
  CHECK(gradient_check(loss_of_f, f0, 1e-3f) < 1e-3f);

  // Analytic form 2*beta*(f_m - z_k) per position.
  Tensor fv = feature_grid_to_tensor(f, true);
  Tensor loss = build_vq_loss(fv, ct, indices, 0.25f);
  backward(loss);
  for (int m = 0; m < f.cols(); ++m) {
    for (int l = 0; l < 4; ++l) {
      const float expect =
          2.0f * 0.25f * (f(l, m) - r.quantized(l, m));
      CHECK(fv.grad()[m * 4 + l] == doctest::Approx(expect).epsilon(1e-4));
    }
  }
}

TEST_CASE("vq_loss is invariant under position permutation") {
  RngStream rng(23);
  Codebook cb = random_codebook(5, 7, rng);
  FeatureGrid f = random_grid(5, 9, rng);
  QuantizationResult r = quantize_nearest(f, cb);
  const float base = vq_loss_value(f, r, 0.25f);

  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[4]);
  FeatureGrid fp(5, 9);
  for (int m = 0; m < 9; ++m) fp.col(m) = f.col(perm[static_cast<size_t>(m)]);
  QuantizationResult rp = quantize_nearest(fp, cb);
  CHECK(vq_loss_value(fp, rp, 0.25f) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("straight_through forwards quantized values and identity gradient") {
  RngStream rng(29);
  FeatureGrid f = random_grid(3, 5, rng);
  Codebook cb = random_codebook(3, 4, rng);
  QuantizationResult r = quantize_nearest(f, cb);

  Tensor ft = feature_grid_to_tensor(f, true);
  Tensor qt = feature_grid_to_tensor(r.quantized);
  Tensor st = straight_through(ft, qt);
  // Forward equals quantized exactly.
  for (Eigen::Index i = 0; i < st.size(); ++i) {
    CHECK(st.value()[i] == qt.value()[i]);
  }
  backward(sum(st));
  for (Eigen::Index i = 0; i < ft.size(); ++i) {
    CHECK(ft.grad()[i] == 1.0f);  // exact identity pass-through
  }
}

TEST_CASE("quantized bottleneck still passes decoder gradients to weights") {
  // Tiny encoder-of-one-matmul -> quantize -> straight-through -> loss; the
  // weight gradient must be nonzero despite the hard assignment.
  RngStream rng(31);
  Tensor w = Tensor::from_data({2, 2}, (Eigen::ArrayXf(4) << 0.7f, -0.3f,
                                        0.4f, 0.9f)
                                           .finished(),
                               true);
  Tensor x = Tensor::from_data({3, 2}, (Eigen::ArrayXf(6) << 1, 0.5f, -1, 2,
                                        0.25f, -0.75f)
                                           .finished());
  Tensor feats = matmul(x, w);  // [3,2] features, requires grad via w
  Codebook cb = random_codebook(2, 4, rng);
  QuantizationResult r = quantize_nearest(tensor_to_feature_grid(feats), cb);
  Tensor st = straight_through(feats, feature_grid_to_tensor(r.quantized));
  backward(squared_l2(st));
  CHECK(w.grad().abs().maxCoeff() > 0.0f);
}

TEST_CASE("ema update with decay 0 snaps the codeword to its feature") {
  Codebook cb;
  cb.vectors = Eigen::MatrixXf::Zero(2, 2);
  cb.vectors.col(1) << 10.0f, 10.0f;
  FeatureGrid f(2, 1);
  f.col(0) << 0.5f, -0.5f;  // assigned to codeword 0
  QuantizationResult r = quantize_nearest(f, cb);
  REQUIRE(r.indices[0] == 0);

  CodebookEmaState state = CodebookEmaState::from_codebook(cb);
  CodebookUpdateOptions opts;
  opts.ema_decay = 0.0f;
  codebook_update(cb, f, r.indices, CodebookUpdateMode::kEma, opts, &state);
  CHECK(cb.vectors(0, 0) == doctest::Approx(0.5f));
  CHECK(cb.vectors(1, 0) == doctest::Approx(-0.5f));
  // Unassigned codeword stays exactly put.
  CHECK(cb.vectors(0, 1) == 10.0f);
  CHECK(cb.vectors(1, 1) == 10.0f);
}

TEST_CASE("unassigned codewords stay unchanged in both modes") {
  RngStream rng(37);
  for (CodebookUpdateMode mode :
       {CodebookUpdateMode::kLossGradient, CodebookUpdateMode::kEma}) {
    Codebook cb = random_codebook(3, 6, rng);
    const Eigen::MatrixXf before = cb.vectors;
    FeatureGrid f = random_grid(3, 10, rng);
    QuantizationResult r = quantize_nearest(f, cb);
    std::vector<bool> used(6, false);
    for (int idx : r.indices) used[static_cast<size_t>(idx)] = true;

    CodebookEmaState state = CodebookEmaState::from_codebook(cb);
    CodebookUpdateOptions opts;
    codebook_update(cb, f, r.indices, mode, opts,
                    mode == CodebookUpdateMode::kEma ? &state : nullptr);
    for (int k = 0; k < 6; ++k) {
      if (!used[static_cast<size_t>(k)]) {
        CHECK((cb.vectors.col(k) - before.col(k)).norm() == 0.0f);
      }
    }
  }
}

TEST_CASE("repeated updates shrink quantization error toward k-means level") {
  // Fixed 2-cluster synthetic features; reference error from a k-means run
  // on the same data.
  RngStream rng(41);
  const int per_cluster = 40;
  FeatureGrid f(2, 2 * per_cluster);
  for (int i = 0; i < per_cluster; ++i) {
    f(0, i) = 1.0f + 0.1f * static_cast<float>(rng.next_gaussian());
    f(1, i) = 1.0f + 0.1f * static_cast<float>(rng.next_gaussian());
    f(0, per_cluster + i) = -1.0f + 0.1f * static_cast<float>(rng.next_gaussian());
    f(1, per_cluster + i) = -1.0f + 0.1f * static_cast<float>(rng.next_gaussian());
  }

  // Reference: Lloyd iterations from the same deliberately-bad start.
  auto mean_q_error = [&](const Codebook& cb) {
    QuantizationResult r = quantize_nearest(f, cb);
    return (f - r.quantized).cast<double>().squaredNorm() / f.cols();
  };
  Codebook kmeans;
  kmeans.vectors.resize(2, 2);
  kmeans.vectors.col(0) << 0.5f, 0.5f;
  kmeans.vectors.col(1) << -0.2f, -0.2f;
  for (int it = 0; it < 100; ++it) {
    QuantizationResult r = quantize_nearest(f, kmeans);
    Eigen::MatrixXf sums = Eigen::MatrixXf::Zero(2, 2);
    Eigen::ArrayXf counts = Eigen::ArrayXf::Zero(2);
    for (int m = 0; m < f.cols(); ++m) {
      sums.col(r.indices[static_cast<size_t>(m)]) += f.col(m);
      counts[r.indices[static_cast<size_t>(m)]] += 1.0f;
    }
    for (int k = 0; k < 2; ++k) {
      if (counts[k] > 0) kmeans.vectors.col(k) = sums.col(k) / counts[k];
    }
  }
  const double kmeans_error = mean_q_error(kmeans);

  for (CodebookUpdateMode mode :
       {CodebookUpdateMode::kLossGradient, CodebookUpdateMode::kEma}) {
    Codebook cb;
    cb.vectors.resize(2, 2);
    cb.vectors.col(0) << 0.5f, 0.5f;
    cb.vectors.col(1) << -0.2f, -0.2f;
    CodebookEmaState state = CodebookEmaState::from_codebook(cb);
    CodebookUpdateOptions opts;
    opts.learning_rate = 0.002f;
    opts.ema_decay = 0.99f;

    const double initial = mean_q_error(cb);
    double prev = initial;
    double last = initial;
    for (int step = 0; step < 500; ++step) {
      QuantizationResult r = quantize_nearest(f, cb);
      codebook_update(cb, f, r.indices, mode, opts,
                      mode == CodebookUpdateMode::kEma ? &state : nullptr);
      last = mean_q_error(cb);
      if (step >= 50) {
        CHECK(last <= prev + 1e-9);  // monotone decrease after warm-up
      }
      prev = last;
    }
    CHECK(last < 0.1 * initial);
    CHECK(last < 4.0 * kmeans_error + 1e-6);
  }
}

TEST_CASE("feature seeding spreads codewords and handles K > samples") {
  RngStream rng(43);
  FeatureGrid f = random_grid(4, 32, rng);
  Codebook cb = init_codebook_from_features(f, 8, rng);
  CHECK(cb.K() == 8);
  CHECK(cb.L_dim() == 4);
  cb.validate();
  // Every seeded codeword is one of the samples.
  for (int k = 0; k < 8; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (int m = 0; m < 32; ++m) {
      best = std::min(best,
                      (cb.vectors.col(k) - f.col(m)).cast<double>().squaredNorm());
    }
    CHECK(best == 0.0);
  }

  FeatureGrid small = random_grid(4, 3, rng);
  Codebook big = init_codebook_from_features(small, 10, rng);
  CHECK(big.K() == 10);
  big.validate();
  // All codewords distinct even with only 3 distinct samples.
  for (int a = 0; a < 10; ++a) {
    for (int b = a + 1; b < 10; ++b) {
      CHECK((big.vectors.col(a) - big.vectors.col(b)).norm() > 0.0f);
    }
  }
}

TEST_CASE("codebook file round-trips byte-identically") {
  RngStream rng(47);
  Codebook cb = random_codebook(6, 12, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "amvq_cb_test.bin").string();
  save_codebook(path, cb);
  Codebook loaded = load_codebook(path);
  REQUIRE(loaded.K() == cb.K());
  REQUIRE(loaded.L_dim() == cb.L_dim());
  CHECK((loaded.vectors - cb.vectors).cwiseAbs().maxCoeff() == 0.0f);

  // Serialization determinism: saving the loaded codebook reproduces the
  // same bytes (transmitter and receiver share it verbatim).
  const std::string path2 =
      (std::filesystem::temp_directory_path() / "amvq_cb_test2.bin").string();
  save_codebook(path2, loaded);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)),
                 std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)),
                 std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}
