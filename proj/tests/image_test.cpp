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

#include "amvq/image.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "amvq/common.hpp"
#include "doctest.h"

namespace amvq {
namespace {

// An image whose values already sit on the 8-bit grid, so a save/load cycle
// must reproduce it exactly.
Tensor quantized_image(int h, int w, uint64_t seed) {
  RngStream rng(seed);
  Tensor x = Tensor::zeros({3, h, w});
  Eigen::ArrayXf& v = x.mutable_value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto byte = static_cast<float>(rng.next_index(256));
    v[i] = byte / 127.5f - 1.0f;
  }
  return x;
}

struct TempFile {
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
  std::string path;
};

}  // namespace

TEST_CASE("png save/load round-trips byte-exactly") {
  Tensor x = quantized_image(12, 20, 7);
  TempFile file("image_test_roundtrip.png");
  save_image(file.path, x);
  Tensor y = load_image(file.path);
  REQUIRE(y.shape() == x.shape());
  for (Eigen::Index i = 0; i < x.value().size(); ++i) {
    CHECK(y.value()[i] == x.value()[i]);
  }
}

TEST_CASE("ppm save/load round-trips byte-exactly") {
  Tensor x = quantized_image(9, 15, 8);
  TempFile file("image_test_roundtrip.ppm");
  save_image(file.path, x);
  Tensor y = load_image(file.path);
  REQUIRE(y.shape() == x.shape());
  for (Eigen::Index i = 0; i < x.value().size(); ++i) {
    CHECK(y.value()[i] == x.value()[i]);
  }
}

TEST_CASE("out-of-range values saturate at the 8-bit rails") {
  Tensor x = Tensor::zeros({3, 2, 2});
  x.mutable_value().setConstant(5.0f);
  x.mutable_value()[0] = -3.0f;
  TempFile file("image_test_clamp.ppm");
  save_image(file.path, x);
  Tensor y = load_image(file.path);
  CHECK(y.value()[0] == doctest::Approx(-1.0f));
  CHECK(y.value()[1] == doctest::Approx(1.0f));
}

TEST_CASE("format detection reads magic bytes, not the extension") {
  Tensor x = quantized_image(4, 6, 9);
  TempFile ppm_as_bin("image_test_magic.bin");
  save_image("image_test_magic.ppm", x);
  std::filesystem::rename("image_test_magic.ppm", ppm_as_bin.path);
  Tensor y = load_image(ppm_as_bin.path);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("io errors carry the offending path") {
  CHECK_THROWS_AS(load_image("image_test_missing.png"), IoError);

  TempFile junk("image_test_junk.png");
  std::ofstream(junk.path) << "this is not an image";
  CHECK_THROWS_AS(load_image(junk.path), IoError);

  Tensor x = quantized_image(2, 2, 1);
  CHECK_THROWS_AS(save_image("image_test.bmp", x), ConfigError);
  Tensor flat = Tensor::zeros({4});
  CHECK_THROWS_AS(save_image("image_test.png", flat), ShapeError);
}

TEST_CASE("truncated ppm payload is rejected") {
  TempFile file("image_test_trunc.ppm");
  std::ofstream(file.path, std::ios::binary) << "P6\n4 4\n255\nabc";
  CHECK_THROWS_AS(load_image(file.path), IoError);
}

TEST_CASE("bilinear resize: identity, constants, and affine images") {
  Tensor x = quantized_image(8, 10, 11);
  Tensor same = resize_bilinear(x, 8, 10);
  for (Eigen::Index i = 0; i < x.value().size(); ++i) {
    CHECK(same.value()[i] == x.value()[i]);
  }

  Tensor flat = Tensor::full({2, 6, 6}, 0.37f);
  Tensor up = resize_bilinear(flat, 13, 9);
  CHECK(up.dim(1) == 13);
  CHECK(up.dim(2) == 9);
  for (Eigen::Index i = 0; i < up.value().size(); ++i) {
    CHECK(up.value()[i] == doctest::Approx(0.37f));
  }

  // Bilinear interpolation reproduces affine images exactly away from the
  // clamped border, where sampling degenerates to nearest-edge.
  const int in_h = 16, in_w = 16;
  Tensor affine = Tensor::zeros({1, in_h, in_w});
  for (int r = 0; r < in_h; ++r) {
    for (int c = 0; c < in_w; ++c) {
      affine.mutable_value()[r * in_w + c] = 0.03f * r - 0.02f * c + 0.1f;
    }
  }
  const int out_h = 24, out_w = 40;
  Tensor big = resize_bilinear(affine, out_h, out_w);
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  for (int r = 2; r < out_h - 2; ++r) {
    for (int c = 2; c < out_w - 2; ++c) {
      const double src_r = (r + 0.5) * sy - 0.5;
      const double src_c = (c + 0.5) * sx - 0.5;
      const double expected = 0.03 * src_r - 0.02 * src_c + 0.1;
      CHECK(big.value()[r * out_w + c] ==
            doctest::Approx(expected).epsilon(1e-5));
    }
  }

  CHECK_THROWS_AS(resize_bilinear(x, 0, 5), ConfigError);
  CHECK_THROWS_AS(resize_bilinear(flat, -1, 5), ConfigError);
}

}  // namespace amvq
