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
//
// 8-bit RGB image files (PNG and binary PPM) as [3,H,W] tensors in [-1,1].

#ifndef AMVQ_IMAGE_HPP_
#define AMVQ_IMAGE_HPP_

#include <string>

#include "amvq/tensor.hpp"

namespace amvq {

// Loads a PNG or binary PPM (detected from the file's magic bytes) as a
// [3,H,W] tensor with values byte/127.5 - 1. Grayscale and paletted PNGs are
// expanded to RGB; alpha is dropped.
Tensor load_image(const std::string& path);

// Writes a [3,H,W] tensor as PNG or binary PPM depending on the extension
// (".png" or ".ppm"). Values are clamped to [-1,1] and mapped to
// round((v + 1) * 127.5).
void save_image(const std::string& path, const Tensor& image);

// Bilinear resampling of a [C,H,W] tensor with the half-pixel-center
// convention (source = (dest + 0.5) * scale - 0.5, edges clamped).
Tensor resize_bilinear(const Tensor& image, int out_height, int out_width);

}  // namespace amvq

#endif  // AMVQ_IMAGE_HPP_
