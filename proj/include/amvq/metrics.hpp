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
// Viewport-based quality metrics for equirectangular panoramas: gnomonic
// viewport extraction, VPSNR, VSSIM, and a frozen-conv perceptual distance.

#ifndef AMVQ_METRICS_HPP_
#define AMVQ_METRICS_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "amvq/codec.hpp"
#include "amvq/common.hpp"
#include "amvq/tensor.hpp"

namespace amvq {

// A rectilinear (gnomonic) camera looking into the panorama. Angles in
// radians; fov is the horizontal field of view.
struct ViewportSpec {
  double yaw = 0.0;
  double pitch = 0.0;
  double fov = 1.5707963267948966;  // pi/2
  int out_width = 256;
  int out_height = 256;

  void validate() const;  // throws ConfigError on violations
};

using ViewportSet = std::vector<ViewportSpec>;

// Eight equatorial viewports, yaw stepping 45 degrees, fov 90 degrees,
// square output no larger than the panorama height.
ViewportSet default_viewport_set(int equirect_height);

struct SphereCoord {
  double lambda = 0.0;  // longitude, [-pi, pi)
  double phi = 0.0;     // latitude, [-pi/2, pi/2]
};

// Continuous viewport pixel coordinates (row, col measure pixel centers at
// integer + 0.5) to sphere direction and back. The inverse returns false for
// directions behind the camera plane.
SphereCoord viewport_to_sphere(const ViewportSpec& spec, double row,
                               double col);
bool sphere_to_viewport(const ViewportSpec& spec, const SphereCoord& dir,
                        double* row, double* col);

// Sphere direction to continuous equirectangular coordinates, u in [0, W),
// v in [0, H], matching the sampling convention of extract_viewport.
void sphere_to_equirect(const SphereCoord& dir, int width, int height,
                        double* u, double* v);

// Bilinear gnomonic resampling. Longitude wraps, latitude clamps. The input
// is [C,H,W]; 2:1 equirectangular is the standard but any aspect is sampled
// with the same angular mapping.
Tensor extract_viewport(const Tensor& equirect, const ViewportSpec& spec);

// Mean over viewports of 10*log10(255^2 / MSE) with pixel values mapped from
// [-1,1] to the 8-bit range; each viewport's PSNR is capped at 100 dB.
double vpsnr(const Tensor& x, const Tensor& x_hat,
             const ViewportSet& viewports);

// Mean over viewports of single-scale SSIM on the BT.601 luminance channel:
// 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 255,
// valid-mode windows. Viewports smaller than the window are an error.
double vssim(const Tensor& x, const Tensor& x_hat,
             const ViewportSet& viewports);

// Three stride-2 conv+ReLU blocks with frozen random weights; the third
// block's output is the feature map used by perceptual_loss.
struct PerceptualExtractor {
  std::vector<ConvParam> blocks;
  Tensor forward(const Tensor& image) const;  // [C,H,W] -> [1,c3,H/8,W/8]
};

// Deterministic frozen extractor; the default seed is the one all reported
// numbers use. Externally trained weights can be swapped in via the file
// round-trip below.
PerceptualExtractor make_perceptual_extractor(uint64_t seed = 1234,
                                              int in_channels = 3);
void save_perceptual_extractor(const std::string& path,
                               const PerceptualExtractor& extractor);
PerceptualExtractor load_perceptual_extractor(const std::string& path);

// Mean squared difference between third-block features of the two images.
double perceptual_loss(const Tensor& x, const Tensor& x_hat,
                       const PerceptualExtractor& extractor);

}  // namespace amvq

#endif  // AMVQ_METRICS_HPP_
