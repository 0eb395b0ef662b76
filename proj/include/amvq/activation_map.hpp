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
// Quantization-distortion activation maps: channel weights from the
// gradient of the quantization loss, a ReLU-pooled per-position map,
// thresholding, and fusion of raw features with quantized indices.

#ifndef AMVQ_ACTIVATION_MAP_HPP_
#define AMVQ_ACTIVATION_MAP_HPP_

#include <cstdint>
#include <vector>

#include "amvq/common.hpp"
#include "amvq/quantizer.hpp"

namespace amvq {

struct ActivationMap {
  Eigen::ArrayXf values;   // one non-negative activation per position m
  bool normalized = false;
  // Spatial arrangement of the M positions (rows x cols); 1 x M when the
  // producer has no grid to report.
  int grid_h = 1;
  int grid_w = 0;
};

enum class SymbolTag : uint8_t { kIndex = 0, kRaw = 1 };

struct SymbolEntry {
  SymbolTag tag = SymbolTag::kIndex;
  uint32_t index = 0;    // meaningful when tag == kIndex
  Eigen::VectorXf raw;   // meaningful when tag == kRaw; length L_dim
};

// Per-position hybrid of codebook indices and raw feature payloads, plus the
// header fields a receiver needs to interpret them.
struct HybridSymbolStream {
  std::vector<SymbolEntry> entries;
  int m_count = 0;
  int l_dim = 0;
  int k_count = 0;

  double raw_fraction() const;
};

bool streams_equal(const HybridSymbolStream& a, const HybridSymbolStream& b);

// Gradient of the quantization loss w.r.t. the feature grid; analytically
// 2*beta*(f - quantized) per position. Throws ConfigError when `result` was
// not produced from this exact `f` (stale indices).
FeatureGrid vq_loss_gradient(const FeatureGrid& f,
                             const QuantizationResult& result, float beta);

// Same quantity obtained by recording the loss with tensor-core and running
// backward; exists so the two routes can be cross-checked.
FeatureGrid vq_loss_gradient_autodiff(const FeatureGrid& f,
                                      const QuantizationResult& result,
                                      float beta);

// Global average pooling of the gradient grid over positions:
// alpha_l = (1/M) sum_m grad[l][m]. `absolute` averages |grad| instead
// (signed is the default convention).
Eigen::ArrayXf channel_weights(const FeatureGrid& grad_grid,
                               bool absolute = false);

// L^am_m = ReLU( sum_l alpha_l * f_m[l] ); unnormalized.
ActivationMap activation_map(const FeatureGrid& f,
                             const Eigen::ArrayXf& alpha);

// Scales the map by its max so values land in [0,1]; an all-zero map is
// returned unchanged apart from the normalized flag.
ActivationMap normalize_map(const ActivationMap& map);

// Entry m becomes INDEX(k_m) when map[m] <= threshold and RAW(f_m)
// otherwise; `invert` tests the opposite convention (quantize where the map
// exceeds the threshold). The map must be normalized.
HybridSymbolStream threshold_fuse(const FeatureGrid& f,
                                  const QuantizationResult& result,
                                  const ActivationMap& map, float threshold,
                                  bool invert = false);

// Reconstructs the feature grid: codeword z_k for INDEX entries, the stored
// payload for RAW entries.
FeatureGrid defuse(const HybridSymbolStream& stream, const Codebook& cb);

}  // namespace amvq

#endif  // AMVQ_ACTIVATION_MAP_HPP_
