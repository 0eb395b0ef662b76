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
// Codebook storage, nearest-neighbor vector quantization, the two-term
// quantization loss with stop-gradient routing, straight-through gradient
// propagation, and codebook learning (loss-gradient and EMA modes).

#ifndef AMVQ_QUANTIZER_HPP_
#define AMVQ_QUANTIZER_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "amvq/common.hpp"
#include "amvq/tensor.hpp"

namespace amvq {

// One feature vector per spatial position: column m holds f_m (L_dim rows).
// The column-major layout is byte-identical to a row-major [M, L_dim] tensor.
using FeatureGrid = Eigen::MatrixXf;

struct Codebook {
  Eigen::MatrixXf vectors;  // L_dim x K; column k holds codeword z_k

  int K() const { return static_cast<int>(vectors.cols()); }
  int L_dim() const { return static_cast<int>(vectors.rows()); }

  // Enforces K >= 2 and finiteness of every codeword.
  void validate() const;
};

struct QuantizationResult {
  std::vector<int> indices;  // per position m, in [0, K)
  FeatureGrid quantized;     // L_dim x M, column m == vectors.col(indices[m])
  int k_count = 0;           // size of the codebook the indices refer to
  // Both loss terms evaluate to the same squared distance sum; they differ
  // only in which argument the gradient reaches (codebook vs encoder).
  float vq_loss = 0.0f;
  float commitment_loss = 0.0f;
  // Fingerprint of the feature grid this result was computed from; used to
  // detect stale results passed into gradient computations.
  uint64_t feature_fingerprint = 0;
};

uint64_t fingerprint_features(const FeatureGrid& f);

// Nearest codeword per column of f under squared L2; ties break toward the
// lowest index. Throws ConfigError on an invalid codebook and ShapeError on
// dimension mismatch.
QuantizationResult quantize_nearest(const FeatureGrid& f, const Codebook& cb);

// Total quantization loss: sum_m( ||sg[f_m] - z_k||^2 + beta ||f_m - sg[z_k]||^2 ).
float vq_loss_value(const FeatureGrid& f, const QuantizationResult& result,
                    float beta);

// Graph-recorded version of the same loss. `f` is [M, L_dim], `codebook` is
// [K, L_dim]; the gradient w.r.t. `codebook` flows through the first term
// only and the gradient w.r.t. `f` through the beta-weighted term only.
Tensor build_vq_loss(const Tensor& f, const Tensor& codebook,
                     const std::vector<int>& indices, float beta);

// Forward value equals `quantized`; backward passes gradients to `f`
// unchanged. Implemented as f + sg[quantized - f].
Tensor straight_through(const Tensor& f, const Tensor& quantized);

// Bridges between grid and graph representations ([M, L_dim] tensors).
Tensor feature_grid_to_tensor(const FeatureGrid& g, bool requires_grad = false);
FeatureGrid tensor_to_feature_grid(const Tensor& t);
Tensor codebook_to_tensor(const Codebook& cb, bool requires_grad = false);
Codebook tensor_to_codebook(const Tensor& t);

enum class CodebookUpdateMode { kLossGradient, kEma };

struct CodebookUpdateOptions {
  float learning_rate = 0.05f;  // loss-gradient mode step size
  float ema_decay = 0.99f;      // ema mode running-average decay
};

// Running EMA accumulators; assignments decay toward recent batches.
struct CodebookEmaState {
  Eigen::ArrayXf counts;   // K
  Eigen::MatrixXf sums;    // L_dim x K

  static CodebookEmaState from_codebook(const Codebook& cb);
};

// Moves assigned codewords toward their features. Loss-gradient mode runs an
// SGD step on the codebook term of the quantization loss; EMA mode tracks a
// decayed running mean of assigned features. Codewords with no assignments
// (and no accumulated mass) stay unchanged. `ema_state` is required in EMA
// mode and ignored otherwise.
void codebook_update(Codebook& cb, const FeatureGrid& f,
                     const std::vector<int>& indices, CodebookUpdateMode mode,
                     const CodebookUpdateOptions& opts,
                     CodebookEmaState* ema_state = nullptr);

// Greedy spread seeding from a sample of feature vectors: first center drawn
// uniformly, later centers proportional to squared distance from the chosen
// set. When K exceeds the sample count, remaining codewords are jittered
// copies of random samples.
Codebook init_codebook_from_features(const FeatureGrid& features, int k,
                                     RngStream& rng);

// Codebook file: little-endian u32 JSON length, JSON metadata
// {"K","L_dim","version"}, then the K x L_dim matrix as a tensor container.
void save_codebook(const std::string& path, const Codebook& cb);
Codebook load_codebook(const std::string& path);

}  // namespace amvq

#endif  // AMVQ_QUANTIZER_HPP_
