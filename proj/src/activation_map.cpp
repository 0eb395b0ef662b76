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

#include <cmath>

#include "amvq/tensor.hpp"

namespace amvq {

double HybridSymbolStream::raw_fraction() const {
  if (entries.empty()) return 0.0;
  size_t raw = 0;
  for (const SymbolEntry& e : entries) {
    if (e.tag == SymbolTag::kRaw) ++raw;
  }
  return static_cast<double>(raw) / static_cast<double>(entries.size());
}

bool streams_equal(const HybridSymbolStream& a, const HybridSymbolStream& b) {
  if (a.m_count != b.m_count || a.l_dim != b.l_dim || a.k_count != b.k_count ||
      a.entries.size() != b.entries.size()) {
    return false;
  }
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const SymbolEntry& ea = a.entries[i];
    const SymbolEntry& eb = b.entries[i];
    if (ea.tag != eb.tag) return false;
    if (ea.tag == SymbolTag::kIndex) {
      if (ea.index != eb.index) return false;
    } else {
      if (ea.raw.size() != eb.raw.size()) return false;
      for (Eigen::Index l = 0; l < ea.raw.size(); ++l) {
        if (ea.raw[l] != eb.raw[l]) return false;
      }
    }
  }
  return true;
}

namespace {

void check_result_matches(const FeatureGrid& f,
                          const QuantizationResult& result, const char* op) {
  if (result.quantized.rows() != f.rows() ||
      result.quantized.cols() != f.cols() ||
      static_cast<Eigen::Index>(result.indices.size()) != f.cols()) {
    throw ShapeError(std::string(op) +
                     ": quantization result shape does not match features");
  }
  if (result.feature_fingerprint != fingerprint_features(f)) {
    throw ConfigError(std::string(op) +
                      ": stale quantization result (features changed since "
                      "quantize_nearest)");
  }
}

}  // namespace

FeatureGrid vq_loss_gradient(const FeatureGrid& f,
                             const QuantizationResult& result, float beta) {
  check_result_matches(f, result, "vq_loss_gradient");
  return 2.0f * beta * (f - result.quantized);
}

FeatureGrid vq_loss_gradient_autodiff(const FeatureGrid& f,
                                      const QuantizationResult& result,
                                      float beta) {
  check_result_matches(f, result, "vq_loss_gradient_autodiff");
  Tensor ft = feature_grid_to_tensor(f, /*requires_grad=*/true);
  Tensor qt = feature_grid_to_tensor(result.quantized);
  Tensor loss = squared_l2(stop_gradient(ft) - qt) +
                scale(squared_l2(ft - stop_gradient(qt)), beta);
  backward(loss);
  Tensor grad = Tensor::from_data(ft.shape(), ft.grad());
  return tensor_to_feature_grid(grad);
}

Eigen::ArrayXf channel_weights(const FeatureGrid& grad_grid, bool absolute) {
  const int l_dim = static_cast<int>(grad_grid.rows());
  const int m_count = static_cast<int>(grad_grid.cols());
  Eigen::ArrayXf alpha = Eigen::ArrayXf::Zero(l_dim);
  if (m_count == 0) return alpha;
  for (int l = 0; l < l_dim; ++l) {
    double acc = 0.0;
    for (int m = 0; m < m_count; ++m) {
      const double g = grad_grid(l, m);
      acc += absolute ? std::abs(g) : g;
    }
    alpha[l] = static_cast<float>(acc / m_count);
  }
  return alpha;
}

ActivationMap activation_map(const FeatureGrid& f,
                             const Eigen::ArrayXf& alpha) {
  if (alpha.size() != f.rows()) {
    throw ShapeError("activation_map: alpha length " +
                     std::to_string(alpha.size()) + " vs feature dim " +
                     std::to_string(f.rows()));
  }
  ActivationMap map;
  map.values.resize(f.cols());
  for (int m = 0; m < f.cols(); ++m) {
    double acc = 0.0;
    for (int l = 0; l < f.rows(); ++l) {
      acc += static_cast<double>(alpha[l]) * f(l, m);
    }
    map.values[m] = static_cast<float>(std::max(0.0, acc));
  }
  map.normalized = false;
  map.grid_h = 1;
  map.grid_w = static_cast<int>(f.cols());
  return map;
}

ActivationMap normalize_map(const ActivationMap& map) {
  ActivationMap out = map;
  const float max_v = map.values.size() > 0 ? map.values.maxCoeff() : 0.0f;
  if (max_v > 0.0f) out.values /= max_v;
  out.normalized = true;
  return out;
}

HybridSymbolStream threshold_fuse(const FeatureGrid& f,
                                  const QuantizationResult& result,
                                  const ActivationMap& map, float threshold,
                                  bool invert) {
  check_result_matches(f, result, "threshold_fuse");
  if (!map.normalized) {
    throw ConfigError(
        "threshold_fuse: map must be normalized before thresholding");
  }
  if (map.values.size() != f.cols()) {
    throw ShapeError("threshold_fuse: map has " +
                     std::to_string(map.values.size()) + " positions vs " +
                     std::to_string(f.cols()) + " features");
  }
  if (threshold < 0.0f) {
    throw ConfigError("threshold_fuse: threshold must be >= 0, got " +
                      std::to_string(threshold));
  }

  HybridSymbolStream stream;
  stream.m_count = static_cast<int>(f.cols());
  stream.l_dim = static_cast<int>(f.rows());
  stream.k_count = result.k_count;
  stream.entries.resize(static_cast<size_t>(stream.m_count));
  for (int m = 0; m < stream.m_count; ++m) {
    const bool quantize_here = invert ? (map.values[m] > threshold)
                                      : (map.values[m] <= threshold);
    SymbolEntry& e = stream.entries[static_cast<size_t>(m)];
    if (quantize_here) {
      e.tag = SymbolTag::kIndex;
      e.index = static_cast<uint32_t>(result.indices[static_cast<size_t>(m)]);
    } else {
      e.tag = SymbolTag::kRaw;
      e.raw = f.col(m);
    }
  }
  return stream;
}

FeatureGrid defuse(const HybridSymbolStream& stream, const Codebook& cb) {
  cb.validate();
  if (stream.l_dim != cb.L_dim()) {
    throw ShapeError("defuse: stream dim " + std::to_string(stream.l_dim) +
                     " vs codebook dim " + std::to_string(cb.L_dim()));
  }
  if (stream.k_count != cb.K()) {
    throw ConfigError("defuse: stream expects a codebook of " +
                      std::to_string(stream.k_count) + " codewords, have " +
                      std::to_string(cb.K()));
  }
  if (static_cast<int>(stream.entries.size()) != stream.m_count) {
    throw ShapeError("defuse: entry count " +
                     std::to_string(stream.entries.size()) + " vs header M=" +
                     std::to_string(stream.m_count));
  }
  FeatureGrid out(cb.L_dim(), stream.m_count);
  for (int m = 0; m < stream.m_count; ++m) {
    const SymbolEntry& e = stream.entries[static_cast<size_t>(m)];
    if (e.tag == SymbolTag::kIndex) {
      if (e.index >= static_cast<uint32_t>(cb.K())) {
        throw ConfigError("defuse: index " + std::to_string(e.index) +
                          " out of range [0," + std::to_string(cb.K()) + ")");
      }
      out.col(m) = cb.vectors.col(static_cast<int>(e.index));
    } else {
      if (e.raw.size() != cb.L_dim()) {
        throw ShapeError("defuse: raw payload length " +
                         std::to_string(e.raw.size()) + " vs dim " +
                         std::to_string(cb.L_dim()));
      }
      out.col(m) = e.raw;
    }
  }
  return out;
}

}  // namespace amvq
