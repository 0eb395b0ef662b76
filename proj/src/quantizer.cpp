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

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace amvq {

void Codebook::validate() const {
  if (K() < 2) {
    throw ConfigError("codebook: need at least 2 codewords, have " +
                      std::to_string(K()));
  }
  if (!vectors.allFinite()) {
    throw ConfigError("codebook: non-finite codeword entries");
  }
}

uint64_t fingerprint_features(const FeatureGrid& f) {
  // FNV-1a over the raw float bytes.
  const auto* bytes = reinterpret_cast<const unsigned char*>(f.data());
  const size_t n = static_cast<size_t>(f.size()) * sizeof(float);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

QuantizationResult quantize_nearest(const FeatureGrid& f, const Codebook& cb) {
  cb.validate();
  if (f.rows() != cb.vectors.rows()) {
    throw ShapeError("quantize_nearest: feature dim " +
                     std::to_string(f.rows()) + " vs codebook dim " +
                     std::to_string(cb.vectors.rows()));
  }
  const int m_count = static_cast<int>(f.cols());
  const int k_count = cb.K();
  const int l_dim = cb.L_dim();

  QuantizationResult result;
  result.indices.resize(static_cast<size_t>(m_count));
  result.quantized.resize(l_dim, m_count);
  result.k_count = k_count;

  double total = 0.0;
  for (int m = 0; m < m_count; ++m) {
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (int k = 0; k < k_count; ++k) {
      double d = 0.0;
      for (int l = 0; l < l_dim; ++l) {
        const double diff = static_cast<double>(f(l, m)) - cb.vectors(l, k);
        d += diff * diff;
      }
      if (d < best) {  // strict: ties keep the lowest index
        best = d;
        best_k = k;
      }
    }
    result.indices[static_cast<size_t>(m)] = best_k;
    result.quantized.col(m) = cb.vectors.col(best_k);
    total += best;
  }
  result.vq_loss = static_cast<float>(total);
  result.commitment_loss = static_cast<float>(total);
  result.feature_fingerprint = fingerprint_features(f);
  return result;
}

float vq_loss_value(const FeatureGrid& f, const QuantizationResult& result,
                    float beta) {
  if (beta < 0.0f) {
    throw ConfigError("vq_loss: beta must be non-negative, got " +
                      std::to_string(beta));
  }
  if (f.cols() != result.quantized.cols() ||
      f.rows() != result.quantized.rows()) {
    throw ShapeError("vq_loss: feature grid does not match result shape");
  }
  const double d2 = (f - result.quantized).cast<double>().squaredNorm();
  return static_cast<float>(d2 * (1.0 + static_cast<double>(beta)));
}

Tensor build_vq_loss(const Tensor& f, const Tensor& codebook,
                     const std::vector<int>& indices, float beta) {
  if (f.rank() != 2 || codebook.rank() != 2 || f.dim(1) != codebook.dim(1)) {
    throw ShapeError("build_vq_loss: want [M,L] features and [K,L] codebook, "
                     "got " + shape_str(f.shape()) + " and " +
                     shape_str(codebook.shape()));
  }
  if (static_cast<int>(indices.size()) != f.dim(0)) {
    throw ShapeError("build_vq_loss: index count " +
                     std::to_string(indices.size()) + " vs M=" +
                     std::to_string(f.dim(0)));
  }
  Tensor q = index_select_rows(codebook, indices);
  Tensor codebook_term = squared_l2(stop_gradient(f) - q);
  Tensor commitment_term = squared_l2(f - stop_gradient(q));
  return codebook_term + scale(commitment_term, beta);
}

Tensor straight_through(const Tensor& f, const Tensor& quantized) {
  if (f.shape() != quantized.shape()) {
    throw ShapeError("straight_through: shape mismatch " +
                     shape_str(f.shape()) + " vs " +
                     shape_str(quantized.shape()));
  }
  // Semantically f + sg[quantized - f], recorded as one node so the forward
  // value is the quantized grid bit-for-bit and the backward rule is the
  // exact identity onto f.
  return make_op_result(
      f.shape(), quantized.value(), {f},
      [](detail::Node& n) {
        detail::Node& p = *n.parents[0];
        if (p.grad.size() == 0) p.grad = Eigen::ArrayXf::Zero(p.value.size());
        p.grad += n.grad;
      },
      "straight_through");
}

Tensor feature_grid_to_tensor(const FeatureGrid& g, bool requires_grad) {
  // Column-major L x M storage equals row-major [M, L] element order.
  Eigen::ArrayXf data =
      Eigen::Map<const Eigen::ArrayXf>(g.data(), g.size());
  return Tensor::from_data({static_cast<int>(g.cols()),
                            static_cast<int>(g.rows())},
                           std::move(data), requires_grad);
}

FeatureGrid tensor_to_feature_grid(const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError("tensor_to_feature_grid: want [M,L], got " +
                     shape_str(t.shape()));
  }
  return Eigen::Map<const FeatureGrid>(t.value().data(), t.dim(1), t.dim(0));
}

Tensor codebook_to_tensor(const Codebook& cb, bool requires_grad) {
  Eigen::ArrayXf data = Eigen::Map<const Eigen::ArrayXf>(cb.vectors.data(),
                                                         cb.vectors.size());
  return Tensor::from_data({cb.K(), cb.L_dim()}, std::move(data),
                           requires_grad);
}

Codebook tensor_to_codebook(const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError("tensor_to_codebook: want [K,L], got " +
                     shape_str(t.shape()));
  }
  Codebook cb;
  cb.vectors =
      Eigen::Map<const Eigen::MatrixXf>(t.value().data(), t.dim(1), t.dim(0));
  return cb;
}

CodebookEmaState CodebookEmaState::from_codebook(const Codebook& cb) {
  CodebookEmaState s;
  s.counts = Eigen::ArrayXf::Ones(cb.K());
  s.sums = cb.vectors;  // ratio sums/counts starts at the codewords
  return s;
}

void codebook_update(Codebook& cb, const FeatureGrid& f,
                     const std::vector<int>& indices, CodebookUpdateMode mode,
                     const CodebookUpdateOptions& opts,
                     CodebookEmaState* ema_state) {
  if (f.rows() != cb.vectors.rows()) {
    throw ShapeError("codebook_update: feature dim " +
                     std::to_string(f.rows()) + " vs codebook dim " +
                     std::to_string(cb.vectors.rows()));
  }
  if (static_cast<int>(indices.size()) != f.cols()) {
    throw ShapeError("codebook_update: index count " +
                     std::to_string(indices.size()) + " vs M=" +
                     std::to_string(f.cols()));
  }
  const int k_count = cb.K();
  for (int idx : indices) {
    if (idx < 0 || idx >= k_count) {
      throw ConfigError("codebook_update: index " + std::to_string(idx) +
                        " out of range [0," + std::to_string(k_count) + ")");
    }
  }

  if (mode == CodebookUpdateMode::kLossGradient) {
    // d/dz_k of sum ||sg[f_m] - z_k||^2 is 2 * sum_{m: idx=k} (z_k - f_m).
    Eigen::MatrixXf grad = Eigen::MatrixXf::Zero(cb.L_dim(), k_count);
    for (int m = 0; m < f.cols(); ++m) {
      const int k = indices[static_cast<size_t>(m)];
      grad.col(k) += 2.0f * (cb.vectors.col(k) - f.col(m));
    }
    cb.vectors -= opts.learning_rate * grad;
    return;
  }

  if (ema_state == nullptr) {
    throw ConfigError("codebook_update: ema mode requires an ema state");
  }
  if (ema_state->counts.size() != k_count ||
      ema_state->sums.cols() != k_count ||
      ema_state->sums.rows() != cb.L_dim()) {
    throw ShapeError("codebook_update: ema state shape mismatch");
  }
  const float decay = opts.ema_decay;
  Eigen::ArrayXf batch_counts = Eigen::ArrayXf::Zero(k_count);
  Eigen::MatrixXf batch_sums = Eigen::MatrixXf::Zero(cb.L_dim(), k_count);
  for (int m = 0; m < f.cols(); ++m) {
    const int k = indices[static_cast<size_t>(m)];
    batch_counts[k] += 1.0f;
    batch_sums.col(k) += f.col(m);
  }
  ema_state->counts = decay * ema_state->counts + (1.0f - decay) * batch_counts;
  ema_state->sums = decay * ema_state->sums + (1.0f - decay) * batch_sums;
  for (int k = 0; k < k_count; ++k) {
    // Decay scales numerator and denominator alike for untouched codewords,
    // so their ratio -- and hence the codeword -- stays put.
    if (ema_state->counts[k] > 1e-8f) {
      cb.vectors.col(k) = ema_state->sums.col(k) / ema_state->counts[k];
    }
  }
}

Codebook init_codebook_from_features(const FeatureGrid& features, int k,
                                     RngStream& rng) {
  if (k < 2) {
    throw ConfigError("init_codebook_from_features: need K >= 2, got " +
                      std::to_string(k));
  }
  const int m_count = static_cast<int>(features.cols());
  const int l_dim = static_cast<int>(features.rows());
  if (m_count < 1 || l_dim < 1) {
    throw ConfigError("init_codebook_from_features: empty feature sample");
  }

  Codebook cb;
  cb.vectors.resize(l_dim, k);
  const int seeded = std::min(k, m_count);

  auto dist2_to = [&](int center, Eigen::ArrayXd* out) {
    for (int m = 0; m < m_count; ++m) {
      (*out)[m] = (features.col(m) - features.col(center))
                      .cast<double>()
                      .squaredNorm();
    }
  };

  std::vector<int> chosen;
  chosen.reserve(static_cast<size_t>(seeded));
  chosen.push_back(static_cast<int>(rng.next_index(
      static_cast<uint64_t>(m_count))));
  Eigen::ArrayXd d2(m_count), cand(m_count);
  dist2_to(chosen[0], &d2);
  while (static_cast<int>(chosen.size()) < seeded) {
    const double total = d2.sum();
    int pick;
    if (total <= 0.0) {
      pick = static_cast<int>(rng.next_index(static_cast<uint64_t>(m_count)));
    } else {
      double r = rng.next_double() * total;
      pick = m_count - 1;
      for (int m = 0; m < m_count; ++m) {
        r -= d2[m];
        if (r <= 0.0) {
          pick = m;
          break;
        }
      }
    }
    chosen.push_back(pick);
    dist2_to(pick, &cand);
    d2 = d2.min(cand);
  }
  for (int i = 0; i < seeded; ++i) {
    cb.vectors.col(i) = features.col(chosen[static_cast<size_t>(i)]);
  }
  // More codewords than samples: jitter random samples so every codeword is
  // distinct and finite.
  for (int i = seeded; i < k; ++i) {
    const int src =
        static_cast<int>(rng.next_index(static_cast<uint64_t>(m_count)));
    Eigen::VectorXf noise(l_dim);
    for (int l = 0; l < l_dim; ++l) {
      noise[l] = static_cast<float>(1e-3 * rng.next_gaussian());
    }
    cb.vectors.col(i) = features.col(src) + noise;
  }
  cb.validate();
  return cb;
}

namespace {

constexpr int kCodebookFileVersion = 1;

void write_u32_le(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_codebook(const std::string& path, const Codebook& cb) {
  cb.validate();
  nlohmann::json meta = {
      {"K", cb.K()}, {"L_dim", cb.L_dim()}, {"version", kCodebookFileVersion}};
  const std::string meta_str = meta.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_codebook: cannot open " + path);
  write_u32_le(os, static_cast<uint32_t>(meta_str.size()));
  os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  save_tensor(os, codebook_to_tensor(cb));
  if (!os) throw IoError("save_codebook: write failed for " + path);
}

Codebook load_codebook(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_codebook: cannot open " + path);
  const uint32_t len = read_u32_le(is);
  if (!is || len > (1u << 20)) {
    throw IoError("load_codebook: bad metadata length");
  }
  std::string meta_str(len, '\0');
  is.read(meta_str.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("load_codebook: truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_codebook: bad metadata JSON: ") +
                  e.what());
  }
  if (meta.value("version", -1) != kCodebookFileVersion) {
    throw IoError("load_codebook: unsupported version");
  }
  Tensor t = load_tensor(is);
  Codebook cb = tensor_to_codebook(t);
  if (cb.K() != meta.value("K", -1) || cb.L_dim() != meta.value("L_dim", -1)) {
    throw IoError("load_codebook: metadata disagrees with tensor shape");
  }
  cb.validate();
  return cb;
}

}  // namespace amvq
