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
// Convolutional semantic encoder/decoder pair: a strided-downsample pyramid
// with residual blocks producing a grid of feature vectors, and the mirrored
// nearest-upsample decoder, plus parameter init and checkpoint I/O.

#ifndef AMVQ_CODEC_HPP_
#define AMVQ_CODEC_HPP_

#include <map>
#include <string>
#include <vector>

#include "amvq/common.hpp"
#include "amvq/quantizer.hpp"
#include "amvq/tensor.hpp"

namespace amvq {

struct CodecConfig {
  int input_channels = 3;
  int base_channels = 32;
  int num_scales = 4;       // downsample (and mirrored upsample) stages
  int feature_channels = 64;  // dimension of each position's feature vector
  int image_height = 64;
  int image_width = 64;

  void validate() const;  // throws ConfigError on violations

  int grid_h() const { return image_height >> num_scales; }
  int grid_w() const { return image_width >> num_scales; }
  int m_count() const { return grid_h() * grid_w(); }

  // Width after stage i (i = 0 is the stem output); doubles per scale,
  // capped so the bottleneck lands exactly on feature_channels.
  int stage_channels(int i) const;
};

struct ConvParam {
  Tensor w;  // [Cout, Cin, k, k]
  Tensor b;  // [Cout]
};

struct BnParam {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;
};

// t + bn2(conv2(relu(bn1(conv1(t))))), channel-preserving.
struct ResBlockParams {
  ConvParam conv1;
  BnParam bn1;
  ConvParam conv2;
  BnParam bn2;
};

struct EncoderScaleParams {
  ResBlockParams res0;
  ResBlockParams res1;
  ConvParam down;   // stride-2, widens to the next stage
  ConvParam post;
  BnParam post_bn;
};

struct EncoderParams {
  ConvParam stem;
  std::vector<EncoderScaleParams> scales;
};

// scales[0] operates at the bottleneck; the last entry produces the widest
// (shallowest) maps before the RGB head.
struct DecoderScaleParams {
  ResBlockParams res;
  ConvParam conv;  // applied after nearest-neighbor 2x upsampling
  BnParam bn;
};

struct DecoderParams {
  ConvParam stem;
  std::vector<DecoderScaleParams> scales;
  ConvParam head;
};

// He-uniform 3x3 convolution parameters with zero bias; the shared building
// block for the codec, the patch discriminator, and the perceptual extractor.
ConvParam init_conv3(int c_out, int c_in, RngStream& rng,
                     bool requires_grad = true);

EncoderParams init_encoder(const CodecConfig& cfg, RngStream& rng);
DecoderParams init_decoder(const CodecConfig& cfg, RngStream& rng);

Tensor residual_block(const Tensor& t, ResBlockParams& params, bool training);

// Image [3,H,W] (values in [-1,1]) -> features [M, feature_channels],
// recorded on the autodiff graph. Batch-norm running stats update when
// `training` is true.
Tensor encode_graph(const Tensor& image, EncoderParams& params,
                    const CodecConfig& cfg, bool training);

// Features [M, feature_channels] -> image tensor [3,H,W] through tanh.
Tensor decode_graph(const Tensor& features, DecoderParams& params,
                    const CodecConfig& cfg, bool training);

// Convenience eval-mode wrappers outside the training loop.
FeatureGrid encode(const Tensor& image, EncoderParams& params,
                   const CodecConfig& cfg);
Tensor decode(const FeatureGrid& features, DecoderParams& params,
              const CodecConfig& cfg);

// Flat parameter registry. Trainable tensors only; batch-norm running
// statistics are exported/imported separately as state tensors.
std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    EncoderParams& params, const std::string& prefix);
std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    DecoderParams& params, const std::string& prefix);

// Low-level named-tensor helpers shared by every checkpoint writer; batch
// norm exports its running statistics alongside gamma/beta.
void export_conv_param(const ConvParam& p, const std::string& prefix,
                       std::map<std::string, Tensor>* out);
void export_bn_param(const BnParam& p, const std::string& prefix,
                     std::map<std::string, Tensor>* out);
void import_conv_param(const std::map<std::string, Tensor>& in,
                       const std::string& prefix, ConvParam* p);
void import_bn_param(const std::map<std::string, Tensor>& in,
                     const std::string& prefix, BnParam* p);

// Full serializable view (trainables + running stats).
void export_tensors(EncoderParams& params, const std::string& prefix,
                    std::map<std::string, Tensor>* out);
void export_tensors(DecoderParams& params, const std::string& prefix,
                    std::map<std::string, Tensor>* out);
void import_tensors(const std::map<std::string, Tensor>& in,
                    const std::string& prefix, EncoderParams* params);
void import_tensors(const std::map<std::string, Tensor>& in,
                    const std::string& prefix, DecoderParams* params);

// Checkpoint file: u32 little-endian JSON length, a JSON index holding the
// codec config and per-tensor byte offsets, then concatenated tensor
// containers in index order.
struct Checkpoint {
  CodecConfig config;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace amvq

#endif  // AMVQ_CODEC_HPP_
