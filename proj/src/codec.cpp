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

#include "amvq/codec.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"

namespace amvq {
namespace {

constexpr int kKernel = 3;

ConvParam make_conv(int c_out, int c_in, RngStream& rng) {
  return init_conv3(c_out, c_in, rng);
}

ConvParam make_zero_conv(int c_out, int c_in) {
  Tensor w = Tensor::zeros({c_out, c_in, kKernel, kKernel}, /*requires_grad=*/true);
  Tensor b = Tensor::zeros({c_out}, /*requires_grad=*/true);
  return ConvParam{std::move(w), std::move(b)};
}

BnParam make_bn(int channels) {
  BnParam p;
  p.gamma = Tensor::full({channels}, 1.0f, /*requires_grad=*/true);
  p.beta = Tensor::zeros({channels}, /*requires_grad=*/true);
  p.state = BatchNormState::identity(channels);
  return p;
}

// The second convolution of every residual block starts at zero so the block
// is an exact identity until training moves it.
ResBlockParams make_res_block(int channels, RngStream& rng) {
  ResBlockParams p;
  p.conv1 = make_conv(channels, channels, rng);
  p.bn1 = make_bn(channels);
  p.conv2 = make_zero_conv(channels, channels);
  p.bn2 = make_bn(channels);
  return p;
}

Tensor conv3(const Tensor& x, ConvParam& p, int stride) {
  return conv2d(x, p.w, p.b, stride, /*pad=*/1);
}

void add_trainable(std::vector<std::pair<std::string, Tensor>>* out,
                   const std::string& name, const Tensor& t) {
  out->emplace_back(name, t);
}

void conv_trainables(std::vector<std::pair<std::string, Tensor>>* out,
                     const std::string& prefix, ConvParam& p) {
  add_trainable(out, prefix + ".w", p.w);
  add_trainable(out, prefix + ".b", p.b);
}

void bn_trainables(std::vector<std::pair<std::string, Tensor>>* out,
                   const std::string& prefix, BnParam& p) {
  add_trainable(out, prefix + ".gamma", p.gamma);
  add_trainable(out, prefix + ".beta", p.beta);
}

void res_trainables(std::vector<std::pair<std::string, Tensor>>* out,
                    const std::string& prefix, ResBlockParams& p) {
  conv_trainables(out, prefix + ".conv1", p.conv1);
  bn_trainables(out, prefix + ".bn1", p.bn1);
  conv_trainables(out, prefix + ".conv2", p.conv2);
  bn_trainables(out, prefix + ".bn2", p.bn2);
}

Tensor array_to_tensor(const Eigen::ArrayXf& a) {
  return Tensor::from_data({static_cast<int>(a.size())}, a,
                           /*requires_grad=*/false);
}

void export_res(std::map<std::string, Tensor>* out, const std::string& prefix,
                ResBlockParams& p) {
  export_conv_param(p.conv1, prefix + ".conv1", out);
  export_bn_param(p.bn1, prefix + ".bn1", out);
  export_conv_param(p.conv2, prefix + ".conv2", out);
  export_bn_param(p.bn2, prefix + ".bn2", out);
}

const Tensor& lookup(const std::map<std::string, Tensor>& in,
                     const std::string& name) {
  auto it = in.find(name);
  if (it == in.end()) {
    throw IoError("checkpoint is missing tensor '" + name + "'");
  }
  return it->second;
}

void copy_into(const Tensor& src, Tensor* dst, const std::string& name) {
  if (src.shape() != dst->shape()) {
    throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                     shape_str(src.shape()) + ", expected " +
                     shape_str(dst->shape()));
  }
  dst->mutable_value() = src.value();
}

void import_res(const std::map<std::string, Tensor>& in,
                const std::string& prefix, ResBlockParams* p) {
  import_conv_param(in, prefix + ".conv1", &p->conv1);
  import_bn_param(in, prefix + ".bn1", &p->bn1);
  import_conv_param(in, prefix + ".conv2", &p->conv2);
  import_bn_param(in, prefix + ".bn2", &p->bn2);
}

void write_u32_le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("checkpoint truncated while reading header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

nlohmann::json config_to_json(const CodecConfig& cfg) {
  return nlohmann::json{{"input_channels", cfg.input_channels},
                        {"base_channels", cfg.base_channels},
                        {"num_scales", cfg.num_scales},
                        {"feature_channels", cfg.feature_channels},
                        {"image_height", cfg.image_height},
                        {"image_width", cfg.image_width}};
}

CodecConfig config_from_json(const nlohmann::json& j) {
  CodecConfig cfg;
  cfg.input_channels = j.at("input_channels").get<int>();
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.num_scales = j.at("num_scales").get<int>();
  cfg.feature_channels = j.at("feature_channels").get<int>();
  cfg.image_height = j.at("image_height").get<int>();
  cfg.image_width = j.at("image_width").get<int>();
  cfg.validate();
  return cfg;
}

}  // namespace

void export_conv_param(const ConvParam& p, const std::string& prefix,
                       std::map<std::string, Tensor>* out) {
  (*out)[prefix + ".w"] = p.w;
  (*out)[prefix + ".b"] = p.b;
}

void export_bn_param(const BnParam& p, const std::string& prefix,
                     std::map<std::string, Tensor>* out) {
  (*out)[prefix + ".gamma"] = p.gamma;
  (*out)[prefix + ".beta"] = p.beta;
  (*out)[prefix + ".running_mean"] = array_to_tensor(p.state.running_mean);
  (*out)[prefix + ".running_var"] = array_to_tensor(p.state.running_var);
}

void import_conv_param(const std::map<std::string, Tensor>& in,
                       const std::string& prefix, ConvParam* p) {
  copy_into(lookup(in, prefix + ".w"), &p->w, prefix + ".w");
  copy_into(lookup(in, prefix + ".b"), &p->b, prefix + ".b");
}

void import_bn_param(const std::map<std::string, Tensor>& in,
                     const std::string& prefix, BnParam* p) {
  copy_into(lookup(in, prefix + ".gamma"), &p->gamma, prefix + ".gamma");
  copy_into(lookup(in, prefix + ".beta"), &p->beta, prefix + ".beta");
  const Tensor& mean = lookup(in, prefix + ".running_mean");
  const Tensor& var = lookup(in, prefix + ".running_var");
  if (mean.size() != p->state.running_mean.size() ||
      var.size() != p->state.running_var.size()) {
    throw ShapeError("checkpoint batch-norm stats at '" + prefix +
                     "' do not match the configured channel count");
  }
  p->state.running_mean = mean.value();
  p->state.running_var = var.value();
}

ConvParam init_conv3(int c_out, int c_in, RngStream& rng, bool requires_grad) {
  const int fan_in = c_in * kKernel * kKernel;
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  Tensor w = Tensor::zeros({c_out, c_in, kKernel, kKernel}, requires_grad);
  Eigen::ArrayXf& wv = w.mutable_value();
  for (Eigen::Index i = 0; i < wv.size(); ++i) {
    wv[i] = static_cast<float>(rng.uniform(-limit, limit));
  }
  Tensor b = Tensor::zeros({c_out}, requires_grad);
  return ConvParam{std::move(w), std::move(b)};
}

void CodecConfig::validate() const {
  if (input_channels <= 0 || base_channels <= 0 || feature_channels <= 0) {
    throw ConfigError("codec channel counts must be positive");
  }
  if (num_scales < 1 || num_scales > 10) {
    throw ConfigError("num_scales must be in [1, 10]");
  }
  if (image_height <= 0 || image_width <= 0) {
    throw ConfigError("image dimensions must be positive");
  }
  const int factor = 1 << num_scales;
  if (image_height % factor != 0 || image_width % factor != 0) {
    throw ConfigError("image dimensions must be divisible by 2^num_scales");
  }
  if (grid_h() < 1 || grid_w() < 1) {
    throw ConfigError("feature grid collapses to zero; reduce num_scales");
  }
}

int CodecConfig::stage_channels(int i) const {
  if (i >= num_scales) return feature_channels;
  const long doubled = static_cast<long>(base_channels) << i;
  return static_cast<int>(
      std::min<long>(doubled, static_cast<long>(feature_channels)));
}

EncoderParams init_encoder(const CodecConfig& cfg, RngStream& rng) {
  cfg.validate();
  EncoderParams p;
  p.stem = make_conv(cfg.stage_channels(0), cfg.input_channels, rng);
  p.scales.reserve(cfg.num_scales);
  for (int i = 0; i < cfg.num_scales; ++i) {
    const int c_in = cfg.stage_channels(i);
    const int c_out = cfg.stage_channels(i + 1);
    EncoderScaleParams s;
    s.res0 = make_res_block(c_in, rng);
    s.res1 = make_res_block(c_in, rng);
    s.down = make_conv(c_out, c_in, rng);
    s.post = make_conv(c_out, c_out, rng);
    s.post_bn = make_bn(c_out);
    p.scales.push_back(std::move(s));
  }
  return p;
}

DecoderParams init_decoder(const CodecConfig& cfg, RngStream& rng) {
  cfg.validate();
  DecoderParams p;
  p.stem = make_conv(cfg.feature_channels, cfg.feature_channels, rng);
  p.scales.reserve(cfg.num_scales);
  // scales[j] mirrors encoder stage i = num_scales-1-j and maps
  // stage_channels(i+1) -> stage_channels(i).
  for (int j = 0; j < cfg.num_scales; ++j) {
    const int i = cfg.num_scales - 1 - j;
    const int c_in = cfg.stage_channels(i + 1);
    const int c_out = cfg.stage_channels(i);
    DecoderScaleParams s;
    s.res = make_res_block(c_in, rng);
    s.conv = make_conv(c_out, c_in, rng);
    s.bn = make_bn(c_out);
    p.scales.push_back(std::move(s));
  }
  p.head = make_conv(cfg.input_channels, cfg.stage_channels(0), rng);
  return p;
}

Tensor residual_block(const Tensor& t, ResBlockParams& params, bool training) {
  Tensor h = conv3(t, params.conv1, /*stride=*/1);
  h = batch_norm(h, params.bn1.gamma, params.bn1.beta, params.bn1.state,
                 training);
  h = relu(h);
  h = conv3(h, params.conv2, /*stride=*/1);
  h = batch_norm(h, params.bn2.gamma, params.bn2.beta, params.bn2.state,
                 training);
  return add(t, h);
}

Tensor encode_graph(const Tensor& image, EncoderParams& params,
                    const CodecConfig& cfg, bool training) {
  if (image.rank() != 3 || image.dim(0) != cfg.input_channels ||
      image.dim(1) != cfg.image_height || image.dim(2) != cfg.image_width) {
    throw ShapeError("encode expects an image shaped [" +
                     std::to_string(cfg.input_channels) + "," +
                     std::to_string(cfg.image_height) + "," +
                     std::to_string(cfg.image_width) + "], got " +
                     shape_str(image.shape()));
  }
  if (static_cast<int>(params.scales.size()) != cfg.num_scales) {
    throw ConfigError("encoder parameters do not match num_scales");
  }
  Tensor x = reshape(image, {1, cfg.input_channels, cfg.image_height,
                             cfg.image_width});
  x = relu(conv3(x, params.stem, /*stride=*/1));
  for (int i = 0; i < cfg.num_scales; ++i) {
    EncoderScaleParams& s = params.scales[i];
    x = residual_block(x, s.res0, training);
    x = residual_block(x, s.res1, training);
    x = relu(conv3(x, s.down, /*stride=*/2));
    x = conv3(x, s.post, /*stride=*/1);
    x = batch_norm(x, s.post_bn.gamma, s.post_bn.beta, s.post_bn.state,
                   training);
  }
  return positions_to_matrix(x);  // [M, feature_channels]
}

Tensor decode_graph(const Tensor& features, DecoderParams& params,
                    const CodecConfig& cfg, bool training) {
  if (features.rank() != 2 || features.dim(0) != cfg.m_count() ||
      features.dim(1) != cfg.feature_channels) {
    throw ShapeError("decode expects features shaped [" +
                     std::to_string(cfg.m_count()) + "," +
                     std::to_string(cfg.feature_channels) + "], got " +
                     shape_str(features.shape()));
  }
  if (static_cast<int>(params.scales.size()) != cfg.num_scales) {
    throw ConfigError("decoder parameters do not match num_scales");
  }
  Tensor x = matrix_to_nchw(
      features, {1, cfg.feature_channels, cfg.grid_h(), cfg.grid_w()});
  x = relu(conv3(x, params.stem, /*stride=*/1));
  for (int j = 0; j < cfg.num_scales; ++j) {
    DecoderScaleParams& s = params.scales[j];
    x = residual_block(x, s.res, training);
    x = upsample_nearest2x(x);
    x = conv3(x, s.conv, /*stride=*/1);
    x = batch_norm(x, s.bn.gamma, s.bn.beta, s.bn.state, training);
    x = relu(x);
  }
  x = tanh(conv3(x, params.head, /*stride=*/1));
  return reshape(x, {cfg.input_channels, cfg.image_height, cfg.image_width});
}

FeatureGrid encode(const Tensor& image, EncoderParams& params,
                   const CodecConfig& cfg) {
  Tensor f = encode_graph(image, params, cfg, /*training=*/false);
  return tensor_to_feature_grid(f);
}

Tensor decode(const FeatureGrid& features, DecoderParams& params,
              const CodecConfig& cfg) {
  Tensor f = feature_grid_to_tensor(features, /*requires_grad=*/false);
  return decode_graph(f, params, cfg, /*training=*/false);
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    EncoderParams& params, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> out;
  conv_trainables(&out, prefix + "stem", params.stem);
  for (size_t i = 0; i < params.scales.size(); ++i) {
    const std::string base = prefix + "down" + std::to_string(i);
    EncoderScaleParams& s = params.scales[i];
    res_trainables(&out, base + ".res0", s.res0);
    res_trainables(&out, base + ".res1", s.res1);
    conv_trainables(&out, base + ".down", s.down);
    conv_trainables(&out, base + ".post", s.post);
    bn_trainables(&out, base + ".post_bn", s.post_bn);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    DecoderParams& params, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> out;
  conv_trainables(&out, prefix + "stem", params.stem);
  for (size_t j = 0; j < params.scales.size(); ++j) {
    const std::string base = prefix + "up" + std::to_string(j);
    DecoderScaleParams& s = params.scales[j];
    res_trainables(&out, base + ".res", s.res);
    conv_trainables(&out, base + ".conv", s.conv);
    bn_trainables(&out, base + ".bn", s.bn);
  }
  conv_trainables(&out, prefix + "head", params.head);
  return out;
}

void export_tensors(EncoderParams& params, const std::string& prefix,
                    std::map<std::string, Tensor>* out) {
  export_conv_param(params.stem, prefix + "stem", out);
  for (size_t i = 0; i < params.scales.size(); ++i) {
    const std::string base = prefix + "down" + std::to_string(i);
    EncoderScaleParams& s = params.scales[i];
    export_res(out, base + ".res0", s.res0);
    export_res(out, base + ".res1", s.res1);
    export_conv_param(s.down, base + ".down", out);
    export_conv_param(s.post, base + ".post", out);
    export_bn_param(s.post_bn, base + ".post_bn", out);
  }
}

void export_tensors(DecoderParams& params, const std::string& prefix,
                    std::map<std::string, Tensor>* out) {
  export_conv_param(params.stem, prefix + "stem", out);
  for (size_t j = 0; j < params.scales.size(); ++j) {
    const std::string base = prefix + "up" + std::to_string(j);
    DecoderScaleParams& s = params.scales[j];
    export_res(out, base + ".res", s.res);
    export_conv_param(s.conv, base + ".conv", out);
    export_bn_param(s.bn, base + ".bn", out);
  }
  export_conv_param(params.head, prefix + "head", out);
}

void import_tensors(const std::map<std::string, Tensor>& in,
                    const std::string& prefix, EncoderParams* params) {
  import_conv_param(in, prefix + "stem", &params->stem);
  for (size_t i = 0; i < params->scales.size(); ++i) {
    const std::string base = prefix + "down" + std::to_string(i);
    EncoderScaleParams& s = params->scales[i];
    import_res(in, base + ".res0", &s.res0);
    import_res(in, base + ".res1", &s.res1);
    import_conv_param(in, base + ".down", &s.down);
    import_conv_param(in, base + ".post", &s.post);
    import_bn_param(in, base + ".post_bn", &s.post_bn);
  }
}

void import_tensors(const std::map<std::string, Tensor>& in,
                    const std::string& prefix, DecoderParams* params) {
  import_conv_param(in, prefix + "stem", &params->stem);
  for (size_t j = 0; j < params->scales.size(); ++j) {
    const std::string base = prefix + "up" + std::to_string(j);
    DecoderScaleParams& s = params->scales[j];
    import_res(in, base + ".res", &s.res);
    import_conv_param(in, base + ".conv", &s.conv);
    import_bn_param(in, base + ".bn", &s.bn);
  }
  import_conv_param(in, prefix + "head", &params->head);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Serialize tensors first so the index can carry exact byte offsets
  // relative to the end of the JSON block.
  std::ostringstream blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, tensor] : ckpt.tensors) {
    index.push_back({{"name", name},
                     {"offset", static_cast<uint64_t>(blob.tellp())}});
    save_tensor(blob, tensor);
  }
  nlohmann::json meta{{"version", 1},
                      {"config", config_to_json(ckpt.config)},
                      {"tensors", index}};
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_u32_le(out, static_cast<uint32_t>(meta_str.size()));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  const std::string payload = blob.str();
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const uint32_t meta_len = read_u32_le(in);
  if (meta_len > (64u << 20)) {
    throw IoError("checkpoint metadata block is implausibly large");
  }
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), meta_len);
  if (!in) throw IoError("checkpoint truncated while reading metadata");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint metadata is not valid JSON: ") +
                  e.what());
  }
  if (meta.at("version").get<int>() != 1) {
    throw IoError("unsupported checkpoint version");
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(meta.at("config"));
  const std::streampos blob_start = in.tellg();
  for (const auto& entry : meta.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    in.seekg(blob_start + static_cast<std::streamoff>(offset));
    ckpt.tensors[name] = load_tensor(in);
  }
  return ckpt;
}

}  // namespace amvq
