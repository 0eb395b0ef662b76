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

#include "amvq/trainer.hpp"

#include <cmath>
#include <utility>

#include "amvq/activation_map.hpp"
#include "amvq/channel.hpp"
#include "json.hpp"

namespace amvq {
namespace {

constexpr float kLeakySlope = 0.2f;

Tensor maybe_freeze(const Tensor& t, bool freeze) {
  return freeze ? stop_gradient(t) : t;
}

void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v)) {
    throw std::runtime_error("training aborted: non-finite " +
                             std::string(what) + " at step " +
                             std::to_string(step));
  }
}

// Rows tagged INDEX get 1.0 so the fused decoder input takes the
// straight-through codeword there and the raw feature elsewhere.
Tensor index_row_mask(const HybridSymbolStream& stream) {
  Tensor mask = Tensor::zeros({stream.m_count, stream.l_dim});
  Eigen::ArrayXf& mv = mask.mutable_value();
  for (int m = 0; m < stream.m_count; ++m) {
    if (stream.entries[static_cast<size_t>(m)].tag == SymbolTag::kIndex) {
      mv.segment(static_cast<Eigen::Index>(m) * stream.l_dim, stream.l_dim) =
          1.0f;
    }
  }
  return mask;
}

void export_discriminator(DiscriminatorParams& disc,
                          std::map<std::string, Tensor>* out) {
  export_conv_param(disc.stem, "disc.stem", out);
  for (size_t i = 0; i < disc.groups.size(); ++i) {
    const std::string base = "disc.g" + std::to_string(i);
    export_conv_param(disc.groups[i].conv, base + ".conv", out);
    export_bn_param(disc.groups[i].bn, base + ".bn", out);
  }
  export_conv_param(disc.head, "disc.head", out);
}

void import_discriminator(const std::map<std::string, Tensor>& in,
                          DiscriminatorParams* disc) {
  import_conv_param(in, "disc.stem", &disc->stem);
  for (size_t i = 0; i < disc->groups.size(); ++i) {
    const std::string base = "disc.g" + std::to_string(i);
    import_conv_param(in, base + ".conv", &disc->groups[i].conv);
    import_bn_param(in, base + ".bn", &disc->groups[i].bn);
  }
  import_conv_param(in, "disc.head", &disc->head);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda >= 0.0f)) throw ConfigError("lambda must be >= 0");
  if (!(beta >= 0.0f)) throw ConfigError("beta must be >= 0");
  if (!(lr_generator > 0.0f) || !(lr_discriminator > 0.0f)) {
    throw ConfigError("learning rates must be > 0");
  }
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(threshold >= 0.0f)) throw ConfigError("threshold must be >= 0");
  if (gan_start_step < 0) throw ConfigError("gan_start_step must be >= 0");
  if (codebook_size < 1) throw ConfigError("codebook_size must be >= 1");
  if (disc_base_channels < 1) {
    throw ConfigError("disc_base_channels must be >= 1");
  }
}

DiscriminatorParams init_discriminator(int in_channels, int base_channels,
                                       RngStream& rng) {
  if (in_channels < 1 || base_channels < 1) {
    throw ConfigError("discriminator channel counts must be positive");
  }
  DiscriminatorParams p;
  const int d = base_channels;
  p.stem = init_conv3(d, in_channels, rng);
  const int widths[4] = {d, 2 * d, 4 * d, 4 * d};
  for (int i = 0; i < 3; ++i) {
    DiscriminatorGroup g;
    g.conv = init_conv3(widths[i + 1], widths[i], rng);
    g.bn.gamma = Tensor::full({widths[i + 1]}, 1.0f, /*requires_grad=*/true);
    g.bn.beta = Tensor::zeros({widths[i + 1]}, /*requires_grad=*/true);
    g.bn.state = BatchNormState::identity(widths[i + 1]);
    p.groups.push_back(std::move(g));
  }
  p.head = init_conv3(1, widths[3], rng);
  return p;
}

Tensor patch_logits(const Tensor& image, DiscriminatorParams& disc,
                    bool training, bool freeze_params) {
  if (!image.defined() || image.rank() != 3) {
    throw ShapeError("discriminator expects a [C,H,W] image");
  }
  Tensor x = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  x = conv2d(x, maybe_freeze(disc.stem.w, freeze_params),
             maybe_freeze(disc.stem.b, freeze_params), /*stride=*/2,
             /*pad=*/1);
  x = leaky_relu(x, kLeakySlope);
  for (size_t i = 0; i < disc.groups.size(); ++i) {
    DiscriminatorGroup& g = disc.groups[i];
    const int stride = (i + 1 < disc.groups.size()) ? 2 : 1;
    x = conv2d(x, maybe_freeze(g.conv.w, freeze_params),
               maybe_freeze(g.conv.b, freeze_params), stride, /*pad=*/1);
    x = batch_norm(x, maybe_freeze(g.bn.gamma, freeze_params),
                   maybe_freeze(g.bn.beta, freeze_params), g.bn.state,
                   training);
    x = leaky_relu(x, kLeakySlope);
  }
  return conv2d(x, maybe_freeze(disc.head.w, freeze_params),
                maybe_freeze(disc.head.b, freeze_params), /*stride=*/1,
                /*pad=*/1);
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    DiscriminatorParams& params, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back(prefix + "stem.w", params.stem.w);
  out.emplace_back(prefix + "stem.b", params.stem.b);
  for (size_t i = 0; i < params.groups.size(); ++i) {
    const std::string base = prefix + "g" + std::to_string(i);
    out.emplace_back(base + ".conv.w", params.groups[i].conv.w);
    out.emplace_back(base + ".conv.b", params.groups[i].conv.b);
    out.emplace_back(base + ".bn.gamma", params.groups[i].bn.gamma);
    out.emplace_back(base + ".bn.beta", params.groups[i].bn.beta);
  }
  out.emplace_back(prefix + "head.w", params.head.w);
  out.emplace_back(prefix + "head.b", params.head.b);
  return out;
}

Tensor rec_loss(const Tensor& x, const Tensor& x_hat, const Tensor& features,
                const Tensor& codebook, const std::vector<int>& indices,
                float beta) {
  if (!x.defined() || !x_hat.defined() || x.shape() != x_hat.shape()) {
    throw ShapeError("rec_loss expects image and reconstruction of one shape");
  }
  return add(squared_l2(sub(x, x_hat)),
             build_vq_loss(features, codebook, indices, beta));
}

Tensor disc_bce_from_logits(const Tensor& real_logits,
                            const Tensor& fake_logits) {
  // -log s(l) == softplus(-l) and -log(1 - s(l)) == softplus(l).
  return add(mean(softplus(scale(real_logits, -1.0f))),
             mean(softplus(fake_logits)));
}

Tensor gen_bce_from_logits(const Tensor& fake_logits) {
  return mean(softplus(scale(fake_logits, -1.0f)));
}

GanLosses gan_loss(const Tensor& x, const Tensor& x_hat,
                   DiscriminatorParams& disc, bool training) {
  GanLosses out;
  {
    Tensor real_logits = patch_logits(x, disc, training, /*freeze=*/false);
    Tensor fake_logits = patch_logits(stop_gradient(x_hat), disc, training,
                                      /*freeze=*/false);
    out.disc_loss = disc_bce_from_logits(real_logits, fake_logits);
  }
  {
    Tensor fake_logits = patch_logits(x_hat, disc, training, /*freeze=*/true);
    out.gen_loss = gen_bce_from_logits(fake_logits);
  }
  return out;
}

AdamOptimizer::AdamOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                             float lr)
    : params_(std::move(params)),
      m_(params_.size()),
      v_(params_.size()),
      lr_(lr) {
  if (!(lr > 0.0f)) throw ConfigError("Adam learning rate must be > 0");
}

void AdamOptimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void AdamOptimizer::step(float grad_scale) {
  const float b1 = 0.9f;
  const float b2 = 0.999f;
  const float eps = 1e-8f;
  ++t_;
  const float c1 = 1.0f - static_cast<float>(std::pow(b1, t_));
  const float c2 = 1.0f - static_cast<float>(std::pow(b2, t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const Eigen::ArrayXf g = p.grad() * grad_scale;
    if (m_[i].size() == 0) {
      m_[i] = Eigen::ArrayXf::Zero(g.size());
      v_[i] = Eigen::ArrayXf::Zero(g.size());
    }
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g.square();
    p.mutable_value() -= lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
  }
}

std::string step_log_json(const StepLog& log) {
  nlohmann::ordered_json j{
      {"step", log.step},           {"rec", log.rec},
      {"vq", log.vq},               {"commit", log.commit},
      {"gan_g", log.gan_g},         {"gan_d", log.gan_d},
      {"raw_fraction", log.raw_fraction},
      {"bpp", log.bpp},             {"total", log.total}};
  return j.dump();
}

TrainState make_train_state(const CodecConfig& codec_cfg,
                            const TrainConfig& cfg) {
  codec_cfg.validate();
  cfg.validate();
  TrainState state;
  state.codec_cfg = codec_cfg;
  state.cfg = cfg;
  state.rng = RngStream(cfg.seed);
  RngStream enc_rng = state.rng.fork(1);
  RngStream dec_rng = state.rng.fork(2);
  RngStream disc_rng = state.rng.fork(3);
  state.enc = init_encoder(codec_cfg, enc_rng);
  state.dec = init_decoder(codec_cfg, dec_rng);
  state.disc = init_discriminator(codec_cfg.input_channels,
                                  cfg.disc_base_channels, disc_rng);
  state.codebook = Tensor::zeros({cfg.codebook_size,
                                  codec_cfg.feature_channels},
                                 /*requires_grad=*/true);

  auto gen_params = trainable_parameters(state.enc, "enc.");
  for (auto& p : trainable_parameters(state.dec, "dec.")) {
    gen_params.push_back(p);
  }
  if (cfg.codebook_mode == CodebookUpdateMode::kLossGradient) {
    gen_params.emplace_back("codebook", state.codebook);
  }
  state.gen_opt = AdamOptimizer(std::move(gen_params), cfg.lr_generator);
  state.disc_opt = AdamOptimizer(trainable_parameters(state.disc, "disc."),
                                 cfg.lr_discriminator);
  return state;
}

StepLog train_step(TrainState& state, const std::vector<Tensor>& batch) {
  if (batch.empty()) throw ConfigError("train_step needs a non-empty batch");
  const TrainConfig& cfg = state.cfg;
  const CodecConfig& ccfg = state.codec_cfg;
  state.step += 1;
  const bool gan_active = cfg.gan_enabled && state.step > cfg.gan_start_step;
  const float inv_batch = 1.0f / static_cast<float>(batch.size());

  // The codebook seeds itself from the first batch's feature vectors.
  if (!state.codebook_ready) {
    FeatureGrid all(ccfg.feature_channels, 0);
    for (const Tensor& img : batch) {
      FeatureGrid f = encode(img, state.enc, ccfg);
      const Eigen::Index old = all.cols();
      all.conservativeResize(Eigen::NoChange, old + f.cols());
      all.rightCols(f.cols()) = f;
    }
    RngStream seed_rng = state.rng.fork(4);
    Codebook cb = init_codebook_from_features(all, cfg.codebook_size,
                                              seed_rng);
    state.codebook.mutable_value() = codebook_to_tensor(cb).value();
    state.ema = CodebookEmaState::from_codebook(cb);
    state.codebook_ready = true;
  }

  StepLog log;
  log.step = state.step;

  // --- Generator phase -------------------------------------------------
  state.gen_opt.zero_grad();
  state.codebook.zero_grad();
  Codebook cb_live = tensor_to_codebook(state.codebook);
  std::vector<Tensor> fakes;  // detached reconstructions for the disc phase
  for (const Tensor& img : batch) {
    Tensor f = encode_graph(img, state.enc, ccfg, /*training=*/true);
    FeatureGrid fg = tensor_to_feature_grid(f);
    QuantizationResult qr = quantize_nearest(fg, cb_live);

    FeatureGrid grad_grid = vq_loss_gradient(fg, qr, cfg.beta);
    ActivationMap am = normalize_map(activation_map(fg, channel_weights(grad_grid)));
    HybridSymbolStream stream =
        threshold_fuse(fg, qr, am, cfg.threshold, cfg.invert_threshold);
    log.raw_fraction += stream.raw_fraction();
    const Bitstream bits = serialize_stream(stream);
    log.bpp += bits_per_pixel(bits, ccfg.image_height, ccfg.image_width);

    // Decoder input: codeword (through the straight-through estimator) at
    // INDEX positions, the raw encoder feature at RAW positions.
    Tensor q_sel = index_select_rows(state.codebook, qr.indices);
    Tensor st = straight_through(f, q_sel);
    Tensor mask = index_row_mask(stream);
    Tensor hybrid = add(f, mul(mask, sub(st, f)));
    Tensor x_hat = decode_graph(hybrid, state.dec, ccfg, /*training=*/true);

    Tensor rec = squared_l2(sub(img, x_hat));
    Tensor vq_term = build_vq_loss(f, state.codebook, qr.indices, cfg.beta);
    Tensor objective = add(rec, vq_term);
    if (gan_active) {
      Tensor fake_logits =
          patch_logits(x_hat, state.disc, /*training=*/true, /*freeze=*/true);
      Tensor gen_gan = gen_bce_from_logits(fake_logits);
      log.gan_g += gen_gan.item();
      objective = add(objective, scale(gen_gan, cfg.lambda));
    }

    log.rec += rec.item();
    log.vq += qr.vq_loss;
    log.commit += qr.commitment_loss;
    check_finite(objective.item(), "generator loss", state.step);
    backward(objective);

    if (gan_active) {
      fakes.push_back(Tensor::from_data(x_hat.shape(), x_hat.value()));
    }
    if (cfg.codebook_mode == CodebookUpdateMode::kEma) {
      codebook_update(cb_live, fg, qr.indices, CodebookUpdateMode::kEma,
                      CodebookUpdateOptions{}, &state.ema);
    }
  }
  state.gen_opt.step(inv_batch);
  if (cfg.codebook_mode == CodebookUpdateMode::kEma) {
    state.codebook.mutable_value() = codebook_to_tensor(cb_live).value();
  }

  // --- Discriminator phase ---------------------------------------------
  if (gan_active) {
    state.disc_opt.zero_grad();
    for (size_t i = 0; i < batch.size(); ++i) {
      Tensor real_logits =
          patch_logits(batch[i], state.disc, /*training=*/true);
      Tensor fake_logits =
          patch_logits(fakes[i], state.disc, /*training=*/true);
      Tensor disc = disc_bce_from_logits(real_logits, fake_logits);
      log.gan_d += disc.item();
      check_finite(disc.item(), "discriminator loss", state.step);
      backward(disc);
    }
    state.disc_opt.step(inv_batch);
  }

  log.rec *= inv_batch;
  log.vq *= inv_batch;
  log.commit *= inv_batch;
  log.gan_g *= inv_batch;
  log.gan_d *= inv_batch;
  log.raw_fraction *= inv_batch;
  log.bpp *= inv_batch;
  log.total = log.rec + log.vq + cfg.beta * log.commit +
              cfg.lambda * log.gan_g;
  check_finite(log.total, "total loss", state.step);
  return log;
}

std::vector<StepLog> train_loop(TrainState& state,
                                const std::vector<Tensor>& images,
                                std::ostream* ndjson) {
  if (images.empty()) throw ConfigError("train_loop needs at least one image");
  std::vector<StepLog> logs;
  logs.reserve(static_cast<size_t>(state.cfg.steps));
  size_t cursor = 0;
  for (int s = 0; s < state.cfg.steps; ++s) {
    std::vector<Tensor> batch;
    batch.reserve(static_cast<size_t>(state.cfg.batch_size));
    for (int b = 0; b < state.cfg.batch_size; ++b) {
      batch.push_back(images[cursor % images.size()]);
      ++cursor;
    }
    StepLog log = train_step(state, batch);
    if (ndjson != nullptr) {
      (*ndjson) << step_log_json(log) << '\n';
    }
    logs.push_back(log);
  }
  return logs;
}

Checkpoint make_train_checkpoint(TrainState& state) {
  Checkpoint ckpt;
  ckpt.config = state.codec_cfg;
  export_tensors(state.enc, "enc.", &ckpt.tensors);
  export_tensors(state.dec, "dec.", &ckpt.tensors);
  export_discriminator(state.disc, &ckpt.tensors);
  ckpt.tensors["codebook"] = state.codebook;
  return ckpt;
}

void restore_train_state(const Checkpoint& ckpt, TrainState* state) {
  import_tensors(ckpt.tensors, "enc.", &state->enc);
  import_tensors(ckpt.tensors, "dec.", &state->dec);
  auto cb = ckpt.tensors.find("codebook");
  if (cb == ckpt.tensors.end()) {
    throw IoError("checkpoint is missing the 'codebook' tensor");
  }
  if (cb->second.shape() != state->codebook.shape()) {
    throw ShapeError("checkpoint codebook has shape " +
                     shape_str(cb->second.shape()) + ", expected " +
                     shape_str(state->codebook.shape()));
  }
  state->codebook.mutable_value() = cb->second.value();
  state->ema =
      CodebookEmaState::from_codebook(tensor_to_codebook(state->codebook));
  state->codebook_ready = true;
  if (ckpt.tensors.count("disc.stem.w") > 0) {
    import_discriminator(ckpt.tensors, &state->disc);
  }
}

}  // namespace amvq
