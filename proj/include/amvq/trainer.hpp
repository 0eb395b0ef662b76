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
// Training loop: reconstruction + quantization objective, patch-based
// adversarial losses, Adam updates, and codebook optimization.

#ifndef AMVQ_TRAINER_HPP_
#define AMVQ_TRAINER_HPP_

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "amvq/codec.hpp"
#include "amvq/common.hpp"
#include "amvq/quantizer.hpp"
#include "amvq/tensor.hpp"

namespace amvq {

struct TrainConfig {
  float beta = 0.25f;    // commitment weight inside the quantization loss
  float lambda = 0.8f;   // adversarial weight in the generator objective
  float lr_generator = 1e-4f;
  float lr_discriminator = 4e-4f;
  int steps = 300;
  int batch_size = 1;
  uint64_t seed = 0;
  float threshold = 0.3f;  // activation-map fuse threshold
  bool invert_threshold = false;
  bool gan_enabled = false;
  // Adversarial terms activate only after this many reconstruction-only
  // warm-up steps.
  int gan_start_step = 100;
  int codebook_size = 1024;
  int disc_base_channels = 32;
  CodebookUpdateMode codebook_mode = CodebookUpdateMode::kLossGradient;

  void validate() const;  // throws ConfigError on violations
};

// Patch discriminator: stride-2 conv stem, three conv+batch-norm groups, and
// a 1-channel conv head producing a spatial logit map (one decision per
// patch, never a single scalar).
struct DiscriminatorGroup {
  ConvParam conv;
  BnParam bn;
};

struct DiscriminatorParams {
  ConvParam stem;
  std::vector<DiscriminatorGroup> groups;
  ConvParam head;
};

DiscriminatorParams init_discriminator(int in_channels, int base_channels,
                                       RngStream& rng);

// [C,H,W] image -> [1,1,h',w'] logit map. `freeze_params` routes the forward
// through stop_gradient on every discriminator tensor, so a later backward
// reaches the image but leaves the discriminator untouched.
Tensor patch_logits(const Tensor& image, DiscriminatorParams& disc,
                    bool training, bool freeze_params = false);

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    DiscriminatorParams& params, const std::string& prefix);

// Reconstruction objective: ||x - x_hat||^2 plus the stop-gradient-routed
// codebook and commitment terms over all positions.
Tensor rec_loss(const Tensor& x, const Tensor& x_hat, const Tensor& features,
                const Tensor& codebook, const std::vector<int>& indices,
                float beta);

// Binary cross entropy over patch logits (sigmoid applied inside):
// disc = -mean[log s(real) + log(1 - s(fake))], gen = -mean[log s(fake)]
// (the non-saturating generator form).
Tensor disc_bce_from_logits(const Tensor& real_logits,
                            const Tensor& fake_logits);
Tensor gen_bce_from_logits(const Tensor& fake_logits);

struct GanLosses {
  Tensor disc_loss;
  Tensor gen_loss;
};

// Builds the two adversarial losses as independent graphs: x_hat is
// gradient-detached inside disc_loss, and the discriminator parameters are
// frozen inside gen_loss, so each backward touches only its own side.
GanLosses gan_loss(const Tensor& x, const Tensor& x_hat,
                   DiscriminatorParams& disc, bool training = true);

// Generator-side combined objective.
inline double total_objective(double rec, double gen_gan, double lambda) {
  return rec + lambda * gen_gan;
}

class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::vector<std::pair<std::string, Tensor>> params, float lr);

  void zero_grad();
  // Applies one Adam update from accumulated gradients; grad_scale folds in
  // a 1/batch averaging factor.
  void step(float grad_scale = 1.0f);

  const std::vector<std::pair<std::string, Tensor>>& params() const {
    return params_;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Eigen::ArrayXf> m_;
  std::vector<Eigen::ArrayXf> v_;
  float lr_ = 1e-4f;
  int t_ = 0;
};

// Scalar record of one optimization step. `rec` is the squared
// reconstruction error alone; `total` is the full generator objective
// rec + vq + beta*commit + lambda*gan_g.
struct StepLog {
  int step = 0;
  double rec = 0.0;
  double vq = 0.0;
  double commit = 0.0;
  double gan_g = 0.0;
  double gan_d = 0.0;
  double raw_fraction = 0.0;
  double bpp = 0.0;
  double total = 0.0;
};

std::string step_log_json(const StepLog& log);  // one NDJSON record, no '\n'

struct TrainState {
  CodecConfig codec_cfg;
  TrainConfig cfg;
  EncoderParams enc;
  DecoderParams dec;
  Tensor codebook;  // [codebook_size, feature_channels]
  DiscriminatorParams disc;
  AdamOptimizer gen_opt;
  AdamOptimizer disc_opt;
  CodebookEmaState ema;
  // The codebook seeds itself from the first batch's features; false until
  // that happens.
  bool codebook_ready = false;
  int step = 0;
  RngStream rng{0};
};

TrainState make_train_state(const CodecConfig& codec_cfg,
                            const TrainConfig& cfg);

// One alternating update (generator step, then discriminator step when the
// adversarial phase is active) over a batch of [3,H,W] images. Throws on
// non-finite losses.
StepLog train_step(TrainState& state, const std::vector<Tensor>& batch);

// Runs cfg.steps steps, cycling deterministically through `images`. When
// `ndjson` is non-null, writes one JSON record per step.
std::vector<StepLog> train_loop(TrainState& state,
                                const std::vector<Tensor>& images,
                                std::ostream* ndjson = nullptr);

// Codec-format checkpoint carrying encoder, decoder, codebook, and
// discriminator tensors.
Checkpoint make_train_checkpoint(TrainState& state);
void restore_train_state(const Checkpoint& ckpt, TrainState* state);

}  // namespace amvq

#endif  // AMVQ_TRAINER_HPP_
