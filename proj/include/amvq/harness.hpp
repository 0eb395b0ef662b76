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
// Experiment orchestration: dataset ingestion, synthetic panorama
// generation, the full transmit pipeline, and rate-distortion / threshold
// sweeps with CSV emission.

#ifndef AMVQ_HARNESS_HPP_
#define AMVQ_HARNESS_HPP_

#include <iosfwd>
#include <string>
#include <vector>

#include "amvq/channel.hpp"
#include "amvq/metrics.hpp"
#include "amvq/trainer.hpp"

namespace amvq {

// Top-level experiment description. Codebook size and feature width live in
// the train/codec sub-configs; the grids drive the sweeps.
struct ExperimentConfig {
  // The default experiment works on 64x128 equirectangular panoramas; the
  // codec itself defaults to square inputs, so widen it here.
  ExperimentConfig() { codec.image_width = 128; }

  CodecConfig codec;
  TrainConfig train;
  ChannelConfig channel;
  std::vector<float> threshold_grid = {0.0f, 0.1f, 0.2f, 0.3f, 0.4f, 0.5f,
                                       0.6f, 0.7f, 0.8f, 0.9f, 1.0f};
  std::vector<double> snr_grid_db = {30.0};
  std::string dataset_dir;  // empty: use synthetic panoramas
  int synth_count = 16;
  int synth_height = 64;
  uint64_t seed = 0;

  void validate() const;
};

// JSON round-trip for configs; unknown keys are rejected to catch typos.
ExperimentConfig experiment_config_from_json(const std::string& text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::string& path);

struct DatasetReport {
  std::vector<Tensor> images;          // resized to codec dims, [-1,1]
  std::vector<std::string> filenames;  // accepted files, lexicographic
  std::vector<std::string> warnings;   // skipped files with reasons
};

// Loads every PNG/PPM in `dir` whose aspect ratio is 2:1, resized to
// target_height x target_width, in lexicographic filename order. Files with
// other aspect ratios are skipped with a warning. Throws ConfigError if
// nothing usable remains.
DatasetReport ingest_dataset(const std::string& dir, int target_height,
                             int target_width);

// Procedural 2H x H equirectangular test scene: a latitude gradient sky and
// ground, seeded soft blobs placed on the sphere, and low-order longitude /
// latitude harmonics. Columns 0 and 2H-1 sample the same longitude, so the
// +-180 degree seam is exactly continuous. H >= 32.
Tensor synth_panorama(uint64_t seed, int height);

// Returns cfg-selected images: the ingested dataset when dataset_dir is set,
// otherwise synth_count synthetic panoramas at codec dims.
std::vector<Tensor> gather_images(const ExperimentConfig& cfg);

// One image through the full chain: encode -> quantize -> activation-map
// fusion -> serialize -> channel -> deserialize -> defuse -> decode.
struct PipelineResult {
  Tensor x_hat;              // [3,H,W] reconstruction
  HybridSymbolStream sent;   // transmitter-side stream
  HybridSymbolStream received;
  double bpp = 0.0;
  double raw_fraction = 0.0;
  // Mean squared feature-space error of the received (defused) grid against
  // the transmitter's pre-quantization features.
  double feature_mse = 0.0;
};

PipelineResult run_pipeline(const Tensor& image, EncoderParams& enc,
                            DecoderParams& dec, const Codebook& codebook,
                            const CodecConfig& codec_cfg, float threshold,
                            bool invert_threshold, const ChannelConfig& channel);

// One sweep cell, aggregated (mean) over the image set.
struct RDPoint {
  double threshold = 0.0;
  double snr_db = 0.0;
  double bpp = 0.0;
  double vpsnr_db = 0.0;
  double vssim = 0.0;
  double perceptual = 0.0;
  double raw_fraction = 0.0;
  int image_count = 0;
};

// Evaluates every (threshold, snr) cell of the grids over `images` with the
// given trained state. When `dump_dir` is non-empty, writes one
// reconstruction PNG per cell for the first image.
std::vector<RDPoint> rd_sweep(const ExperimentConfig& cfg, TrainState& state,
                              const std::vector<Tensor>& images,
                              const PerceptualExtractor& extractor,
                              const std::string& dump_dir = "");

std::string rd_points_to_csv(const std::vector<RDPoint>& points);

// Threshold study at the noiseless channel, reporting the standard
// convention ("keep raw above threshold", _eq7) and the inverted one (_inv)
// side by side for each grid value.
struct ThresholdPoint {
  double threshold = 0.0;
  double vpsnr_eq7 = 0.0;
  double bpp_eq7 = 0.0;
  double raw_fraction_eq7 = 0.0;
  double vpsnr_inv = 0.0;
  double bpp_inv = 0.0;
  double raw_fraction_inv = 0.0;
};

std::vector<ThresholdPoint> threshold_sweep(const ExperimentConfig& cfg,
                                            TrainState& state,
                                            const std::vector<Tensor>& images);

std::string threshold_points_to_csv(const std::vector<ThresholdPoint>& points);

}  // namespace amvq

#endif  // AMVQ_HARNESS_HPP_
