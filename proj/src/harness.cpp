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

#include "amvq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "amvq/activation_map.hpp"
#include "amvq/image.hpp"
#include "amvq/quantizer.hpp"
#include "json.hpp"

namespace amvq {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr double kPi = 3.14159265358979323846;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("config: unknown key \"" + item.key() + "\" in " +
                        where);
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T* out) {
  if (j.contains(key)) *out = j.at(key).get<T>();
}

// --- enum <-> string ---------------------------------------------------------

std::string to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::kNoiseless: return "noiseless";
    case ChannelKind::kAwgn: return "awgn";
    case ChannelKind::kRayleigh: return "rayleigh";
  }
  return "noiseless";
}

ChannelKind channel_kind_from_string(const std::string& s) {
  if (s == "noiseless") return ChannelKind::kNoiseless;
  if (s == "awgn") return ChannelKind::kAwgn;
  if (s == "rayleigh") return ChannelKind::kRayleigh;
  throw ConfigError("config: unknown channel kind \"" + s + "\"");
}

std::string to_string(Modulation mod) {
  return mod == Modulation::kBpsk ? "bpsk" : "qpsk";
}

Modulation modulation_from_string(const std::string& s) {
  if (s == "bpsk") return Modulation::kBpsk;
  if (s == "qpsk") return Modulation::kQpsk;
  throw ConfigError("config: unknown modulation \"" + s + "\"");
}

std::string to_string(ChannelCoder coder) {
  return coder == ChannelCoder::kPassthrough ? "passthrough" : "repetition3";
}

ChannelCoder coder_from_string(const std::string& s) {
  if (s == "passthrough") return ChannelCoder::kPassthrough;
  if (s == "repetition3") return ChannelCoder::kRepetition3;
  throw ConfigError("config: unknown channel coder \"" + s + "\"");
}

std::string to_string(CodebookUpdateMode mode) {
  return mode == CodebookUpdateMode::kLossGradient ? "loss_gradient" : "ema";
}

CodebookUpdateMode codebook_mode_from_string(const std::string& s) {
  if (s == "loss_gradient") return CodebookUpdateMode::kLossGradient;
  if (s == "ema") return CodebookUpdateMode::kEma;
  throw ConfigError("config: unknown codebook mode \"" + s + "\"");
}

// --- sub-config JSON ---------------------------------------------------------

json codec_to_json(const CodecConfig& c) {
  return json{{"input_channels", c.input_channels},
              {"base_channels", c.base_channels},
              {"num_scales", c.num_scales},
              {"feature_channels", c.feature_channels},
              {"image_height", c.image_height},
              {"image_width", c.image_width}};
}

CodecConfig codec_from_json(const json& j) {
  CodecConfig c;
  check_keys(j,
             {"input_channels", "base_channels", "num_scales",
              "feature_channels", "image_height", "image_width"},
             "codec");
  read_field(j, "input_channels", &c.input_channels);
  read_field(j, "base_channels", &c.base_channels);
  read_field(j, "num_scales", &c.num_scales);
  read_field(j, "feature_channels", &c.feature_channels);
  read_field(j, "image_height", &c.image_height);
  read_field(j, "image_width", &c.image_width);
  return c;
}

json train_to_json(const TrainConfig& t) {
  return json{{"beta", t.beta},
              {"lambda", t.lambda},
              {"lr_generator", t.lr_generator},
              {"lr_discriminator", t.lr_discriminator},
              {"steps", t.steps},
              {"batch_size", t.batch_size},
              {"seed", t.seed},
              {"threshold", t.threshold},
              {"invert_threshold", t.invert_threshold},
              {"gan_enabled", t.gan_enabled},
              {"gan_start_step", t.gan_start_step},
              {"codebook_size", t.codebook_size},
              {"disc_base_channels", t.disc_base_channels},
              {"codebook_mode", to_string(t.codebook_mode)}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  check_keys(j,
             {"beta", "lambda", "lr_generator", "lr_discriminator", "steps",
              "batch_size", "seed", "threshold", "invert_threshold",
              "gan_enabled", "gan_start_step", "codebook_size",
              "disc_base_channels", "codebook_mode"},
             "train");
  read_field(j, "beta", &t.beta);
  read_field(j, "lambda", &t.lambda);
  read_field(j, "lr_generator", &t.lr_generator);
  read_field(j, "lr_discriminator", &t.lr_discriminator);
  read_field(j, "steps", &t.steps);
  read_field(j, "batch_size", &t.batch_size);
  read_field(j, "seed", &t.seed);
  read_field(j, "threshold", &t.threshold);
  read_field(j, "invert_threshold", &t.invert_threshold);
  read_field(j, "gan_enabled", &t.gan_enabled);
  read_field(j, "gan_start_step", &t.gan_start_step);
  read_field(j, "codebook_size", &t.codebook_size);
  read_field(j, "disc_base_channels", &t.disc_base_channels);
  if (j.contains("codebook_mode")) {
    t.codebook_mode =
        codebook_mode_from_string(j.at("codebook_mode").get<std::string>());
  }
  return t;
}

json channel_to_json(const ChannelConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"snr_db", c.snr_db},
              {"modulation", to_string(c.modulation)},
              {"seed", c.seed},
              {"coder", to_string(c.coder)}};
}

ChannelConfig channel_from_json(const json& j) {
  ChannelConfig c;
  check_keys(j, {"kind", "snr_db", "modulation", "seed", "coder"}, "channel");
  if (j.contains("kind")) {
    c.kind = channel_kind_from_string(j.at("kind").get<std::string>());
  }
  read_field(j, "snr_db", &c.snr_db);
  if (j.contains("modulation")) {
    c.modulation = modulation_from_string(j.at("modulation").get<std::string>());
  }
  read_field(j, "seed", &c.seed);
  if (j.contains("coder")) {
    c.coder = coder_from_string(j.at("coder").get<std::string>());
  }
  return c;
}

// --- formatting ---------------------------------------------------------------

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double smoothstep(double t) {
  const double x = clamp01(t);
  return x * x * (3.0 - 2.0 * x);
}

struct Metrics3 {
  double vpsnr = 0.0;
  double vssim = 0.0;
  double perceptual = 0.0;
};

Metrics3 measure(const Tensor& x, const Tensor& x_hat,
                 const ViewportSet& viewports,
                 const PerceptualExtractor& extractor) {
  Metrics3 m;
  m.vpsnr = vpsnr(x, x_hat, viewports);
  m.vssim = vssim(x, x_hat, viewports);
  m.perceptual = perceptual_loss(x, x_hat, extractor);
  return m;
}

}  // namespace

// --- config -------------------------------------------------------------------

void ExperimentConfig::validate() const {
  codec.validate();
  train.validate();
  if (threshold_grid.empty()) {
    throw ConfigError("experiment: threshold_grid must be non-empty");
  }
  if (snr_grid_db.empty()) {
    throw ConfigError("experiment: snr_grid_db must be non-empty");
  }
  if (dataset_dir.empty()) {
    if (synth_count <= 0) {
      throw ConfigError("experiment: synth_count must be positive");
    }
    if (synth_height < 32) {
      throw ConfigError("experiment: synth_height must be >= 32");
    }
  }
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j,
             {"codec", "train", "channel", "threshold_grid", "snr_grid_db",
              "dataset_dir", "synth_count", "synth_height", "seed"},
             "experiment");
  ExperimentConfig cfg;
  try {
    if (j.contains("codec")) cfg.codec = codec_from_json(j.at("codec"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    if (j.contains("channel")) cfg.channel = channel_from_json(j.at("channel"));
    read_field(j, "threshold_grid", &cfg.threshold_grid);
    read_field(j, "snr_grid_db", &cfg.snr_grid_db);
    read_field(j, "dataset_dir", &cfg.dataset_dir);
    read_field(j, "synth_count", &cfg.synth_count);
    read_field(j, "synth_height", &cfg.synth_height);
    read_field(j, "seed", &cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field type: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["codec"] = codec_to_json(cfg.codec);
  j["train"] = train_to_json(cfg.train);
  j["channel"] = channel_to_json(cfg.channel);
  j["threshold_grid"] = cfg.threshold_grid;
  j["snr_grid_db"] = cfg.snr_grid_db;
  j["dataset_dir"] = cfg.dataset_dir;
  j["synth_count"] = cfg.synth_count;
  j["synth_height"] = cfg.synth_height;
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return experiment_config_from_json(buf.str());
}

// --- dataset ------------------------------------------------------------------

DatasetReport ingest_dataset(const std::string& dir, int target_height,
                             int target_width) {
  if (!fs::is_directory(dir)) {
    throw ConfigError("ingest_dataset: not a directory: " + dir);
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".ppm") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) {
    throw ConfigError("ingest_dataset: no PNG/PPM files in " + dir);
  }

  DatasetReport report;
  for (const std::string& name : names) {
    const std::string path = (fs::path(dir) / name).string();
    Tensor image;
    try {
      image = load_image(path);
    } catch (const IoError& e) {
      report.warnings.push_back(name + ": unreadable (" + e.what() + ")");
      continue;
    }
    if (image.dim(2) != 2 * image.dim(1)) {
      report.warnings.push_back(name + ": skipped, aspect ratio is not 2:1");
      continue;
    }
    report.images.push_back(
        resize_bilinear(image, target_height, target_width));
    report.filenames.push_back(name);
  }
  if (report.images.empty()) {
    throw ConfigError("ingest_dataset: no usable 2:1 images in " + dir);
  }
  return report;
}

// --- synthetic panoramas --------------------------------------------------------

Tensor synth_panorama(uint64_t seed, int height) {
  if (height < 32) {
    throw ConfigError("synth_panorama: height must be >= 32");
  }
  const int h = height;
  const int w = 2 * height;
  RngStream rng(RngStream::seed_mix(0x70616e6fULL, seed));

  // Scene parameters, drawn in a fixed order for determinism.
  float sky[3], ground[3];
  for (float& v : sky) v = rng.uniform(-0.8f, 0.8f);
  for (float& v : ground) v = rng.uniform(-0.8f, 0.8f);
  const double horizon = rng.uniform(-0.2f, 0.2f);
  const double softness = rng.uniform(0.15f, 0.4f);

  struct Blob {
    double cx, cy, cz;   // unit direction of the center
    double radius;       // angular radius
    float color[3];
  };
  const int blob_count = 6 + static_cast<int>(rng.next_index(5));
  std::vector<Blob> blobs(static_cast<size_t>(blob_count));
  for (Blob& b : blobs) {
    const double z = rng.uniform(-1.0f, 1.0f);
    const double theta = rng.uniform(0.0f, static_cast<float>(2.0 * kPi));
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    b.cx = r * std::sin(theta);
    b.cy = z;
    b.cz = r * std::cos(theta);
    b.radius = rng.uniform(0.15f, 0.5f);
    for (float& v : b.color) v = rng.uniform(-0.7f, 0.7f);
  }

  struct Harmonic {
    int k_lon, k_lat;
    double phase_lon, phase_lat;
    float amp[3];
  };
  Harmonic harmonics[3];
  for (int i = 0; i < 3; ++i) {
    harmonics[i].k_lon = i + 1;
    harmonics[i].k_lat = 1 + static_cast<int>(rng.next_index(3));
    harmonics[i].phase_lon = rng.uniform(0.0f, static_cast<float>(2.0 * kPi));
    harmonics[i].phase_lat = rng.uniform(0.0f, static_cast<float>(2.0 * kPi));
    for (float& v : harmonics[i].amp) v = rng.uniform(-0.12f, 0.12f);
  }

  Tensor image = Tensor::zeros({3, h, w});
  Eigen::ArrayXf& out = image.mutable_value();
  for (int r = 0; r < h; ++r) {
    const double phi = kPi / 2.0 - kPi * (r + 0.5) / h;  // latitude
    const double sp = std::sin(phi), cp = std::cos(phi);
    const double s = smoothstep((phi - horizon) / softness + 0.5);
    for (int c = 0; c < w; ++c) {
      // Columns 0 and w-1 land on -pi and +pi: the same meridian, so every
      // term below (periodic in longitude) takes identical values there.
      const double lambda = 2.0 * kPi * c / (w - 1) - kPi;
      const double sl = std::sin(lambda), cl = std::cos(lambda);
      const double dx = cp * sl, dy = sp, dz = cp * cl;

      double pixel[3];
      for (int ch = 0; ch < 3; ++ch) {
        pixel[ch] = s * sky[ch] + (1.0 - s) * ground[ch];
      }
      for (const Blob& b : blobs) {
        const double dot =
            std::clamp(dx * b.cx + dy * b.cy + dz * b.cz, -1.0, 1.0);
        const double dist = std::acos(dot);
        const double cover = smoothstep((b.radius - dist) / (0.3 * b.radius));
        if (cover > 0.0) {
          for (int ch = 0; ch < 3; ++ch) {
            pixel[ch] += cover * (b.color[ch] - pixel[ch]) * 0.8;
          }
        }
      }
      for (const Harmonic& hm : harmonics) {
        const double wave = std::cos(hm.k_lon * lambda + hm.phase_lon) *
                            std::cos(hm.k_lat * phi + hm.phase_lat);
        for (int ch = 0; ch < 3; ++ch) pixel[ch] += hm.amp[ch] * wave;
      }
      for (int ch = 0; ch < 3; ++ch) {
        out[(ch * h + r) * w + c] =
            static_cast<float>(std::clamp(pixel[ch], -1.0, 1.0));
      }
    }
  }
  return image;
}

std::vector<Tensor> gather_images(const ExperimentConfig& cfg) {
  if (!cfg.dataset_dir.empty()) {
    return ingest_dataset(cfg.dataset_dir, cfg.codec.image_height,
                          cfg.codec.image_width)
        .images;
  }
  std::vector<Tensor> images;
  images.reserve(static_cast<size_t>(cfg.synth_count));
  for (int i = 0; i < cfg.synth_count; ++i) {
    Tensor pano = synth_panorama(RngStream::seed_mix(cfg.seed, 7000 + i),
                                 cfg.synth_height);
    if (pano.dim(1) != cfg.codec.image_height ||
        pano.dim(2) != cfg.codec.image_width) {
      pano = resize_bilinear(pano, cfg.codec.image_height,
                             cfg.codec.image_width);
    }
    images.push_back(pano);
  }
  return images;
}

// --- pipeline -------------------------------------------------------------------

PipelineResult run_pipeline(const Tensor& image, EncoderParams& enc,
                            DecoderParams& dec, const Codebook& codebook,
                            const CodecConfig& codec_cfg, float threshold,
                            bool invert_threshold,
                            const ChannelConfig& channel) {
  PipelineResult result;
  const FeatureGrid f = encode(image, enc, codec_cfg);
  const QuantizationResult qr = quantize_nearest(f, codebook);
  // The map normalization cancels the loss weighting, so any positive beta
  // yields the same fused stream; the training default is used for clarity.
  const FeatureGrid grad = vq_loss_gradient(f, qr, 0.25f);
  const ActivationMap map = normalize_map(activation_map(f, channel_weights(grad)));
  result.sent = threshold_fuse(f, qr, map, threshold, invert_threshold);

  const Bitstream bits = serialize_stream(result.sent);
  result.bpp = bits_per_pixel(bits, codec_cfg.image_height,
                              codec_cfg.image_width);
  result.raw_fraction = result.sent.raw_fraction();

  const TransmitResult tr = transmit(bits, channel);
  const StreamHeader trusted = read_stream_header(bits);
  result.received = deserialize_stream(tr.received, trusted);

  const FeatureGrid f_hat = defuse(result.received, codebook);
  result.feature_mse =
      static_cast<double>((f_hat - f).squaredNorm()) / f.size();
  result.x_hat = decode(f_hat, dec, codec_cfg);
  return result;
}

// --- sweeps ---------------------------------------------------------------------

std::vector<RDPoint> rd_sweep(const ExperimentConfig& cfg, TrainState& state,
                              const std::vector<Tensor>& images,
                              const PerceptualExtractor& extractor,
                              const std::string& dump_dir) {
  if (images.empty()) throw ConfigError("rd_sweep: empty image set");
  const Codebook cb = tensor_to_codebook(state.codebook);
  const ViewportSet viewports = default_viewport_set(cfg.codec.image_height);

  std::vector<RDPoint> points;
  uint64_t cell = 0;
  for (const float t : cfg.threshold_grid) {
    for (const double snr : cfg.snr_grid_db) {
      ChannelConfig ch = cfg.channel;
      ch.snr_db = snr;
      ch.seed = RngStream::seed_mix(cfg.seed, 0x52445357ULL + cell);
      RDPoint point;
      point.threshold = t;
      point.snr_db = snr;
      point.image_count = static_cast<int>(images.size());
      for (size_t i = 0; i < images.size(); ++i) {
        PipelineResult pr =
            run_pipeline(images[i], state.enc, state.dec, cb, cfg.codec, t,
                         cfg.train.invert_threshold, ch);
        const Metrics3 m = measure(images[i], pr.x_hat, viewports, extractor);
        point.bpp += pr.bpp;
        point.raw_fraction += pr.raw_fraction;
        point.vpsnr_db += m.vpsnr;
        point.vssim += m.vssim;
        point.perceptual += m.perceptual;
        if (i == 0 && !dump_dir.empty()) {
          const std::string name = "recon_t" + fmt(t, 2) + "_snr" +
                                   fmt(snr, 1) + ".png";
          save_image((fs::path(dump_dir) / name).string(), pr.x_hat);
        }
      }
      const double n = static_cast<double>(images.size());
      point.bpp /= n;
      point.raw_fraction /= n;
      point.vpsnr_db /= n;
      point.vssim /= n;
      point.perceptual /= n;
      points.push_back(point);
      ++cell;
    }
  }
  return points;
}

std::string rd_points_to_csv(const std::vector<RDPoint>& points) {
  std::string csv =
      "threshold,snr_db,bpp,vpsnr_db,vssim,perceptual,raw_fraction,"
      "image_count\n";
  for (const RDPoint& p : points) {
    csv += fmt(p.threshold, 4) + "," + fmt(p.snr_db, 2) + "," +
           fmt(p.bpp, 6) + "," + fmt(p.vpsnr_db, 4) + "," +
           fmt(p.vssim, 6) + "," + fmt(p.perceptual, 8) + "," +
           fmt(p.raw_fraction, 6) + "," + std::to_string(p.image_count) + "\n";
  }
  return csv;
}

std::vector<ThresholdPoint> threshold_sweep(const ExperimentConfig& cfg,
                                            TrainState& state,
                                            const std::vector<Tensor>& images) {
  if (images.empty()) throw ConfigError("threshold_sweep: empty image set");
  const Codebook cb = tensor_to_codebook(state.codebook);
  const ViewportSet viewports = default_viewport_set(cfg.codec.image_height);
  ChannelConfig noiseless;
  noiseless.kind = ChannelKind::kNoiseless;

  std::vector<ThresholdPoint> points;
  for (const float t : cfg.threshold_grid) {
    ThresholdPoint point;
    point.threshold = t;
    for (const Tensor& image : images) {
      PipelineResult eq7 = run_pipeline(image, state.enc, state.dec, cb,
                                        cfg.codec, t, false, noiseless);
      PipelineResult inv = run_pipeline(image, state.enc, state.dec, cb,
                                        cfg.codec, t, true, noiseless);
      point.vpsnr_eq7 += vpsnr(image, eq7.x_hat, viewports);
      point.bpp_eq7 += eq7.bpp;
      point.raw_fraction_eq7 += eq7.raw_fraction;
      point.vpsnr_inv += vpsnr(image, inv.x_hat, viewports);
      point.bpp_inv += inv.bpp;
      point.raw_fraction_inv += inv.raw_fraction;
    }
    const double n = static_cast<double>(images.size());
    point.vpsnr_eq7 /= n;
    point.bpp_eq7 /= n;
    point.raw_fraction_eq7 /= n;
    point.vpsnr_inv /= n;
    point.bpp_inv /= n;
    point.raw_fraction_inv /= n;
    points.push_back(point);
  }
  return points;
}

std::string threshold_points_to_csv(const std::vector<ThresholdPoint>& points) {
  std::string csv =
      "threshold,vpsnr_eq7,bpp_eq7,raw_fraction_eq7,vpsnr_inv,bpp_inv,"
      "raw_fraction_inv\n";
  for (const ThresholdPoint& p : points) {
    csv += fmt(p.threshold, 4) + "," + fmt(p.vpsnr_eq7, 4) + "," +
           fmt(p.bpp_eq7, 6) + "," + fmt(p.raw_fraction_eq7, 6) + "," +
           fmt(p.vpsnr_inv, 4) + "," + fmt(p.bpp_inv, 6) + "," +
           fmt(p.raw_fraction_inv, 6) + "\n";
  }
  return csv;
}

}  // namespace amvq
