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
// Command-line front end: training, single-image encode/decode, channel
// transmission, sweeps, metrics, and synthetic panorama generation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "amvq/activation_map.hpp"
#include "amvq/harness.hpp"
#include "amvq/image.hpp"
#include "amvq/quantizer.hpp"
#include "json.hpp"

namespace amvq {
namespace {

namespace fs = std::filesystem;

constexpr char kStreamMagic[4] = {'A', 'V', 'Q', 'B'};

void write_bitstream_file(const std::string& path, const Bitstream& bs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kStreamMagic, 4);
  uint64_t bits = static_cast<uint64_t>(bs.bit_count);
  for (int i = 0; i < 8; ++i) {
    const char byte = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(&byte, 1);
  }
  out.write(reinterpret_cast<const char*>(bs.bytes.data()),
            static_cast<std::streamsize>(bs.bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

Bitstream read_bitstream_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != std::string(kStreamMagic, 4)) {
    throw IoError("not a bitstream file: " + path);
  }
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    char byte = 0;
    in.read(&byte, 1);
    if (in.gcount() != 1) throw IoError("truncated bitstream header: " + path);
    bits |= static_cast<uint64_t>(static_cast<uint8_t>(byte)) << (8 * i);
  }
  Bitstream bs;
  bs.bit_count = static_cast<int64_t>(bits);
  const size_t expected = static_cast<size_t>((bs.bit_count + 7) / 8);
  bs.bytes.resize(expected);
  in.read(reinterpret_cast<char*>(bs.bytes.data()),
          static_cast<std::streamsize>(expected));
  if (static_cast<size_t>(in.gcount()) != expected) {
    throw IoError("truncated bitstream body: " + path);
  }
  return bs;
}

// Rebuilds a usable TrainState around a saved checkpoint; the codebook size
// is recovered from the stored tensor.
TrainState state_from_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  auto it = ckpt.tensors.find("codebook");
  if (it == ckpt.tensors.end()) {
    throw IoError("checkpoint has no codebook: " + path);
  }
  TrainConfig tcfg;
  tcfg.codebook_size = it->second.dim(0);
  const auto disc_stem = ckpt.tensors.find("disc.stem.w");
  if (disc_stem != ckpt.tensors.end()) {
    tcfg.disc_base_channels = disc_stem->second.dim(0);
  }
  TrainState state = make_train_state(ckpt.config, tcfg);
  restore_train_state(ckpt, &state);
  return state;
}

Tensor load_image_for_codec(const std::string& path, const CodecConfig& cfg) {
  Tensor image = load_image(path);
  if (image.dim(1) != cfg.image_height || image.dim(2) != cfg.image_width) {
    image = resize_bilinear(image, cfg.image_height, cfg.image_width);
  }
  return image;
}

struct CommonOpts {
  std::string config_path;
  std::string checkpoint;
  std::string out;
  std::optional<uint64_t> seed;
  bool invert_threshold = false;
};

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) cfg = load_experiment_config(opts.config_path);
  if (opts.seed.has_value()) {
    cfg.seed = *opts.seed;
    cfg.train.seed = *opts.seed;
    cfg.channel.seed = *opts.seed;
  }
  if (opts.invert_threshold) cfg.train.invert_threshold = true;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

int run_train(const CommonOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts);
  fs::create_directories(opts.out);
  std::vector<Tensor> images = gather_images(cfg);

  TrainState state = make_train_state(cfg.codec, cfg.train);
  std::ofstream log((fs::path(opts.out) / "train_log.ndjson").string(),
                    std::ios::binary);
  if (!log) throw IoError("cannot open train log in " + opts.out);
  std::vector<StepLog> logs = train_loop(state, images, &log);

  Checkpoint ckpt = make_train_checkpoint(state);
  save_checkpoint((fs::path(opts.out) / "checkpoint.bin").string(), ckpt);
  write_text((fs::path(opts.out) / "config.json").string(),
             experiment_config_to_json(cfg));

  nlohmann::ordered_json summary;
  summary["images"] = images.size();
  summary["steps"] = logs.size();
  summary["final"] = nlohmann::json::parse(step_log_json(logs.back()));
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_encode(const CommonOpts& opts, const std::string& image_path,
               float threshold) {
  TrainState state = state_from_checkpoint(opts.checkpoint);
  const Tensor image = load_image_for_codec(image_path, state.codec_cfg);
  const Codebook cb = tensor_to_codebook(state.codebook);

  const FeatureGrid f = encode(image, state.enc, state.codec_cfg);
  const QuantizationResult qr = quantize_nearest(f, cb);
  const FeatureGrid grad = vq_loss_gradient(f, qr, state.cfg.beta);
  const ActivationMap map =
      normalize_map(activation_map(f, channel_weights(grad)));
  const HybridSymbolStream stream =
      threshold_fuse(f, qr, map, threshold, opts.invert_threshold);
  const Bitstream bits = serialize_stream(stream);
  write_bitstream_file(opts.out, bits);

  nlohmann::ordered_json summary;
  summary["bits"] = bits.bit_count;
  summary["bpp"] = bits_per_pixel(bits, state.codec_cfg.image_height,
                                  state.codec_cfg.image_width);
  summary["raw_fraction"] = stream.raw_fraction();
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_decode(const CommonOpts& opts, const std::string& stream_path,
               const std::string& meta_path) {
  TrainState state = state_from_checkpoint(opts.checkpoint);
  const Bitstream bits = read_bitstream_file(stream_path);
  // A post-channel stream may carry a corrupted header; --meta points at the
  // clean transmitter stream whose header the receiver is assumed to share.
  HybridSymbolStream stream;
  if (meta_path.empty()) {
    stream = deserialize_stream(bits);
  } else {
    const Bitstream clean = read_bitstream_file(meta_path);
    stream = deserialize_stream(bits, read_stream_header(clean));
  }
  const Codebook cb = tensor_to_codebook(state.codebook);
  const FeatureGrid f_hat = defuse(stream, cb);
  const Tensor x_hat = decode(f_hat, state.dec, state.codec_cfg);
  save_image(opts.out, x_hat);
  std::cout << "{\"out\":\"" << opts.out << "\"}\n";
  return 0;
}

int run_transmit(const CommonOpts& opts, const std::string& stream_path,
                 const std::string& kind, const std::string& modulation,
                 const std::string& coder, double snr_db) {
  // Channel parameters arrive as CLI strings; reuse the JSON field parser so
  // the names stay in one place.
  nlohmann::json j{{"kind", kind},
                   {"modulation", modulation},
                   {"coder", coder},
                   {"snr_db", snr_db},
                   {"seed", opts.seed.value_or(0)}};
  ExperimentConfig cfg = experiment_config_from_json(
      nlohmann::json{{"channel", j}}.dump());

  const Bitstream bits = read_bitstream_file(stream_path);
  const TransmitResult result = transmit(bits, cfg.channel);
  write_bitstream_file(opts.out, result.received);

  nlohmann::ordered_json summary;
  summary["bits"] = bits.bit_count;
  summary["bit_errors"] = result.bit_errors;
  summary["ber"] = bits.bit_count == 0
                       ? 0.0
                       : static_cast<double>(result.bit_errors) /
                             static_cast<double>(bits.bit_count);
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_metrics(const std::string& ref_path, const std::string& test_path,
                const std::string& weights_path) {
  const Tensor ref = load_image(ref_path);
  const Tensor test = load_image(test_path);
  const PerceptualExtractor extractor =
      weights_path.empty() ? make_perceptual_extractor()
                           : load_perceptual_extractor(weights_path);
  const ViewportSet viewports = default_viewport_set(ref.dim(1));

  nlohmann::ordered_json summary;
  summary["vpsnr_db"] = vpsnr(ref, test, viewports);
  summary["vssim"] = vssim(ref, test, viewports);
  summary["perceptual"] = perceptual_loss(ref, test, extractor);
  std::cout << summary.dump() << "\n";
  return 0;
}

TrainState sweep_state(const CommonOpts& opts, const ExperimentConfig& cfg,
                       bool train_first, const std::vector<Tensor>& images) {
  if (!opts.checkpoint.empty()) return state_from_checkpoint(opts.checkpoint);
  if (!train_first) {
    throw ConfigError("no --checkpoint given; pass --train to train first");
  }
  TrainState state = make_train_state(cfg.codec, cfg.train);
  train_loop(state, images);
  return state;
}

int run_rd_sweep(const CommonOpts& opts, bool train_first) {
  ExperimentConfig cfg = resolve_config(opts);
  fs::create_directories(opts.out);
  std::vector<Tensor> images = gather_images(cfg);
  TrainState state = sweep_state(opts, cfg, train_first, images);
  const PerceptualExtractor extractor = make_perceptual_extractor();

  std::vector<RDPoint> points =
      rd_sweep(cfg, state, images, extractor, opts.out);
  write_text((fs::path(opts.out) / "rd_sweep.csv").string(),
             rd_points_to_csv(points));
  write_text((fs::path(opts.out) / "config.json").string(),
             experiment_config_to_json(cfg));
  std::cout << "{\"rows\":" << points.size() << "}\n";
  return 0;
}

int run_threshold_sweep(const CommonOpts& opts, bool train_first) {
  ExperimentConfig cfg = resolve_config(opts);
  fs::create_directories(opts.out);
  std::vector<Tensor> images = gather_images(cfg);
  TrainState state = sweep_state(opts, cfg, train_first, images);

  std::vector<ThresholdPoint> points = threshold_sweep(cfg, state, images);
  write_text((fs::path(opts.out) / "threshold_sweep.csv").string(),
             threshold_points_to_csv(points));
  write_text((fs::path(opts.out) / "config.json").string(),
             experiment_config_to_json(cfg));
  std::cout << "{\"rows\":" << points.size() << "}\n";
  return 0;
}

int run_synth(uint64_t seed, int height, const std::string& out) {
  save_image(out, synth_panorama(seed, height));
  std::cout << "{\"out\":\"" << out << "\"}\n";
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Activation-map vector-quantized semantic transmission of "
               "360-degree images"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string image_path, stream_path, ref_path, test_path;
  std::string meta_path, weights_path;
  std::string kind = "rayleigh", modulation = "bpsk", coder = "passthrough";
  double snr_db = 10.0;
  float threshold = 0.3f;
  uint64_t synth_seed = 0;
  int synth_height = 64;
  bool train_first = false;

  const auto add_common = [&](CLI::App* cmd, bool with_checkpoint) {
    cmd->add_option("--config", opts.config_path, "experiment config JSON");
    cmd->add_option("--seed", [&opts](const CLI::results_t& vals) {
      opts.seed = std::stoull(vals[0]);
      return true;
    }, "override every seed in the config");
    if (with_checkpoint) {
      cmd->add_option("--checkpoint", opts.checkpoint, "checkpoint file");
    }
  };

  CLI::App* train = app.add_subcommand("train", "train a codec on a dataset");
  add_common(train, false);
  train->add_option("--out", opts.out, "output directory")->required();

  CLI::App* enc = app.add_subcommand("encode", "encode one image to a stream");
  add_common(enc, true);
  enc->get_option("--checkpoint")->required();
  enc->add_option("image", image_path, "input image")->required();
  enc->add_option("--out", opts.out, "output stream file")->required();
  enc->add_option("--threshold", threshold, "activation-map threshold");
  enc->add_flag("--invert-threshold", opts.invert_threshold,
                "send raw below the threshold instead of above");

  CLI::App* dec = app.add_subcommand("decode", "decode a stream to an image");
  add_common(dec, true);
  dec->get_option("--checkpoint")->required();
  dec->add_option("stream", stream_path, "input stream file")->required();
  dec->add_option("--out", opts.out, "output image (.png/.ppm)")->required();
  dec->add_option("--meta", meta_path,
                  "clean stream supplying trusted header metadata");

  CLI::App* tx = app.add_subcommand("transmit", "pass a stream through a channel");
  add_common(tx, false);
  tx->add_option("stream", stream_path, "input stream file")->required();
  tx->add_option("--out", opts.out, "received stream file")->required();
  tx->add_option("--snr", snr_db, "channel SNR in dB");
  tx->add_option("--kind", kind, "noiseless|awgn|rayleigh");
  tx->add_option("--modulation", modulation, "bpsk|qpsk");
  tx->add_option("--coder", coder, "passthrough|repetition3");

  CLI::App* rd = app.add_subcommand("rd-sweep", "rate-distortion sweep");
  add_common(rd, true);
  rd->add_option("--out", opts.out, "output directory")->required();
  rd->add_flag("--train", train_first, "train first when no checkpoint given");
  rd->add_flag("--invert-threshold", opts.invert_threshold,
               "sweep with the inverted threshold convention");

  CLI::App* ts = app.add_subcommand("threshold-sweep",
                                    "quality/rate versus threshold");
  add_common(ts, true);
  ts->add_option("--out", opts.out, "output directory")->required();
  ts->add_flag("--train", train_first, "train first when no checkpoint given");

  CLI::App* met = app.add_subcommand("metrics", "compare two images");
  met->add_option("reference", ref_path, "reference image")->required();
  met->add_option("test", test_path, "image under test")->required();
  met->add_option("--weights", weights_path, "perceptual extractor weights");

  CLI::App* synth = app.add_subcommand("synth", "generate a test panorama");
  synth->add_option("--seed", synth_seed, "scene seed");
  synth->add_option("--height", synth_height, "equirectangular height");
  synth->add_option("--out", opts.out, "output image (.png/.ppm)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad arguments are config errors
  }

  if (train->parsed()) return run_train(opts);
  if (enc->parsed()) return run_encode(opts, image_path, threshold);
  if (dec->parsed()) return run_decode(opts, stream_path, meta_path);
  if (tx->parsed()) {
    return run_transmit(opts, stream_path, kind, modulation, coder, snr_db);
  }
  if (rd->parsed()) return run_rd_sweep(opts, train_first);
  if (ts->parsed()) return run_threshold_sweep(opts, train_first);
  if (met->parsed()) return run_metrics(ref_path, test_path, weights_path);
  if (synth->parsed()) return run_synth(synth_seed, synth_height, opts.out);
  return 2;
}

}  // namespace
}  // namespace amvq

int main(int argc, char** argv) {
  try {
    return amvq::dispatch(argc, argv);
  } catch (const amvq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
