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

#include "amvq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "io_util.hpp"
#include "json.hpp"

namespace amvq {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kPsnrCapDb = 100.0;
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

struct Vec3 {
  double x, y, z;
};

Vec3 rotate_x(const Vec3& v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {v.x, v.y * c - v.z * s, v.y * s + v.z * c};
}

Vec3 rotate_y(const Vec3& v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {v.x * c + v.z * s, v.y, -v.x * s + v.z * c};
}

double focal_px(const ViewportSpec& spec) {
  return (spec.out_width / 2.0) / std::tan(spec.fov / 2.0);
}

void check_pair(const Tensor& x, const Tensor& x_hat,
                const ViewportSet& viewports) {
  if (!x.defined() || !x_hat.defined()) {
    throw ShapeError("metric inputs must be defined tensors");
  }
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("metric inputs differ in shape: " + shape_str(x.shape()) +
                     " vs " + shape_str(x_hat.shape()));
  }
  if (x.rank() != 3) {
    throw ShapeError("metrics expect [C,H,W] images, got " +
                     shape_str(x.shape()));
  }
  if (viewports.empty()) {
    throw ConfigError("viewport set must be non-empty");
  }
}

// Bilinear sample of channel plane `ch` at continuous equirect coordinates;
// longitude (u) wraps, latitude (v) clamps.
float sample_wrapped(const Eigen::ArrayXf& data, int c, int h, int w,
                     double u, double v) {
  const double xs = u - 0.5;
  const double ys = v - 0.5;
  const long j0 = static_cast<long>(std::floor(xs));
  const long i0 = static_cast<long>(std::floor(ys));
  const double fx = xs - static_cast<double>(j0);
  const double fy = ys - static_cast<double>(i0);
  auto wrap = [w](long j) {
    long m = j % w;
    return static_cast<int>(m < 0 ? m + w : m);
  };
  auto clampi = [h](long i) {
    return static_cast<int>(std::clamp<long>(i, 0, h - 1));
  };
  const int j0w = wrap(j0), j1w = wrap(j0 + 1);
  const int i0c = clampi(i0), i1c = clampi(i0 + 1);
  const long base = static_cast<long>(c) * h * w;
  auto at = [&](int i, int j) {
    return static_cast<double>(data[base + static_cast<long>(i) * w + j]);
  };
  const double top = (1.0 - fx) * at(i0c, j0w) + fx * at(i0c, j1w);
  const double bot = (1.0 - fx) * at(i1c, j0w) + fx * at(i1c, j1w);
  return static_cast<float>((1.0 - fy) * top + fy * bot);
}

// 8-bit scale used by both PSNR and SSIM; intentionally unclamped so exact
// closed-form distances survive at the range edges.
inline double to_8bit(float v) { return (static_cast<double>(v) + 1.0) * 127.5; }

Eigen::ArrayXXd luminance_8bit(const Tensor& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Eigen::ArrayXf& d = img.value();
  Eigen::ArrayXXd out(h, w);
  const long plane = static_cast<long>(h) * w;
  for (int r = 0; r < h; ++r) {
    for (int cc = 0; cc < w; ++cc) {
      const long p = static_cast<long>(r) * w + cc;
      if (c >= 3) {
        out(r, cc) = 0.299 * to_8bit(d[p]) + 0.587 * to_8bit(d[plane + p]) +
                     0.114 * to_8bit(d[2 * plane + p]);
      } else {
        out(r, cc) = to_8bit(d[p]);
      }
    }
  }
  return out;
}

Eigen::ArrayXXd gaussian_window() {
  Eigen::ArrayXXd w(kSsimWindow, kSsimWindow);
  const double c = (kSsimWindow - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    for (int j = 0; j < kSsimWindow; ++j) {
      const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
      w(i, j) = std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
      total += w(i, j);
    }
  }
  return w / total;
}

double ssim_luminance(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b) {
  static const Eigen::ArrayXXd win = gaussian_window();
  const int h = static_cast<int>(a.rows());
  const int w = static_cast<int>(a.cols());
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ShapeError("viewport smaller than the SSIM window");
  }
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  double total = 0.0;
  long count = 0;
  for (int top = 0; top + kSsimWindow <= h; ++top) {
    for (int left = 0; left + kSsimWindow <= w; ++left) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (int i = 0; i < kSsimWindow; ++i) {
        for (int j = 0; j < kSsimWindow; ++j) {
          const double wv = win(i, j);
          const double xv = a(top + i, left + j);
          const double yv = b(top + i, left + j);
          mx += wv * xv;
          my += wv * yv;
          mxx += wv * xv * xv;
          myy += wv * yv * yv;
          mxy += wv * xv * yv;
        }
      }
      const double vx = mxx - mx * mx;
      const double vy = myy - my * my;
      const double cxy = mxy - mx * my;
      const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace

void ViewportSpec::validate() const {
  if (!(fov > 0.0) || !(fov < kPi)) {
    throw ConfigError("viewport fov must lie in (0, pi)");
  }
  if (std::abs(pitch) > kPi / 2.0) {
    throw ConfigError("viewport pitch must lie in [-pi/2, pi/2]");
  }
  if (out_width < 1 || out_height < 1) {
    throw ConfigError("viewport output dimensions must be positive");
  }
}

ViewportSet default_viewport_set(int equirect_height) {
  if (equirect_height < 1) {
    throw ConfigError("equirect height must be positive");
  }
  const int out = std::min(256, equirect_height);
  ViewportSet set;
  for (int i = 0; i < 8; ++i) {
    ViewportSpec spec;
    spec.yaw = 2.0 * kPi * static_cast<double>(i) / 8.0;
    spec.pitch = 0.0;
    spec.fov = kPi / 2.0;
    spec.out_width = out;
    spec.out_height = out;
    set.push_back(spec);
  }
  return set;
}

SphereCoord viewport_to_sphere(const ViewportSpec& spec, double row,
                               double col) {
  spec.validate();
  const double f = focal_px(spec);
  const double xc = (col + 0.5) - spec.out_width / 2.0;
  const double yc = (row + 0.5) - spec.out_height / 2.0;
  Vec3 d{xc, -yc, f};
  d = rotate_x(d, -spec.pitch);
  d = rotate_y(d, spec.yaw);
  const double norm = std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
  SphereCoord s;
  s.lambda = std::atan2(d.x, d.z);
  s.phi = std::asin(std::clamp(d.y / norm, -1.0, 1.0));
  return s;
}

bool sphere_to_viewport(const ViewportSpec& spec, const SphereCoord& dir,
                        double* row, double* col) {
  spec.validate();
  Vec3 d{std::cos(dir.phi) * std::sin(dir.lambda), std::sin(dir.phi),
         std::cos(dir.phi) * std::cos(dir.lambda)};
  d = rotate_y(d, -spec.yaw);
  d = rotate_x(d, spec.pitch);
  if (d.z <= 1e-12) return false;
  const double f = focal_px(spec);
  const double xc = f * d.x / d.z;
  const double yc = -f * d.y / d.z;
  *col = xc + spec.out_width / 2.0 - 0.5;
  *row = yc + spec.out_height / 2.0 - 0.5;
  return true;
}

void sphere_to_equirect(const SphereCoord& dir, int width, int height,
                        double* u, double* v) {
  *u = (dir.lambda / (2.0 * kPi) + 0.5) * width;
  *v = (0.5 - dir.phi / kPi) * height;
}

Tensor extract_viewport(const Tensor& equirect, const ViewportSpec& spec) {
  spec.validate();
  if (!equirect.defined() || equirect.rank() != 3) {
    throw ShapeError("extract_viewport expects a [C,H,W] tensor");
  }
  const int c = equirect.dim(0);
  const int h = equirect.dim(1);
  const int w = equirect.dim(2);
  Tensor out = Tensor::zeros({c, spec.out_height, spec.out_width});
  Eigen::ArrayXf& ov = out.mutable_value();
  const Eigen::ArrayXf& in = equirect.value();
  for (int r = 0; r < spec.out_height; ++r) {
    for (int cc = 0; cc < spec.out_width; ++cc) {
      const SphereCoord s = viewport_to_sphere(spec, r, cc);
      double u, v;
      sphere_to_equirect(s, w, h, &u, &v);
      for (int ch = 0; ch < c; ++ch) {
        ov[(static_cast<long>(ch) * spec.out_height + r) * spec.out_width +
           cc] = sample_wrapped(in, ch, h, w, u, v);
      }
    }
  }
  return out;
}

double vpsnr(const Tensor& x, const Tensor& x_hat,
             const ViewportSet& viewports) {
  check_pair(x, x_hat, viewports);
  double total = 0.0;
  for (const ViewportSpec& spec : viewports) {
    const Tensor va = extract_viewport(x, spec);
    const Tensor vb = extract_viewport(x_hat, spec);
    double se = 0.0;
    for (Eigen::Index i = 0; i < va.value().size(); ++i) {
      const double d = to_8bit(va.value()[i]) - to_8bit(vb.value()[i]);
      se += d * d;
    }
    const double mse = se / static_cast<double>(va.value().size());
    double psnr = kPsnrCapDb;
    if (mse > 0.0) {
      psnr = std::min(kPsnrCapDb, 10.0 * std::log10(255.0 * 255.0 / mse));
    }
    total += psnr;
  }
  return total / static_cast<double>(viewports.size());
}

double vssim(const Tensor& x, const Tensor& x_hat,
             const ViewportSet& viewports) {
  check_pair(x, x_hat, viewports);
  double total = 0.0;
  for (const ViewportSpec& spec : viewports) {
    const Eigen::ArrayXXd la = luminance_8bit(extract_viewport(x, spec));
    const Eigen::ArrayXXd lb = luminance_8bit(extract_viewport(x_hat, spec));
    total += ssim_luminance(la, lb);
  }
  return total / static_cast<double>(viewports.size());
}

Tensor PerceptualExtractor::forward(const Tensor& image) const {
  if (!image.defined() || image.rank() != 3) {
    throw ShapeError("perceptual extractor expects a [C,H,W] tensor");
  }
  if (blocks.empty()) {
    throw ConfigError("perceptual extractor has no blocks");
  }
  if (image.dim(0) != blocks.front().w.dim(1)) {
    throw ShapeError("perceptual extractor channel mismatch: image has " +
                     std::to_string(image.dim(0)) + ", extractor expects " +
                     std::to_string(blocks.front().w.dim(1)));
  }
  Tensor x = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  for (const ConvParam& blk : blocks) {
    x = relu(conv2d(x, blk.w, blk.b, /*stride=*/2, /*pad=*/1));
  }
  return x;
}

PerceptualExtractor make_perceptual_extractor(uint64_t seed, int in_channels) {
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  RngStream rng(seed);
  PerceptualExtractor ex;
  const int widths[3] = {16, 32, 64};
  int c_in = in_channels;
  for (int i = 0; i < 3; ++i) {
    ex.blocks.push_back(init_conv3(widths[i], c_in, rng,
                                   /*requires_grad=*/false));
    c_in = widths[i];
  }
  return ex;
}

void save_perceptual_extractor(const std::string& path,
                               const PerceptualExtractor& extractor) {
  std::ostringstream blob;
  nlohmann::json index = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Tensor& t) {
    index.push_back({{"name", name},
                     {"offset", static_cast<uint64_t>(blob.tellp())}});
    save_tensor(blob, t);
  };
  for (size_t i = 0; i < extractor.blocks.size(); ++i) {
    emit("b" + std::to_string(i) + ".w", extractor.blocks[i].w);
    emit("b" + std::to_string(i) + ".b", extractor.blocks[i].b);
  }
  nlohmann::json meta{{"version", 1},
                      {"kind", "perceptual_extractor"},
                      {"blocks", extractor.blocks.size()},
                      {"tensors", index}};
  const std::string meta_str = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  io::write_u32_le(out, static_cast<uint32_t>(meta_str.size()));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  const std::string payload = blob.str();
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing extractor file '" + path + "'");
}

PerceptualExtractor load_perceptual_extractor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open extractor file '" + path + "'");
  const uint32_t meta_len = io::read_u32_le(in, "extractor metadata length");
  if (meta_len > (16u << 20)) {
    throw IoError("extractor metadata block is implausibly large");
  }
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), meta_len);
  if (!in) throw IoError("extractor file truncated while reading metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("extractor metadata is not valid JSON: ") +
                  e.what());
  }
  if (meta.at("version").get<int>() != 1 ||
      meta.at("kind").get<std::string>() != "perceptual_extractor") {
    throw IoError("file is not a perceptual extractor checkpoint");
  }
  const size_t n_blocks = meta.at("blocks").get<size_t>();
  std::map<std::string, Tensor> tensors;
  const std::streampos blob_start = in.tellg();
  for (const auto& entry : meta.at("tensors")) {
    in.seekg(blob_start +
             static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    tensors[entry.at("name").get<std::string>()] = load_tensor(in);
  }
  PerceptualExtractor ex;
  for (size_t i = 0; i < n_blocks; ++i) {
    const std::string wn = "b" + std::to_string(i) + ".w";
    const std::string bn = "b" + std::to_string(i) + ".b";
    if (!tensors.count(wn) || !tensors.count(bn)) {
      throw IoError("extractor file is missing tensor '" + wn + "' or '" +
                    bn + "'");
    }
    ConvParam p;
    p.w = tensors.at(wn);
    p.b = tensors.at(bn);
    if (p.w.rank() != 4 || p.b.rank() != 1 || p.w.dim(0) != p.b.dim(0)) {
      throw IoError("extractor tensor '" + wn + "' has an unexpected shape");
    }
    ex.blocks.push_back(std::move(p));
  }
  return ex;
}

double perceptual_loss(const Tensor& x, const Tensor& x_hat,
                       const PerceptualExtractor& extractor) {
  if (!x.defined() || !x_hat.defined() || x.shape() != x_hat.shape()) {
    throw ShapeError("perceptual_loss expects two images of identical shape");
  }
  const Tensor fa = extractor.forward(x);
  const Tensor fb = extractor.forward(x_hat);
  double se = 0.0;
  for (Eigen::Index i = 0; i < fa.value().size(); ++i) {
    const double d = static_cast<double>(fa.value()[i]) -
                     static_cast<double>(fb.value()[i]);
    se += d * d;
  }
  return se / static_cast<double>(fa.value().size());
}

}  // namespace amvq
