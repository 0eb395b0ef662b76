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

#include "amvq/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

#include "amvq/common.hpp"

namespace amvq {
namespace {

std::vector<uint8_t> tensor_to_rgb8(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("save_image: expected a [3,H,W] tensor");
  }
  const int h = image.dim(1);
  const int w = image.dim(2);
  const Eigen::ArrayXf& v = image.value();
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const float x = std::clamp(v[(ch * h + r) * w + c], -1.0f, 1.0f);
        const long byte = std::lround((x + 1.0f) * 127.5f);
        rgb[(static_cast<size_t>(r) * w + c) * 3 + ch] =
            static_cast<uint8_t>(std::clamp(byte, 0L, 255L));
      }
    }
  }
  return rgb;
}

Tensor rgb8_to_tensor(const std::vector<uint8_t>& rgb, int h, int w) {
  Tensor image = Tensor::zeros({3, h, w});
  Eigen::ArrayXf& v = image.mutable_value();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const uint8_t byte = rgb[(static_cast<size_t>(r) * w + c) * 3 + ch];
        v[(ch * h + r) * w + c] = static_cast<float>(byte) / 127.5f - 1.0f;
      }
    }
  }
  return image;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Tensor load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("load_image: cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("load_image: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("load_image: png_create_info_struct failed");
  }
  std::vector<uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("load_image: libpng failed reading " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  // Normalize every input variant to tightly packed 8-bit RGB.
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("load_image: unsupported PNG layout in " + path);
  }
  pixels.resize(static_cast<size_t>(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 r = 0; r < h; ++r) {
    rows[r] = pixels.data() + static_cast<size_t>(r) * w * 3;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rgb8_to_tensor(pixels, static_cast<int>(h), static_cast<int>(w));
}

void save_png(const std::string& path, const Tensor& image) {
  const std::vector<uint8_t> rgb = tensor_to_rgb8(image);
  const int h = image.dim(1);
  const int w = image.dim(2);

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("save_image: cannot open " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("save_image: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("save_image: png_create_info_struct failed");
  }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("save_image: libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < h; ++r) {
    rows[static_cast<size_t>(r)] =
        const_cast<png_bytep>(rgb.data() + static_cast<size_t>(r) * w * 3);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads one PPM token, skipping whitespace and '#' comment lines.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok;
}

Tensor load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_image: cannot open " + path);
  if (ppm_token(in) != "P6") throw IoError("load_image: not a binary PPM: " + path);
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(ppm_token(in));
    h = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw IoError("load_image: malformed PPM header in " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw IoError("load_image: unsupported PPM header in " + path);
  }
  std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(rgb.data()),
          static_cast<std::streamsize>(rgb.size()));
  if (static_cast<size_t>(in.gcount()) != rgb.size()) {
    throw IoError("load_image: truncated PPM data in " + path);
  }
  return rgb8_to_tensor(rgb, h, w);
}

void save_ppm(const std::string& path, const Tensor& image) {
  const std::vector<uint8_t> rgb = tensor_to_rgb8(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_image: cannot open " + path);
  out << "P6\n" << image.dim(2) << " " << image.dim(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()),
            static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("save_image: failed writing " + path);
}

}  // namespace

Tensor load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("load_image: cannot open " + path);
  char magic[2] = {0, 0};
  probe.read(magic, 2);
  probe.close();
  if (magic[0] == '\x89' && magic[1] == 'P') return load_png(path);
  if (magic[0] == 'P' && magic[1] == '6') return load_ppm(path);
  throw IoError("load_image: unrecognized image format in " + path);
}

void save_image(const std::string& path, const Tensor& image) {
  const size_t dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  if (ext == ".png") {
    save_png(path, image);
  } else if (ext == ".ppm") {
    save_ppm(path, image);
  } else {
    throw ConfigError("save_image: unsupported extension (use .png or .ppm): " +
                      path);
  }
}

Tensor resize_bilinear(const Tensor& image, int out_height, int out_width) {
  if (image.rank() != 3) {
    throw ShapeError("resize_bilinear: expected a [C,H,W] tensor");
  }
  if (out_height <= 0 || out_width <= 0) {
    throw ConfigError("resize_bilinear: output dims must be positive");
  }
  const int ch = image.dim(0);
  const int in_h = image.dim(1);
  const int in_w = image.dim(2);
  const Eigen::ArrayXf& src = image.value();
  Tensor out = Tensor::zeros({ch, out_height, out_width});
  Eigen::ArrayXf& dst = out.mutable_value();

  const double sy = static_cast<double>(in_h) / out_height;
  const double sx = static_cast<double>(in_w) / out_width;
  for (int r = 0; r < out_height; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, in_h - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_width; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, in_w - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - x0;
      for (int k = 0; k < ch; ++k) {
        const auto at = [&](int y, int x) {
          return static_cast<double>(src[(k * in_h + y) * in_w + x]);
        };
        const double top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        const double bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        dst[(k * out_height + r) * out_width + c] =
            static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

}  // namespace amvq
