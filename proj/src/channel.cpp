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

#include "amvq/channel.hpp"

#include <algorithm>
#include <cmath>

#include "amvq/float16.hpp"

namespace amvq {

// --- Bit-level containers ---------------------------------------------------

void BitWriter::put_bit(int bit) {
  const int64_t byte_index = bits_ / 8;
  if (byte_index >= static_cast<int64_t>(bytes_.size())) bytes_.push_back(0);
  if (bit) {
    bytes_[static_cast<size_t>(byte_index)] |=
        static_cast<uint8_t>(1u << (7 - (bits_ % 8)));
  }
  ++bits_;
}

void BitWriter::put_bits(uint64_t value, int width) {
  for (int i = width - 1; i >= 0; --i) {
    put_bit(static_cast<int>((value >> i) & 1u));
  }
}

Bitstream BitWriter::finish() && {
  Bitstream bs;
  bs.bytes = std::move(bytes_);
  bs.bit_count = bits_;
  return bs;
}

int BitReader::read_bit() {
  if (pos_ >= bs_.bit_count) {
    throw IoError("bitstream: read past end at bit " + std::to_string(pos_));
  }
  const uint8_t byte = bs_.bytes[static_cast<size_t>(pos_ / 8)];
  const int bit = (byte >> (7 - (pos_ % 8))) & 1;
  ++pos_;
  return bit;
}

uint64_t BitReader::read_bits(int width) {
  uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v = (v << 1) | static_cast<uint64_t>(read_bit());
  }
  return v;
}

// --- Stream serialization ----------------------------------------------------

int index_bit_width(int k_count) {
  if (k_count < 2) {
    throw ConfigError("index_bit_width: need K >= 2, got " +
                      std::to_string(k_count));
  }
  int width = 0;
  uint64_t span = 1;
  while (span < static_cast<uint64_t>(k_count)) {
    span <<= 1;
    ++width;
  }
  return width;
}

int64_t stream_bit_cost(const HybridSymbolStream& stream, int raw_precision) {
  const int index_bits = index_bit_width(stream.k_count);
  int64_t total = kStreamHeaderBits;
  for (const SymbolEntry& e : stream.entries) {
    total += 1;
    total += (e.tag == SymbolTag::kIndex)
                 ? index_bits
                 : static_cast<int64_t>(stream.l_dim) * raw_precision;
  }
  return total;
}

namespace {

constexpr uint8_t kStreamVersion = 1;

void write_header(BitWriter& w, const StreamHeader& h) {
  w.put_bits('A', 8);
  w.put_bits('M', 8);
  w.put_bits('V', 8);
  w.put_bits('Q', 8);
  w.put_bits(h.version, 8);
  for (int i = 0; i < 4; ++i) w.put_bits((h.m_count >> (8 * i)) & 0xff, 8);
  for (int i = 0; i < 2; ++i) w.put_bits((h.l_dim >> (8 * i)) & 0xff, 8);
  for (int i = 0; i < 4; ++i) w.put_bits((h.k_count >> (8 * i)) & 0xff, 8);
  w.put_bits(h.raw_precision, 8);
}

StreamHeader parse_header(BitReader& r) {
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.read_bits(8));
  if (magic[0] != 'A' || magic[1] != 'M' || magic[2] != 'V' ||
      magic[3] != 'Q') {
    throw IoError("bitstream: bad magic");
  }
  StreamHeader h;
  h.version = static_cast<uint8_t>(r.read_bits(8));
  if (h.version != kStreamVersion) {
    throw IoError("bitstream: unsupported version " +
                  std::to_string(h.version));
  }
  h.m_count = 0;
  for (int i = 0; i < 4; ++i) {
    h.m_count |= static_cast<uint32_t>(r.read_bits(8)) << (8 * i);
  }
  h.l_dim = 0;
  for (int i = 0; i < 2; ++i) {
    h.l_dim |= static_cast<uint16_t>(r.read_bits(8) << (8 * i));
  }
  h.k_count = 0;
  for (int i = 0; i < 4; ++i) {
    h.k_count |= static_cast<uint32_t>(r.read_bits(8)) << (8 * i);
  }
  h.raw_precision = static_cast<uint8_t>(r.read_bits(8));
  return h;
}

HybridSymbolStream parse_body(BitReader& r, const StreamHeader& h,
                              bool lenient) {
  if (h.raw_precision != 16 && h.raw_precision != 32) {
    throw IoError("bitstream: unsupported raw precision " +
                  std::to_string(h.raw_precision));
  }
  if (h.k_count < 2) {
    throw IoError("bitstream: header K must be >= 2");
  }
  const int index_bits = index_bit_width(static_cast<int>(h.k_count));
  HybridSymbolStream stream;
  stream.m_count = static_cast<int>(h.m_count);
  stream.l_dim = static_cast<int>(h.l_dim);
  stream.k_count = static_cast<int>(h.k_count);
  stream.entries.resize(h.m_count);
  for (uint32_t m = 0; m < h.m_count; ++m) {
    SymbolEntry& e = stream.entries[m];
    const int64_t flag_cost = 1;
    if (lenient && r.remaining() < flag_cost) {
      // Flag-bit corruption desynchronized the parse; remaining positions
      // fall back to codeword 0.
      e.tag = SymbolTag::kIndex;
      e.index = 0;
      continue;
    }
    const int flag = r.read_bit();
    if (flag == 0) {
      if (lenient && r.remaining() < index_bits) {
        e.tag = SymbolTag::kIndex;
        e.index = 0;
        continue;
      }
      e.tag = SymbolTag::kIndex;
      const uint64_t raw_index = r.read_bits(index_bits);
      e.index = static_cast<uint32_t>(raw_index % h.k_count);
    } else {
      const int64_t payload_bits =
          static_cast<int64_t>(h.l_dim) * h.raw_precision;
      if (lenient && r.remaining() < payload_bits) {
        e.tag = SymbolTag::kIndex;
        e.index = 0;
        continue;
      }
      e.tag = SymbolTag::kRaw;
      e.raw.resize(h.l_dim);
      for (int l = 0; l < h.l_dim; ++l) {
        float v;
        if (h.raw_precision == 16) {
          v = half_to_float(static_cast<uint16_t>(r.read_bits(16)));
        } else {
          v = bits_to_float(static_cast<uint32_t>(r.read_bits(32)));
        }
        if (!std::isfinite(v)) {
          if (!lenient) {
            throw IoError("bitstream: non-finite raw payload");
          }
          v = 0.0f;  // corrupted exponent bits; neutral fallback
        }
        e.raw[l] = v;
      }
    }
  }
  return stream;
}

}  // namespace

Bitstream serialize_stream(const HybridSymbolStream& stream,
                           int raw_precision) {
  if (raw_precision != 16 && raw_precision != 32) {
    throw ConfigError("serialize_stream: raw precision must be 16 or 32");
  }
  if (static_cast<int>(stream.entries.size()) != stream.m_count) {
    throw ShapeError("serialize_stream: entry count " +
                     std::to_string(stream.entries.size()) + " vs header M=" +
                     std::to_string(stream.m_count));
  }
  const int index_bits = index_bit_width(stream.k_count);

  StreamHeader h;
  h.version = kStreamVersion;
  h.m_count = static_cast<uint32_t>(stream.m_count);
  h.l_dim = static_cast<uint16_t>(stream.l_dim);
  h.k_count = static_cast<uint32_t>(stream.k_count);
  h.raw_precision = static_cast<uint8_t>(raw_precision);

  BitWriter w;
  write_header(w, h);
  for (const SymbolEntry& e : stream.entries) {
    if (e.tag == SymbolTag::kIndex) {
      if (e.index >= static_cast<uint32_t>(stream.k_count)) {
        throw ConfigError("serialize_stream: index " +
                          std::to_string(e.index) + " out of range [0," +
                          std::to_string(stream.k_count) + ")");
      }
      w.put_bit(0);
      w.put_bits(e.index, index_bits);
    } else {
      if (e.raw.size() != stream.l_dim) {
        throw ShapeError("serialize_stream: raw payload length " +
                         std::to_string(e.raw.size()) + " vs L_dim " +
                         std::to_string(stream.l_dim));
      }
      if (!e.raw.allFinite()) {
        throw ConfigError("serialize_stream: non-finite raw payload");
      }
      w.put_bit(1);
      for (Eigen::Index l = 0; l < e.raw.size(); ++l) {
        if (raw_precision == 16) {
          // Saturate to the largest finite half so decode stays finite.
          const float clamped = std::clamp(e.raw[l], -65504.0f, 65504.0f);
          w.put_bits(float_to_half(clamped), 16);
        } else {
          w.put_bits(float_bits(e.raw[l]), 32);
        }
      }
    }
  }
  return std::move(w).finish();
}

StreamHeader read_stream_header(const Bitstream& bs) {
  BitReader r(bs);
  return parse_header(r);
}

HybridSymbolStream deserialize_stream(const Bitstream& bs) {
  BitReader r(bs);
  const StreamHeader h = parse_header(r);
  return parse_body(r, h, /*lenient=*/false);
}

HybridSymbolStream deserialize_stream(const Bitstream& bs,
                                      const StreamHeader& trusted) {
  BitReader r(bs);
  if (bs.bit_count < kStreamHeaderBits) {
    throw IoError("bitstream: shorter than header");
  }
  r.read_bits(64);  // skip the (possibly corrupted) on-air header
  r.read_bits(64);
  return parse_body(r, trusted, /*lenient=*/true);
}

double bits_per_pixel(const Bitstream& bs, int image_height,
                      int image_width) {
  if (image_height <= 0 || image_width <= 0) {
    throw ConfigError("bits_per_pixel: image dims must be positive");
  }
  return static_cast<double>(bs.bit_count) /
         (static_cast<double>(image_height) * image_width);
}

// --- Channel ------------------------------------------------------------------

std::vector<uint8_t> bitstream_to_bits(const Bitstream& bs) {
  std::vector<uint8_t> bits(static_cast<size_t>(bs.bit_count));
  for (int64_t i = 0; i < bs.bit_count; ++i) {
    bits[static_cast<size_t>(i)] = static_cast<uint8_t>(
        (bs.bytes[static_cast<size_t>(i / 8)] >> (7 - (i % 8))) & 1);
  }
  return bits;
}

Bitstream bits_to_bitstream(const std::vector<uint8_t>& bits) {
  BitWriter w;
  for (uint8_t b : bits) w.put_bit(b);
  return std::move(w).finish();
}

std::vector<uint8_t> coder_encode(const std::vector<uint8_t>& bits,
                                  ChannelCoder coder) {
  if (coder == ChannelCoder::kPassthrough) return bits;
  std::vector<uint8_t> out;
  out.reserve(bits.size() * 3);
  for (uint8_t b : bits) {
    out.push_back(b);
    out.push_back(b);
    out.push_back(b);
  }
  return out;
}

std::vector<uint8_t> coder_decode(const std::vector<uint8_t>& bits,
                                  ChannelCoder coder) {
  if (coder == ChannelCoder::kPassthrough) return bits;
  std::vector<uint8_t> out;
  out.reserve(bits.size() / 3);
  for (size_t i = 0; i + 2 < bits.size(); i += 3) {
    const int votes = bits[i] + bits[i + 1] + bits[i + 2];
    out.push_back(votes >= 2 ? 1 : 0);
  }
  return out;
}

ModulatedSignal modulate(const std::vector<uint8_t>& bits, Modulation mod) {
  ModulatedSignal sig;
  sig.bit_count = static_cast<int64_t>(bits.size());
  if (mod == Modulation::kBpsk) {
    sig.pad_bits = 0;
    sig.symbols.reserve(bits.size());
    for (uint8_t b : bits) {
      sig.symbols.emplace_back(b ? -1.0 : 1.0, 0.0);
    }
    return sig;
  }
  const size_t padded = (bits.size() + 1) & ~size_t{1};
  sig.pad_bits = static_cast<int>(padded - bits.size());
  const double amp = 1.0 / std::sqrt(2.0);
  sig.symbols.reserve(padded / 2);
  for (size_t i = 0; i < padded; i += 2) {
    const int b0 = i < bits.size() ? bits[i] : 0;
    const int b1 = i + 1 < bits.size() ? bits[i + 1] : 0;
    sig.symbols.emplace_back((b0 ? -amp : amp), (b1 ? -amp : amp));
  }
  return sig;
}

ChannelOutput apply_channel(const ComplexVec& symbols,
                            const ChannelConfig& cfg) {
  if (!std::isfinite(cfg.snr_db)) {
    throw ConfigError("apply_channel: snr_db must be finite");
  }
  ChannelOutput out;
  out.received.resize(symbols.size());
  out.csi.resize(symbols.size());

  RngStream rng(cfg.seed);
  RngStream fading = rng.fork(1);
  RngStream noise = rng.fork(2);

  const double sigma2 =
      cfg.kind == ChannelKind::kNoiseless
          ? 0.0
          : std::pow(10.0, -cfg.snr_db / 10.0);  // unit signal power
  const double noise_std = std::sqrt(sigma2 / 2.0);  // per quadrature
  const double fading_std = std::sqrt(0.5);           // CN(0,1) components

  for (size_t i = 0; i < symbols.size(); ++i) {
    std::complex<double> h(1.0, 0.0);
    if (cfg.kind == ChannelKind::kRayleigh) {
      h = {fading_std * fading.next_gaussian(),
           fading_std * fading.next_gaussian()};
    }
    std::complex<double> n(0.0, 0.0);
    if (cfg.kind != ChannelKind::kNoiseless) {
      n = {noise_std * noise.next_gaussian(),
           noise_std * noise.next_gaussian()};
    }
    out.csi[i] = h;
    out.received[i] = h * symbols[i] + n;
  }
  return out;
}

std::vector<uint8_t> equalize_demodulate(const ComplexVec& received,
                                         const ComplexVec& csi,
                                         const ChannelConfig& cfg) {
  if (received.size() != csi.size()) {
    throw ShapeError("equalize_demodulate: " +
                     std::to_string(received.size()) + " symbols vs " +
                     std::to_string(csi.size()) + " CSI entries");
  }
  std::vector<uint8_t> bits;
  bits.reserve(received.size() *
               (cfg.modulation == Modulation::kQpsk ? 2 : 1));
  for (size_t i = 0; i < received.size(); ++i) {
    // Zero-forcing; a vanishing channel coefficient leaves only noise, so
    // decide directly on the received sample.
    const std::complex<double> s_hat =
        std::abs(csi[i]) < 1e-12 ? received[i] : received[i] / csi[i];
    if (cfg.modulation == Modulation::kBpsk) {
      bits.push_back(s_hat.real() < 0.0 ? 1 : 0);
    } else {
      bits.push_back(s_hat.real() < 0.0 ? 1 : 0);
      bits.push_back(s_hat.imag() < 0.0 ? 1 : 0);
    }
  }
  return coder_decode(bits, cfg.coder);
}

TransmitResult transmit(const Bitstream& bs, const ChannelConfig& cfg) {
  const std::vector<uint8_t> tx_bits = bitstream_to_bits(bs);
  const std::vector<uint8_t> coded = coder_encode(tx_bits, cfg.coder);
  const ModulatedSignal sig = modulate(coded, cfg.modulation);
  const ChannelOutput ch = apply_channel(sig.symbols, cfg);
  std::vector<uint8_t> rx_bits = equalize_demodulate(ch.received, ch.csi, cfg);
  // Demodulation may return padded length; the transmitted length is
  // authoritative.
  rx_bits.resize(tx_bits.size(), 0);

  TransmitResult result;
  result.bit_errors = 0;
  for (size_t i = 0; i < tx_bits.size(); ++i) {
    if (tx_bits[i] != rx_bits[i]) ++result.bit_errors;
  }
  result.received = bits_to_bitstream(rx_bits);
  return result;
}

namespace {

double q_function(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

}  // namespace

double ber_bpsk_awgn_theory(double snr_db) {
  const double gamma = std::pow(10.0, snr_db / 10.0);
  return q_function(std::sqrt(2.0 * gamma));
}

double ber_bpsk_rayleigh_theory(double snr_db) {
  const double gamma = std::pow(10.0, snr_db / 10.0);
  return 0.5 * (1.0 - std::sqrt(gamma / (1.0 + gamma)));
}

}  // namespace amvq
