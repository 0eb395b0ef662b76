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
// Bit-exact serialization of hybrid symbol streams, BPSK/QPSK modulation,
// Rayleigh/AWGN channel simulation with perfect-CSI zero-forcing
// equalization, optional repetition coding, and rate accounting.

#ifndef AMVQ_CHANNEL_HPP_
#define AMVQ_CHANNEL_HPP_

#include <complex>
#include <cstdint>
#include <vector>

#include "amvq/activation_map.hpp"
#include "amvq/common.hpp"

namespace amvq {

// --- Bit-level containers ---------------------------------------------------

// Packed bits, MSB-first within each byte; bit_count tracks the meaningful
// prefix (trailing padding bits in the last byte are zero).
struct Bitstream {
  std::vector<uint8_t> bytes;
  int64_t bit_count = 0;
};

class BitWriter {
 public:
  void put_bit(int bit);
  // Writes the `width` low bits of `value`, most significant first.
  void put_bits(uint64_t value, int width);
  Bitstream finish() &&;
  int64_t bit_count() const { return bits_; }

 private:
  std::vector<uint8_t> bytes_;
  int64_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(const Bitstream& bs) : bs_(bs) {}
  int read_bit();
  uint64_t read_bits(int width);
  int64_t remaining() const { return bs_.bit_count - pos_; }

 private:
  const Bitstream& bs_;
  int64_t pos_ = 0;
};

// --- Stream serialization ----------------------------------------------------

// Fixed 128-bit header preceding the packed body.
struct StreamHeader {
  uint8_t version = 1;
  uint32_t m_count = 0;
  uint16_t l_dim = 0;
  uint32_t k_count = 0;
  uint8_t raw_precision = 16;  // bits per raw float payload: 16 or 32
};

constexpr int64_t kStreamHeaderBits = 128;

// Bits needed per codebook index: ceil(log2 K).
int index_bit_width(int k_count);

// Exact serialized size (header + body) computed from the entry tags alone.
int64_t stream_bit_cost(const HybridSymbolStream& stream, int raw_precision);

// Body layout per position: 1 flag bit (0 = INDEX, 1 = RAW), then either
// ceil(log2 K) index bits or L_dim half/full floats, all MSB-first.
Bitstream serialize_stream(const HybridSymbolStream& stream,
                           int raw_precision = 16);

StreamHeader read_stream_header(const Bitstream& bs);

// Strict parse of a clean bitstream. A decoded index lands in [0, K) by
// construction of the bit width except for non-power-of-two K, where a
// (never-produced) high pattern wraps modulo K.
HybridSymbolStream deserialize_stream(const Bitstream& bs);

// Lenient parse of a possibly corrupted body against metadata the receiver
// trusts (shared out-of-band). Indices wrap modulo K, non-finite raw floats
// are zeroed, and a body truncated by flag-bit corruption is padded with
// index-0 entries.
HybridSymbolStream deserialize_stream(const Bitstream& bs,
                                      const StreamHeader& trusted);

double bits_per_pixel(const Bitstream& bs, int image_height, int image_width);

// --- Channel ------------------------------------------------------------------

enum class ChannelKind { kNoiseless, kAwgn, kRayleigh };
enum class Modulation { kBpsk, kQpsk };
enum class ChannelCoder { kPassthrough, kRepetition3 };

struct ChannelConfig {
  ChannelKind kind = ChannelKind::kNoiseless;
  double snr_db = 30.0;
  Modulation modulation = Modulation::kBpsk;
  uint64_t seed = 0;
  ChannelCoder coder = ChannelCoder::kPassthrough;
};

using ComplexVec = std::vector<std::complex<double>>;

struct ModulatedSignal {
  ComplexVec symbols;
  int64_t bit_count = 0;  // bits represented before padding
  int pad_bits = 0;       // zero bits appended to reach a symbol boundary
};

std::vector<uint8_t> bitstream_to_bits(const Bitstream& bs);
Bitstream bits_to_bitstream(const std::vector<uint8_t>& bits);

// Repetition-3 expansion and majority-vote decoding (passthrough is the
// identity). Decoding drops any incomplete trailing group.
std::vector<uint8_t> coder_encode(const std::vector<uint8_t>& bits,
                                  ChannelCoder coder);
std::vector<uint8_t> coder_decode(const std::vector<uint8_t>& bits,
                                  ChannelCoder coder);

// BPSK maps 0 -> +1, 1 -> -1; QPSK Gray-maps bit pairs onto the unit-power
// constellation ((1-2b0) + j(1-2b1)) / sqrt(2).
ModulatedSignal modulate(const std::vector<uint8_t>& bits, Modulation mod);

struct ChannelOutput {
  ComplexVec received;  // r = h * s + n
  ComplexVec csi;       // per-symbol h, reported perfectly to the receiver
};

// Noise variance sigma^2 = 10^(-snr_db/10) against unit signal power, split
// evenly across quadratures; Rayleigh draws h ~ CN(0,1) per symbol.
ChannelOutput apply_channel(const ComplexVec& symbols,
                            const ChannelConfig& cfg);

// Zero-forcing equalization s_hat = r / h (symbols with |h| < 1e-12 are
// decided from r directly), hard-decision demodulation, then coder decode.
std::vector<uint8_t> equalize_demodulate(const ComplexVec& received,
                                         const ComplexVec& csi,
                                         const ChannelConfig& cfg);

struct TransmitResult {
  Bitstream received;      // same bit_count as the input stream
  int64_t bit_errors = 0;  // Hamming distance to the transmitted bits
};

// Full pipeline: bits -> coder -> modulate -> channel -> equalize/demod ->
// coder decode -> bits, truncated back to the transmitted length.
TransmitResult transmit(const Bitstream& bs, const ChannelConfig& cfg);

// Closed-form BER references for hard-decision BPSK.
double ber_bpsk_awgn_theory(double snr_db);      // Q(sqrt(2*gamma))
double ber_bpsk_rayleigh_theory(double snr_db);  // (1 - sqrt(g/(1+g))) / 2

}  // namespace amvq

#endif  // AMVQ_CHANNEL_HPP_
