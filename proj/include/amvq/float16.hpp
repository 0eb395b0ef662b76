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

// IEEE 754 binary16 <-> binary32 conversion with round-to-nearest-even.
// Used for the 16-bit raw-feature payload of serialized hybrid streams.

#ifndef AMVQ_FLOAT16_HPP_
#define AMVQ_FLOAT16_HPP_

#include <cstdint>
#include <cstring>

namespace amvq {

inline uint32_t float_bits(float f) {
  uint32_t u;
  std::memcpy(&u, &f, sizeof(u));
  return u;
}

inline float bits_to_float(uint32_t u) {
  float f;
  std::memcpy(&f, &u, sizeof(f));
  return f;
}

inline uint16_t float_to_half(float f) {
  const uint32_t bits = float_bits(f);
  const uint32_t sign = (bits >> 16) & 0x8000u;
  int32_t exp = static_cast<int32_t>((bits >> 23) & 0xffu) - 127 + 15;
  uint32_t mant = bits & 0x007fffffu;

  if (exp >= 0x1f) {
    // Overflow to infinity; NaN keeps a nonzero mantissa.
    const bool nan = ((bits >> 23) & 0xffu) == 0xffu && mant != 0;
    return static_cast<uint16_t>(sign | 0x7c00u | (nan ? 0x200u : 0));
  }
  if (exp <= 0) {
    if (exp < -10) return static_cast<uint16_t>(sign);  // underflow to zero
    // Subnormal half: shift in the implicit bit, round to nearest even.
    mant |= 0x00800000u;
    const int shift = 14 - exp;
    uint32_t half_mant = mant >> shift;
    const uint32_t rem = mant & ((1u << shift) - 1);
    const uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) half_mant++;
    return static_cast<uint16_t>(sign | half_mant);
  }
  uint32_t half = sign | (static_cast<uint32_t>(exp) << 10) | (mant >> 13);
  const uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++;  // may carry into exp
  return static_cast<uint16_t>(half);
}

inline float half_to_float(uint16_t h) {
  const uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;

  if (exp == 0) {
    if (mant == 0) return bits_to_float(sign);
    // Normalize the subnormal.
    int e = -1;
    do {
      mant <<= 1;
      e++;
    } while ((mant & 0x400u) == 0);
    mant &= 0x3ffu;
    return bits_to_float(sign | static_cast<uint32_t>(127 - 15 - e) << 23 |
                         (mant << 13));
  }
  if (exp == 0x1f) {
    return bits_to_float(sign | 0x7f800000u | (mant << 13));
  }
  return bits_to_float(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

// Value a float becomes after a 16-bit round trip.
inline float round_to_half(float f) { return half_to_float(float_to_half(f)); }

}  // namespace amvq

#endif  // AMVQ_FLOAT16_HPP_
