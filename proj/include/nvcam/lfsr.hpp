#pragma once

// 9-bit maximal-length Fibonacci LFSR used as a pixel event counter.
//
// Feedback polynomial x^9 + x^5 + 1 (taps 9 and 5). The register shifts
// left and the XOR of bits 8 and 4 enters at bit 0. Count 0 is the
// all-ones seed; the register visits 511 distinct nonzero states before
// returning to the seed, so counts 0..510 are representable and the
// all-zero state is the lock-up state that never occurs.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nvcam::lfsr {

inline constexpr unsigned kBits = 9;
inline constexpr std::uint16_t kMask = (1u << kBits) - 1u;
inline constexpr std::uint16_t kSeed = kMask;
inline constexpr unsigned kPeriod = (1u << kBits) - 1u;  // 511
inline constexpr unsigned kMaxCount = kPeriod - 1u;      // 510

class LfsrError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[nodiscard]] constexpr std::uint16_t step(std::uint16_t state) noexcept {
  const auto fb = static_cast<std::uint16_t>(((state >> 8) ^ (state >> 4)) & 1u);
  return static_cast<std::uint16_t>(((state << 1) | fb) & kMask);
}

namespace detail {

struct Tables {
  std::array<std::uint16_t, kPeriod> encode{};
  std::array<std::uint16_t, kMask + 1> decode{};
};

constexpr Tables build_tables() {
  Tables t;
  for (auto& d : t.decode) d = 0xFFFF;
  std::uint16_t s = kSeed;
  for (unsigned n = 0; n < kPeriod; ++n) {
    t.encode[n] = s;
    t.decode[s] = static_cast<std::uint16_t>(n);
    s = step(s);
  }
  return t;
}

inline constexpr Tables kTables = build_tables();

}  // namespace detail

[[nodiscard]] inline std::uint16_t encode(unsigned count) {
  if (count > kMaxCount) throw LfsrError("lfsr::encode: count " + std::to_string(count) + " exceeds 510");
  return detail::kTables.encode[count];
}

[[nodiscard]] inline unsigned decode(std::uint16_t state) {
  if (state == 0) throw LfsrError("lfsr::decode: all-zero register is the invalid lock-up state");
  if (state > kMask) throw LfsrError("lfsr::decode: state has bits above bit 8");
  return detail::kTables.decode[state];
}

}  // namespace nvcam::lfsr
