#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace rhm {

// Every random draw in the library comes from a named stream so that runs are
// reproducible bit-for-bit and independent parts (grammar, split, init, ...)
// never share a sequence.
enum class Stream : std::uint16_t {
  Grammar = 1,
  Derivation = 2,
  Split = 3,
  Init = 4,
  Batch = 5,
  Eval = 6,
  Transfer = 7,
  GenSame = 8,
  Analysis = 9,
  Oracle = 10,
};

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// The 64-bit seed is the Philox key. The 128-bit counter is split into a
// 64-bit block index (low words) and a 64-bit stream id (high words), so any
// (seed, stream) pair is an independent sequence of 2^64 blocks.
class Philox {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t stream = 0;
    std::uint64_t block = 0;
    std::uint32_t index = 4;  // next unread word in the current block
    bool operator==(const State&) const = default;
  };

  Philox(std::uint64_t seed, std::uint64_t stream);
  Philox(std::uint64_t seed, Stream stream, std::uint64_t substream = 0);
  explicit Philox(const State& state);

  // Raw block function, exposed for known-answer tests.
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> counter,
                                            std::array<std::uint32_t, 2> key);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform double in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal();
  // Unbiased integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n);
  // Index drawn from a cumulative distribution (last entry ~ 1).
  std::size_t categorical(std::span<const double> cumulative);

  State state() const;

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::uint64_t stream_ = 0;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  std::uint32_t index_ = 4;
};

std::uint64_t stream_id(Stream stream, std::uint64_t substream = 0);

}  // namespace rhm
