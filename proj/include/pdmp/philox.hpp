#ifndef PDMP_PHILOX_HPP
#define PDMP_PHILOX_HPP

#include <cmath>
#include <cstdint>

namespace pdmp {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).  Streams are
// indexed by a 64-bit stream id, so ensemble trajectory i can draw from
// stream i of a master seed independently of scheduling or worker count.
class Philox {
 public:
  Philox() : Philox(0, 0) {}
  Philox(std::uint64_t seed, std::uint64_t stream)
      : key0_(static_cast<std::uint32_t>(seed)),
        key1_(static_cast<std::uint32_t>(seed >> 32)),
        ctr2_(static_cast<std::uint32_t>(stream)),
        ctr3_(static_cast<std::uint32_t>(stream >> 32)) {}

  std::uint64_t next_u64() {
    if (have_ == 0) refill();
    --have_;
    return out_[have_];
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Unit-rate exponential, strictly positive.
  double exponential() { return -std::log1p(-uniform()); }

 private:
  void refill() {
    std::uint32_t c0 = static_cast<std::uint32_t>(block_);
    std::uint32_t c1 = static_cast<std::uint32_t>(block_ >> 32);
    std::uint32_t c2 = ctr2_, c3 = ctr3_;
    std::uint32_t k0 = key0_, k1 = key1_;
    for (int round = 0; round < 10; ++round) {
      std::uint64_t p0 = 0xD2511F53ull * c0;
      std::uint64_t p1 = 0xCD9E8D57ull * c2;
      std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      std::uint32_t n0 = hi1 ^ c1 ^ k0;
      std::uint32_t n1 = lo1;
      std::uint32_t n2 = hi0 ^ c3 ^ k1;
      std::uint32_t n3 = lo0;
      c0 = n0; c1 = n1; c2 = n2; c3 = n3;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    out_[0] = (static_cast<std::uint64_t>(c1) << 32) | c0;
    out_[1] = (static_cast<std::uint64_t>(c3) << 32) | c2;
    have_ = 2;
    ++block_;
  }

  std::uint32_t key0_, key1_;
  std::uint32_t ctr2_, ctr3_;  // stream id
  std::uint64_t block_ = 0;    // draw counter
  std::uint64_t out_[2] = {0, 0};
  int have_ = 0;
};

}  // namespace pdmp

#endif  // PDMP_PHILOX_HPP
