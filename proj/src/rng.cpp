#include "jointinv/rng.hpp"

#include <cmath>
#include <numbers>

namespace jointinv {

namespace {

constexpr std::uint64_t kMul0 = 0xD2E7470EE14C6C93ULL;
constexpr std::uint64_t kMul1 = 0xCA5A826395121157ULL;
constexpr std::uint64_t kWeyl0 = 0x9E3779B97F4A7C15ULL;  // golden ratio
constexpr std::uint64_t kWeyl1 = 0xBB67AE8584CAA73BULL;  // sqrt(3) - 1

inline std::uint64_t mulhi(std::uint64_t a, std::uint64_t b) {
    return static_cast<std::uint64_t>((static_cast<__uint128_t>(a) * b) >> 64);
}

}  // namespace

std::array<std::uint64_t, 4> Philox4x64::block(const std::array<std::uint64_t, 4>& counter) const {
    std::array<std::uint64_t, 4> c = counter;
    std::uint64_t k0 = key[0], k1 = key[1];
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            k0 += kWeyl0;
            k1 += kWeyl1;
        }
        const std::uint64_t hi0 = mulhi(kMul0, c[0]);
        const std::uint64_t lo0 = kMul0 * c[0];
        const std::uint64_t hi1 = mulhi(kMul1, c[2]);
        const std::uint64_t lo1 = kMul1 * c[2];
        c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
    }
    return c;
}

std::uint64_t Rng::next_u64() {
    if (buffered_ == 0) {
        buffer_ = gen_.block({block_index_, 0, 0, 0});
        ++block_index_;
        buffered_ = 4;
    }
    return buffer_[4 - buffered_--];
}

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal01() {
    // Box-Muller, cosine branch. First uniform shifted into (0,1] so the log
    // is always finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace jointinv
