#pragma once

#include <array>
#include <cstdint>

namespace jointinv {

// Philox 4x64 with 10 rounds. Counter-based: the stream is a pure function
// of (key, counter), so parallel consumers can jump to independent
// substreams without sharing state. Output matches the reference generator
// of the same name in numpy (verified against frozen vectors in the tests).
struct Philox4x64 {
    std::array<std::uint64_t, 2> key{0, 0};

    // One 256-bit block: encrypt `counter` under `key`.
    std::array<std::uint64_t, 4> block(const std::array<std::uint64_t, 4>& counter) const;
};

// Convenience draw interface on top of Philox. A generator is identified by
// (seed, stream): seed is the user-facing master seed, stream selects an
// independent substream. Blocks are consumed in counter order, so the draw
// sequence for a given (seed, stream) is reproducible regardless of what any
// other stream does.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : gen_{{seed, stream}} {}

    std::uint64_t next_u64();

    // Uniform on [0,1), 53-bit resolution.
    double uniform01();
    // Uniform on [a,b).
    double uniform(double a, double b) { return a + (b - a) * uniform01(); }
    // Standard normal via Box-Muller; consumes exactly two 64-bit draws per
    // call (no cached second value, to keep draw accounting trivial).
    double normal01();

    std::uint64_t seed() const { return gen_.key[0]; }
    std::uint64_t stream() const { return gen_.key[1]; }

private:
    Philox4x64 gen_;
    std::uint64_t block_index_ = 0;
    std::array<std::uint64_t, 4> buffer_{};
    int buffered_ = 0;  // unread values left in buffer_
};

// Documented fan-out of the master seed: every phase of a run draws from its
// own substream, and per-sample work inside a phase uses one substream per
// sample so generation order (or thread count) cannot change the result.
// Stream ids are (phase << 32) | index.
enum class SeedPhase : std::uint64_t {
    dataset = 1,     // training-pair generation (index = sample)
    training = 2,    // learner init + minibatch shuffling
    truth = 3,       // fresh ground-truth pair for the inversion
    noise = 4,       // measurement noise (index = source)
    inversion = 5,   // reserved for stochastic inversion variants
    sensitivity = 6, // perturbation direction of the sensitivity sweep
};

inline std::uint64_t stream_id(SeedPhase phase, std::uint64_t index = 0) {
    return (static_cast<std::uint64_t>(phase) << 32) | index;
}

inline Rng make_rng(std::uint64_t master_seed, SeedPhase phase, std::uint64_t index = 0) {
    return Rng(master_seed, stream_id(phase, index));
}

}  // namespace jointinv
