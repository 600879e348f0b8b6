#pragma once

#include <cstdint>

namespace cri {

// Deterministic random source. Standard-library distributions are
// implementation-defined, so the few draws we need are spelled out here;
// the same seed yields the same stream on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // [0, 1) with 53 mantissa bits.
    double uniform01();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller (one spare cached per pair).
    double normal();

    // Unbiased integer in [0, n).
    int uniform_int(int n);

    // Independent substream for e.g. one simulation of a batch.
    Rng substream(std::uint64_t stream_id) const;

private:
    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// SplitMix64 step, also used to hash seeds together.
std::uint64_t splitmix64(std::uint64_t& state);

// Stable per-stream seed derived from a base seed (per simulation, per epoch...).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace cri
