#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mspcaps {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and stream labels
/// (splitmix64 chain), e.g. mix_seed(shuffle_seed, epoch, item).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
double uniform01(Rng& rng);

/// Textual engine state, for checkpoints.
std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace mspcaps
