#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bonetrack {

using Rng = std::mt19937_64;

// Named substreams derived from one root seed ("dataset", "init", "sbp",
// "shuffle", ...). The same (root, name, index) always yields the same stream.
Rng substream(std::uint64_t root, std::string_view name, std::uint64_t index = 0);

}  // namespace bonetrack
