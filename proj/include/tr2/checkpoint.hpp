#pragma once

#include <string>

#include "tr2/tensor.hpp"

namespace tr2 {

// Binary parameter checkpoint. Layout, all little-endian:
//   u64 version (currently 1)
//   u64 parameter count
//   per parameter: u64 name length, name bytes, u64 rank, u64 dims...,
//                  f64 values...
// Round-trips are bit-exact.
void save_checkpoint(const ParamStore& store, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

inline constexpr std::uint64_t kCheckpointVersion = 1;

}  // namespace tr2
