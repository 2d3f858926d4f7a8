#pragma once

#include <string>

#include "iip/optim.hpp"

namespace iip::grad {

// Checkpoint layout (all integers little-endian):
//   magic "IIPCKPT1", u32 version, u64 step, u32 config length + JSON bytes,
//   u32 param count, then per parameter: u16 name length, name bytes,
//   u8 dtype tag (0 = f64), u8 rank, u32 dims, raw f64 values; then the
//   first-moment blobs in the same parameter order, then the second-moment
//   blobs, then a u64 FNV-1a checksum of everything preceding it.
struct Checkpoint {
  uint64_t step = 0;
  std::string config_json;
  ParamSet params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace iip::grad
