#pragma once

// Checkpoint container: model config JSON + training-step counter + named
// float32 tensors, one file. Payload is little-endian with no per-tensor
// framing; offsets live in the JSON header.

#include <filesystem>

#include "zxyseg/model.hpp"

namespace zxyseg {

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  NetworkParameters<float> params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace zxyseg
