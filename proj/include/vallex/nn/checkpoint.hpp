#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vallex/nn/layers.hpp"

namespace vallex::nn {

/// Versioned binary model container: magic "VLXC", u32 version, then
/// length-prefixed kind tag, config echo and RNG state, u64 step, and named
/// float32 row-major tensors.
struct Checkpoint {
  std::string kind;
  std::string config;
  uint64_t step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, MatrixF>> tensors;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

Checkpoint make_checkpoint(const std::string& kind, const std::string& config, const ParamList<float>& params,
                           uint64_t step = 0, const std::string& rng_state = {});
/// Loads tensor values into params; names and shapes must match exactly.
void restore_parameters(const Checkpoint& ckpt, const ParamList<float>& params);

}  // namespace vallex::nn
