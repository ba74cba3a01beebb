#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqnca/model.hpp"

namespace deqnca::model {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "DEQNCA01";

struct Checkpoint {
  ModelParams params;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Layout: magic, u32 Ce/Cz/Hm, u32 epoch, u64 seed, f64 accuracy, then for
// each tensor u32 rank, u32 dims and the raw f64 values. Little-endian.
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deqnca::model
