#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/nn.hpp"

namespace ewcdr {

// Versioned parameter container shared by classifier and generator files:
//   "EWCDRCKP" | u32 version | u32 kind length | kind | u64 config length |
//   config JSON | u64 slot count | slots (name, rank, dims, offset) |
//   u64 value count | raw little-endian float64 values
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json config;
  std::vector<nn::ParamSlot> slots;
  std::vector<double> values;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ewcdr
