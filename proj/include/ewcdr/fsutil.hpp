#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

namespace ewcdr {

// Scratch name next to `path` that no other process or thread will pick, so
// concurrent writers of the same file never share a temporary before the
// final rename.
inline std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  static std::atomic<unsigned> counter{0};
  return path.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
}

}  // namespace ewcdr
