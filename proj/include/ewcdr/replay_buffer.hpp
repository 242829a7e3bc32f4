#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <vector>

#include "ewcdr/rng.hpp"
#include "ewcdr/task_stream.hpp"

namespace ewcdr {

// Where a sample came from. Only generated samples may enter the buffer.
enum class Provenance : std::uint32_t { real = 0, generated = 1 };

struct ReplayItem {
  ImageShape shape;
  std::vector<float> image;
  int label = 0;
  int task_id = 0;
  Provenance provenance = Provenance::generated;

  std::uint64_t nbytes() const noexcept { return static_cast<std::uint64_t>(shape.pixels()) * sizeof(float); }
  bool operator==(const ReplayItem&) const = default;
};

struct ReplaySample {
  Tensor images;  // [n, H, W, C]
  std::vector<int> labels;
  std::vector<int> task_ids;
};

// Byte-budgeted store of generated images. Only image payload bytes count
// against the budget. Insertion order is kept and defines "oldest".
class ReplayBuffer {
 public:
  static constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();
  static constexpr std::uint32_t kVersion = 1;

  explicit ReplayBuffer(std::uint64_t budget_bytes = kUnlimited) : budget_(budget_bytes) {}

  std::uint64_t budget_bytes() const noexcept { return budget_; }
  std::uint64_t total_bytes() const noexcept { return total_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const std::vector<ReplayItem>& items() const noexcept { return items_; }
  const std::map<int, std::size_t>& per_class_counts() const noexcept { return counts_; }
  std::vector<int> classes() const;

  // Appends images [n,H,W,C] (converted to float32), then evicts the oldest
  // item of the most populated class (ties: lowest task id, then lowest
  // label) until the budget holds again.
  void add_task_samples(const Tensor& images, const std::vector<int>& labels, int task_id,
                        Provenance provenance = Provenance::generated);

  // Round-robin over present classes; within a class, without replacement
  // when it holds enough items and with replacement otherwise.
  ReplaySample sample_balanced(std::size_t n, Rng& rng) const;

  // Copy holding only items whose task id is below `task_id`.
  ReplayBuffer only_tasks_before(int task_id) const;

  void serialize(const std::filesystem::path& path) const;
  static ReplayBuffer deserialize(const std::filesystem::path& path);

  bool operator==(const ReplayBuffer& other) const {
    return budget_ == other.budget_ && items_ == other.items_;
  }

 private:
  void evict_to_budget();

  std::uint64_t budget_;
  std::uint64_t total_ = 0;
  std::vector<ReplayItem> items_;
  std::map<int, std::size_t> counts_;
};

}  // namespace ewcdr
