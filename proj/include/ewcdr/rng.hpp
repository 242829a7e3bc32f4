#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace ewcdr {

// Mixes a base seed with a list of tags into an independent stream seed
// (splitmix64 finalizer per step). Used to give every stage, task and
// sampling chunk its own generator so results do not depend on call order.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

// Platform-stable generator: mt19937_64 plus hand-rolled uniform/normal
// transforms so that identical seeds give bit-identical draws everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  std::size_t uniform_index(std::size_t n);  // [0, n)
  double normal();
  double truncated_normal(double stddev, double bound = 2.0);
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ewcdr
