#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "comalign/error.hpp"

namespace comalign::ingestion {

enum class BatchMode { training, evaluation };

// Partitions [0, count) into batches of `batch_size`; the final short batch is
// kept. Order is a seeded shuffle or, without shuffling, dataset order.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                          std::uint64_t seed, bool shuffle,
                                                          BatchMode mode = BatchMode::training) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (mode == BatchMode::training && batch_size < 2)
    throw ConfigError("training batches need at least 2 pairs for in-batch negatives");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace comalign::ingestion
