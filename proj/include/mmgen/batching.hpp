#pragma once

#include "mmgen/rng.hpp"
#include "mmgen/transformer.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace mmgen {

// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<size_t> shuffled_order(size_t n, uint64_t seed) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Shuffles the sequences with `seed` and packs them into padded batches.
template <typename WeightFn>
std::vector<Batch> make_batches(const std::vector<TokenSequence>& sequences, int batch_size,
                                uint64_t seed, TokenId pad, WeightFn&& weight_of) {
  std::vector<Batch> out;
  if (sequences.empty() || batch_size < 1) return out;
  const auto order = shuffled_order(sequences.size(), seed);
  std::vector<TokenSequence> chunk;
  for (size_t i = 0; i < order.size(); ++i) {
    chunk.push_back(sequences[order[i]]);
    if (static_cast<int>(chunk.size()) == batch_size || i + 1 == order.size()) {
      out.push_back(Batch::from_sequences(std::span<const TokenSequence>(chunk), pad, weight_of));
      chunk.clear();
    }
  }
  return out;
}

}  // namespace mmgen
